#include "fixtures.hpp"

#include "freectrl/sampling.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

namespace fixtures {

namespace {

// Merges that build `word` left to right, one symbol at a time.
void add_word(const std::string& word, std::vector<std::pair<std::string, std::string>>& merges,
              std::unordered_map<std::string, TokenId>& vocab, std::set<std::pair<std::string, std::string>>& seen) {
    const auto& b2u = freectrl::byte_to_unicode();
    std::vector<std::string> symbols;
    for (unsigned char c : word) symbols.push_back(b2u[c]);
    std::string acc = symbols.front();
    for (std::size_t i = 1; i < symbols.size(); ++i) {
        std::pair<std::string, std::string> m{acc, symbols[i]};
        acc += symbols[i];
        if (seen.insert(m).second) merges.push_back(m);
        if (!vocab.contains(acc)) vocab.emplace(acc, static_cast<TokenId>(vocab.size()));
    }
}

void set_row(freectrl::ModelWeights& w, std::size_t d, TokenId id, const std::vector<float>& row) {
    std::copy(row.begin(), row.end(), w.wte.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d));
}

}  // namespace

const std::vector<std::string>& animal_words() {
    static const std::vector<std::string> w = {"cat", "dog", "horse", "bird"};
    return w;
}

const std::vector<std::string>& vehicle_words() {
    static const std::vector<std::string> w = {"car", "bus", "train", "boat"};
    return w;
}

const std::vector<std::string>& neutral_words() {
    static const std::vector<std::string> w = {"the", "a", "is", "on", "it", "and", "was"};
    return w;
}

const TokenizerTables& tokenizer_tables() {
    static const TokenizerTables tables = [] {
        TokenizerTables t;
        const auto& b2u = freectrl::byte_to_unicode();
        for (std::size_t b = 0; b < 256; ++b) t.vocab.emplace(b2u[b], static_cast<TokenId>(b));
        std::set<std::pair<std::string, std::string>> seen;
        std::vector<std::string> words;
        for (const auto* list : {&animal_words(), &vehicle_words(), &neutral_words()}) {
            words.insert(words.end(), list->begin(), list->end());
        }
        words.push_back("animal");
        words.push_back("vehicle");
        for (const auto& w : words) add_word(" " + w, t.merges, t.vocab, seen);
        add_word("dog", t.merges, t.vocab, seen);
        add_word("bus", t.merges, t.vocab, seen);
        t.vocab.emplace("<|endoftext|>", static_cast<TokenId>(t.vocab.size()));
        return t;
    }();
    return tables;
}

const freectrl::BpeTokenizer& tokenizer() {
    static const freectrl::BpeTokenizer tok(tokenizer_tables().vocab, tokenizer_tables().merges);
    return tok;
}

TokenId id(const std::string& word) { return tokenizer().keyword_token_id(word); }

freectrl::ModelConfig tiny_config(std::size_t vocab_size, std::size_t d_model, std::size_t n_layers) {
    freectrl::ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.d_ffn = 4 * d_model;
    c.n_heads = d_model >= 2 && d_model % 2 == 0 ? 2 : 1;
    c.vocab_size = vocab_size;
    c.max_positions = 64;
    return c;
}

std::vector<float> gaussian(std::size_t n, std::uint64_t seed, float scale) {
    freectrl::Rng rng(seed);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u1 = 1.0 - rng.uniform01();
        const double u2 = rng.uniform01();
        out[i] = scale * static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
    }
    return out;
}

freectrl::ModelWeights random_weights(const freectrl::ModelConfig& c, std::uint64_t seed, float scale) {
    std::uint64_t next = seed * 1000;
    auto g = [&](std::size_t n, float s) { return gaussian(n, ++next, s); };
    auto near = [&](std::size_t n, float base) {
        auto v = g(n, 0.05f);
        for (float& x : v) x += base;
        return v;
    };
    const std::size_t d = c.d_model, f = c.d_ffn;
    freectrl::ModelWeights w;
    w.wte = g(c.vocab_size * d, scale * 2.5f);
    w.wpe = g(c.max_positions * d, scale * 0.5f);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        freectrl::LayerWeights lw;
        lw.ln1_g = near(d, 1.0f);
        lw.ln1_b = g(d, 0.05f);
        lw.attn_w = g(d * 3 * d, scale);
        lw.attn_b = g(3 * d, 0.05f);
        lw.attn_proj_w = g(d * d, scale);
        lw.attn_proj_b = g(d, 0.05f);
        lw.ln2_g = near(d, 1.0f);
        lw.ln2_b = g(d, 0.05f);
        lw.fc_w = g(d * f, scale);
        lw.fc_b = g(f, 0.05f);
        lw.proj_w = g(f * d, scale * 2.0f);
        lw.proj_b = g(d, 0.05f);
        w.layers.push_back(std::move(lw));
    }
    w.lnf_g = near(d, 1.0f);
    w.lnf_b = g(d, 0.05f);
    return w;
}

freectrl::ModelWeights tiny_weights() {
    const auto& tok = tokenizer();
    const auto c = tiny_config(tok.vocab_size());
    auto w = random_weights(c, 7);
    const std::size_t d = c.d_model;
    auto scripted = [&](std::size_t axis, std::uint64_t seed, float noise) {
        auto row = gaussian(d, seed, noise);
        for (std::size_t i = 0; i < 3; ++i) row[i] = 0.0f;
        row[axis] = 1.0f;
        return row;
    };
    std::uint64_t seed = 500;
    for (const auto& word : animal_words()) set_row(w, d, id(word), scripted(0, ++seed, 0.3f));
    for (const auto& word : vehicle_words()) set_row(w, d, id(word), scripted(1, ++seed, 0.3f));
    for (const auto& word : neutral_words()) set_row(w, d, id(word), scripted(2, ++seed, 0.3f));
    set_row(w, d, id("animal"), scripted(0, 0, 0.0f));
    set_row(w, d, id("vehicle"), scripted(1, 0, 0.0f));
    return w;
}

const freectrl::Model& tiny_model() {
    static const freectrl::Model model(tiny_config(tokenizer().vocab_size()), tiny_weights());
    return model;
}

std::vector<freectrl::AttributeLexicon> tiny_lexicons() {
    auto lex = freectrl::make_lexicons({{"animal", animal_words()}, {"vehicle", vehicle_words()}});
    freectrl::embed_lexicons(lex, tiny_model(), tokenizer());
    return lex;
}

void write_assets(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    tiny_model().save(dir / "model.safetensors");
    nlohmann::ordered_json vocab = nlohmann::ordered_json::object();
    std::vector<std::pair<TokenId, std::string>> by_id;
    for (const auto& [text, id] : tokenizer_tables().vocab) by_id.emplace_back(id, text);
    std::sort(by_id.begin(), by_id.end());
    for (const auto& [id, text] : by_id) vocab[text] = id;
    std::ofstream(dir / "vocab.json") << vocab.dump() << "\n";
    std::ofstream merges(dir / "merges.txt");
    merges << "#version: 0.2\n";
    for (const auto& [a, b] : tokenizer_tables().merges) merges << a << " " << b << "\n";
    nlohmann::ordered_json lex = {{"animal", animal_words()}, {"vehicle", vehicle_words()}};
    std::ofstream(dir / "lexicons.json") << lex.dump(2) << "\n";
    std::ofstream(dir / "prompts.txt") << "the cat is\nthe bus\na\n";
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("freectrl_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace fixtures

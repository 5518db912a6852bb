#include "freectrl/atlas.hpp"
#include "freectrl/control.hpp"
#include "freectrl/lexicon.hpp"
#include "freectrl/model.hpp"
#include "freectrl/steer.hpp"
#include "freectrl/tokenizer.hpp"

#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>

namespace {

using namespace freectrl;

const std::filesystem::path kData = FREECTRL_DATA_DIR;

const BpeTokenizer& gpt2_tokenizer() {
    static const BpeTokenizer tok = BpeTokenizer::load(kData / "gpt2" / "vocab.json", kData / "gpt2" / "merges.txt");
    return tok;
}

// Random GPT-2-shaped model over the full GPT-2 vocabulary, narrower than the
// real checkpoints.
const Model& bench_model() {
    static const Model model = [] {
        ModelConfig c;
        c.n_layers = 4;
        c.d_model = 256;
        c.d_ffn = 1024;
        c.n_heads = 4;
        c.vocab_size = gpt2_tokenizer().vocab_size();
        c.max_positions = 256;
        std::mt19937_64 gen(1);
        std::normal_distribution<float> normal(0.0f, 0.02f);
        auto rnd = [&](std::size_t n) {
            std::vector<float> v(n);
            for (auto& x : v) x = normal(gen);
            return v;
        };
        auto ones = [](std::size_t n) { return std::vector<float>(n, 1.0f); };
        const std::size_t d = c.d_model, f = c.d_ffn;
        ModelWeights w;
        w.wte = rnd(c.vocab_size * d);
        w.wpe = rnd(c.max_positions * d);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            w.layers.push_back({ones(d), rnd(d), rnd(d * 3 * d), rnd(3 * d), rnd(d * d), rnd(d), ones(d), rnd(d),
                                rnd(d * f), rnd(f), rnd(f * d), rnd(d)});
        }
        w.lnf_g = ones(d);
        w.lnf_b = rnd(d);
        return Model(c, std::move(w));
    }();
    return model;
}

const std::string kParagraph =
    "The potato is a starchy tuber of the plant Solanum tuberosum and is a root vegetable native to the Americas. "
    "The plant is a perennial in the nightshade family Solanaceae. Wild potato species can be found from the "
    "southern United States to southern Chile, and the crop spread worldwide in the sixteenth century.";

void BM_Forward(benchmark::State& state) {
    const auto& m = bench_model();
    const auto tokens = gpt2_tokenizer().encode(kParagraph);
    const std::span<const TokenId> prompt(tokens.data(), static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(m.forward(prompt));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_DecodeStep(benchmark::State& state) {
    const auto& m = bench_model();
    const auto tokens = gpt2_tokenizer().encode(kParagraph);
    for (auto _ : state) {
        state.PauseTiming();
        DecodeSession session(m);
        session.feed(std::span<const TokenId>(tokens.data(), 16));
        state.ResumeTiming();
        for (std::size_t i = 16; i < 32; ++i) benchmark::DoNotOptimize(session.feed(std::span<const TokenId>(&tokens[i], 1)));
    }
    state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_DecodeStep)->Unit(benchmark::kMicrosecond);

void BM_BpeEncode(benchmark::State& state) {
    const auto& tok = gpt2_tokenizer();
    for (auto _ : state) benchmark::DoNotOptimize(tok.encode(kParagraph));
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(kParagraph.size()));
}
BENCHMARK(BM_BpeEncode);

void BM_ScorerPush(benchmark::State& state) {
    const std::vector<std::filesystem::path> files = {kData / "lexicons" / "topic.json"};
    auto lex = load_lexicons(files);
    embed_lexicons(lex, bench_model(), gpt2_tokenizer());
    const auto tokens = gpt2_tokenizer().encode(kParagraph);
    for (auto _ : state) {
        SentenceScorer scorer(bench_model(), lex);
        scorer.push(tokens);
        benchmark::DoNotOptimize(scorer.rho());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens.size()));
}
BENCHMARK(BM_ScorerPush)->Unit(benchmark::kMicrosecond);

void BM_LocateSweep(benchmark::State& state) {
    const auto& tok = gpt2_tokenizer();
    const std::vector<TokenId> targets = {tok.keyword_token_id("science"), tok.keyword_token_id("market")};
    atlas::SearchSpace space;
    space.sample = static_cast<std::size_t>(state.range(0));
    const auto prompt = default_prompt(tok);
    for (auto _ : state) {
        benchmark::DoNotOptimize(atlas::locate_vectors_for_tokens(bench_model(), targets, 30, space, prompt));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LocateSweep)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

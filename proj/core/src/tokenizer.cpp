#include "freectrl/tokenizer.hpp"

#include "freectrl/error.hpp"

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace freectrl {

namespace {

std::string encode_utf8(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

// One decoded code point of the input. Invalid UTF-8 bytes decode to
// themselves with a negative code point so they classify as "other".
struct CodePoint {
    std::size_t begin;
    std::size_t end;
    UChar32 cp;
};

std::vector<CodePoint> decode_utf8(std::string_view text) {
    std::vector<CodePoint> out;
    out.reserve(text.size());
    const auto* s = reinterpret_cast<const uint8_t*>(text.data());
    const auto len = static_cast<int32_t>(text.size());
    int32_t i = 0;
    while (i < len) {
        const int32_t start = i;
        UChar32 c;
        U8_NEXT(s, i, len, c);
        out.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(i), c});
    }
    return out;
}

bool is_letter(UChar32 c) { return c >= 0 && (U_GET_GC_MASK(c) & U_GC_L_MASK) != 0; }
bool is_number(UChar32 c) { return c >= 0 && (U_GET_GC_MASK(c) & U_GC_N_MASK) != 0; }
bool is_space(UChar32 c) { return c >= 0 && u_hasBinaryProperty(c, UCHAR_WHITE_SPACE); }

const std::unordered_map<std::string, unsigned char>& unicode_to_byte() {
    static const auto table = [] {
        std::unordered_map<std::string, unsigned char> m;
        const auto& fwd = byte_to_unicode();
        for (std::size_t b = 0; b < 256; ++b) m.emplace(fwd[b], static_cast<unsigned char>(b));
        return m;
    }();
    return table;
}

// Splits a byte-level unicode string into its code points.
std::vector<std::string> split_symbols(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& cp : decode_utf8(s)) out.emplace_back(s.substr(cp.begin, cp.end - cp.begin));
    return out;
}

}  // namespace

const std::vector<std::string>& byte_to_unicode() {
    static const std::vector<std::string> table = [] {
        std::vector<std::string> t(256);
        std::vector<bool> direct(256, false);
        for (int b = '!'; b <= '~'; ++b) direct[static_cast<std::size_t>(b)] = true;
        for (int b = 0xA1; b <= 0xAC; ++b) direct[static_cast<std::size_t>(b)] = true;
        for (int b = 0xAE; b <= 0xFF; ++b) direct[static_cast<std::size_t>(b)] = true;
        char32_t next = 256;
        for (std::size_t b = 0; b < 256; ++b) {
            t[b] = encode_utf8(direct[b] ? static_cast<char32_t>(b) : next++);
        }
        return t;
    }();
    return table;
}

BpeTokenizer::BpeTokenizer(std::unordered_map<std::string, TokenId> vocab,
                           std::vector<std::pair<std::string, std::string>> merges)
    : token_to_id_(std::move(vocab)) {
    id_to_token_.resize(token_to_id_.size());
    std::vector<bool> seen(token_to_id_.size(), false);
    for (const auto& [tok, id] : token_to_id_) {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size() || seen[static_cast<std::size_t>(id)]) {
            throw InvalidArgument("vocabulary ids must be dense and unique; offending token id " + std::to_string(id));
        }
        seen[static_cast<std::size_t>(id)] = true;
        id_to_token_[static_cast<std::size_t>(id)] = tok;
    }
    for (std::size_t rank = 0; rank < merges.size(); ++rank) {
        merge_ranks_.emplace(merges[rank].first + " " + merges[rank].second, rank);
    }
}

BpeTokenizer BpeTokenizer::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    std::ifstream vin(vocab_json);
    if (!vin) throw Error("cannot open vocabulary: " + vocab_json.string());
    nlohmann::json j;
    try {
        vin >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("invalid vocabulary JSON " + vocab_json.string() + ": " + e.what());
    }
    std::unordered_map<std::string, TokenId> vocab;
    for (auto it = j.begin(); it != j.end(); ++it) vocab.emplace(it.key(), it->get<TokenId>());

    std::ifstream min(merges_txt);
    if (!min) throw Error("cannot open merges: " + merges_txt.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(min, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.starts_with("#version")) continue;
        const auto space = line.find(' ');
        if (space == std::string::npos || line.find(' ', space + 1) != std::string::npos) {
            throw Error("malformed merge rule at " + merges_txt.string() + ":" + std::to_string(line_no));
        }
        merges.emplace_back(line.substr(0, space), line.substr(space + 1));
    }
    return BpeTokenizer(std::move(vocab), std::move(merges));
}

std::vector<std::string> BpeTokenizer::pretokenize(std::string_view text) {
    // 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
    const auto cps = decode_utf8(text);
    const std::size_t n = cps.size();
    std::vector<std::string> pieces;
    auto emit = [&](std::size_t from, std::size_t to) {
        pieces.emplace_back(text.substr(cps[from].begin, cps[to - 1].end - cps[from].begin));
    };
    auto is_other = [](UChar32 c) { return !is_space(c) && !is_letter(c) && !is_number(c); };

    std::size_t i = 0;
    while (i < n) {
        const UChar32 c = cps[i].cp;
        if (c == '\'' && i + 1 < n) {
            const UChar32 c1 = cps[i + 1].cp;
            if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if (i + 2 < n) {
                const UChar32 c2 = cps[i + 2].cp;
                if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') || (c1 == 'l' && c2 == 'l')) {
                    emit(i, i + 3);
                    i += 3;
                    continue;
                }
            }
        }

        const std::size_t body = (c == ' ' && i + 1 < n) ? i + 1 : i;
        const UChar32 b = cps[body].cp;
        bool (*cls)(UChar32) = nullptr;
        if (is_letter(b)) {
            cls = is_letter;
        } else if (is_number(b)) {
            cls = is_number;
        } else if (is_other(b)) {
            cls = +[](UChar32 x) { return !is_space(x) && !is_letter(x) && !is_number(x); };
        }
        if (cls && (body == i + 1 || !is_space(c))) {
            std::size_t j = body;
            while (j < n && cls(cps[j].cp)) ++j;
            emit(i, j);
            i = j;
            continue;
        }

        // whitespace run
        std::size_t j = i;
        while (j < n && is_space(cps[j].cp)) ++j;
        if (j == n || j - i == 1) {
            emit(i, j);
            i = j;
        } else {
            // \s+(?!\S): leave the last space to prefix the next word
            emit(i, j - 1);
            i = j - 1;
        }
    }
    return pieces;
}

std::vector<TokenId> BpeTokenizer::bpe(const std::string& piece) const {
    const auto& b2u = byte_to_unicode();
    std::string mapped;
    for (unsigned char ch : piece) mapped += b2u[ch];
    if (auto it = token_to_id_.find(mapped); it != token_to_id_.end()) return {it->second};

    std::vector<std::string> word = split_symbols(mapped);
    while (word.size() > 1) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        std::size_t best_pos = 0;
        for (std::size_t k = 0; k + 1 < word.size(); ++k) {
            auto it = merge_ranks_.find(word[k] + " " + word[k + 1]);
            if (it != merge_ranks_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_pos = k;
            }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        const std::string left = word[best_pos];
        const std::string right = word[best_pos + 1];
        std::vector<std::string> merged;
        merged.reserve(word.size());
        for (std::size_t k = 0; k < word.size();) {
            if (k + 1 < word.size() && word[k] == left && word[k + 1] == right) {
                merged.push_back(left + right);
                k += 2;
            } else {
                merged.push_back(word[k]);
                ++k;
            }
        }
        word = std::move(merged);
    }

    std::vector<TokenId> ids;
    ids.reserve(word.size());
    for (const auto& sym : word) {
        auto it = token_to_id_.find(sym);
        if (it != token_to_id_.end()) {
            ids.push_back(it->second);
            continue;
        }
        // fall back to single bytes; a byte-level vocabulary always has them
        for (const auto& cp : split_symbols(sym)) {
            auto bit = token_to_id_.find(cp);
            if (bit == token_to_id_.end()) throw Error("vocabulary lacks byte-level symbol " + cp);
            ids.push_back(bit->second);
        }
    }
    return ids;
}

std::vector<TokenId> BpeTokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& piece : pretokenize(text)) {
        const auto part = bpe(piece);
        ids.insert(ids.end(), part.begin(), part.end());
    }
    return ids;
}

std::string BpeTokenizer::token_text(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw InvalidArgument("token id out of range: " + std::to_string(id));
    }
    const auto& u2b = unicode_to_byte();
    std::string out;
    for (const auto& sym : split_symbols(id_to_token_[static_cast<std::size_t>(id)])) {
        auto it = u2b.find(sym);
        if (it != u2b.end()) {
            out.push_back(static_cast<char>(it->second));
        } else {
            out += sym;  // special tokens such as <|endoftext|> are stored verbatim
        }
    }
    return out;
}

std::string BpeTokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_text(id);
    return out;
}

std::vector<TokenId> BpeTokenizer::keyword_tokens(std::string_view keyword, PositionHint hint) const {
    if (keyword.empty()) throw InvalidArgument("keyword is empty");
    std::string text;
    if (hint == PositionHint::WordInitial) text.push_back(' ');
    text.append(keyword);
    return encode(text);
}

TokenId BpeTokenizer::keyword_token_id(std::string_view keyword, PositionHint hint) const {
    return keyword_tokens(keyword, hint).front();
}

std::optional<TokenId> BpeTokenizer::find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

std::optional<TokenId> BpeTokenizer::end_of_text() const { return find("<|endoftext|>"); }

}  // namespace freectrl

#pragma once

#include "freectrl/model.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace freectrl {

enum class PositionHint { WordInitial, Continuation };

/// Byte-level BPE compatible with the GPT-2 `vocab.json` / `merges.txt` pair.
/// Immutable after construction.
class BpeTokenizer {
public:
    BpeTokenizer(std::unordered_map<std::string, TokenId> vocab,
                 std::vector<std::pair<std::string, std::string>> merges);

    static BpeTokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;
    std::string token_text(TokenId id) const;  // decoded bytes of one token

    /// Full BPE split of a keyword; the word-initial form carries a leading space.
    std::vector<TokenId> keyword_tokens(std::string_view keyword, PositionHint hint = PositionHint::WordInitial) const;
    /// Vocabulary index used to locate value vectors: the first sub-token of
    /// the keyword's split.
    TokenId keyword_token_id(std::string_view keyword, PositionHint hint = PositionHint::WordInitial) const;

    std::optional<TokenId> find(std::string_view token) const;  // byte-level unicode form, e.g. "Ġthe"
    std::size_t vocab_size() const { return id_to_token_.size(); }
    std::optional<TokenId> end_of_text() const;

    /// GPT-2 pre-tokenization: splits text into the pieces BPE runs on.
    static std::vector<std::string> pretokenize(std::string_view text);

private:
    std::vector<TokenId> bpe(const std::string& piece) const;

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, std::size_t> merge_ranks_;  // "left right" -> rank
};

/// GPT-2's reversible byte <-> unicode code point mapping, as UTF-8 strings.
const std::vector<std::string>& byte_to_unicode();

}  // namespace freectrl

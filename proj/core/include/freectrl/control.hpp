#pragma once

#include "freectrl/atlas.hpp"
#include "freectrl/lexicon.hpp"
#include "freectrl/model.hpp"
#include "freectrl/tokenizer.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace freectrl {

struct CenterMember {
    ValueVectorRef vector;
    std::vector<std::string> keywords;  // keywords whose top-k list contains this vector

    bool operator==(const CenterMember&) const = default;
};

/// Union of the top-k value vectors located for each keyword of an attribute.
struct ControlCenter {
    std::string attribute;
    std::size_t k = 0;
    double u_max = atlas::kDefaultUMax;
    std::string fingerprint;
    std::vector<CenterMember> members;  // sorted by (layer, row), no duplicates

    bool contains(ValueVectorRef ref) const;
    /// Sum of member value vectors per layer; multiply by a weight to steer.
    LayerDeltas directions(const Model& model) const;

    bool operator==(const ControlCenter&) const = default;
};

struct CenterParams {
    std::size_t k = 30;
    double u_max = atlas::kDefaultUMax;
    atlas::SearchSpace space;
    std::vector<TokenId> prompt;  // empty means the single end-of-text token
};

/// Locates vectors for every attribute's keywords in one sweep and builds one
/// center per lexicon. Throws on an empty lexicon.
std::vector<ControlCenter> build_centers(std::span<const AttributeLexicon> lexicons, const Model& model,
                                         const BpeTokenizer& tokenizer, const CenterParams& params,
                                         const atlas::Progress& progress = {});

ControlCenter build_center(const AttributeLexicon& lexicon, const Model& model, const BpeTokenizer& tokenizer,
                           const CenterParams& params, const atlas::Progress& progress = {});

/// Builds a center from a persisted atlas: per keyword, the k best vectors
/// whose profiled top-m list contains the keyword's token. Exact when every
/// vector was profiled and k fits within the atlas's top-m reach.
ControlCenter center_from_atlas(const AttributeLexicon& lexicon, const atlas::AtlasIndex& index,
                                const Model& model, const BpeTokenizer& tokenizer, std::size_t k);

/// Canonical profiling prompt: the single end-of-text token.
std::vector<TokenId> default_prompt(const BpeTokenizer& tokenizer);

void save_center(const std::filesystem::path& path, const ControlCenter& center);
ControlCenter load_center(const std::filesystem::path& path,
                          const std::optional<std::string>& expected_fingerprint = std::nullopt);

}  // namespace freectrl

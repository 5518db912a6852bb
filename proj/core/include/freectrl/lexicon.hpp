#pragma once

#include "freectrl/model.hpp"
#include "freectrl/tokenizer.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace freectrl {

enum class AnchorMode { Name, Centroid };

AnchorMode parse_anchor_mode(std::string_view text);
std::string to_string(AnchorMode mode);

struct AttributeLexicon {
    std::string attribute;
    std::vector<std::string> raw;      // lowercased, deduplicated, file order
    std::vector<std::string> refined;  // subset of raw, in raw order
    bool is_refined = false;

    std::map<std::string, std::vector<float>> embeddings;  // unit vectors
    std::vector<float> anchor;                              // unit vector

    /// Keywords currently in force: the refined set once refined, raw before.
    const std::vector<std::string>& keywords() const { return is_refined ? refined : raw; }
    const std::vector<float>& embedding(const std::string& keyword) const;
};

/// JSON object {attribute: [keywords]} or one plain-text file per attribute
/// (attribute = file stem, one keyword per line). Throws on an empty file or
/// when fewer than two attributes result.
std::vector<AttributeLexicon> load_lexicons(std::span<const std::filesystem::path> paths);
std::vector<AttributeLexicon> make_lexicons(const std::vector<std::pair<std::string, std::vector<std::string>>>& lists);

/// Mean of the input embeddings of the keyword's sub-tokens (leading-space
/// form), L2-normalized.
std::vector<float> keyword_embedding(const Model& model, const BpeTokenizer& tokenizer, std::string_view keyword);

double cosine(std::span<const float> a, std::span<const float> b);
std::vector<float> normalized(std::span<const float> v);

/// Fills keyword embeddings and attribute anchors.
void embed_lexicons(std::vector<AttributeLexicon>& lexicons, const Model& model, const BpeTokenizer& tokenizer,
                    AnchorMode anchor = AnchorMode::Name);

struct RefinementScore {
    double g = 0.0;
    bool zero_denominator = false;  // keyword kept regardless of g
    bool kept() const { return zero_denominator || g >= 1.0; }
};

/// r_target * (|A| - 1) / sum(r_others), with |A| - 1 = r_others.size().
RefinementScore refinement_score(double r_target, std::span<const double> r_others);

struct RefinementEntry {
    std::string attribute;
    std::string keyword;
    std::vector<double> similarities;  // r(z, a_j) for every attribute j
    RefinementScore score;
};

struct RefinementReport {
    std::vector<RefinementEntry> entries;
};

/// Similarity r(z, a) between a keyword embedding and an attribute anchor:
/// cosine, floored at 0.
double relevance(std::span<const float> keyword, std::span<const float> anchor);

/// Keeps each attribute's keywords with G(z) >= 1. Lexicons must be embedded.
/// With AnchorMode::Centroid, anchors are recomputed from the refined sets.
RefinementReport refine(std::vector<AttributeLexicon>& lexicons, AnchorMode anchor = AnchorMode::Name);

/// Removes from `target` every keyword that appears in `other`.
void subtract_keywords(AttributeLexicon& target, const AttributeLexicon& other);

std::size_t index_of(std::span<const AttributeLexicon> lexicons, std::string_view attribute);

/// {attribute: [keywords in force]}.
void save_lexicons(const std::filesystem::path& path, std::span<const AttributeLexicon> lexicons);
void save_refinement_report(const std::filesystem::path& path, const RefinementReport& report,
                            std::span<const AttributeLexicon> lexicons);

}  // namespace freectrl

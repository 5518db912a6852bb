#pragma once

#include "freectrl/model.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace freectrl::atlas {

/// Weight treated as convergence; distributions at this weight are the
/// ground truth for the convergence analysis.
inline constexpr double kDefaultUMax = 50.0;

/// Called with (done, total) while a sweep progresses.
using Progress = std::function<void(std::size_t, std::size_t)>;

/// Softmaxed next-token distribution with one value vector steered at weight u.
OutputDistribution converged_distribution(const Model& model, ValueVectorRef vector, double u,
                                          std::span<const TokenId> prompt);

/// Token ids by descending probability, ties by ascending id.
std::vector<TokenId> top_tokens(std::span<const double> probs, std::size_t k);
inline std::vector<TokenId> top_tokens(const OutputDistribution& dist, std::size_t k) {
    return top_tokens(dist.probs, k);
}

/// Ranks with ties assigned their average rank (1-based).
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation with average-rank tie handling. Throws on length
/// mismatch or when either ranking has zero variance.
double spearman(std::span<const double> a, std::span<const double> b);
inline double spearman(const OutputDistribution& a, const OutputDistribution& b) {
    return spearman(a.probs, b.probs);
}

struct ConvergencePoint {
    double weight = 0.0;
    double mean_spearman = 0.0;
};

/// Mean Spearman(p^u, p^{u_max}) over the sample for every weight of an
/// ascending grid that ends at u_max.
std::vector<ConvergencePoint> convergence_curve(const Model& model, std::span<const ValueVectorRef> vectors,
                                                std::span<const double> weights, std::span<const TokenId> prompt,
                                                double u_max = kDefaultUMax);

/// Fraction of the vocabulary covered by the union of each list's first k tokens.
double coverage_from_lists(std::span<const std::vector<TokenId>> ranked, std::size_t k, std::size_t vocab_size);

double coverage(const Model& model, std::span<const ValueVectorRef> vectors, std::size_t k, double u,
                std::span<const TokenId> prompt);

double jaccard(std::span<const TokenId> a, std::span<const TokenId> b);

struct InvarianceRow {
    ValueVectorRef vector;
    double mean_jaccard = 0.0;
};

/// Per vector: mean pairwise Jaccard similarity of top-n token sets across prompts.
std::vector<InvarianceRow> prompt_invariance_report(const Model& model, std::span<const ValueVectorRef> vectors,
                                                    std::span<const std::vector<TokenId>> prompts, double u,
                                                    std::size_t top_n = 10);

/// Candidate vectors: layers [first_layer, last_layer], optionally a uniform
/// sample without replacement.
struct SearchSpace {
    std::size_t first_layer = 0;
    std::optional<std::size_t> last_layer;  // inclusive; defaults to the final layer
    std::optional<std::size_t> sample;
    std::uint64_t seed = 0;

    std::vector<ValueVectorRef> enumerate(const ModelConfig& config) const;
};

struct Located {
    ValueVectorRef vector;
    double probability = 0.0;

    bool operator==(const Located&) const = default;
};

/// Orders by descending probability, then ascending (layer, row).
bool located_before(const Located& a, const Located& b);

/// For every token, the k candidates that give it the highest probability when
/// steered alone at u_max. One steered forward per candidate, shared across
/// tokens; resumes from a per-layer prefix cache.
std::vector<std::vector<Located>> locate_vectors_for_tokens(const Model& model, std::span<const TokenId> tokens,
                                                             std::size_t k, const SearchSpace& space,
                                                             std::span<const TokenId> prompt,
                                                             double u_max = kDefaultUMax,
                                                             const Progress& progress = {});

std::vector<ValueVectorRef> locate_vectors_for_token(const Model& model, TokenId token, std::size_t k,
                                                     const SearchSpace& space, std::span<const TokenId> prompt,
                                                     double u_max = kDefaultUMax);

struct ProfileParams {
    double u_max = kDefaultUMax;
    std::vector<TokenId> prompt;
    std::size_t top_m = 50;

    bool operator==(const ProfileParams&) const = default;
};

struct ConvergedProfile {
    ValueVectorRef vector;
    std::vector<TokenId> top_tokens;
    std::vector<double> probabilities;  // aligned with top_tokens

    bool operator==(const ConvergedProfile&) const = default;
};

/// Persisted map from value vectors to the tokens they promote at u_max, plus
/// the reverse map from token to (vector, probability).
class AtlasIndex {
public:
    AtlasIndex() = default;
    AtlasIndex(std::string fingerprint, ProfileParams params);

    void add(ConvergedProfile profile);

    const std::string& fingerprint() const { return fingerprint_; }
    const ProfileParams& params() const { return params_; }
    const std::map<ValueVectorRef, ConvergedProfile>& profiles() const { return profiles_; }
    /// Vectors whose top-m list contains the token, sorted with located_before.
    std::vector<Located> vectors_for_token(TokenId token) const;
    std::size_t size() const { return profiles_.size(); }

    /// Writes `path` (binary index) and `path` + ".json" (metadata sidecar).
    void save(const std::filesystem::path& path) const;
    /// Throws FingerprintMismatch when `expected_fingerprint` is given and differs.
    static AtlasIndex load(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_fingerprint = std::nullopt);

    bool operator==(const AtlasIndex& other) const {
        return fingerprint_ == other.fingerprint_ && params_ == other.params_ && profiles_ == other.profiles_;
    }

private:
    std::string fingerprint_;
    ProfileParams params_;
    std::map<ValueVectorRef, ConvergedProfile> profiles_;
    std::map<TokenId, std::vector<Located>> reverse_;
};

/// Profiles each vector at params.u_max. Parallel across vectors; the result
/// does not depend on completion order.
AtlasIndex build_atlas(const Model& model, std::span<const ValueVectorRef> vectors, const ProfileParams& params,
                       const Progress& progress = {});

}  // namespace freectrl::atlas

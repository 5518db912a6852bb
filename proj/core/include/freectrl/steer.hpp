#pragma once

#include "freectrl/control.hpp"
#include "freectrl/lexicon.hpp"
#include "freectrl/model.hpp"
#include "freectrl/sampling.hpp"
#include "freectrl/tokenizer.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace freectrl {

/// as-printed: omega = lambda / (1 + exp(-gap * l)), growing with l.
/// decaying:   omega = lambda / (1 + exp(+gap * l)), shrinking with l.
/// constant:   omega fixed at constant_weight, no adaptation.
enum class WeightMode { AsPrinted, Decaying, Constant };

WeightMode parse_weight_mode(std::string_view text);
std::string to_string(WeightMode mode);

struct SteerConfig {
    std::size_t k = 30;
    double mu_omega = 1.15;
    double lambda = 1.5;
    double u_max = 50.0;
    std::size_t max_new_tokens = 50;
    std::size_t max_attempts = 5;
    WeightMode weight_mode = WeightMode::AsPrinted;
    double constant_weight = 1.5;
    double sentinel = 1e9;
    bool stop_at_end_of_text = true;
    SamplingParams sampling;

    /// "topic", "sentiment", "detox" or "multi".
    static SteerConfig preset(std::string_view name);
    void validate() const;
};

/// Similarity of one token to an attribute: max cosine to any keyword, floored at 0.
double token_relevance(std::span<const float> token_embedding, const AttributeLexicon& lexicon);

/// Mean over the sentence of token_relevance. Throws on an empty sentence.
double rho(std::span<const TokenId> sentence, const AttributeLexicon& lexicon, const Model& model);

struct MuScore {
    double value = 0.0;
    bool sentinel = false;  // zero denominator; value is the configured sentinel
};

/// rho_target * (|A| - 1) / sum_{j != target} rho_j.
MuScore mu(std::span<const double> rhos, std::size_t target, double sentinel = 1e9);

/// Weight for the next step given mu_hat and the sentence length l_t.
double adapt_weight(double mu_hat, std::size_t length, const SteerConfig& cfg);

/// Running per-attribute relevance sums over a growing sentence.
class SentenceScorer {
public:
    SentenceScorer(const Model& model, std::span<const AttributeLexicon> lexicons);

    void push(TokenId token);
    void push(std::span<const TokenId> tokens);
    std::size_t length() const { return length_; }

    std::vector<double> rho() const;
    const std::vector<double>& last_token() const { return last_; }
    std::vector<double> similarities(TokenId token) const;

private:
    const Model* model_;
    std::vector<std::vector<std::vector<float>>> keywords_;  // [attribute][keyword] unit embeddings
    std::vector<double> sums_;
    std::vector<double> last_;
    std::size_t length_ = 0;
};

struct TraceStep {
    std::size_t length = 0;               // l_t, tokens in s_t including the prompt
    std::vector<double> rho;              // per lexicon
    std::vector<double> mu;               // per target
    std::vector<double> mu_last;          // per target, single most recent token
    std::vector<double> mu_hat;           // per target
    std::vector<bool> sentinel;           // per target, mu or mu_last hit the sentinel
    std::vector<double> omega;            // per target, candidate weights
    std::optional<std::size_t> active;    // target whose center is applied
    double applied_omega = 0.0;
    TokenId token = 0;                    // token sampled under that weight
};

struct Attempt {
    std::vector<TokenId> generated;  // excludes a terminating end-of-text
    std::vector<double> final_mu;    // per target, on prompt + generated
    std::vector<bool> final_sentinel;
    bool accepted = false;
    std::vector<TraceStep> trace;
};

struct GenerationResult {
    bool accepted = false;
    std::size_t attempts = 0;
    Attempt chosen;  // the accepted attempt, or the best failed one
    std::vector<std::vector<double>> attempt_mu;  // final_mu of every attempt
};

/// The attributes to steer toward, as indices into the lexicon list, with one
/// center each.
struct SteerTargets {
    std::vector<std::size_t> lexicon_index;
    std::vector<const ControlCenter*> centers;
};

class Steerer {
public:
    /// All lexicons take part in scoring; targets pick the attributes to steer.
    Steerer(const Model& model, std::span<const AttributeLexicon> lexicons, SteerTargets targets, SteerConfig cfg);

    /// One target: single-attribute control. Several: the highest-weight
    /// center is active at each step, ties to the first declared.
    GenerationResult generate(std::span<const TokenId> prompt, Rng& rng,
                              std::optional<TokenId> end_of_text = std::nullopt) const;

    /// One sampling pass with adaptation, no filter.
    Attempt attempt(std::span<const TokenId> prompt, Rng& rng, std::optional<TokenId> end_of_text) const;

    /// Per-target sentence scores of a finished token sequence.
    std::vector<MuScore> score(std::span<const TokenId> tokens) const;
    bool passes_filter(std::span<const MuScore> scores) const;

    const SteerConfig& config() const { return cfg_; }

private:
    const Model* model_;
    std::span<const AttributeLexicon> lexicons_;
    SteerTargets targets_;
    SteerConfig cfg_;
    std::vector<LayerDeltas> directions_;
};

/// Plain sampling with no steering.
std::vector<TokenId> generate_unsteered(const Model& model, std::span<const TokenId> prompt,
                                        const SamplingParams& sampling, std::size_t max_new_tokens, Rng& rng,
                                        std::optional<TokenId> end_of_text = std::nullopt);

/// Index of the largest weight, first on ties; nullopt when all are zero.
std::optional<std::size_t> select_active(std::span<const double> weights);

}  // namespace freectrl

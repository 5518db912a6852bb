#include "freectrl/steer.hpp"

#include "freectrl/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace freectrl {

WeightMode parse_weight_mode(std::string_view text) {
    if (text == "as-printed") return WeightMode::AsPrinted;
    if (text == "decaying") return WeightMode::Decaying;
    if (text == "constant") return WeightMode::Constant;
    throw InvalidArgument("unknown weight mode '" + std::string(text) + "' (expected as-printed, decaying or constant)");
}

std::string to_string(WeightMode mode) {
    switch (mode) {
        case WeightMode::AsPrinted: return "as-printed";
        case WeightMode::Decaying: return "decaying";
        case WeightMode::Constant: return "constant";
    }
    return "?";
}

SteerConfig SteerConfig::preset(std::string_view name) {
    SteerConfig cfg;
    if (name == "topic") {
        cfg.k = 30, cfg.mu_omega = 1.15, cfg.lambda = 1.5;
    } else if (name == "sentiment" || name == "detox") {
        cfg.k = 30, cfg.mu_omega = 1.15, cfg.lambda = 0.3;
    } else if (name == "multi") {
        cfg.k = 200, cfg.mu_omega = 1.1, cfg.lambda = 0.5;
    } else {
        throw InvalidArgument("unknown preset '" + std::string(name) + "' (expected topic, sentiment, detox or multi)");
    }
    return cfg;
}

void SteerConfig::validate() const {
    if (k == 0) throw InvalidArgument("k must be >= 1");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be > 0");
    if (!(mu_omega >= 0.0) || !std::isfinite(mu_omega)) throw InvalidArgument("mu_omega must be >= 0");
    if (!(u_max > 0.0) || !std::isfinite(u_max)) throw InvalidArgument("u_max must be > 0");
    if (max_new_tokens == 0) throw InvalidArgument("max_new_tokens must be >= 1");
    if (max_attempts == 0) throw InvalidArgument("max_attempts must be >= 1");
    if (!(constant_weight >= 0.0) || !std::isfinite(constant_weight)) {
        throw InvalidArgument("constant_weight must be >= 0");
    }
    if (!(sentinel > 0.0)) throw InvalidArgument("sentinel must be > 0");
    sampling.validate();
}

double token_relevance(std::span<const float> token_embedding, const AttributeLexicon& lexicon) {
    double best = 0.0;
    for (const auto& kw : lexicon.keywords()) best = std::max(best, cosine(token_embedding, lexicon.embedding(kw)));
    return best;
}

double rho(std::span<const TokenId> sentence, const AttributeLexicon& lexicon, const Model& model) {
    if (sentence.empty()) throw InvalidArgument("rho: empty sentence");
    double sum = 0.0;
    for (TokenId t : sentence) sum += token_relevance(model.embedding_of(t), lexicon);
    return sum / static_cast<double>(sentence.size());
}

MuScore mu(std::span<const double> rhos, std::size_t target, double sentinel) {
    if (rhos.size() < 2) throw InvalidArgument("mu: need at least two attributes");
    if (target >= rhos.size()) throw InvalidArgument("mu: target index out of range");
    double denom = 0.0;
    for (std::size_t j = 0; j < rhos.size(); ++j) {
        if (j != target) denom += rhos[j];
    }
    if (denom == 0.0) return {sentinel, true};
    return {rhos[target] * static_cast<double>(rhos.size() - 1) / denom, false};
}

double adapt_weight(double mu_hat, std::size_t length, const SteerConfig& cfg) {
    if (length == 0) throw InvalidArgument("adapt_weight: sentence length must be >= 1");
    if (cfg.weight_mode == WeightMode::Constant) return cfg.constant_weight;
    const double gap = cfg.mu_omega - mu_hat;
    if (!(gap > 0.0)) return 0.0;
    const double x = gap * static_cast<double>(length);
    const double e = cfg.weight_mode == WeightMode::AsPrinted ? std::exp(-x) : std::exp(x);
    return cfg.lambda / (1.0 + e);
}

std::optional<std::size_t> select_active(std::span<const double> weights) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] > 0.0 && (!best || weights[i] > weights[*best])) best = i;
    }
    return best;
}

SentenceScorer::SentenceScorer(const Model& model, std::span<const AttributeLexicon> lexicons)
    : model_(&model), sums_(lexicons.size(), 0.0), last_(lexicons.size(), 0.0) {
    if (lexicons.size() < 2) throw InvalidArgument("scoring needs at least two attributes");
    for (const auto& lex : lexicons) {
        std::vector<std::vector<float>> kws;
        for (const auto& kw : lex.keywords()) kws.push_back(lex.embedding(kw));
        keywords_.push_back(std::move(kws));
    }
}

std::vector<double> SentenceScorer::similarities(TokenId token) const {
    const auto e = model_->embedding_of(token);
    std::vector<double> out(keywords_.size(), 0.0);
    for (std::size_t a = 0; a < keywords_.size(); ++a) {
        for (const auto& kw : keywords_[a]) out[a] = std::max(out[a], cosine(e, kw));
    }
    return out;
}

void SentenceScorer::push(TokenId token) {
    last_ = similarities(token);
    for (std::size_t a = 0; a < sums_.size(); ++a) sums_[a] += last_[a];
    ++length_;
}

void SentenceScorer::push(std::span<const TokenId> tokens) {
    for (TokenId t : tokens) push(t);
}

std::vector<double> SentenceScorer::rho() const {
    if (length_ == 0) throw InvalidArgument("rho: empty sentence");
    std::vector<double> out(sums_.size());
    for (std::size_t a = 0; a < sums_.size(); ++a) out[a] = sums_[a] / static_cast<double>(length_);
    return out;
}

Steerer::Steerer(const Model& model, std::span<const AttributeLexicon> lexicons, SteerTargets targets,
                 SteerConfig cfg)
    : model_(&model), lexicons_(lexicons), targets_(std::move(targets)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (lexicons_.size() < 2) throw InvalidArgument("steering needs at least two attributes");
    if (targets_.lexicon_index.empty()) throw InvalidArgument("no target attribute");
    if (targets_.lexicon_index.size() != targets_.centers.size()) {
        throw InvalidArgument("each target attribute needs exactly one control center");
    }
    for (std::size_t i = 0; i < targets_.centers.size(); ++i) {
        const auto idx = targets_.lexicon_index[i];
        if (idx >= lexicons_.size()) throw InvalidArgument("target index out of range");
        const auto* center = targets_.centers[i];
        if (center == nullptr) throw InvalidArgument("missing control center");
        if (center->attribute != lexicons_[idx].attribute) {
            throw InvalidArgument("center for '" + center->attribute + "' given for attribute '" +
                                  lexicons_[idx].attribute + "'");
        }
        if (center->fingerprint != model.fingerprint()) {
            throw FingerprintMismatch("center for '" + center->attribute + "' was built for model " +
                                      center->fingerprint + ", loaded model is " + model.fingerprint());
        }
        directions_.push_back(center->directions(model));
    }
}

std::vector<MuScore> Steerer::score(std::span<const TokenId> tokens) const {
    SentenceScorer scorer(*model_, lexicons_);
    scorer.push(tokens);
    const auto r = scorer.rho();
    std::vector<MuScore> out;
    for (auto idx : targets_.lexicon_index) out.push_back(mu(r, idx, cfg_.sentinel));
    return out;
}

bool Steerer::passes_filter(std::span<const MuScore> scores) const {
    return std::all_of(scores.begin(), scores.end(), [&](const MuScore& s) { return s.value > cfg_.mu_omega; });
}

Attempt Steerer::attempt(std::span<const TokenId> prompt, Rng& rng, std::optional<TokenId> end_of_text) const {
    if (prompt.empty()) throw InvalidArgument("prompt is empty");
    const std::size_t n_targets = targets_.lexicon_index.size();
    const std::size_t limit = model_->config().max_positions;
    if (prompt.size() >= limit) throw InvalidArgument("prompt leaves no room for generation");

    SentenceScorer scorer(*model_, lexicons_);
    scorer.push(prompt);
    DecodeSession session(*model_);
    std::vector<TokenId> pending(prompt.begin(), prompt.end());
    Attempt out;

    for (std::size_t step = 0; step < cfg_.max_new_tokens; ++step) {
        TraceStep st;
        st.length = scorer.length();
        st.rho = scorer.rho();
        const auto& last = scorer.last_token();
        for (std::size_t i = 0; i < n_targets; ++i) {
            const auto idx = targets_.lexicon_index[i];
            const auto m = mu(st.rho, idx, cfg_.sentinel);
            const auto ml = mu(last, idx, cfg_.sentinel);
            st.mu.push_back(m.value);
            st.mu_last.push_back(ml.value);
            st.mu_hat.push_back(std::max(m.value, ml.value));
            st.sentinel.push_back(m.sentinel || ml.sentinel);
            st.omega.push_back(adapt_weight(st.mu_hat.back(), st.length, cfg_));
        }
        st.active = select_active(st.omega);
        LayerDeltas deltas;
        if (st.active) {
            st.applied_omega = st.omega[*st.active];
            deltas = directions_[*st.active].scaled(static_cast<float>(st.applied_omega));
        }

        const auto logits = session.feed(pending, deltas);
        st.token = sample_token(logits, cfg_.sampling, rng);
        out.trace.push_back(st);
        if (cfg_.stop_at_end_of_text && end_of_text && st.token == *end_of_text) break;

        out.generated.push_back(st.token);
        scorer.push(st.token);
        pending.assign(1, st.token);
        if (scorer.length() >= limit) break;
    }

    const auto final_rho = scorer.rho();
    for (auto idx : targets_.lexicon_index) {
        const auto m = mu(final_rho, idx, cfg_.sentinel);
        out.final_mu.push_back(m.value);
        out.final_sentinel.push_back(m.sentinel);
    }
    out.accepted = std::all_of(out.final_mu.begin(), out.final_mu.end(), [&](double m) { return m > cfg_.mu_omega; });
    return out;
}

GenerationResult Steerer::generate(std::span<const TokenId> prompt, Rng& rng,
                                   std::optional<TokenId> end_of_text) const {
    GenerationResult result;
    double best_margin = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < cfg_.max_attempts; ++a) {
        auto att = attempt(prompt, rng, end_of_text);
        ++result.attempts;
        result.attempt_mu.push_back(att.final_mu);
        if (att.accepted) {
            result.accepted = true;
            result.chosen = std::move(att);
            return result;
        }
        double margin = std::numeric_limits<double>::infinity();
        for (double m : att.final_mu) margin = std::min(margin, m - cfg_.mu_omega);
        if (a == 0 || margin > best_margin) {
            best_margin = margin;
            result.chosen = std::move(att);
        }
    }
    return result;
}

std::vector<TokenId> generate_unsteered(const Model& model, std::span<const TokenId> prompt,
                                        const SamplingParams& sampling, std::size_t max_new_tokens, Rng& rng,
                                        std::optional<TokenId> end_of_text) {
    if (prompt.empty()) throw InvalidArgument("prompt is empty");
    sampling.validate();
    DecodeSession session(model);
    std::vector<TokenId> pending(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    for (std::size_t step = 0; step < max_new_tokens; ++step) {
        const auto logits = session.feed(pending);
        const TokenId t = sample_token(logits, sampling, rng);
        if (end_of_text && t == *end_of_text) break;
        out.push_back(t);
        pending.assign(1, t);
        if (prompt.size() + out.size() >= model.config().max_positions) break;
    }
    return out;
}

}  // namespace freectrl

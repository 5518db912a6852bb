#include "fixtures.hpp"

#include "freectrl/error.hpp"
#include "freectrl/steer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace freectrl;

namespace {

// Two-dimensional model whose first tokens have hand-placed embeddings.
const Model& planar_model() {
    static const Model model = [] {
        const auto cfg = fixtures::tiny_config(8, 2, 1);
        auto w = fixtures::random_weights(cfg, 3);
        const std::vector<std::vector<float>> rows = {{1, 0}, {0, 1}, {1, 1}, {-1, 0}};
        for (std::size_t t = 0; t < rows.size(); ++t) std::copy(rows[t].begin(), rows[t].end(), w.wte.begin() + 2 * t);
        return Model(cfg, w);
    }();
    return model;
}

std::vector<AttributeLexicon> planar_lexicons() {
    auto lex = make_lexicons({{"x", {"x"}}, {"y", {"y"}}});
    lex[0].embeddings["x"] = {1, 0};
    lex[0].anchor = {1, 0};
    lex[1].embeddings["y"] = {0, 1};
    lex[1].anchor = {0, 1};
    return lex;
}

std::vector<AttributeLexicon> three_lexicons() {
    auto lex = make_lexicons(
        {{"animal", fixtures::animal_words()}, {"vehicle", fixtures::vehicle_words()}, {"neutral", {"the", "is"}}});
    embed_lexicons(lex, fixtures::tiny_model(), fixtures::tokenizer());
    return lex;
}

struct Setup {
    std::vector<AttributeLexicon> lexicons;
    std::vector<ControlCenter> centers;
};

const Setup& setup() {
    static const Setup s = [] {
        Setup out;
        out.lexicons = three_lexicons();
        CenterParams p;
        p.k = 5;
        out.centers = build_centers(out.lexicons, fixtures::tiny_model(), fixtures::tokenizer(), p);
        return out;
    }();
    return s;
}

Steerer steerer_for(std::vector<std::size_t> targets, SteerConfig cfg) {
    SteerTargets t;
    for (auto i : targets) {
        t.lexicon_index.push_back(i);
        t.centers.push_back(&setup().centers[i]);
    }
    return Steerer(fixtures::tiny_model(), setup().lexicons, t, cfg);
}

SteerConfig short_config() {
    SteerConfig cfg;
    cfg.max_new_tokens = 12;
    cfg.max_attempts = 3;
    return cfg;
}

std::vector<TokenId> prompt() { return fixtures::tokenizer().encode("the cat is on"); }

// Direct formulas for the scores, computed without the scorer.
double oracle_relevance(TokenId t, const AttributeLexicon& lex) {
    const auto e = fixtures::tiny_model().embedding_of(t);
    double best = 0.0;
    for (const auto& kw : lex.keywords()) {
        const auto& k = lex.embedding(kw);
        double dot = 0, ee = 0, kk = 0;
        for (std::size_t i = 0; i < e.size(); ++i) {
            dot += double(e[i]) * k[i];
            ee += double(e[i]) * e[i];
            kk += double(k[i]) * k[i];
        }
        best = std::max(best, dot / std::sqrt(ee * kk));
    }
    return best;
}

double oracle_mu(const std::vector<double>& r, std::size_t target, double sentinel) {
    double others = 0;
    for (std::size_t j = 0; j < r.size(); ++j) {
        if (j != target) others += r[j];
    }
    return others == 0.0 ? sentinel : r[target] * double(r.size() - 1) / others;
}

double oracle_omega(double mu_hat, std::size_t l, double mu_omega, double lambda) {
    if (mu_hat >= mu_omega) return 0.0;
    return lambda / (1.0 + std::exp(-(mu_omega - mu_hat) * double(l)));
}

}  // namespace

TEST(Steer, RhoOfKeywordSentenceIsOne) {
    const auto lex = fixtures::tiny_lexicons();
    const std::vector<TokenId> s = {fixtures::id("cat"), fixtures::id("dog"), fixtures::id("bird")};
    EXPECT_NEAR(rho(s, lex[0], fixtures::tiny_model()), 1.0, 1e-6);
    EXPECT_THROW(rho(std::vector<TokenId>{}, lex[0], fixtures::tiny_model()), InvalidArgument);
}

TEST(Steer, RhoOnPlanarFixture) {
    const auto lex = planar_lexicons();
    const auto& m = planar_model();
    EXPECT_DOUBLE_EQ(rho(std::vector<TokenId>{0, 1}, lex[0], m), 0.5);
    EXPECT_NEAR(rho(std::vector<TokenId>{2}, lex[0], m), 1.0 / std::sqrt(2.0), 1e-7);
    EXPECT_DOUBLE_EQ(rho(std::vector<TokenId>{1}, lex[0], m), 0.0);
    EXPECT_DOUBLE_EQ(rho(std::vector<TokenId>{3}, lex[0], m), 0.0);
    SentenceScorer scorer(m, lex);
    scorer.push(std::vector<TokenId>{0, 1, 2});
    const auto r = scorer.rho();
    EXPECT_NEAR(r[0], (1.0 + 0.0 + 1.0 / std::sqrt(2.0)) / 3.0, 1e-7);
    EXPECT_NEAR(r[1], r[0], 1e-12);
    EXPECT_EQ(scorer.length(), 3u);
    EXPECT_NEAR(scorer.last_token()[0], 1.0 / std::sqrt(2.0), 1e-7);
}

TEST(Steer, MuCases) {
    const std::vector<double> equal = {0.4, 0.4, 0.4};
    EXPECT_DOUBLE_EQ(mu(equal, 1).value, 1.0);
    const std::vector<double> r = {0.6, 0.2, 0.4};
    EXPECT_DOUBLE_EQ(mu(r, 0).value, 2.0);
    const std::vector<double> z = {0.3, 0.0};
    const auto s = mu(z, 0, 123.0);
    EXPECT_TRUE(s.sentinel);
    EXPECT_EQ(s.value, 123.0);
    EXPECT_DOUBLE_EQ(mu(z, 1).value, 0.0);
    EXPECT_THROW(mu(std::vector<double>{0.5}, 0), InvalidArgument);
    EXPECT_THROW(mu(r, 3), InvalidArgument);
}

TEST(Steer, MuIsRatioInvariant) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> r(2 + rng.below(4));
        for (double& x : r) x = 0.01 + rng.uniform01();
        const double c = 0.05 + 5 * rng.uniform01();
        std::vector<double> scaled = r;
        for (double& x : scaled) x *= c;
        const std::size_t t = rng.below(r.size());
        EXPECT_NEAR(mu(r, t).value, mu(scaled, t).value, 1e-12);
        EXPECT_NEAR(mu(r, t).value, oracle_mu(r, t, 1e9), 1e-12);
    }
}

TEST(Steer, AdaptWeightCases) {
    SteerConfig cfg;
    cfg.mu_omega = 1.15;
    cfg.lambda = 1.5;
    EXPECT_EQ(adapt_weight(1.3, 5, cfg), 0.0);
    EXPECT_EQ(adapt_weight(1.15, 5, cfg), 0.0);
    EXPECT_NEAR(adapt_weight(0.55, 1, cfg), 1.5 / (1.0 + std::exp(-0.6)), 1e-12);
    EXPECT_NEAR(adapt_weight(0.55, 1, cfg), 0.9685, 1e-4);
    EXPECT_NEAR(adapt_weight(0.0, 1000, cfg), 1.5, 1e-12);
    EXPECT_THROW(adapt_weight(0.5, 0, cfg), InvalidArgument);

    cfg.weight_mode = WeightMode::Decaying;
    EXPECT_NEAR(adapt_weight(0.55, 1, cfg), 1.5 / (1.0 + std::exp(0.6)), 1e-12);
    EXPECT_EQ(adapt_weight(1.3, 1, cfg), 0.0);
    EXPECT_LT(adapt_weight(0.0, 40, cfg), 1e-12);

    cfg.weight_mode = WeightMode::Constant;
    cfg.constant_weight = 0.7;
    EXPECT_EQ(adapt_weight(5.0, 3, cfg), 0.7);
}

TEST(Steer, AdaptWeightBoundsAndMonotonicity) {
    SteerConfig cfg;
    Rng rng(8);
    for (int trial = 0; trial < 500; ++trial) {
        cfg.lambda = 0.1 + 2 * rng.uniform01();
        cfg.mu_omega = 0.5 + rng.uniform01();
        const double mu_hat = 2 * rng.uniform01();
        const std::size_t l = 1 + rng.below(60);
        const double w = adapt_weight(mu_hat, l, cfg);
        EXPECT_GE(w, 0.0);
        EXPECT_LE(w, cfg.lambda);
        if (mu_hat < cfg.mu_omega) {
            EXPECT_GE(w, cfg.lambda / 2.0);
            EXPECT_GE(adapt_weight(mu_hat - 0.1, l, cfg), w);
            EXPECT_GE(adapt_weight(mu_hat, l + 1, cfg), w);
        }
        EXPECT_NEAR(w, oracle_omega(mu_hat, l, cfg.mu_omega, cfg.lambda), 1e-12);
    }
}

TEST(Steer, SelectActiveTakesFirstMaximum) {
    EXPECT_EQ(select_active(std::vector<double>{0.2, 0.5, 0.5}), std::optional<std::size_t>(1));
    EXPECT_EQ(select_active(std::vector<double>{0.7, 0.7}), std::optional<std::size_t>(0));
    EXPECT_EQ(select_active(std::vector<double>{0.0, 0.0}), std::nullopt);
    EXPECT_EQ(select_active(std::vector<double>{}), std::nullopt);
}

TEST(Steer, PresetsAndValidation) {
    const auto topic = SteerConfig::preset("topic");
    EXPECT_EQ(topic.k, 30u);
    EXPECT_EQ(topic.mu_omega, 1.15);
    EXPECT_EQ(topic.lambda, 1.5);
    EXPECT_EQ(SteerConfig::preset("sentiment").lambda, 0.3);
    EXPECT_EQ(SteerConfig::preset("detox").lambda, 0.3);
    const auto multi = SteerConfig::preset("multi");
    EXPECT_EQ(multi.k, 200u);
    EXPECT_EQ(multi.mu_omega, 1.1);
    EXPECT_EQ(multi.lambda, 0.5);
    EXPECT_THROW(SteerConfig::preset("formal"), InvalidArgument);

    SteerConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.lambda = 0.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.mu_omega = -0.1;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.k = 0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.sampling.top_p = 0.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    EXPECT_EQ(parse_weight_mode("decaying"), WeightMode::Decaying);
    EXPECT_EQ(to_string(WeightMode::AsPrinted), "as-printed");
    EXPECT_THROW(parse_weight_mode("linear"), InvalidArgument);
}

TEST(Steer, ZeroThresholdNeverSteersAndMatchesUnsteered) {
    auto cfg = short_config();
    cfg.mu_omega = 0.0;
    const auto s = steerer_for({0}, cfg);
    const auto eot = fixtures::tokenizer().end_of_text();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng a(seed), b(seed);
        const auto att = s.attempt(prompt(), a, eot);
        for (const auto& st : att.trace) {
            EXPECT_EQ(st.omega[0], 0.0);
            EXPECT_FALSE(st.active.has_value());
        }
        EXPECT_EQ(att.generated, generate_unsteered(fixtures::tiny_model(), prompt(), cfg.sampling, 12, b, eot));
        EXPECT_EQ(att.accepted, att.final_mu[0] > 0.0);
    }
}

TEST(Steer, TraceReplaysFromScratch) {
    const auto s = steerer_for({0}, short_config());
    const auto& lex = setup().lexicons;
    Rng rng(42);
    const auto att = s.attempt(prompt(), rng, fixtures::tokenizer().end_of_text());
    std::vector<TokenId> sentence = prompt();
    for (std::size_t step = 0; step < att.trace.size(); ++step) {
        const auto& st = att.trace[step];
        ASSERT_EQ(st.length, sentence.size());
        std::vector<double> r, last;
        for (const auto& l : lex) {
            double sum = 0;
            for (TokenId t : sentence) sum += oracle_relevance(t, l);
            r.push_back(sum / double(sentence.size()));
            last.push_back(oracle_relevance(sentence.back(), l));
        }
        for (std::size_t a = 0; a < lex.size(); ++a) EXPECT_NEAR(st.rho[a], r[a], 1e-12);
        const double m = oracle_mu(r, 0, 1e9), ml = oracle_mu(last, 0, 1e9);
        EXPECT_NEAR(st.mu[0], m, 1e-12);
        EXPECT_NEAR(st.mu_last[0], ml, 1e-12);
        EXPECT_NEAR(st.mu_hat[0], std::max(m, ml), 1e-12);
        EXPECT_NEAR(st.omega[0], oracle_omega(std::max(m, ml), sentence.size(), 1.15, 1.5), 1e-12);
        EXPECT_EQ(st.active.has_value(), st.omega[0] > 0.0);
        EXPECT_EQ(st.applied_omega, st.active ? st.omega[0] : 0.0);
        if (step < att.generated.size()) {
            EXPECT_EQ(st.token, att.generated[step]);
            sentence.push_back(st.token);
        }
    }
    std::vector<double> r;
    for (const auto& l : lex) {
        double sum = 0;
        for (TokenId t : sentence) sum += oracle_relevance(t, l);
        r.push_back(sum / double(sentence.size()));
    }
    EXPECT_NEAR(att.final_mu[0], oracle_mu(r, 0, 1e9), 1e-12);
}

TEST(Steer, FirstGreedyStepUsesSteeredForward) {
    auto cfg = short_config();
    cfg.sampling.greedy = true;
    cfg.max_new_tokens = 1;
    const auto s = steerer_for({1}, cfg);
    Rng rng(0);
    const auto att = s.attempt(prompt(), rng, std::nullopt);
    ASSERT_EQ(att.trace.size(), 1u);
    const auto& st = att.trace[0];
    ASSERT_TRUE(st.active.has_value());
    const auto deltas = setup().centers[1].directions(fixtures::tiny_model()).scaled(float(st.applied_omega));
    const auto logits = fixtures::tiny_model().forward(prompt(), deltas);
    EXPECT_EQ(st.token, argmax(logits));
}

TEST(Steer, AcceptedOutputsRescoreAsAccepted) {
    auto cfg = short_config();
    cfg.mu_omega = 1.05;
    const auto s = steerer_for({0}, cfg);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const auto res = s.generate(prompt(), rng, fixtures::tokenizer().end_of_text());
        std::vector<TokenId> full = prompt();
        full.insert(full.end(), res.chosen.generated.begin(), res.chosen.generated.end());
        const auto scores = s.score(full);
        EXPECT_EQ(s.passes_filter(scores), res.accepted);
        EXPECT_NEAR(scores[0].value, res.chosen.final_mu[0], 1e-12);
        EXPECT_EQ(res.attempt_mu.size(), res.attempts);
        if (!res.accepted) {
            EXPECT_EQ(res.attempts, cfg.max_attempts);
            for (const auto& m : res.attempt_mu) EXPECT_LE(m[0], res.chosen.final_mu[0]);
        }
    }
}

TEST(Steer, GenerationIsDeterministicPerSeed) {
    const auto s = steerer_for({0, 1}, short_config());
    Rng a(5), b(5);
    const auto ra = s.generate(prompt(), a), rb = s.generate(prompt(), b);
    EXPECT_EQ(ra.chosen.generated, rb.chosen.generated);
    EXPECT_EQ(ra.attempt_mu, rb.attempt_mu);
}

TEST(Steer, MultiAttributeActivatesAtMostOneCenter) {
    auto cfg = short_config();
    cfg.mu_omega = 1.1;
    cfg.lambda = 0.5;
    const auto s = steerer_for({0, 1}, cfg);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const auto att = s.attempt(prompt(), rng, std::nullopt);
        for (const auto& st : att.trace) {
            ASSERT_EQ(st.omega.size(), 2u);
            EXPECT_EQ(st.active, select_active(st.omega));
            if (st.active) {
                EXPECT_EQ(st.applied_omega, std::max(st.omega[0], st.omega[1]));
            }
        }
        EXPECT_EQ(att.accepted, att.final_mu[0] > 1.1 && att.final_mu[1] > 1.1);
    }
}

TEST(Steer, ConstantModeAppliesFixedWeightToFirstTarget) {
    auto cfg = short_config();
    cfg.weight_mode = WeightMode::Constant;
    cfg.constant_weight = 0.8;
    const auto s = steerer_for({1, 0}, cfg);
    Rng rng(2);
    for (const auto& st : s.attempt(prompt(), rng, std::nullopt).trace) {
        EXPECT_EQ(st.active, std::optional<std::size_t>(0));
        EXPECT_EQ(st.applied_omega, 0.8);
    }
}

TEST(Steer, RejectsMismatchedTargets) {
    const auto& lex = setup().lexicons;
    SteerTargets wrong;
    wrong.lexicon_index = {0};
    wrong.centers = {&setup().centers[1]};
    EXPECT_THROW(Steerer(fixtures::tiny_model(), lex, wrong, short_config()), InvalidArgument);
    SteerTargets none;
    EXPECT_THROW(Steerer(fixtures::tiny_model(), lex, none, short_config()), InvalidArgument);
    auto foreign = setup().centers[0];
    foreign.fingerprint = "0000";
    SteerTargets fp;
    fp.lexicon_index = {0};
    fp.centers = {&foreign};
    EXPECT_THROW(Steerer(fixtures::tiny_model(), lex, fp, short_config()), FingerprintMismatch);
    const auto s = steerer_for({0}, short_config());
    Rng rng(0);
    EXPECT_THROW(s.attempt(std::vector<TokenId>{}, rng, std::nullopt), InvalidArgument);
}

TEST(Steer, GenerationStopsAtEndOfText) {
    auto cfg = short_config();
    cfg.max_new_tokens = 40;
    const auto s = steerer_for({0}, cfg);
    const TokenId eot = *fixtures::tokenizer().end_of_text();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto att = s.attempt(prompt(), rng, eot);
        for (TokenId t : att.generated) EXPECT_NE(t, eot);
        if (att.trace.back().token == eot) EXPECT_EQ(att.trace.size(), att.generated.size() + 1);
    }
}

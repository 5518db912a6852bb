#include "freectrl/error.hpp"
#include "freectrl/sampling.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>

using namespace freectrl;

namespace {

// Reference sampler: sort by probability (ties to lower id), keep top-k, keep
// the shortest prefix reaching top_p of the kept mass, invert the CDF at u.
TokenId reference_sample(const std::vector<double>& p, int top_k, double top_p, double u) {
    std::vector<std::pair<double, int>> items;
    for (std::size_t i = 0; i < p.size(); ++i) items.push_back({p[i], static_cast<int>(i)});
    std::sort(items.begin(), items.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    if (top_k > 0 && static_cast<std::size_t>(top_k) < items.size()) items.resize(static_cast<std::size_t>(top_k));
    double kept = 0.0;
    for (auto& it : items) kept += it.first;
    if (top_p < 1.0) {
        double acc = 0.0;
        std::size_t n = 0;
        while (n < items.size()) {
            acc += items[n++].first;
            if (acc >= top_p * kept) break;
        }
        items.resize(n);
    }
    double total = 0.0;
    for (auto& it : items) total += it.first;
    double acc = 0.0;
    for (auto& it : items) {
        acc += it.first;
        if (u * total < acc) return it.second;
    }
    return items.back().second;
}

const OutputDistribution kDist{{0.05, 0.30, 0.10, 0.25, 0.10, 0.20}};

}  // namespace

TEST(Sampling, GreedyAndTopOneAreArgmax) {
    Rng rng(1);
    SamplingParams greedy;
    greedy.greedy = true;
    EXPECT_EQ(sample_from(kDist, greedy, rng), 1);
    SamplingParams cold;
    cold.temperature = 0.0;
    EXPECT_EQ(sample_token(std::vector<float>{0.1f, 2.0f, 1.0f}, cold, rng), 1);
    SamplingParams top1;
    top1.top_k = 1;
    EXPECT_EQ(sample_from(kDist, top1, rng), 1);
    // ties go to the lower id
    EXPECT_EQ(argmax(std::vector<double>{0.2, 0.4, 0.4}), 1);
}

TEST(Sampling, GreedyConsumesNoRandomness) {
    Rng a(9), b(9);
    SamplingParams greedy;
    greedy.greedy = true;
    sample_from(kDist, greedy, a);
    EXPECT_EQ(a.next(), b.next());
}

TEST(Sampling, NucleusMatchesReferenceSamplerUnderFixedSeed) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        SamplingParams p;
        p.top_k = 0;
        p.top_p = 0.9;
        Rng rng(seed), mirror(seed);
        const double u = mirror.uniform01();
        EXPECT_EQ(sample_from(kDist, p, rng), reference_sample(kDist.probs, 0, 0.9, u)) << seed;
    }
}

TEST(Sampling, TopKMatchesReferenceSampler) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        SamplingParams p;
        p.top_k = 3;
        p.top_p = 0.8;
        Rng rng(seed), mirror(seed);
        const double u = mirror.uniform01();
        const TokenId t = sample_from(kDist, p, rng);
        EXPECT_EQ(t, reference_sample(kDist.probs, 3, 0.8, u));
        EXPECT_TRUE(t == 1 || t == 3 || t == 5);
    }
}

TEST(Sampling, DeterministicGivenSeed) {
    SamplingParams p;
    std::vector<TokenId> a, b;
    Rng r1(77), r2(77);
    for (int i = 0; i < 50; ++i) {
        a.push_back(sample_from(kDist, p, r1));
        b.push_back(sample_from(kDist, p, r2));
    }
    EXPECT_EQ(a, b);
}

TEST(Sampling, EmpiricalFrequenciesFollowDistribution) {
    SamplingParams p;
    p.top_k = 0;
    Rng rng(3);
    std::map<TokenId, int> counts;
    const int n = 20000;
    for (int i = 0; i < n; ++i) ++counts[sample_from(kDist, p, rng)];
    for (std::size_t i = 0; i < kDist.size(); ++i) {
        EXPECT_NEAR(counts[static_cast<TokenId>(i)] / static_cast<double>(n), kDist[i], 0.015);
    }
}

TEST(Sampling, RejectsDegenerateParameters) {
    Rng rng(0);
    SamplingParams p;
    p.top_p = 0.0;
    EXPECT_THROW(sample_from(kDist, p, rng), InvalidArgument);
    p.top_p = 1.5;
    EXPECT_THROW(sample_from(kDist, p, rng), InvalidArgument);
    p = {};
    p.top_k = -1;
    EXPECT_THROW(sample_from(kDist, p, rng), InvalidArgument);
    p = {};
    p.temperature = -0.5;
    EXPECT_THROW(sample_from(kDist, p, rng), InvalidArgument);
    EXPECT_THROW(sample_from(OutputDistribution{}, SamplingParams{}, rng), InvalidArgument);
}

TEST(Sampling, RngBelowIsUniformAndInRange) {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);
    EXPECT_THROW(rng.below(0), InvalidArgument);
}

TEST(Sampling, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
    EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

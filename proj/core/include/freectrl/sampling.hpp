#pragma once

#include "freectrl/model.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace freectrl {

/// Seeded generator with a portable uniform draw (the standard distribution
/// classes are implementation-defined, which would break reproducibility).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

/// Independent seed for job `index` of a run seeded with `base` (splitmix64).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

struct SamplingParams {
    double temperature = 1.0;  // 0 selects greedy decoding
    int top_k = 50;            // 0 disables
    double top_p = 1.0;        // nucleus mass in (0, 1]
    bool greedy = false;

    void validate() const;
};

/// Index of the largest probability; ties go to the lowest id.
TokenId argmax(std::span<const double> probs);
TokenId argmax(std::span<const float> logits);

/// Draws from an already-normalised distribution after top-k / nucleus
/// truncation. Consumes exactly one uniform draw unless greedy.
TokenId sample_from(const OutputDistribution& dist, const SamplingParams& params, Rng& rng);

/// Applies temperature to logits, then sample_from.
TokenId sample_token(std::span<const float> logits, const SamplingParams& params, Rng& rng);

}  // namespace freectrl

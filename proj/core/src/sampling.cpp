#include "freectrl/sampling.hpp"

#include "freectrl/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace freectrl {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

void SamplingParams::validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw InvalidArgument("temperature must be >= 0");
    if (top_k < 0) throw InvalidArgument("top_k must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
}

TokenId argmax(std::span<const double> probs) {
    if (probs.empty()) throw InvalidArgument("empty distribution");
    return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

TokenId argmax(std::span<const float> logits) {
    if (logits.empty()) throw InvalidArgument("empty logits");
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenId sample_from(const OutputDistribution& dist, const SamplingParams& params, Rng& rng) {
    params.validate();
    const std::size_t n = dist.size();
    if (n == 0) throw InvalidArgument("empty distribution");
    if (params.greedy || params.temperature == 0.0 || params.top_k == 1) return argmax(dist.probs);

    auto before = [&](std::size_t a, std::size_t b) {
        return dist.probs[a] != dist.probs[b] ? dist.probs[a] > dist.probs[b] : a < b;
    };
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t keep = n;
    if (params.top_k > 0 && static_cast<std::size_t>(params.top_k) < n) {
        keep = static_cast<std::size_t>(params.top_k);
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
        order.resize(keep);
    }
    std::sort(order.begin(), order.end(), before);

    if (params.top_p < 1.0) {
        double total = 0.0;
        for (std::size_t i = 0; i < keep; ++i) total += dist.probs[order[i]];
        double mass = 0.0;
        std::size_t cut = 0;
        while (cut < keep) {
            mass += dist.probs[order[cut]];
            ++cut;
            if (mass >= params.top_p * total) break;
        }
        keep = cut;
    }

    double total = 0.0;
    for (std::size_t i = 0; i < keep; ++i) total += dist.probs[order[i]];
    const double target = rng.uniform01() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += dist.probs[order[i]];
        if (target < acc) return static_cast<TokenId>(order[i]);
    }
    return static_cast<TokenId>(order[keep - 1]);
}

TokenId sample_token(std::span<const float> logits, const SamplingParams& params, Rng& rng) {
    params.validate();
    if (params.greedy || params.temperature == 0.0 || params.top_k == 1) return argmax(logits);
    return sample_from(softmax_distribution(logits, params.temperature), params, rng);
}

}  // namespace freectrl

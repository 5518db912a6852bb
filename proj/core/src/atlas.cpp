#include "freectrl/atlas.hpp"

#include "freectrl/error.hpp"
#include "freectrl/sampling.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace freectrl::atlas {

namespace {

constexpr char kMagic[8] = {'F', 'C', 'A', 'T', 'L', 'A', 'S', '1'};
constexpr std::size_t kChunk = 256;

std::vector<float> scaled_vector(const Model& model, ValueVectorRef ref, double u) {
    const auto v = model.value_vector(ref);
    const float w = static_cast<float>(u);
    std::vector<float> delta(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) delta[i] = w * v[i];
    return delta;
}

OutputDistribution steered(const Model& model, const PrefixCache& cache, ValueVectorRef ref, double u) {
    const auto delta = scaled_vector(model, ref, u);
    return softmax_distribution(model.forward_from(cache, ref.layer, delta));
}

void check_u(double u) {
    if (!std::isfinite(u) || u < 0.0) throw InvalidArgument("steering weight must be finite and non-negative");
}

template <class T>
void write_pod(std::ostream& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T read_pod(std::istream& in) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw Error("truncated atlas index");
        bits |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return std::bit_cast<T>(bits);
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".json");
}

}  // namespace

OutputDistribution converged_distribution(const Model& model, ValueVectorRef vector, double u,
                                          std::span<const TokenId> prompt) {
    check_u(u);
    model.check_ref(vector);
    SteeringSet steering;
    steering.set(vector, static_cast<float>(u));
    return softmax_distribution(model.forward(prompt, steering));
}

std::vector<TokenId> top_tokens(std::span<const double> probs, std::size_t k) {
    k = std::min(k, probs.size());
    std::vector<TokenId> ids(probs.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    auto before = [&](TokenId a, TokenId b) {
        const double pa = probs[static_cast<std::size_t>(a)];
        const double pb = probs[static_cast<std::size_t>(b)];
        return pa != pb ? pa > pb : a < b;
    };
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
    ids.resize(k);
    return ids;
}

std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        // positions i..j (0-based) share ranks i+1..j+1
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidArgument("spearman: length mismatch");
    if (a.size() < 2) throw InvalidArgument("spearman: need at least two elements");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double mean = (static_cast<double>(a.size()) + 1.0) / 2.0;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - mean;
        const double db = rb[i] - mean;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) throw InvalidArgument("spearman: zero-variance ranks");
    return sab / std::sqrt(saa * sbb);
}

std::vector<ConvergencePoint> convergence_curve(const Model& model, std::span<const ValueVectorRef> vectors,
                                                std::span<const double> weights, std::span<const TokenId> prompt,
                                                double u_max) {
    if (vectors.empty()) throw InvalidArgument("convergence_curve: empty sample");
    if (weights.empty() || weights.back() != u_max) {
        throw InvalidArgument("convergence_curve: weight grid must end at u_max");
    }
    if (!std::is_sorted(weights.begin(), weights.end())) {
        throw InvalidArgument("convergence_curve: weight grid must be ascending");
    }
    for (double w : weights) check_u(w);
    for (auto ref : vectors) model.check_ref(ref);

    const PrefixCache cache = model.prefix_cache(prompt);
    std::vector<std::vector<double>> rho(vectors.size(), std::vector<double>(weights.size()));
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(vectors.size()); ++i) {
        const auto ref = vectors[static_cast<std::size_t>(i)];
        const auto truth = steered(model, cache, ref, u_max);
        for (std::size_t w = 0; w < weights.size(); ++w) {
            rho[static_cast<std::size_t>(i)][w] = spearman(steered(model, cache, ref, weights[w]), truth);
        }
    }

    std::vector<ConvergencePoint> curve(weights.size());
    for (std::size_t w = 0; w < weights.size(); ++w) {
        double sum = 0.0;
        for (const auto& row : rho) sum += row[w];
        curve[w] = {weights[w], sum / static_cast<double>(vectors.size())};
    }
    return curve;
}

double coverage_from_lists(std::span<const std::vector<TokenId>> ranked, std::size_t k, std::size_t vocab_size) {
    if (ranked.empty()) throw InvalidArgument("coverage: empty sample");
    if (k == 0) throw InvalidArgument("coverage: k must be >= 1");
    if (vocab_size == 0) throw InvalidArgument("coverage: empty vocabulary");
    std::vector<bool> covered(vocab_size, false);
    std::size_t count = 0;
    for (const auto& list : ranked) {
        const std::size_t n = std::min(k, list.size());
        for (std::size_t i = 0; i < n; ++i) {
            const auto t = static_cast<std::size_t>(list[i]);
            if (!covered[t]) {
                covered[t] = true;
                ++count;
            }
        }
    }
    return static_cast<double>(count) / static_cast<double>(vocab_size);
}

double coverage(const Model& model, std::span<const ValueVectorRef> vectors, std::size_t k, double u,
                std::span<const TokenId> prompt) {
    if (vectors.empty()) throw InvalidArgument("coverage: empty sample");
    if (k == 0) throw InvalidArgument("coverage: k must be >= 1");
    check_u(u);
    const PrefixCache cache = model.prefix_cache(prompt);
    std::vector<std::vector<TokenId>> lists(vectors.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(vectors.size()); ++i) {
        const auto ref = vectors[static_cast<std::size_t>(i)];
        lists[static_cast<std::size_t>(i)] = top_tokens(steered(model, cache, ref, u), k);
    }
    return coverage_from_lists(lists, k, model.config().vocab_size);
}

double jaccard(std::span<const TokenId> a, std::span<const TokenId> b) {
    const std::set<TokenId> sa(a.begin(), a.end());
    const std::set<TokenId> sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) return 1.0;
    std::size_t inter = 0;
    for (TokenId t : sa) inter += sb.count(t);
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

std::vector<InvarianceRow> prompt_invariance_report(const Model& model, std::span<const ValueVectorRef> vectors,
                                                    std::span<const std::vector<TokenId>> prompts, double u,
                                                    std::size_t top_n) {
    if (vectors.empty()) throw InvalidArgument("prompt invariance: empty sample");
    if (prompts.size() < 2) throw InvalidArgument("prompt invariance: need at least two prompts");
    check_u(u);
    std::vector<PrefixCache> caches;
    caches.reserve(prompts.size());
    for (const auto& p : prompts) caches.push_back(model.prefix_cache(p));

    std::vector<InvarianceRow> rows(vectors.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(vectors.size()); ++i) {
        const auto ref = vectors[static_cast<std::size_t>(i)];
        std::vector<std::vector<TokenId>> tops;
        tops.reserve(caches.size());
        for (const auto& c : caches) tops.push_back(top_tokens(steered(model, c, ref, u), top_n));
        double sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < tops.size(); ++a) {
            for (std::size_t b = a + 1; b < tops.size(); ++b) {
                sum += jaccard(tops[a], tops[b]);
                ++pairs;
            }
        }
        rows[static_cast<std::size_t>(i)] = {ref, sum / static_cast<double>(pairs)};
    }
    return rows;
}

std::vector<ValueVectorRef> SearchSpace::enumerate(const ModelConfig& config) const {
    const std::size_t last = last_layer.value_or(config.n_layers - 1);
    if (first_layer > last || last >= config.n_layers) {
        throw InvalidArgument("layer range " + std::to_string(first_layer) + ".." + std::to_string(last) +
                              " outside [0, " + std::to_string(config.n_layers) + ")");
    }
    std::vector<ValueVectorRef> refs;
    refs.reserve((last - first_layer + 1) * config.d_ffn);
    for (std::size_t l = first_layer; l <= last; ++l) {
        for (std::size_t r = 0; r < config.d_ffn; ++r) {
            refs.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(r)});
        }
    }
    if (sample) {
        if (*sample == 0) throw InvalidArgument("sample size must be >= 1");
        if (*sample < refs.size()) {
            Rng rng(seed);
            for (std::size_t i = 0; i < *sample; ++i) {
                const auto j = i + static_cast<std::size_t>(rng.below(refs.size() - i));
                std::swap(refs[i], refs[j]);
            }
            refs.resize(*sample);
            std::sort(refs.begin(), refs.end());
        }
    }
    return refs;
}

bool located_before(const Located& a, const Located& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.vector < b.vector;
}

std::vector<std::vector<Located>> locate_vectors_for_tokens(const Model& model, std::span<const TokenId> tokens,
                                                             std::size_t k, const SearchSpace& space,
                                                             std::span<const TokenId> prompt, double u_max,
                                                             const Progress& progress) {
    check_u(u_max);
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab_size) {
            throw InvalidArgument("token id out of range: " + std::to_string(t));
        }
    }
    std::vector<std::vector<Located>> best(tokens.size());
    if (k == 0 || tokens.empty()) return best;

    const auto candidates = space.enumerate(model.config());
    const PrefixCache cache = model.prefix_cache(prompt);
    const std::size_t nt = tokens.size();

    std::vector<double> chunk_probs;
    for (std::size_t start = 0; start < candidates.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, candidates.size() - start);
        chunk_probs.assign(count * nt, 0.0);
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
            const auto dist = steered(model, cache, candidates[start + static_cast<std::size_t>(i)], u_max);
            for (std::size_t t = 0; t < nt; ++t) {
                chunk_probs[static_cast<std::size_t>(i) * nt + t] = dist.probs[static_cast<std::size_t>(tokens[t])];
            }
        }
        for (std::size_t t = 0; t < nt; ++t) {
            auto& list = best[t];
            for (std::size_t i = 0; i < count; ++i) list.push_back({candidates[start + i], chunk_probs[i * nt + t]});
            const std::size_t keep = std::min(k, list.size());
            std::partial_sort(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(keep), list.end(),
                              located_before);
            list.resize(keep);
        }
        if (progress) progress(start + count, candidates.size());
    }
    return best;
}

std::vector<ValueVectorRef> locate_vectors_for_token(const Model& model, TokenId token, std::size_t k,
                                                     const SearchSpace& space, std::span<const TokenId> prompt,
                                                     double u_max) {
    const TokenId tokens[] = {token};
    const auto located = locate_vectors_for_tokens(model, tokens, k, space, prompt, u_max);
    std::vector<ValueVectorRef> out;
    for (const auto& l : located.front()) out.push_back(l.vector);
    return out;
}

AtlasIndex::AtlasIndex(std::string fingerprint, ProfileParams params)
    : fingerprint_(std::move(fingerprint)), params_(std::move(params)) {}

void AtlasIndex::add(ConvergedProfile profile) {
    if (profile.top_tokens.size() != profile.probabilities.size()) {
        throw InvalidArgument("profile token/probability lists differ in length");
    }
    const auto ref = profile.vector;
    if (auto old = profiles_.find(ref); old != profiles_.end()) {
        for (TokenId t : old->second.top_tokens) {
            auto& list = reverse_[t];
            std::erase_if(list, [&](const Located& l) { return l.vector == ref; });
        }
    }
    for (std::size_t i = 0; i < profile.top_tokens.size(); ++i) {
        auto& list = reverse_[profile.top_tokens[i]];
        const Located entry{ref, profile.probabilities[i]};
        list.insert(std::upper_bound(list.begin(), list.end(), entry, located_before), entry);
    }
    profiles_[ref] = std::move(profile);
}

std::vector<Located> AtlasIndex::vectors_for_token(TokenId token) const {
    auto it = reverse_.find(token);
    if (it == reverse_.end()) return {};
    return it->second;
}

void AtlasIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write atlas: " + path.string());
    out.write(kMagic, sizeof kMagic);
    write_pod<std::uint64_t>(out, profiles_.size());
    for (const auto& [ref, profile] : profiles_) {
        write_pod<std::uint32_t>(out, ref.layer);
        write_pod<std::uint32_t>(out, ref.row);
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(profile.top_tokens.size()));
        for (std::size_t i = 0; i < profile.top_tokens.size(); ++i) {
            write_pod<std::int32_t>(out, profile.top_tokens[i]);
            write_pod<double>(out, profile.probabilities[i]);
        }
    }

    std::set<std::uint32_t> layers;
    for (const auto& [ref, _] : profiles_) layers.insert(ref.layer);
    nlohmann::json meta = {
        {"format", "freectrl-atlas"},
        {"version", 1},
        {"fingerprint", fingerprint_},
        {"u_max", params_.u_max},
        {"prompt", params_.prompt},
        {"top_m", params_.top_m},
        {"vectors", profiles_.size()},
        {"layers", std::vector<std::uint32_t>(layers.begin(), layers.end())},
        {"index_file", path.filename().string()},
    };
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    if (!side) throw Error("cannot write atlas metadata: " + sidecar_path(path).string());
    side << meta.dump(2) << '\n';
}

AtlasIndex AtlasIndex::load(const std::filesystem::path& path, const std::optional<std::string>& expected_fingerprint) {
    std::ifstream side(sidecar_path(path));
    if (!side) throw Error("cannot open atlas metadata: " + sidecar_path(path).string());
    nlohmann::json meta;
    try {
        side >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw Error("invalid atlas metadata: " + std::string(e.what()));
    }
    if (meta.value("format", "") != "freectrl-atlas") throw Error("not an atlas sidecar: " + path.string());
    const auto fp = meta.at("fingerprint").get<std::string>();
    if (expected_fingerprint && *expected_fingerprint != fp) {
        throw FingerprintMismatch("atlas " + path.string() + " was built for model " + fp + ", loaded model is " +
                                  *expected_fingerprint);
    }
    ProfileParams params;
    params.u_max = meta.at("u_max").get<double>();
    params.prompt = meta.at("prompt").get<std::vector<TokenId>>();
    params.top_m = meta.at("top_m").get<std::size_t>();
    AtlasIndex index(fp, params);

    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open atlas: " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) throw Error("bad atlas magic: " + path.string());
    const auto n = read_pod<std::uint64_t>(in);
    for (std::uint64_t e = 0; e < n; ++e) {
        ConvergedProfile p;
        p.vector.layer = read_pod<std::uint32_t>(in);
        p.vector.row = read_pod<std::uint32_t>(in);
        const auto m = read_pod<std::uint32_t>(in);
        p.top_tokens.resize(m);
        p.probabilities.resize(m);
        for (std::uint32_t i = 0; i < m; ++i) {
            p.top_tokens[i] = read_pod<std::int32_t>(in);
            p.probabilities[i] = read_pod<double>(in);
        }
        index.add(std::move(p));
    }
    if (meta.at("vectors").get<std::size_t>() != index.size()) throw Error("atlas index and metadata disagree");
    return index;
}

AtlasIndex build_atlas(const Model& model, std::span<const ValueVectorRef> vectors, const ProfileParams& params,
                       const Progress& progress) {
    check_u(params.u_max);
    if (params.top_m == 0) throw InvalidArgument("top_m must be >= 1");
    for (auto ref : vectors) model.check_ref(ref);
    const PrefixCache cache = model.prefix_cache(params.prompt);
    AtlasIndex index(model.fingerprint(), params);

    std::vector<ConvergedProfile> chunk;
    for (std::size_t start = 0; start < vectors.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, vectors.size() - start);
        chunk.assign(count, {});
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
            const auto ref = vectors[start + static_cast<std::size_t>(i)];
            const auto dist = steered(model, cache, ref, params.u_max);
            auto& p = chunk[static_cast<std::size_t>(i)];
            p.vector = ref;
            p.top_tokens = top_tokens(dist, params.top_m);
            for (TokenId t : p.top_tokens) p.probabilities.push_back(dist.probs[static_cast<std::size_t>(t)]);
        }
        for (auto& p : chunk) index.add(std::move(p));
        if (progress) progress(start + count, vectors.size());
    }
    return index;
}

}  // namespace freectrl::atlas

#include "freectrl/model.hpp"

#include "freectrl/error.hpp"
#include "freectrl/fingerprint.hpp"
#include "freectrl/safetensors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace freectrl {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

inline float gelu(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

// out[rows, n] = x[rows, k] * w[k, n] + b[n]
void linear(const float* x, std::size_t rows, std::size_t k, const std::vector<float>& w,
            const std::vector<float>& b, std::size_t n, float* out) {
    ConstMatMap X(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
    ConstMatMap W(w.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MatMap Y(out, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    Y.noalias() = X * W;
    Eigen::Map<const Eigen::RowVectorXf> B(b.data(), static_cast<Eigen::Index>(n));
    Y.rowwise() += B;
}

void add_in_place(float* dst, const float* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

std::string compute_fingerprint(const ModelConfig& c, const ModelWeights& w) {
    Fnv1a h;
    h.update("gpt2");
    for (std::size_t v : {c.n_layers, c.d_model, c.d_ffn, c.n_heads, c.vocab_size, c.max_positions}) h.update_u64(v);
    for (const auto& layer : w.layers) {
        const std::size_t stride = std::max<std::size_t>(1, layer.proj_w.size() / 16);
        for (std::size_t i = 0; i < layer.proj_w.size(); i += stride) {
            h.update_u64(std::bit_cast<std::uint32_t>(layer.proj_w[i]));
        }
    }
    const std::size_t stride = std::max<std::size_t>(1, w.wte.size() / 64);
    for (std::size_t i = 0; i < w.wte.size(); i += stride) h.update_u64(std::bit_cast<std::uint32_t>(w.wte[i]));
    return h.hex();
}

void expect_size(const std::vector<float>& v, std::size_t n, const std::string& what) {
    if (v.size() != n) {
        throw CheckpointError(what, "shape mismatch (expected " + std::to_string(n) + " elements, got " +
                                        std::to_string(v.size()) + ")");
    }
}

}  // namespace

std::string to_string(ValueVectorRef ref) {
    return "(" + std::to_string(ref.layer) + ", " + std::to_string(ref.row) + ")";
}

void SteeringSet::set(ValueVectorRef ref, float weight) {
    if (!std::isfinite(weight) || weight < 0.0f) {
        throw InvalidArgument("steering weight must be finite and non-negative for " + to_string(ref));
    }
    entries_[ref] = weight;
}

LayerDeltas::LayerDeltas(std::size_t n_layers, std::size_t d_model) : d_model_(d_model), deltas_(n_layers) {}

LayerDeltas LayerDeltas::from(const SteeringSet& steering, const Model& model) {
    LayerDeltas out(model.config().n_layers, model.config().d_model);
    for (const auto& [ref, weight] : steering.entries()) {
        out.accumulate(ref.layer, model.value_vector(ref), weight);
    }
    return out;
}

bool LayerDeltas::empty() const {
    return std::all_of(deltas_.begin(), deltas_.end(), [](const auto& d) { return d.empty(); });
}

const std::vector<float>* LayerDeltas::at(std::size_t layer) const {
    if (layer >= deltas_.size() || deltas_[layer].empty()) return nullptr;
    return &deltas_[layer];
}

void LayerDeltas::accumulate(std::size_t layer, std::span<const float> vec, float scale) {
    if (layer >= deltas_.size()) throw InvalidArgument("layer out of range: " + std::to_string(layer));
    if (vec.size() != d_model_) throw InvalidArgument("delta dimension mismatch");
    auto& d = deltas_[layer];
    if (d.empty()) d.assign(d_model_, 0.0f);
    for (std::size_t i = 0; i < d_model_; ++i) d[i] += scale * vec[i];
}

LayerDeltas LayerDeltas::scaled(float factor) const {
    LayerDeltas out = *this;
    for (auto& d : out.deltas_) {
        for (float& x : d) x *= factor;
    }
    return out;
}

OutputDistribution softmax_distribution(std::span<const float> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw InvalidArgument("temperature must be a positive finite number");
    }
    if (logits.empty()) throw InvalidArgument("empty logits");
    double max_logit = -std::numeric_limits<double>::infinity();
    for (float l : logits) {
        if (!std::isfinite(l)) throw InvalidArgument("non-finite logit");
        max_logit = std::max(max_logit, static_cast<double>(l));
    }
    OutputDistribution dist;
    dist.probs.resize(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        dist.probs[i] = std::exp((static_cast<double>(logits[i]) - max_logit) / temperature);
        sum += dist.probs[i];
    }
    for (double& p : dist.probs) p /= sum;
    return dist;
}

Model::Model(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {
    const auto& c = config_;
    if (c.n_layers == 0 || c.d_model == 0 || c.d_ffn == 0 || c.vocab_size == 0 || c.max_positions == 0) {
        throw InvalidArgument("model config has a zero dimension");
    }
    if (c.n_heads == 0 || c.d_model % c.n_heads != 0) {
        throw InvalidArgument("d_model must be divisible by n_heads");
    }
    const std::size_t d = c.d_model;
    expect_size(weights_.wte, c.vocab_size * d, "wte.weight");
    expect_size(weights_.wpe, c.max_positions * d, "wpe.weight");
    expect_size(weights_.lnf_g, d, "ln_f.weight");
    expect_size(weights_.lnf_b, d, "ln_f.bias");
    if (weights_.layers.size() != c.n_layers) throw InvalidArgument("layer count mismatch");
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const auto& l = weights_.layers[i];
        const std::string p = "h." + std::to_string(i) + ".";
        expect_size(l.ln1_g, d, p + "ln_1.weight");
        expect_size(l.ln1_b, d, p + "ln_1.bias");
        expect_size(l.attn_w, d * 3 * d, p + "attn.c_attn.weight");
        expect_size(l.attn_b, 3 * d, p + "attn.c_attn.bias");
        expect_size(l.attn_proj_w, d * d, p + "attn.c_proj.weight");
        expect_size(l.attn_proj_b, d, p + "attn.c_proj.bias");
        expect_size(l.ln2_g, d, p + "ln_2.weight");
        expect_size(l.ln2_b, d, p + "ln_2.bias");
        expect_size(l.fc_w, d * c.d_ffn, p + "mlp.c_fc.weight");
        expect_size(l.fc_b, c.d_ffn, p + "mlp.c_fc.bias");
        expect_size(l.proj_w, c.d_ffn * d, p + "mlp.c_proj.weight");
        expect_size(l.proj_b, d, p + "mlp.c_proj.bias");
    }
    fingerprint_ = compute_fingerprint(config_, weights_);
}

Model Model::load(const std::filesystem::path& checkpoint) {
    safetensors::Reader reader(checkpoint);

    std::string prefix;
    if (!reader.contains("wte.weight") && reader.contains("transformer.wte.weight")) prefix = "transformer.";
    auto name = [&](const std::string& n) { return prefix + n; };

    auto tensor = [&](const std::string& n, std::vector<std::size_t> shape) {
        const auto& info = reader.info(name(n));
        if (info.shape != shape) {
            std::string want, got;
            for (auto s : shape) want += std::to_string(s) + ",";
            for (auto s : info.shape) got += std::to_string(s) + ",";
            throw CheckpointError(name(n), "shape mismatch (expected [" + want + "] got [" + got + "])");
        }
        return reader.read_f32(name(n));
    };

    const auto& wte_info = reader.info(name("wte.weight"));
    const auto& wpe_info = reader.info(name("wpe.weight"));
    if (wte_info.shape.size() != 2) throw CheckpointError(name("wte.weight"), "expected a 2-D tensor");
    if (wpe_info.shape.size() != 2) throw CheckpointError(name("wpe.weight"), "expected a 2-D tensor");

    ModelConfig c;
    c.vocab_size = wte_info.shape[0];
    c.d_model = wte_info.shape[1];
    c.max_positions = wpe_info.shape[0];
    while (reader.contains(name("h." + std::to_string(c.n_layers) + ".ln_1.weight"))) ++c.n_layers;
    if (c.n_layers == 0) throw CheckpointError(name("h.0.ln_1.weight"), "missing tensor");
    const auto& fc_info = reader.info(name("h.0.mlp.c_fc.weight"));
    if (fc_info.shape.size() != 2) throw CheckpointError(name("h.0.mlp.c_fc.weight"), "expected a 2-D tensor");
    c.d_ffn = fc_info.shape[1];

    const auto& meta = reader.metadata();
    if (auto it = meta.find("n_head"); it != meta.end()) {
        c.n_heads = static_cast<std::size_t>(std::stoul(it->second));
    } else if (c.d_model % 64 == 0) {
        c.n_heads = c.d_model / 64;
    } else {
        throw Error("cannot infer n_heads for d_model " + std::to_string(c.d_model) + "; add n_head metadata");
    }
    if (auto it = meta.find("layer_norm_epsilon"); it != meta.end()) c.layer_norm_eps = std::stof(it->second);

    const std::size_t d = c.d_model;
    ModelWeights w;
    w.wte = tensor("wte.weight", {c.vocab_size, d});
    w.wpe = tensor("wpe.weight", {c.max_positions, d});
    w.layers.resize(c.n_layers);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "h." + std::to_string(i) + ".";
        auto& l = w.layers[i];
        l.ln1_g = tensor(p + "ln_1.weight", {d});
        l.ln1_b = tensor(p + "ln_1.bias", {d});
        l.attn_w = tensor(p + "attn.c_attn.weight", {d, 3 * d});
        l.attn_b = tensor(p + "attn.c_attn.bias", {3 * d});
        l.attn_proj_w = tensor(p + "attn.c_proj.weight", {d, d});
        l.attn_proj_b = tensor(p + "attn.c_proj.bias", {d});
        l.ln2_g = tensor(p + "ln_2.weight", {d});
        l.ln2_b = tensor(p + "ln_2.bias", {d});
        l.fc_w = tensor(p + "mlp.c_fc.weight", {d, c.d_ffn});
        l.fc_b = tensor(p + "mlp.c_fc.bias", {c.d_ffn});
        l.proj_w = tensor(p + "mlp.c_proj.weight", {c.d_ffn, d});
        l.proj_b = tensor(p + "mlp.c_proj.bias", {d});
    }
    w.lnf_g = tensor("ln_f.weight", {d});
    w.lnf_b = tensor("ln_f.bias", {d});
    return Model(c, std::move(w));
}

void Model::save(const std::filesystem::path& checkpoint) const {
    const auto& c = config_;
    const std::size_t d = c.d_model;
    safetensors::Writer out;
    out.set_metadata("n_head", std::to_string(c.n_heads));
    out.add("wte.weight", {c.vocab_size, d}, weights_.wte);
    out.add("wpe.weight", {c.max_positions, d}, weights_.wpe);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "h." + std::to_string(i) + ".";
        const auto& l = weights_.layers[i];
        out.add(p + "ln_1.weight", {d}, l.ln1_g);
        out.add(p + "ln_1.bias", {d}, l.ln1_b);
        out.add(p + "attn.c_attn.weight", {d, 3 * d}, l.attn_w);
        out.add(p + "attn.c_attn.bias", {3 * d}, l.attn_b);
        out.add(p + "attn.c_proj.weight", {d, d}, l.attn_proj_w);
        out.add(p + "attn.c_proj.bias", {d}, l.attn_proj_b);
        out.add(p + "ln_2.weight", {d}, l.ln2_g);
        out.add(p + "ln_2.bias", {d}, l.ln2_b);
        out.add(p + "mlp.c_fc.weight", {d, c.d_ffn}, l.fc_w);
        out.add(p + "mlp.c_fc.bias", {c.d_ffn}, l.fc_b);
        out.add(p + "mlp.c_proj.weight", {c.d_ffn, d}, l.proj_w);
        out.add(p + "mlp.c_proj.bias", {d}, l.proj_b);
    }
    out.add("ln_f.weight", {d}, weights_.lnf_g);
    out.add("ln_f.bias", {d}, weights_.lnf_b);
    out.write(checkpoint);
}

void Model::check_ref(ValueVectorRef ref) const {
    if (ref.layer >= config_.n_layers || ref.row >= config_.d_ffn) {
        throw InvalidArgument("value vector reference out of range: " + to_string(ref));
    }
}

std::span<const float> Model::value_vector(ValueVectorRef ref) const {
    check_ref(ref);
    const auto& w = weights_.layers[ref.layer].proj_w;
    return std::span<const float>(w).subspan(ref.row * config_.d_model, config_.d_model);
}

std::span<const float> Model::value_bias(std::size_t layer) const {
    if (layer >= config_.n_layers) throw InvalidArgument("layer out of range: " + std::to_string(layer));
    return weights_.layers[layer].proj_b;
}

std::span<const float> Model::embedding_of(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw InvalidArgument("token id out of range: " + std::to_string(id));
    }
    return std::span<const float>(weights_.wte).subspan(static_cast<std::size_t>(id) * config_.d_model,
                                                         config_.d_model);
}

void Model::layer_norm(const float* x, std::size_t rows, const std::vector<float>& g, const std::vector<float>& b,
                       float* out) const {
    const std::size_t d = config_.d_model;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * d;
        float* yr = out + r * d;
        float mean = 0.0f;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<float>(d);
        const float inv = 1.0f / std::sqrt(var + config_.layer_norm_eps);
        for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * inv * g[i] + b[i];
    }
}

void Model::mlp(std::size_t layer, const float* x, std::size_t rows, float* out) const {
    const auto& l = weights_.layers[layer];
    std::vector<float> hidden(rows * config_.d_ffn);
    linear(x, rows, config_.d_model, l.fc_w, l.fc_b, config_.d_ffn, hidden.data());
    for (float& v : hidden) v = gelu(v);
    linear(hidden.data(), rows, config_.d_ffn, l.proj_w, l.proj_b, config_.d_model, out);
}

std::vector<float> Model::ffn(std::span<const float> x, std::size_t layer) const {
    if (layer >= config_.n_layers) throw InvalidArgument("layer out of range: " + std::to_string(layer));
    if (x.size() != config_.d_model) throw InvalidArgument("FFN input dimension mismatch");
    std::vector<float> out(config_.d_model);
    mlp(layer, x.data(), 1, out.data());
    return out;
}

std::vector<float> Model::ffn_decompose(std::span<const float> x, std::size_t layer) const {
    if (layer >= config_.n_layers) throw InvalidArgument("layer out of range: " + std::to_string(layer));
    if (x.size() != config_.d_model) throw InvalidArgument("FFN input dimension mismatch");
    const auto& l = weights_.layers[layer];
    std::vector<float> m(config_.d_ffn);
    linear(x.data(), 1, config_.d_model, l.fc_w, l.fc_b, config_.d_ffn, m.data());
    for (float& v : m) v = gelu(v);
    return m;
}

void Model::check_tokens(std::span<const TokenId> tokens, std::size_t pos0) const {
    if (tokens.empty()) throw InvalidArgument("token sequence is empty");
    if (pos0 + tokens.size() > config_.max_positions) {
        throw InvalidArgument("sequence too long: " + std::to_string(pos0 + tokens.size()) + " > " +
                              std::to_string(config_.max_positions));
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
            throw InvalidArgument("token id out of range: " + std::to_string(t));
        }
    }
}

void Model::embed(std::span<const TokenId> tokens, std::size_t pos0, std::vector<float>& h) const {
    const std::size_t d = config_.d_model;
    h.resize(tokens.size() * d);
    for (std::size_t r = 0; r < tokens.size(); ++r) {
        const float* te = weights_.wte.data() + static_cast<std::size_t>(tokens[r]) * d;
        const float* pe = weights_.wpe.data() + (pos0 + r) * d;
        for (std::size_t i = 0; i < d; ++i) h[r * d + i] = te[i] + pe[i];
    }
}

Model::KvCache Model::empty_cache() const {
    KvCache cache;
    cache.k.resize(config_.n_layers);
    cache.v.resize(config_.n_layers);
    return cache;
}

void Model::run_block(std::size_t layer, std::vector<float>& h, std::size_t rows, KvCache& cache,
                      const std::vector<float>* delta, BlockProbe* probe) const {
    const auto& l = weights_.layers[layer];
    const std::size_t d = config_.d_model;
    const std::size_t hd = config_.head_dim();
    const std::size_t past = cache.length;
    const std::size_t total = past + rows;

    std::vector<float> a(rows * d);
    layer_norm(h.data(), rows, l.ln1_g, l.ln1_b, a.data());
    std::vector<float> qkv(rows * 3 * d);
    linear(a.data(), rows, d, l.attn_w, l.attn_b, 3 * d, qkv.data());

    auto& kc = cache.k[layer];
    auto& vc = cache.v[layer];
    kc.resize(total * d);
    vc.resize(total * d);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(qkv.data() + r * 3 * d + d, d, kc.data() + (past + r) * d);
        std::copy_n(qkv.data() + r * 3 * d + 2 * d, d, vc.data() + (past + r) * d);
    }

    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<float> attn(rows * d, 0.0f);
    std::vector<float> scores(total);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t visible = past + r + 1;
        for (std::size_t head = 0; head < config_.n_heads; ++head) {
            const float* q = qkv.data() + r * 3 * d + head * hd;
            float max_score = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < visible; ++j) {
                const float* k = kc.data() + j * d + head * hd;
                float s = 0.0f;
                for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
                scores[j] = s * scale;
                max_score = std::max(max_score, scores[j]);
            }
            float sum = 0.0f;
            for (std::size_t j = 0; j < visible; ++j) {
                scores[j] = std::exp(scores[j] - max_score);
                sum += scores[j];
            }
            float* out = attn.data() + r * d + head * hd;
            for (std::size_t j = 0; j < visible; ++j) {
                const float wgt = scores[j] / sum;
                const float* v = vc.data() + j * d + head * hd;
                for (std::size_t i = 0; i < hd; ++i) out[i] += wgt * v[i];
            }
        }
    }

    std::vector<float> proj(rows * d);
    linear(attn.data(), rows, d, l.attn_proj_w, l.attn_proj_b, d, proj.data());
    add_in_place(h.data(), proj.data(), rows * d);
    if (probe) probe->mid.assign(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(rows * d));

    layer_norm(h.data(), rows, l.ln2_g, l.ln2_b, a.data());
    std::vector<float> f(rows * d);
    mlp(layer, a.data(), rows, f.data());
    if (delta) {
        for (std::size_t r = 0; r < rows; ++r) add_in_place(f.data() + r * d, delta->data(), d);
    }
    if (probe) {
        probe->ffn_in = a;
        probe->ffn_out = f;
    }
    add_in_place(h.data(), f.data(), rows * d);
}

std::vector<float> Model::head(const float* last_row) const {
    const std::size_t d = config_.d_model;
    std::vector<float> normed(d);
    layer_norm(last_row, 1, weights_.lnf_g, weights_.lnf_b, normed.data());
    std::vector<float> logits(config_.vocab_size);
    ConstMatMap E(weights_.wte.data(), static_cast<Eigen::Index>(config_.vocab_size), static_cast<Eigen::Index>(d));
    Eigen::Map<Eigen::VectorXf> out(logits.data(), static_cast<Eigen::Index>(config_.vocab_size));
    out.noalias() = E * ConstVecMap(normed.data(), static_cast<Eigen::Index>(d));
    return logits;
}

std::vector<float> Model::forward(std::span<const TokenId> tokens, const SteeringSet& steering) const {
    if (steering.empty()) return forward(tokens, LayerDeltas{});
    return forward(tokens, LayerDeltas::from(steering, *this));
}

std::vector<float> Model::forward(std::span<const TokenId> tokens, const LayerDeltas& steering) const {
    check_tokens(tokens, 0);
    std::vector<float> h;
    embed(tokens, 0, h);
    KvCache cache = empty_cache();
    for (std::size_t layer = 0; layer < config_.n_layers; ++layer) {
        run_block(layer, h, tokens.size(), cache, steering.at(layer), nullptr);
    }
    return head(h.data() + (tokens.size() - 1) * config_.d_model);
}

std::vector<LayerActivations> Model::activations(std::span<const TokenId> tokens, const LayerDeltas& steering) const {
    check_tokens(tokens, 0);
    std::vector<LayerActivations> out(config_.n_layers);
    std::vector<float> h;
    embed(tokens, 0, h);
    KvCache cache = empty_cache();
    for (std::size_t layer = 0; layer < config_.n_layers; ++layer) {
        BlockProbe probe;
        run_block(layer, h, tokens.size(), cache, steering.at(layer), &probe);
        out[layer].ffn_input = std::move(probe.ffn_in);
        out[layer].ffn_output = std::move(probe.ffn_out);
    }
    return out;
}

PrefixCache Model::prefix_cache(std::span<const TokenId> tokens) const {
    check_tokens(tokens, 0);
    PrefixCache pc;
    pc.length_ = tokens.size();
    pc.mid_.resize(config_.n_layers);
    pc.ffn_out_.resize(config_.n_layers);
    std::vector<float> h;
    embed(tokens, 0, h);
    KvCache cache = empty_cache();
    for (std::size_t layer = 0; layer < config_.n_layers; ++layer) {
        BlockProbe probe;
        run_block(layer, h, tokens.size(), cache, nullptr, &probe);
        pc.mid_[layer] = std::move(probe.mid);
        pc.ffn_out_[layer] = std::move(probe.ffn_out);
    }
    return pc;
}

std::vector<float> Model::forward_from(const PrefixCache& pc, std::size_t layer, std::span<const float> delta) const {
    if (layer >= config_.n_layers) throw InvalidArgument("layer out of range: " + std::to_string(layer));
    if (pc.mid_.size() != config_.n_layers) throw InvalidArgument("prefix cache belongs to a different model");
    if (delta.size() != config_.d_model) throw InvalidArgument("delta dimension mismatch");
    const std::size_t d = config_.d_model;
    const std::size_t rows = pc.length_;

    std::vector<float> h = pc.mid_[layer];
    std::vector<float> f = pc.ffn_out_[layer];
    for (std::size_t r = 0; r < rows; ++r) add_in_place(f.data() + r * d, delta.data(), d);
    add_in_place(h.data(), f.data(), rows * d);

    KvCache cache = empty_cache();
    for (std::size_t next = layer + 1; next < config_.n_layers; ++next) {
        run_block(next, h, rows, cache, nullptr, nullptr);
    }
    return head(h.data() + (rows - 1) * d);
}

DecodeSession::DecodeSession(const Model& model) : model_(&model), cache_(model.empty_cache()) {}

void DecodeSession::reset() { cache_ = model_->empty_cache(); }

std::vector<float> DecodeSession::feed(std::span<const TokenId> tokens, const LayerDeltas& steering) {
    model_->check_tokens(tokens, cache_.length);
    std::vector<float> h;
    model_->embed(tokens, cache_.length, h);
    for (std::size_t layer = 0; layer < model_->config().n_layers; ++layer) {
        model_->run_block(layer, h, tokens.size(), cache_, steering.at(layer), nullptr);
    }
    cache_.length += tokens.size();
    return model_->head(h.data() + (tokens.size() - 1) * model_->config().d_model);
}

}  // namespace freectrl

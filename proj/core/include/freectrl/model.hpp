#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace freectrl {

using TokenId = std::int32_t;

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t d_ffn = 0;
    std::size_t n_heads = 0;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 0;
    float layer_norm_eps = 1e-5f;

    /// Total number of FFN value vectors, n_layers * d_ffn.
    std::size_t value_vector_count() const { return n_layers * d_ffn; }
    std::size_t head_dim() const { return n_heads == 0 ? 0 : d_model / n_heads; }

    bool operator==(const ModelConfig&) const = default;
};

/// Address of one value vector: a row of the second FFN weight matrix of a
/// layer. Layers are 0-based.
struct ValueVectorRef {
    std::uint32_t layer = 0;
    std::uint32_t row = 0;

    auto operator<=>(const ValueVectorRef&) const = default;
};

std::string to_string(ValueVectorRef ref);

/// Map from value vector to the additive weight u applied during a forward pass.
class SteeringSet {
public:
    SteeringSet() = default;

    // Throws InvalidArgument for negative or non-finite weights.
    void set(ValueVectorRef ref, float weight);
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    const std::map<ValueVectorRef, float>& entries() const { return entries_; }

private:
    std::map<ValueVectorRef, float> entries_;
};

class Model;

/// Dense per-layer vectors added to a layer's FFN output before the residual
/// addition. An untouched layer stores nothing.
class LayerDeltas {
public:
    LayerDeltas() = default;
    explicit LayerDeltas(std::size_t n_layers, std::size_t d_model);

    static LayerDeltas from(const SteeringSet& steering, const Model& model);

    bool empty() const;
    const std::vector<float>* at(std::size_t layer) const;
    void accumulate(std::size_t layer, std::span<const float> vec, float scale);
    LayerDeltas scaled(float factor) const;

private:
    std::size_t d_model_ = 0;
    std::vector<std::vector<float>> deltas_;
};

struct LayerWeights {
    std::vector<float> ln1_g, ln1_b;
    std::vector<float> attn_w, attn_b;        // [d, 3d], [3d]
    std::vector<float> attn_proj_w, attn_proj_b;  // [d, d], [d]
    std::vector<float> ln2_g, ln2_b;
    std::vector<float> fc_w, fc_b;            // [d, d_ffn], [d_ffn]  keys
    std::vector<float> proj_w, proj_b;        // [d_ffn, d], [d]      values
};

struct ModelWeights {
    std::vector<float> wte;  // [vocab, d], tied with the output head
    std::vector<float> wpe;  // [max_positions, d]
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_g, lnf_b;
};

struct OutputDistribution {
    std::vector<double> probs;

    std::size_t size() const { return probs.size(); }
    double operator[](std::size_t i) const { return probs[i]; }
};

/// Softmax with temperature. Throws InvalidArgument for temperature <= 0 or
/// non-finite logits.
OutputDistribution softmax_distribution(std::span<const float> logits, double temperature = 1.0);

/// Base (unsteered) activations of one prompt, kept per layer so that a
/// forward pass steered at a single layer can resume from that layer.
class PrefixCache {
public:
    std::size_t length() const { return length_; }

private:
    friend class Model;
    std::size_t length_ = 0;
    std::vector<std::vector<float>> mid_;      // residual after attention, [T, d]
    std::vector<std::vector<float>> ffn_out_;  // base FFN output, [T, d]
};

/// Per-layer FFN input (after the second layer norm) and FFN output (with
/// steering applied), each [T, d_model].
struct LayerActivations {
    std::vector<float> ffn_input;
    std::vector<float> ffn_output;
};

/// Decoder-only GPT-2 transformer with additive value-vector steering.
/// Immutable after construction; const members are safe to call concurrently.
class Model {
public:
    Model(ModelConfig config, ModelWeights weights);

    /// Loads a safetensors checkpoint in the public GPT-2 layout
    /// (`h.{i}.mlp.c_fc.*`, `wte`, ...). Config is derived from tensor shapes;
    /// n_heads comes from the `n_head` metadata entry, else d_model / 64.
    static Model load(const std::filesystem::path& checkpoint);

    /// Writes the model back to a safetensors file in the same layout.
    void save(const std::filesystem::path& checkpoint) const;

    const ModelConfig& config() const { return config_; }
    const ModelWeights& weights() const { return weights_; }
    const std::string& fingerprint() const { return fingerprint_; }

    /// Logits for the last position.
    std::vector<float> forward(std::span<const TokenId> tokens, const SteeringSet& steering = {}) const;
    std::vector<float> forward(std::span<const TokenId> tokens, const LayerDeltas& steering) const;

    std::vector<LayerActivations> activations(std::span<const TokenId> tokens, const LayerDeltas& steering = {}) const;

    PrefixCache prefix_cache(std::span<const TokenId> tokens) const;
    /// Logits for the last position with `delta` added to the FFN output of
    /// `layer` only. Bit-identical to forward() with the same steering.
    std::vector<float> forward_from(const PrefixCache& cache, std::size_t layer,
                                    std::span<const float> delta) const;

    /// FFN(x) in matrix form: gelu(x W_K + b_K) W_V + b_V, where x is the FFN
    /// input (after the second layer norm).
    std::vector<float> ffn(std::span<const float> x, std::size_t layer) const;
    /// The coefficients m = gelu(x W_K + b_K) weighting each value vector.
    std::vector<float> ffn_decompose(std::span<const float> x, std::size_t layer) const;

    std::span<const float> value_vector(ValueVectorRef ref) const;
    std::span<const float> value_bias(std::size_t layer) const;
    std::span<const float> embedding_of(TokenId id) const;

    void check_ref(ValueVectorRef ref) const;

private:
    friend class DecodeSession;

    struct KvCache {
        std::vector<std::vector<float>> k, v;  // per layer, [positions, d]
        std::size_t length = 0;
    };

    void embed(std::span<const TokenId> tokens, std::size_t pos0, std::vector<float>& h) const;
    struct BlockProbe {
        std::vector<float> mid, ffn_in, ffn_out;
    };

    // Runs one transformer block over T rows of h in place, appending the new
    // keys/values to `cache` so attention spans the cached prefix.
    void run_block(std::size_t layer, std::vector<float>& h, std::size_t rows, KvCache& cache,
                   const std::vector<float>* delta, BlockProbe* probe) const;
    void mlp(std::size_t layer, const float* x, std::size_t rows, float* out) const;
    std::vector<float> head(const float* last_row) const;
    void layer_norm(const float* x, std::size_t rows, const std::vector<float>& g,
                    const std::vector<float>& b, float* out) const;
    void check_tokens(std::span<const TokenId> tokens, std::size_t pos0) const;
    KvCache empty_cache() const;

    ModelConfig config_;
    ModelWeights weights_;
    std::string fingerprint_;
};

/// Incremental decoding over a KV cache. Steering applies to the positions fed
/// in each call; earlier positions keep the activations they were computed with.
class DecodeSession {
public:
    explicit DecodeSession(const Model& model);

    std::vector<float> feed(std::span<const TokenId> tokens, const LayerDeltas& steering = {});
    std::size_t position() const { return cache_.length; }
    void reset();

private:
    const Model* model_;
    Model::KvCache cache_;
};

}  // namespace freectrl

#include "fixtures.hpp"

#include "freectrl/error.hpp"
#include "freectrl/model.hpp"
#include "freectrl/safetensors.hpp"
#include "freectrl/sampling.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

using namespace freectrl;

namespace {

// Straightforward double-precision GPT-2 forward used as an oracle.
struct Reference {
    const ModelConfig& c;
    const ModelWeights& w;

    static double gelu(double x) {
        return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    }

    std::vector<double> ln(const std::vector<double>& x, const std::vector<float>& g, const std::vector<float>& b) const {
        const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + c.layer_norm_eps) * g[i] + b[i];
        return y;
    }

    static std::vector<double> linear(const std::vector<double>& x, const std::vector<float>& W,
                                      const std::vector<float>& b, std::size_t out) {
        std::vector<double> y(out);
        for (std::size_t j = 0; j < out; ++j) {
            double s = b[j];
            for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * W[i * out + j];
            y[j] = s;
        }
        return y;
    }

    std::vector<double> ffn(std::size_t layer, const std::vector<double>& x) const {
        const auto& l = w.layers[layer];
        auto hidden = linear(x, l.fc_w, l.fc_b, c.d_ffn);
        for (double& v : hidden) v = gelu(v);
        return linear(hidden, l.proj_w, l.proj_b, c.d_model);
    }

    std::vector<double> logits(const std::vector<TokenId>& tokens, const std::map<ValueVectorRef, double>& steer) const {
        const std::size_t d = c.d_model, T = tokens.size(), hd = d / c.n_heads;
        std::vector<std::vector<double>> h(T, std::vector<double>(d));
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < d; ++i) h[t][i] = w.wte[tokens[t] * d + i] + w.wpe[t * d + i];
        }
        for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
            const auto& l = w.layers[layer];
            std::vector<std::vector<double>> qkv(T);
            for (std::size_t t = 0; t < T; ++t) qkv[t] = linear(ln(h[t], l.ln1_g, l.ln1_b), l.attn_w, l.attn_b, 3 * d);
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> att(d, 0.0);
                for (std::size_t head = 0; head < c.n_heads; ++head) {
                    std::vector<double> s(t + 1);
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= t; ++j) {
                        double dot = 0.0;
                        for (std::size_t i = 0; i < hd; ++i) dot += qkv[t][head * hd + i] * qkv[j][d + head * hd + i];
                        s[j] = dot / std::sqrt(static_cast<double>(hd));
                        mx = std::max(mx, s[j]);
                    }
                    double z = 0.0;
                    for (double& v : s) z += (v = std::exp(v - mx));
                    for (std::size_t j = 0; j <= t; ++j) {
                        for (std::size_t i = 0; i < hd; ++i) att[head * hd + i] += s[j] / z * qkv[j][2 * d + head * hd + i];
                    }
                }
                const auto proj = linear(att, l.attn_proj_w, l.attn_proj_b, d);
                for (std::size_t i = 0; i < d; ++i) h[t][i] += proj[i];
            }
            for (std::size_t t = 0; t < T; ++t) {
                auto f = ffn(layer, ln(h[t], l.ln2_g, l.ln2_b));
                for (const auto& [ref, u] : steer) {
                    if (ref.layer != layer) continue;
                    for (std::size_t i = 0; i < d; ++i) f[i] += u * l.proj_w[ref.row * d + i];
                }
                for (std::size_t i = 0; i < d; ++i) h[t][i] += f[i];
            }
        }
        const auto last = ln(h[T - 1], w.lnf_g, w.lnf_b);
        std::vector<double> out(c.vocab_size);
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += w.wte[v * d + i] * last[i];
            out[v] = s;
        }
        return out;
    }
};

void expect_close(std::span<const float> got, const std::vector<double>& want, double tol) {
    ASSERT_EQ(got.size(), want.size());
    double scale = 0.0;
    for (double v : want) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol * std::max(1.0, scale)) << i;
}

void write_raw_safetensors(const std::filesystem::path& path, const nlohmann::json& header, const std::string& data) {
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    const std::uint64_t n = h.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((n >> (8 * i)) & 0xFF));
    out << h << data;
}

}  // namespace

TEST(Model, ForwardMatchesReferenceImplementation) {
    const auto& m = fixtures::tiny_model();
    const Reference ref{m.config(), m.weights()};
    const std::vector<TokenId> tokens = {fixtures::id("the"), fixtures::id("cat"), 65, 66, fixtures::id("is")};
    expect_close(m.forward(tokens), ref.logits(tokens, {}), 1e-4);
}

TEST(Model, SteeredForwardMatchesReference) {
    const auto& m = fixtures::tiny_model();
    const Reference ref{m.config(), m.weights()};
    const std::vector<TokenId> tokens = {fixtures::id("a"), fixtures::id("dog")};
    SteeringSet s;
    s.set({0, 3}, 4.0f);
    s.set({1, 17}, 2.5f);
    expect_close(m.forward(tokens, s), ref.logits(tokens, {{{0, 3}, 4.0}, {{1, 17}, 2.5}}), 1e-4);
}

TEST(Model, EmptySteeringIsBaselineAndDeterministic) {
    const auto& m = fixtures::tiny_model();
    const std::vector<TokenId> tokens = {1, 2, 3, 4};
    const auto a = m.forward(tokens);
    const auto b = m.forward(tokens, SteeringSet{});
    const auto c = m.forward(tokens, LayerDeltas{});
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, c);
    for (float x : a) EXPECT_TRUE(std::isfinite(x));
}

TEST(Model, ZeroWeightSteeringIsBitwiseNoOp) {
    const auto& m = fixtures::tiny_model();
    const std::vector<TokenId> tokens = {10, 20, 30};
    SteeringSet s;
    s.set({0, 3}, 0.0f);
    EXPECT_EQ(m.forward(tokens), m.forward(tokens, s));
    const auto base = m.activations(tokens);
    const auto steered = m.activations(tokens, LayerDeltas::from(s, m));
    EXPECT_EQ(base[0].ffn_output, steered[0].ffn_output);
}

TEST(Model, SteeringAddsScaledValueVectorToFfnOutputExactly) {
    const auto& m = fixtures::tiny_model();
    const std::vector<TokenId> tokens = {5, 6, 7};
    const std::size_t d = m.config().d_model;
    const float u = 3.25f;
    SteeringSet s;
    s.set({0, 3}, u);
    const auto base = m.activations(tokens);
    const auto steered = m.activations(tokens, LayerDeltas::from(s, m));
    const auto v = m.value_vector({0, 3});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (std::size_t i = 0; i < d; ++i) {
            EXPECT_EQ(steered[0].ffn_output[t * d + i], base[0].ffn_output[t * d + i] + u * v[i]);
        }
    }
    // the FFN input of the steered layer is unaffected
    EXPECT_EQ(steered[0].ffn_input, base[0].ffn_input);
}

TEST(Model, SteeringLinearityOnRandomInputs) {
    const auto& m = fixtures::tiny_model();
    const std::size_t d = m.config().d_model;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        Rng rng(seed);
        const ValueVectorRef ref{static_cast<std::uint32_t>(rng.below(m.config().n_layers)),
                                 static_cast<std::uint32_t>(rng.below(m.config().d_ffn))};
        std::vector<TokenId> tokens;
        for (int i = 0; i < 4; ++i) tokens.push_back(static_cast<TokenId>(rng.below(m.config().vocab_size)));
        const float u = static_cast<float>(rng.uniform01() * 10.0);
        SteeringSet s;
        s.set(ref, u);
        LayerDeltas deltas = LayerDeltas::from(s, m);
        // use the steered run's own FFN inputs so only the hook differs
        const auto steered = m.activations(tokens, deltas);
        const auto& x = steered[ref.layer].ffn_input;
        const auto v = m.value_vector(ref);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto base = m.ffn(std::span<const float>(x).subspan(t * d, d), ref.layer);
            for (std::size_t i = 0; i < d; ++i) {
                EXPECT_NEAR(steered[ref.layer].ffn_output[t * d + i] - base[i], u * v[i], 1e-5f * (1.0f + u));
            }
        }
    }
}

TEST(Model, DecompositionIdentityHoldsForEveryLayer) {
    const auto& m = fixtures::tiny_model();
    const std::size_t d = m.config().d_model;
    for (std::uint64_t seed : {11u, 12u}) {
        const auto x = fixtures::gaussian(d, seed);
        for (std::size_t layer = 0; layer < m.config().n_layers; ++layer) {
            const auto coeffs = m.ffn_decompose(x, layer);
            ASSERT_EQ(coeffs.size(), m.config().d_ffn);
            std::vector<double> sum(d);
            const auto bias = m.value_bias(layer);
            for (std::size_t i = 0; i < d; ++i) sum[i] = bias[i];
            for (std::size_t r = 0; r < coeffs.size(); ++r) {
                const auto v = m.value_vector({static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(r)});
                for (std::size_t i = 0; i < d; ++i) sum[i] += static_cast<double>(coeffs[r]) * v[i];
            }
            const auto f = m.ffn(x, layer);
            double scale = 0.0;
            for (float v : f) scale = std::max(scale, std::abs(static_cast<double>(v)));
            for (std::size_t i = 0; i < d; ++i) EXPECT_LT(std::abs(f[i] - sum[i]), 1e-4 * std::max(1.0, scale));
        }
    }
}

TEST(Model, DecompositionAtZeroInput) {
    const auto& m = fixtures::tiny_model();
    const std::size_t d = m.config().d_model;
    const std::vector<float> zero(d, 0.0f);
    const auto coeffs = m.ffn_decompose(zero, 0);
    const auto& l = m.weights().layers[0];
    for (std::size_t r = 0; r < coeffs.size(); ++r) {
        EXPECT_NEAR(coeffs[r], Reference::gelu(l.fc_b[r]), 1e-6);
    }
    EXPECT_THROW(m.ffn_decompose(std::vector<float>(d + 1), 0), InvalidArgument);
}

TEST(Model, PrefixCacheResumeIsBitIdentical) {
    const auto& m = fixtures::tiny_model();
    const std::vector<TokenId> prompt = {fixtures::id("the"), fixtures::id("bus")};
    const auto cache = m.prefix_cache(prompt);
    for (ValueVectorRef ref : {ValueVectorRef{0, 0}, ValueVectorRef{0, 63}, ValueVectorRef{1, 5}}) {
        SteeringSet s;
        s.set(ref, 50.0f);
        const auto v = m.value_vector(ref);
        std::vector<float> delta(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) delta[i] = 50.0f * v[i];
        EXPECT_EQ(m.forward(prompt, s), m.forward_from(cache, ref.layer, delta));
    }
}

TEST(Model, DecodeSessionMatchesFullForward) {
    const auto& m = fixtures::tiny_model();
    const std::vector<TokenId> tokens = {3, 14, 15, 92, 65};
    DecodeSession session(m);
    session.feed(std::span(tokens).first(2));
    session.feed(std::span(tokens).subspan(2, 1));
    const auto inc = session.feed(std::span(tokens).subspan(3));
    const auto full = m.forward(tokens);
    ASSERT_EQ(inc.size(), full.size());
    for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(inc[i], full[i], 1e-4f);
    EXPECT_EQ(session.position(), tokens.size());
}

TEST(Model, RejectsBadInputs) {
    const auto& m = fixtures::tiny_model();
    EXPECT_THROW(m.forward(std::vector<TokenId>{}), InvalidArgument);
    EXPECT_THROW(m.forward(std::vector<TokenId>(65, 1)), InvalidArgument);
    EXPECT_THROW(m.forward(std::vector<TokenId>{static_cast<TokenId>(m.config().vocab_size)}), InvalidArgument);
    EXPECT_THROW(m.value_vector({2, 0}), InvalidArgument);
    EXPECT_THROW(m.value_vector({0, 64}), InvalidArgument);
    SteeringSet s;
    EXPECT_THROW(s.set({0, 0}, -1.0f), InvalidArgument);
    EXPECT_THROW(s.set({0, 0}, std::nanf("")), InvalidArgument);
    s.set({5, 0}, 1.0f);
    EXPECT_THROW(m.forward(std::vector<TokenId>{1}, s), InvalidArgument);
}

TEST(Model, SoftmaxDistribution) {
    const std::vector<float> two = {0.0f, static_cast<float>(std::log(3.0))};
    const auto p = softmax_distribution(two);
    EXPECT_NEAR(p[0], 0.25, 1e-7);
    EXPECT_NEAR(p[1], 0.75, 1e-7);

    const auto uniform = softmax_distribution(std::vector<float>(8, 1.5f));
    for (double x : uniform.probs) EXPECT_DOUBLE_EQ(x, 1.0 / 8.0);

    const std::vector<float> logits = {3.0f, -1.0f, 0.5f, 2.0f};
    const auto hot = softmax_distribution(logits, 1e6);
    for (double x : hot.probs) EXPECT_NEAR(x, 0.25, 1e-5);
    const auto cold = softmax_distribution(logits, 0.5);
    const auto base = softmax_distribution(logits);
    EXPECT_GT(cold[0], base[0]);

    EXPECT_THROW(softmax_distribution(logits, 0.0), InvalidArgument);
    EXPECT_THROW(softmax_distribution(logits, -1.0), InvalidArgument);
    EXPECT_THROW(softmax_distribution(std::vector<float>{1.0f, INFINITY}), InvalidArgument);
}

TEST(Model, DistributionsSumToOne) {
    const auto& m = fixtures::tiny_model();
    for (std::uint32_t row = 0; row < 64; row += 9) {
        SteeringSet s;
        s.set({1, row}, 50.0f);
        const auto p = softmax_distribution(m.forward(std::vector<TokenId>{1, 2}, s));
        double sum = 0.0;
        for (double x : p.probs) {
            EXPECT_GE(x, 0.0);
            EXPECT_TRUE(std::isfinite(x));
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Model, CheckpointRoundTrip) {
    const auto dir = fixtures::temp_dir("model_roundtrip");
    const auto& m = fixtures::tiny_model();
    m.save(dir / "tiny.safetensors");
    const auto loaded = Model::load(dir / "tiny.safetensors");
    EXPECT_EQ(loaded.config(), m.config());
    EXPECT_EQ(loaded.fingerprint(), m.fingerprint());
    const std::vector<TokenId> tokens = {1, 2, 3};
    EXPECT_EQ(loaded.forward(tokens), m.forward(tokens));

    // embedding rows match the tensor stored in the container
    safetensors::Reader reader(dir / "tiny.safetensors");
    const auto wte = reader.read_f32("wte.weight");
    const std::size_t d = m.config().d_model;
    for (TokenId id : {0, 7, fixtures::id("cat")}) {
        const auto row = loaded.embedding_of(id);
        double norm_a = 0.0, norm_b = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            norm_a += row[i] * row[i];
            norm_b += wte[static_cast<std::size_t>(id) * d + i] * wte[static_cast<std::size_t>(id) * d + i];
        }
        EXPECT_DOUBLE_EQ(norm_a, norm_b);
    }
    EXPECT_EQ(std::vector<float>(loaded.embedding_of(0).begin(), loaded.embedding_of(0).end()),
              std::vector<float>(wte.begin(), wte.begin() + static_cast<std::ptrdiff_t>(d)));
    EXPECT_THROW(loaded.embedding_of(-1), InvalidArgument);
}

TEST(Model, MissingTensorIsNamed) {
    const auto dir = fixtures::temp_dir("model_missing");
    const auto& m = fixtures::tiny_model();
    m.save(dir / "full.safetensors");
    safetensors::Reader full(dir / "full.safetensors");
    safetensors::Writer partial;
    for (const auto& name : full.names()) {
        if (name == "h.1.mlp.c_proj.weight") continue;
        partial.add(name, full.info(name).shape, full.read_f32(name));
    }
    partial.set_metadata("n_head", "2");
    partial.write(dir / "partial.safetensors");
    try {
        Model::load(dir / "partial.safetensors");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.tensor(), "h.1.mlp.c_proj.weight");
    }
}

TEST(Model, ShapeMismatchIsNamed) {
    const auto dir = fixtures::temp_dir("model_shape");
    const auto& m = fixtures::tiny_model();
    m.save(dir / "full.safetensors");
    safetensors::Reader full(dir / "full.safetensors");
    safetensors::Writer bad;
    for (const auto& name : full.names()) {
        auto data = full.read_f32(name);
        auto shape = full.info(name).shape;
        if (name == "h.0.mlp.c_fc.bias") {
            data.pop_back();
            shape = {data.size()};
        }
        bad.add(name, shape, data);
    }
    bad.set_metadata("n_head", "2");
    bad.write(dir / "bad.safetensors");
    try {
        Model::load(dir / "bad.safetensors");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.tensor(), "h.0.mlp.c_fc.bias");
    }
}

TEST(Model, UnsupportedDtypeIsNamed) {
    const auto dir = fixtures::temp_dir("model_dtype");
    fixtures::tiny_model().save(dir / "full.safetensors");
    std::ifstream in(dir / "full.safetensors", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    auto header = nlohmann::json::parse(bytes.substr(8, n));
    header["h.0.mlp.c_fc.bias"]["dtype"] = "I32";
    write_raw_safetensors(dir / "int.safetensors", header, bytes.substr(8 + n));
    try {
        Model::load(dir / "int.safetensors");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.tensor(), "h.0.mlp.c_fc.bias");
        EXPECT_NE(std::string(e.what()).find("I32"), std::string::npos);
    }
}

TEST(Model, ConfigInvariants) {
    const auto& c = fixtures::tiny_model().config();
    EXPECT_EQ(c.d_ffn, 4 * c.d_model);
    EXPECT_EQ(c.value_vector_count(), c.n_layers * c.d_ffn);
    ModelConfig medium{24, 1024, 4096, 16, 50257, 1024};
    EXPECT_EQ(medium.value_vector_count(), 98304u);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ecgstress {

struct ConvSpec {
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
};

struct PoolSpec {
    std::size_t size = 2;
    std::size_t stride = 2;
};

// Lengths through the convolutional front end for a given window.
struct TokenLayout {
    std::size_t conv1_len = 0;
    std::size_t pool1_len = 0;
    std::size_t conv2_len = 0;
    std::size_t pool2_len = 0;
    std::size_t channels = 0;
    std::size_t tokens = 0;
};

struct ModelConfig {
    ConvSpec conv1{64, 64, 8};
    ConvSpec conv2{128, 32, 4};
    PoolSpec pool{2, 2};
    std::size_t d_model = 1024;
    std::size_t d_qkv = 1024;
    std::size_t d_ff = 512;
    std::size_t heads = 4;
    std::size_t encoder_layers = 4;
    std::vector<std::size_t> fc_dims{512, 256, 1};
    double fc_dropout = 0.5;
    double encoder_dropout = 0.1;
    double layer_norm_eps = 1e-5;
    std::size_t window_len = 7680;

    static ModelConfig standard() { return {}; }

    // Small enough for finite-difference checks of the whole network:
    // 256 -> 127 -> 63 -> 32 -> 16, 8 channels -> 4 tokens of 32.
    static ModelConfig reduced() {
        ModelConfig c;
        c.conv1 = {4, 4, 2};
        c.conv2 = {8, 32, 1};
        c.d_model = 32;
        c.d_qkv = 32;
        c.d_ff = 64;
        c.heads = 2;
        c.encoder_layers = 1;
        c.fc_dims = {32, 16, 1};
        c.window_len = 256;
        return c;
    }

    // 8 s windows at 256 Hz for the synthetic end-to-end runs:
    // 2048 -> 509 -> 254 -> 124 -> 62, 16 channels -> 31 tokens of 32.
    // A 16-wide head under 0.5 dropout collapses to the constant predictor on
    // some seeds, so the head is wider than in reduced().
    static ModelConfig compact() {
        ModelConfig c;
        c.conv1 = {8, 16, 4};
        c.conv2 = {16, 8, 2};
        c.d_model = 32;
        c.d_qkv = 32;
        c.d_ff = 64;
        c.heads = 2;
        c.encoder_layers = 1;
        c.fc_dims = {128, 64, 1};
        c.window_len = 2048;
        return c;
    }

    // Throws ConfigError when the window cannot pass through the front end.
    TokenLayout layout() const { return layout_for(window_len); }

    TokenLayout layout_for(std::size_t window, bool suggest = true) const {
        auto stage = [](std::size_t len, std::size_t k, std::size_t s, const char* name) {
            if (k == 0 || s == 0) throw ConfigError(std::string(name) + ": kernel and stride must be positive");
            if (len < k) {
                throw ConfigError(std::string(name) + ": input length " + std::to_string(len) + " shorter than kernel " +
                                  std::to_string(k));
            }
            return (len - k) / s + 1;
        };
        TokenLayout l;
        l.conv1_len = stage(window, conv1.kernel, conv1.stride, "conv1");
        l.pool1_len = stage(l.conv1_len, pool.size, pool.stride, "pool1");
        l.conv2_len = stage(l.pool1_len, conv2.kernel, conv2.stride, "conv2");
        l.pool2_len = stage(l.conv2_len, pool.size, pool.stride, "pool2");
        l.channels = conv2.filters;
        const std::size_t flat = l.channels * l.pool2_len;
        if (d_model == 0 || flat % d_model != 0) {
            throw ConfigError("window length " + std::to_string(window) + " gives " + std::to_string(l.channels) + "x" +
                              std::to_string(l.pool2_len) + " = " + std::to_string(flat) +
                              " features, not divisible by d_model " + std::to_string(d_model) +
                              (suggest ? suggest_windows(window) : std::string()));
        }
        l.tokens = flat / d_model;
        return l;
    }

    void validate() const {
        if (conv1.filters == 0 || conv2.filters == 0) throw ConfigError("conv filters must be positive");
        if (heads == 0 || d_qkv % heads != 0) {
            throw ConfigError("d_qkv " + std::to_string(d_qkv) + " is not divisible by heads " + std::to_string(heads));
        }
        if (d_model % 2 != 0) throw ConfigError("d_model must be even for sinusoidal positional encoding");
        if (d_ff == 0) throw ConfigError("d_ff must be positive");
        if (fc_dims.empty() || fc_dims.back() != 1) throw ConfigError("last FC layer must have output dimension 1");
        for (auto d : fc_dims) {
            if (d == 0) throw ConfigError("FC dimensions must be positive");
        }
        if (!(fc_dropout >= 0.0 && fc_dropout < 1.0) || !(encoder_dropout >= 0.0 && encoder_dropout < 1.0)) {
            throw ConfigError("dropout rates must lie in [0, 1)");
        }
        layout();
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "model.conv1.filters=" << conv1.filters << '\n'
           << "model.conv1.kernel=" << conv1.kernel << '\n'
           << "model.conv1.stride=" << conv1.stride << '\n'
           << "model.conv2.filters=" << conv2.filters << '\n'
           << "model.conv2.kernel=" << conv2.kernel << '\n'
           << "model.conv2.stride=" << conv2.stride << '\n'
           << "model.pool.size=" << pool.size << '\n'
           << "model.pool.stride=" << pool.stride << '\n'
           << "model.d_model=" << d_model << '\n'
           << "model.d_qkv=" << d_qkv << '\n'
           << "model.d_ff=" << d_ff << '\n'
           << "model.heads=" << heads << '\n'
           << "model.encoder_layers=" << encoder_layers << '\n'
           << "model.fc_dims=";
        for (std::size_t i = 0; i < fc_dims.size(); ++i) os << (i ? "," : "") << fc_dims[i];
        os.precision(17);
        os << '\n'
           << "model.fc_dropout=" << fc_dropout << '\n'
           << "model.encoder_dropout=" << encoder_dropout << '\n'
           << "model.layer_norm_eps=" << layer_norm_eps << '\n'
           << "model.window_len=" << window_len << '\n';
        return os.str();
    }

    std::uint64_t hash() const { return io::fnv1a64(to_text()); }

private:
    std::string suggest_windows(std::size_t window) const {
        std::vector<std::size_t> found;
        for (std::size_t delta = 1; delta <= 4096 && found.size() < 2; ++delta) {
            for (std::size_t cand : {window - std::min(window, delta), window + delta}) {
                if (cand == 0 || cand == window) continue;
                try {
                    layout_for(cand, false);
                    if (std::find(found.begin(), found.end(), cand) == found.end()) found.push_back(cand);
                } catch (const ConfigError&) {
                }
            }
        }
        if (found.empty()) return "";
        std::string s = "; nearest valid window lengths:";
        for (auto f : found) s += " " + std::to_string(f);
        return s;
    }
};

// ---------------------------------------------------------------------------
// Parameters

struct ConvParams {
    Tensor weight; // [out×in×kernel]
    Tensor bias;
};

struct DenseParams {
    Tensor weight; // [in×out]
    Tensor bias;
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

struct AttentionParams {
    Tensor w_q, w_k, w_v; // [d_model×d_qkv]
    Tensor w_o;           // [d_qkv×d_model]
};

struct EncoderLayerParams {
    AttentionParams attention;
    LayerNormParams ln1;
    DenseParams ff1; // [d_model×d_ff]
    DenseParams ff2; // [d_ff×d_model]
    LayerNormParams ln2;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct ModelParams {
    ConvParams conv1, conv2;
    std::vector<EncoderLayerParams> encoder;
    std::vector<DenseParams> fc;

    // Stable order; also the checkpoint order.
    std::vector<NamedTensor> named() const {
        std::vector<NamedTensor> out{{"conv1.weight", conv1.weight}, {"conv1.bias", conv1.bias},
                                     {"conv2.weight", conv2.weight}, {"conv2.bias", conv2.bias}};
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            const auto p = "encoder." + std::to_string(i) + ".";
            const auto& e = encoder[i];
            out.push_back({p + "attention.w_q", e.attention.w_q});
            out.push_back({p + "attention.w_k", e.attention.w_k});
            out.push_back({p + "attention.w_v", e.attention.w_v});
            out.push_back({p + "attention.w_o", e.attention.w_o});
            out.push_back({p + "ln1.gamma", e.ln1.gamma});
            out.push_back({p + "ln1.beta", e.ln1.beta});
            out.push_back({p + "ff1.weight", e.ff1.weight});
            out.push_back({p + "ff1.bias", e.ff1.bias});
            out.push_back({p + "ff2.weight", e.ff2.weight});
            out.push_back({p + "ff2.bias", e.ff2.bias});
            out.push_back({p + "ln2.gamma", e.ln2.gamma});
            out.push_back({p + "ln2.beta", e.ln2.beta});
        }
        for (std::size_t i = 0; i < fc.size(); ++i) {
            const auto p = "fc" + std::to_string(i + 1) + ".";
            out.push_back({p + "weight", fc[i].weight});
            out.push_back({p + "bias", fc[i].bias});
        }
        return out;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& n : named()) out.push_back(n.tensor);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : named()) n += t.tensor.numel();
        return n;
    }

    void zero_grad() const {
        for (auto& t : tensors()) t.zero_grad();
    }

    bool all_finite() const {
        for (const auto& t : named()) {
            for (double v : t.tensor.data()) {
                if (!std::isfinite(v)) return false;
            }
        }
        return true;
    }

    // Deep copy with fresh leaves.
    ModelParams clone() const {
        ModelParams p = *this;
        auto c = [](Tensor& t) { t = t.clone(true); };
        c(p.conv1.weight), c(p.conv1.bias), c(p.conv2.weight), c(p.conv2.bias);
        for (auto& e : p.encoder) {
            c(e.attention.w_q), c(e.attention.w_k), c(e.attention.w_v), c(e.attention.w_o);
            c(e.ln1.gamma), c(e.ln1.beta), c(e.ln2.gamma), c(e.ln2.beta);
            c(e.ff1.weight), c(e.ff1.bias), c(e.ff2.weight), c(e.ff2.bias);
        }
        for (auto& d : p.fc) c(d.weight), c(d.bias);
        return p;
    }
};

namespace detail {

inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(data), true);
}

inline std::size_t flattened_features(const ModelConfig& cfg) {
    const auto l = cfg.layout();
    return l.tokens * cfg.d_model;
}

} // namespace detail

// Weights ~ U(±1/√fan_in); biases 0; layer-norm gain 1, shift 0.
inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    using detail::uniform_fan_in;
    ModelParams p;
    p.conv1.weight = uniform_fan_in({cfg.conv1.filters, 1, cfg.conv1.kernel}, cfg.conv1.kernel, rng);
    p.conv1.bias = Tensor::zeros({cfg.conv1.filters}, true);
    p.conv2.weight = uniform_fan_in({cfg.conv2.filters, cfg.conv1.filters, cfg.conv2.kernel},
                                    cfg.conv1.filters * cfg.conv2.kernel, rng);
    p.conv2.bias = Tensor::zeros({cfg.conv2.filters}, true);
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
        EncoderLayerParams e;
        e.attention.w_q = uniform_fan_in({cfg.d_model, cfg.d_qkv}, cfg.d_model, rng);
        e.attention.w_k = uniform_fan_in({cfg.d_model, cfg.d_qkv}, cfg.d_model, rng);
        e.attention.w_v = uniform_fan_in({cfg.d_model, cfg.d_qkv}, cfg.d_model, rng);
        e.attention.w_o = uniform_fan_in({cfg.d_qkv, cfg.d_model}, cfg.d_qkv, rng);
        e.ln1 = {Tensor::filled({cfg.d_model}, 1.0, true), Tensor::zeros({cfg.d_model}, true)};
        e.ff1 = {uniform_fan_in({cfg.d_model, cfg.d_ff}, cfg.d_model, rng), Tensor::zeros({cfg.d_ff}, true)};
        e.ff2 = {uniform_fan_in({cfg.d_ff, cfg.d_model}, cfg.d_ff, rng), Tensor::zeros({cfg.d_model}, true)};
        e.ln2 = {Tensor::filled({cfg.d_model}, 1.0, true), Tensor::zeros({cfg.d_model}, true)};
        p.encoder.push_back(std::move(e));
    }
    std::size_t in = detail::flattened_features(cfg);
    for (auto out : cfg.fc_dims) {
        p.fc.push_back({uniform_fan_in({in, out}, in, rng), Tensor::zeros({out}, true)});
        in = out;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Building blocks

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same angle).
inline Tensor positional_encoding(std::size_t n, std::size_t d_model) {
    if (d_model == 0 || d_model % 2 != 0) {
        throw ArgumentError("positional_encoding: d_model must be even, got " + std::to_string(d_model));
    }
    std::vector<double> pe(n * d_model);
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t i = 0; i < d_model / 2; ++i) {
            const double angle = static_cast<double>(pos) /
                                 std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
            pe[pos * d_model + 2 * i] = std::sin(angle);
            pe[pos * d_model + 2 * i + 1] = std::cos(angle);
        }
    }
    return Tensor({n, d_model}, std::move(pe));
}

// softmax(Q·Kᵀ/√d_k)·V over rank-3 inputs [batch×n×d]. The attention weights
// are written to *weights when requested.
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                           Tensor* weights = nullptr) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw DimensionError("attention: Q, K, V must have equal rank 3");
    if (q.dim(2) != k.dim(2)) {
        throw DimensionError("attention: d_q " + std::to_string(q.dim(2)) + " != d_k " + std::to_string(k.dim(2)));
    }
    if (q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) || q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1)) {
        throw DimensionError("attention: sequence shapes disagree: Q " + shape_string(q.shape()) + ", K " +
                             shape_string(k.shape()) + ", V " + shape_string(v.shape()));
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(k.dim(2)));
    auto w = softmax_lastdim(scale(bmm(q, permute(k, {0, 2, 1})), inv_sqrt_dk));
    if (weights) *weights = w;
    return bmm(w, v);
}

// Single-sequence form: Q[n×d_q], K[n×d_k], V[n×d_v] -> [n×d_v].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw DimensionError("attention: Q, K, V must be matrices");
    auto lift = [](const Tensor& t) { return reshape(t, {1, t.dim(0), t.dim(1)}); };
    auto out = scaled_dot_product_attention(lift(q), lift(k), lift(v), weights);
    if (weights) *weights = reshape(*weights, {q.dim(0), k.dim(0)});
    return reshape(out, {q.dim(0), v.dim(1)});
}

// x[batch×n×d_model] -> [batch×n×d_model]; per-head scaling uses d_qkv/heads.
inline Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, std::size_t heads,
                                   Tensor* weights = nullptr) {
    if (x.rank() != 3) throw DimensionError("multi_head_attention: input must be [batch×n×d_model]");
    const std::size_t batch = x.dim(0), n = x.dim(1), d_qkv = p.w_q.dim(1);
    if (heads == 0 || d_qkv % heads != 0) {
        throw ConfigError("multi_head_attention: d_qkv " + std::to_string(d_qkv) + " not divisible by heads " +
                          std::to_string(heads));
    }
    const std::size_t dh = d_qkv / heads;
    auto split = [&](const Tensor& t) {
        return reshape(permute(reshape(t, {batch, n, heads, dh}), {0, 2, 1, 3}), {batch * heads, n, dh});
    };
    auto q = split(linear(x, p.w_q));
    auto k = split(linear(x, p.w_k));
    auto v = split(linear(x, p.w_v));
    auto ctx = scaled_dot_product_attention(q, k, v, weights);
    auto merged = reshape(permute(reshape(ctx, {batch, heads, n, dh}), {0, 2, 1, 3}), {batch, n, d_qkv});
    return linear(merged, p.w_o);
}

// Row-major flatten of (channels, length) per sample, regrouped into tokens.
inline Tensor reshape_to_tokens(const Tensor& x, std::size_t d_model) {
    if (x.rank() != 3) throw DimensionError("reshape_to_tokens: input must be [batch×channels×length]");
    const std::size_t flat = x.dim(1) * x.dim(2);
    if (d_model == 0 || flat % d_model != 0) {
        throw ConfigError("reshape_to_tokens: " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                          " features not divisible by d_model " + std::to_string(d_model));
    }
    return reshape(x, {x.dim(0), flat / d_model, d_model});
}

// Observation hooks for tests and diagnostics.
struct ForwardTrace {
    std::vector<Tensor> attention_weights; // one [batch·heads×n×n] per encoder layer
    Tensor conv_features;                  // [batch×channels×length] before reshape
    Tensor tokens;                         // [batch×n×d_model] after positional encoding
};

// Post-norm encoder layer: MHA -> dropout -> add & norm -> FFN -> dropout -> add & norm.
inline Tensor encoder_layer(const Tensor& x, const EncoderLayerParams& p, const ModelConfig& cfg, Rng& rng,
                            bool training, Tensor* weights = nullptr) {
    auto a = dropout(multi_head_attention(x, p.attention, cfg.heads, weights), cfg.encoder_dropout, rng, training);
    auto h = layer_norm(add(x, a), p.ln1.gamma, p.ln1.beta, cfg.layer_norm_eps);
    auto f = dense(relu(dense(h, p.ff1.weight, p.ff1.bias)), p.ff2.weight, p.ff2.bias);
    f = dropout(f, cfg.encoder_dropout, rng, training);
    return layer_norm(add(h, f), p.ln2.gamma, p.ln2.beta, cfg.layer_norm_eps);
}

inline Tensor encode(const ModelParams& params, const ModelConfig& cfg, const Tensor& tokens, Rng& rng, bool training,
                     ForwardTrace* trace = nullptr) {
    Tensor h = tokens;
    for (const auto& layer : params.encoder) {
        Tensor w;
        h = encoder_layer(h, layer, cfg, rng, training, trace ? &w : nullptr);
        if (trace) trace->attention_weights.push_back(w);
    }
    return h;
}

// x[batch×1×window] -> stress probabilities [batch].
inline Tensor forward(const ModelParams& params, const ModelConfig& cfg, const Tensor& x, Rng& rng, bool training,
                      ForwardTrace* trace = nullptr) {
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != cfg.window_len) {
        throw DimensionError("forward: expected input [batch×1×" + std::to_string(cfg.window_len) + "], got " +
                             shape_string(x.shape()));
    }
    const std::size_t batch = x.dim(0);
    auto h = maxpool1d(relu(conv1d(x, params.conv1.weight, params.conv1.bias, cfg.conv1.stride)), cfg.pool.size,
                       cfg.pool.stride);
    h = maxpool1d(relu(conv1d(h, params.conv2.weight, params.conv2.bias, cfg.conv2.stride)), cfg.pool.size,
                  cfg.pool.stride);
    if (trace) trace->conv_features = h;
    auto tokens = reshape_to_tokens(h, cfg.d_model);
    const std::size_t n = tokens.dim(1);

    const auto pe = positional_encoding(n, cfg.d_model);
    std::vector<double> tiled;
    tiled.reserve(batch * pe.numel());
    for (std::size_t b = 0; b < batch; ++b) tiled.insert(tiled.end(), pe.data().begin(), pe.data().end());
    tokens = add(tokens, Tensor({batch, n, cfg.d_model}, std::move(tiled)));
    if (trace) trace->tokens = tokens;

    auto z = reshape(encode(params, cfg, tokens, rng, training, trace), {batch, n * cfg.d_model});
    for (std::size_t i = 0; i < params.fc.size(); ++i) {
        z = dense(z, params.fc[i].weight, params.fc[i].bias);
        if (i + 1 < params.fc.size()) z = dropout(relu(z), cfg.fc_dropout, rng, training);
    }
    return reshape(sigmoid(z), {batch});
}

// ---------------------------------------------------------------------------
// Checkpoint (.ckpt), little-endian:
//   "CKPT" | version u16 | config hash u64 | count u32
//   count × { name (u32 len + bytes) | rank u32 | rank × u64 dims | f64 payload }

inline constexpr std::uint16_t checkpoint_version = 1;

inline io::ByteWriter encode_checkpoint(const ModelParams& params, const ModelConfig& cfg) {
    io::ByteWriter w;
    w.put_bytes("CKPT");
    w.put(checkpoint_version);
    w.put(cfg.hash());
    const auto named = params.named();
    w.put(static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        w.put_string(name);
        w.put(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
        for (double v : t.data()) w.put(v);
    }
    return w;
}

inline void save_checkpoint(const ModelParams& params, const ModelConfig& cfg, const std::filesystem::path& path) {
    encode_checkpoint(params, cfg).save(path);
}

// Loads into a freshly initialized structure for cfg; names, shapes and the
// config hash must all match.
inline ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
    auto r = io::ByteReader::from_file(path);
    r.expect_magic("CKPT");
    const auto version_at = r.offset();
    if (r.get<std::uint16_t>("version") != checkpoint_version) throw FormatError("unsupported checkpoint version", version_at);
    const auto hash_at = r.offset();
    if (r.get<std::uint64_t>("config hash") != cfg.hash()) {
        throw FormatError("checkpoint was written for a different model configuration", hash_at);
    }
    Rng dummy(0);
    ModelParams params = init_params(cfg, dummy);
    auto named = params.named();
    const auto count_at = r.offset();
    if (r.get<std::uint32_t>("tensor count") != named.size()) throw FormatError("tensor count mismatch", count_at);
    for (auto& [name, t] : named) {
        const auto name_at = r.offset();
        if (r.get_string("tensor name") != name) throw FormatError("expected tensor " + name, name_at);
        const auto rank = r.get<std::uint32_t>("rank");
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>("dim");
        if (shape != t.shape()) throw FormatError("shape mismatch for " + name, name_at);
        r.need(t.numel() * 8, "tensor payload");
        for (auto& v : t.mutable_data()) v = r.get<double>("value");
    }
    r.expect_end();
    return params;
}

} // namespace ecgstress

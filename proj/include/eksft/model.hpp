#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/errors.hpp"
#include "eksft/hash.hpp"
#include "eksft/numerics.hpp"
#include "eksft/rng.hpp"

namespace eksft {

inline constexpr double kInitStd = 0.02;

struct ModelConfig {
    std::size_t vocab_size = 32;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t context_len = 128;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t mlp_dim() const { return 4 * d_model; }

    void validate() const {
        if (vocab_size < 8) {
            throw ConfigError("vocab_size must be at least 8 to hold the special tokens");
        }
        if (d_model == 0 || n_layers == 0 || n_heads == 0 || context_len == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model (" + std::to_string(d_model) +
                              ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
        }
    }

    // Identifies the architecture (not the seed); checkpoints and drift
    // comparisons require equal hashes.
    std::uint64_t architecture_hash() const {
        const std::string canon = "v=" + std::to_string(vocab_size) +
                                  ";d=" + std::to_string(d_model) +
                                  ";l=" + std::to_string(n_layers) +
                                  ";h=" + std::to_string(n_heads) +
                                  ";c=" + std::to_string(context_len);
        return fnv1a64(canon);
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                       {"context_len", c.context_len}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.context_len = j.value("context_len", d.context_len);
    c.seed = j.value("seed", d.seed);
}

struct TensorSlot {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Flat offsets of every tensor, resolved once per config.
struct LayerOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_g, ln2_b, fc_w, fc_b, fcproj_w, fcproj_b;
};

struct ParamOffsets {
    std::size_t wte, wpe;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_g, lnf_b, head_w;
};

// All learnable weights in one contiguous f64 buffer with named views.
// Gradients and optimizer moments use the same layout.
class ParameterSet {
public:
    ParameterSet() = default;

    explicit ParameterSet(const ModelConfig& config) : config_(config) {
        config_.validate();
        const std::size_t d = config.d_model;
        const std::size_t v = config.vocab_size;
        const std::size_t m = config.mlp_dim();
        auto add = [&](std::string name, std::vector<std::size_t> shape) {
            std::size_t n = 1;
            for (auto e : shape) {
                n *= e;
            }
            slots_.push_back({std::move(name), std::move(shape), total_, n});
            total_ += n;
            return slots_.back().offset;
        };
        offsets_.wte = add("wte", {v, d});
        offsets_.wpe = add("wpe", {config.context_len, d});
        for (std::size_t l = 0; l < config.n_layers; ++l) {
            const std::string p = "h." + std::to_string(l) + ".";
            LayerOffsets o{};
            o.ln1_g = add(p + "ln1.g", {d});
            o.ln1_b = add(p + "ln1.b", {d});
            o.qkv_w = add(p + "attn.qkv.w", {d, 3 * d});
            o.qkv_b = add(p + "attn.qkv.b", {3 * d});
            o.proj_w = add(p + "attn.proj.w", {d, d});
            o.proj_b = add(p + "attn.proj.b", {d});
            o.ln2_g = add(p + "ln2.g", {d});
            o.ln2_b = add(p + "ln2.b", {d});
            o.fc_w = add(p + "mlp.fc.w", {d, m});
            o.fc_b = add(p + "mlp.fc.b", {m});
            o.fcproj_w = add(p + "mlp.proj.w", {m, d});
            o.fcproj_b = add(p + "mlp.proj.b", {d});
            offsets_.layers.push_back(o);
        }
        offsets_.lnf_g = add("lnf.g", {d});
        offsets_.lnf_b = add("lnf.b", {d});
        offsets_.head_w = add("head.w", {d, v});
        data_.assign(total_, 0.0);
    }

    static ParameterSet zeros_like(const ParameterSet& other) {
        ParameterSet p = other;
        std::fill(p.data_.begin(), p.data_.end(), 0.0);
        return p;
    }

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
    const ParamOffsets& offsets() const noexcept { return offsets_; }
    std::size_t size() const noexcept { return total_; }
    std::uint64_t config_hash() const { return config_.architecture_hash(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* ptr(std::size_t offset) noexcept { return data_.data() + offset; }
    const double* ptr(std::size_t offset) const noexcept { return data_.data() + offset; }

    const TensorSlot& slot(std::string_view name) const {
        for (const auto& s : slots_) {
            if (s.name == name) {
                return s;
            }
        }
        throw InputError("unknown parameter tensor '" + std::string(name) + "'");
    }

    std::span<double> view(std::string_view name) {
        const auto& s = slot(name);
        return {data_.data() + s.offset, s.size};
    }
    std::span<const double> view(std::string_view name) const {
        const auto& s = slot(name);
        return {data_.data() + s.offset, s.size};
    }

    Tensor tensor(std::string_view name) const {
        const auto& s = slot(name);
        return Tensor(s.shape, std::vector<double>(data_.begin() + static_cast<long>(s.offset),
                                                   data_.begin() +
                                                       static_cast<long>(s.offset + s.size)));
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    // Free-form tag carried into checkpoints (e.g. "init", "sft:step=64").
    std::string version = "init";

    friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
        return a.config_ == b.config_ && a.data_ == b.data_;
    }

private:
    ModelConfig config_;
    std::vector<TensorSlot> slots_;
    ParamOffsets offsets_{};
    std::size_t total_ = 0;
    std::vector<double> data_;
};

inline bool is_gain(const std::string& name) {
    return name.ends_with(".g");
}
inline bool is_bias(const std::string& name) {
    return name.ends_with(".b");
}

// Weights ~ N(0, 0.02), gains 1, biases 0, drawn in slot order from the
// config seed.
inline ParameterSet init_parameters(const ModelConfig& config) {
    config.validate();
    ParameterSet p(config);
    Rng rng(config.seed);
    for (const auto& s : p.slots()) {
        auto dst = p.view(s.name);
        if (is_gain(s.name)) {
            std::fill(dst.begin(), dst.end(), 1.0);
        } else if (is_bias(s.name)) {
            std::fill(dst.begin(), dst.end(), 0.0);
        } else {
            for (auto& x : dst) {
                x = rng.normal(0.0, kInitStd);
            }
        }
    }
    p.version = "init";
    return p;
}

// Frozen copy of a policy taken before fine-tuning; the KL anchor.
class ReferenceModel {
public:
    explicit ReferenceModel(ParameterSet params) : params_(std::move(params)) {}
    const ParameterSet& params() const noexcept { return params_; }
    const ModelConfig& config() const noexcept { return params_.config(); }

private:
    ParameterSet params_;
};

inline ReferenceModel snapshot_reference(const ParameterSet& params) {
    if (!params.all_finite()) {
        throw NumericError("cannot snapshot non-finite parameters");
    }
    return ReferenceModel(params);
}

// Activations kept from the forward pass for the backward pass.
struct ForwardCache {
    struct Layer {
        std::vector<double> x_in;
        std::vector<double> ln1, ln1_mean, ln1_rstd;
        std::vector<double> qkv;
        std::vector<double> att;  // [B, H, L, L] softmax weights (causal)
        std::vector<double> attn_out;
        std::vector<double> x_mid;
        std::vector<double> ln2, ln2_mean, ln2_rstd;
        std::vector<double> fc_pre, fc_act;
    };
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> ids;
    std::vector<Layer> layers;
    std::vector<double> x_final, lnf, lnf_mean, lnf_rstd;
};

struct ForwardResult {
    Tensor logits;  // [B, L, V]
    ForwardCache cache;
};

inline void check_token_grid(const ModelConfig& c, std::size_t batch, std::size_t length,
                             std::span<const int> ids) {
    if (batch == 0 || length == 0 || ids.size() != batch * length) {
        throw DimensionError("token grid must be a non-empty batch x length array");
    }
    if (length > c.context_len) {
        throw LengthError("sequence length " + std::to_string(length) + " exceeds context " +
                          std::to_string(c.context_len));
    }
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(c.vocab_size));
        }
    }
}

namespace detail {

inline void attention_forward(double* out, double* att, const double* qkv, std::size_t B,
                              std::size_t L, std::size_t d, std::size_t H) {
    const std::size_t hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t row = 3 * d;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < L; ++t) {
                const double* q = qkv + (b * L + t) * row + h * hd;
                double* a = att + ((b * H + h) * L + t) * L;
                double mx = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = qkv + (b * L + s) * row + d + h * hd;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dot += q[i] * k[i];
                    }
                    a[s] = dot * scale;
                    mx = std::max(mx, a[s]);
                }
                double sum = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    a[s] = std::exp(a[s] - mx);
                    sum += a[s];
                }
                const double inv = 1.0 / sum;
                for (std::size_t s = 0; s <= t; ++s) {
                    a[s] *= inv;
                }
                for (std::size_t s = t + 1; s < L; ++s) {
                    a[s] = 0.0;
                }
                double* o = out + (b * L + t) * d + h * hd;
                std::fill(o, o + hd, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = qkv + (b * L + s) * row + 2 * d + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) {
                        o[i] += a[s] * v[i];
                    }
                }
            }
        }
    }
}

inline void attention_backward(double* dqkv, const double* dout, const double* att,
                               const double* qkv, std::size_t B, std::size_t L, std::size_t d,
                               std::size_t H) {
    const std::size_t hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t row = 3 * d;
    std::vector<double> datt(L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < L; ++t) {
                const double* a = att + ((b * H + h) * L + t) * L;
                const double* go = dout + (b * L + t) * d + h * hd;
                double weighted = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = qkv + (b * L + s) * row + 2 * d + h * hd;
                    double* dv = dqkv + (b * L + s) * row + 2 * d + h * hd;
                    double g = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        g += go[i] * v[i];
                        dv[i] += a[s] * go[i];
                    }
                    datt[s] = g;
                    weighted += a[s] * g;
                }
                const double* q = qkv + (b * L + t) * row + h * hd;
                double* dq = dqkv + (b * L + t) * row + h * hd;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double ds = a[s] * (datt[s] - weighted) * scale;
                    const double* k = qkv + (b * L + s) * row + d + h * hd;
                    double* dk = dqkv + (b * L + s) * row + d + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dq[i] += ds * k[i];
                        dk[i] += ds * q[i];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Causal forward pass over a right-padded [batch x length] grid of ids.
// Position t only attends to positions <= t, so padding never changes the
// logits of earlier positions.
inline ForwardResult forward(const ParameterSet& p, std::size_t batch, std::size_t length,
                             std::span<const int> ids) {
    const auto& c = p.config();
    check_token_grid(c, batch, length, ids);
    const std::size_t B = batch, L = length, d = c.d_model, H = c.n_heads, V = c.vocab_size;
    const std::size_t m = c.mlp_dim();
    const std::size_t N = B * L;
    const auto& off = p.offsets();

    ForwardResult r{Tensor({B, L, V}), {}};
    ForwardCache& cache = r.cache;
    cache.batch = B;
    cache.length = L;
    cache.ids.assign(ids.begin(), ids.end());

    std::vector<double> x(N * d);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            const double* te = p.ptr(off.wte) + static_cast<std::size_t>(ids[b * L + t]) * d;
            const double* pe = p.ptr(off.wpe) + t * d;
            double* xo = x.data() + (b * L + t) * d;
            for (std::size_t i = 0; i < d; ++i) {
                xo[i] = te[i] + pe[i];
            }
        }
    }

    cache.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& o = off.layers[l];
        auto& lc = cache.layers[l];
        lc.x_in = x;
        lc.ln1.resize(N * d);
        lc.ln1_mean.resize(N);
        lc.ln1_rstd.resize(N);
        kernels::layernorm_forward(lc.ln1.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(),
                                   x.data(), p.ptr(o.ln1_g), p.ptr(o.ln1_b), N, d);
        lc.qkv.resize(N * 3 * d);
        kernels::matmul_forward(lc.qkv.data(), lc.ln1.data(), p.ptr(o.qkv_w), p.ptr(o.qkv_b), N,
                                d, 3 * d);
        lc.att.resize(B * H * L * L);
        lc.attn_out.resize(N * d);
        detail::attention_forward(lc.attn_out.data(), lc.att.data(), lc.qkv.data(), B, L, d, H);
        std::vector<double> proj(N * d);
        kernels::matmul_forward(proj.data(), lc.attn_out.data(), p.ptr(o.proj_w),
                                p.ptr(o.proj_b), N, d, d);
        for (std::size_t i = 0; i < N * d; ++i) {
            x[i] += proj[i];
        }
        lc.x_mid = x;
        lc.ln2.resize(N * d);
        lc.ln2_mean.resize(N);
        lc.ln2_rstd.resize(N);
        kernels::layernorm_forward(lc.ln2.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(),
                                   x.data(), p.ptr(o.ln2_g), p.ptr(o.ln2_b), N, d);
        lc.fc_pre.resize(N * m);
        kernels::matmul_forward(lc.fc_pre.data(), lc.ln2.data(), p.ptr(o.fc_w), p.ptr(o.fc_b), N,
                                d, m);
        lc.fc_act.resize(N * m);
        kernels::gelu_forward(lc.fc_act.data(), lc.fc_pre.data(), N * m);
        std::vector<double> mlp(N * d);
        kernels::matmul_forward(mlp.data(), lc.fc_act.data(), p.ptr(o.fcproj_w),
                                p.ptr(o.fcproj_b), N, m, d);
        for (std::size_t i = 0; i < N * d; ++i) {
            x[i] += mlp[i];
        }
    }

    cache.x_final = x;
    cache.lnf.resize(N * d);
    cache.lnf_mean.resize(N);
    cache.lnf_rstd.resize(N);
    kernels::layernorm_forward(cache.lnf.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(),
                               x.data(), p.ptr(off.lnf_g), p.ptr(off.lnf_b), N, d);
    kernels::matmul_forward(r.logits.data().data(), cache.lnf.data(), p.ptr(off.head_w), nullptr,
                            N, d, V);
    r.logits.require_finite("model logits");
    return r;
}

// Logits only; used for the reference model and evaluation.
inline Tensor forward_logits(const ParameterSet& p, std::size_t batch, std::size_t length,
                             std::span<const int> ids) {
    return forward(p, batch, length, ids).logits;
}

// Gradient of a scalar loss w.r.t. every parameter given dL/dlogits.
inline ParameterSet backward(const ParameterSet& p, const ForwardCache& cache,
                             const Tensor& dlogits) {
    const auto& c = p.config();
    const std::size_t B = cache.batch, L = cache.length, d = c.d_model, H = c.n_heads,
                      V = c.vocab_size, m = c.mlp_dim();
    const std::size_t N = B * L;
    if (dlogits.numel() != N * V) {
        throw DimensionError("backward: logit gradient does not match the cached forward pass");
    }
    const auto& off = p.offsets();
    ParameterSet g = ParameterSet::zeros_like(p);

    std::vector<double> dlnf(N * d, 0.0);
    kernels::matmul_backward(dlnf.data(), g.ptr(off.head_w), nullptr, dlogits.data().data(),
                             cache.lnf.data(), p.ptr(off.head_w), N, d, V);
    std::vector<double> dx(N * d, 0.0);
    kernels::layernorm_backward(dx.data(), g.ptr(off.lnf_g), g.ptr(off.lnf_b), dlnf.data(),
                                cache.x_final.data(), cache.lnf_mean.data(),
                                cache.lnf_rstd.data(), p.ptr(off.lnf_g), N, d);

    for (std::size_t li = c.n_layers; li-- > 0;) {
        const auto& o = off.layers[li];
        const auto& lc = cache.layers[li];
        // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
        std::vector<double> dact(N * m, 0.0);
        kernels::matmul_backward(dact.data(), g.ptr(o.fcproj_w), g.ptr(o.fcproj_b), dx.data(),
                                 lc.fc_act.data(), p.ptr(o.fcproj_w), N, m, d);
        std::vector<double> dpre(N * m, 0.0);
        kernels::gelu_backward(dpre.data(), lc.fc_pre.data(), dact.data(), N * m);
        std::vector<double> dln2(N * d, 0.0);
        kernels::matmul_backward(dln2.data(), g.ptr(o.fc_w), g.ptr(o.fc_b), dpre.data(),
                                 lc.ln2.data(), p.ptr(o.fc_w), N, d, m);
        kernels::layernorm_backward(dx.data(), g.ptr(o.ln2_g), g.ptr(o.ln2_b), dln2.data(),
                                    lc.x_mid.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(),
                                    p.ptr(o.ln2_g), N, d);
        // Attention branch: x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        std::vector<double> dattn(N * d, 0.0);
        kernels::matmul_backward(dattn.data(), g.ptr(o.proj_w), g.ptr(o.proj_b), dx.data(),
                                 lc.attn_out.data(), p.ptr(o.proj_w), N, d, d);
        std::vector<double> dqkv(N * 3 * d, 0.0);
        detail::attention_backward(dqkv.data(), dattn.data(), lc.att.data(), lc.qkv.data(), B, L,
                                   d, H);
        std::vector<double> dln1(N * d, 0.0);
        kernels::matmul_backward(dln1.data(), g.ptr(o.qkv_w), g.ptr(o.qkv_b), dqkv.data(),
                                 lc.ln1.data(), p.ptr(o.qkv_w), N, d, 3 * d);
        kernels::layernorm_backward(dx.data(), g.ptr(o.ln1_g), g.ptr(o.ln1_b), dln1.data(),
                                    lc.x_in.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(),
                                    p.ptr(o.ln1_g), N, d);
    }

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            const double* gx = dx.data() + (b * L + t) * d;
            double* te = g.ptr(off.wte) + static_cast<std::size_t>(cache.ids[b * L + t]) * d;
            double* pe = g.ptr(off.wpe) + t * d;
            for (std::size_t i = 0; i < d; ++i) {
                te[i] += gx[i];
                pe[i] += gx[i];
            }
        }
    }
    return g;
}

// Single-sequence incremental decoder with a key/value cache. Produces the
// same logits as `forward` on the growing prefix (identical arithmetic order).
class Decoder {
public:
    explicit Decoder(const ParameterSet& params) : p_(params) {
        const auto& c = p_.config();
        keys_.assign(c.n_layers, std::vector<double>(c.context_len * c.d_model));
        values_.assign(c.n_layers, std::vector<double>(c.context_len * c.d_model));
    }

    std::size_t position() const noexcept { return pos_; }

    void reset() { pos_ = 0; }

    // Feeds one token and returns the next-token logits at that position.
    std::vector<double> step(int token) {
        const auto& c = p_.config();
        if (pos_ >= c.context_len) {
            throw LengthError("decoder exceeded context length " + std::to_string(c.context_len));
        }
        if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
            throw InputError("token id " + std::to_string(token) + " outside vocabulary");
        }
        const std::size_t d = c.d_model, H = c.n_heads, hd = c.head_dim(), m = c.mlp_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        const auto& off = p_.offsets();
        const std::size_t t = pos_;

        std::vector<double> x(d), ln(d), qkv(3 * d), attn(d), tmp(d), fc(m), act(m);
        double mean = 0.0, rstd = 0.0;
        const double* te = p_.ptr(off.wte) + static_cast<std::size_t>(token) * d;
        const double* pe = p_.ptr(off.wpe) + t * d;
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = te[i] + pe[i];
        }
        std::vector<double> a(t + 1);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const auto& o = off.layers[l];
            kernels::layernorm_forward(ln.data(), &mean, &rstd, x.data(), p_.ptr(o.ln1_g),
                                       p_.ptr(o.ln1_b), 1, d);
            kernels::matmul_forward(qkv.data(), ln.data(), p_.ptr(o.qkv_w), p_.ptr(o.qkv_b), 1, d,
                                    3 * d);
            std::copy(qkv.begin() + static_cast<long>(d), qkv.begin() + static_cast<long>(2 * d),
                      keys_[l].begin() + static_cast<long>(t * d));
            std::copy(qkv.begin() + static_cast<long>(2 * d), qkv.end(),
                      values_[l].begin() + static_cast<long>(t * d));
            for (std::size_t h = 0; h < H; ++h) {
                const double* q = qkv.data() + h * hd;
                double mx = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = keys_[l].data() + s * d + h * hd;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dot += q[i] * k[i];
                    }
                    a[s] = dot * scale;
                    mx = std::max(mx, a[s]);
                }
                double sum = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    a[s] = std::exp(a[s] - mx);
                    sum += a[s];
                }
                const double inv = 1.0 / sum;
                for (std::size_t s = 0; s <= t; ++s) {
                    a[s] *= inv;
                }
                double* out = attn.data() + h * hd;
                std::fill(out, out + hd, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = values_[l].data() + s * d + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) {
                        out[i] += a[s] * v[i];
                    }
                }
            }
            kernels::matmul_forward(tmp.data(), attn.data(), p_.ptr(o.proj_w), p_.ptr(o.proj_b),
                                    1, d, d);
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += tmp[i];
            }
            kernels::layernorm_forward(ln.data(), &mean, &rstd, x.data(), p_.ptr(o.ln2_g),
                                       p_.ptr(o.ln2_b), 1, d);
            kernels::matmul_forward(fc.data(), ln.data(), p_.ptr(o.fc_w), p_.ptr(o.fc_b), 1, d, m);
            kernels::gelu_forward(act.data(), fc.data(), m);
            kernels::matmul_forward(tmp.data(), act.data(), p_.ptr(o.fcproj_w),
                                    p_.ptr(o.fcproj_b), 1, m, d);
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += tmp[i];
            }
        }
        kernels::layernorm_forward(ln.data(), &mean, &rstd, x.data(), p_.ptr(off.lnf_g),
                                   p_.ptr(off.lnf_b), 1, d);
        std::vector<double> logits(c.vocab_size);
        kernels::matmul_forward(logits.data(), ln.data(), p_.ptr(off.head_w), nullptr, 1, d,
                                c.vocab_size);
        ++pos_;
        for (double v : logits) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite decoder logits");
            }
        }
        return logits;
    }

private:
    const ParameterSet& p_;
    std::vector<std::vector<double>> keys_;
    std::vector<std::vector<double>> values_;
    std::size_t pos_ = 0;
};

}  // namespace eksft

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eksft/errors.hpp"

namespace eksft {

inline constexpr double kLayerNormEps = 1e-5;

// Dense row-major f64 tensor. Shapes are small lists of positive extents.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(numel_of(shape_), fill);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (numel_of(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape product " +
                                 std::to_string(numel_of(shape_)));
        }
    }

    // Convenience for small literal matrices in tests and examples.
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }

    // Extent of the last axis and the number of rows before it.
    std::size_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t outer_rows() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * last_dim() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * last_dim() + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * last_dim(), last_dim()}; }
    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * last_dim(), last_dim()};
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void require_finite(const char* where) const {
        if (!all_finite()) {
            throw NumericError(std::string("non-finite value in ") + where);
        }
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    void validate_shape() const {
        if (shape_.empty()) {
            throw DimensionError("tensor shape must have at least one axis");
        }
        for (auto e : shape_) {
            if (e == 0) {
                throw DimensionError("tensor extents must be positive");
            }
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Raw kernels over contiguous row-major buffers. These do no validation and
// are what the model's forward and backward passes call directly. Every
// reduction runs sequentially in index order so results are bit-reproducible.
// Backward kernels accumulate (+=) into their gradient outputs.
namespace kernels {

// out[m x n] = a[m x k] * b[k x n] (+ bias[n])
inline void matmul_forward(double* out, const double* a, const double* b, const double* bias,
                           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* o = out + i * n;
        if (bias != nullptr) {
            std::copy(bias, bias + n, o);
        } else {
            std::fill(o, o + n, 0.0);
        }
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                o[j] += av * bp[j];
            }
        }
    }
}

inline void matmul_backward(double* da, double* db, double* dbias, const double* dout,
                            const double* a, const double* b, std::size_t m, std::size_t k,
                            std::size_t n) {
    std::vector<double> bt;
    if (da != nullptr) {
        bt.resize(k * n);
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t j = 0; j < n; ++j) {
                bt[j * k + p] = b[p * n + j];
            }
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double* go = dout + i * n;
        if (da != nullptr) {
            double* dai = da + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const double gj = go[j];
                const double* btj = bt.data() + j * k;
                for (std::size_t p = 0; p < k; ++p) {
                    dai[p] += gj * btj[p];
                }
            }
        }
        if (db != nullptr) {
            const double* ai = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ai[p];
                double* dbp = db + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    dbp[j] += av * go[j];
                }
            }
        }
        if (dbias != nullptr) {
            for (std::size_t j = 0; j < n; ++j) {
                dbias[j] += go[j];
            }
        }
    }
}

// Per-row layer norm over d features; mean and rstd are cached per row.
inline void layernorm_forward(double* out, double* mean, double* rstd, const double* x,
                              const double* gain, const double* bias, std::size_t rows,
                              std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mu += xr[i];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        double* o = out + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            o[i] = gain != nullptr ? xhat * gain[i] + bias[i] : xhat;
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

inline void layernorm_backward(double* dx, double* dgain, double* dbias, const double* dout,
                               const double* x, const double* mean, const double* rstd,
                               const double* gain, std::size_t rows, std::size_t d) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* go = dout + r * d;
        const double* xr = x + r * d;
        const double mu = mean[r];
        const double rs = rstd[r];
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            const double dxhat = gain != nullptr ? go[i] * gain[i] : go[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            const double dxhat = gain != nullptr ? go[i] * gain[i] : go[i];
            if (dgain != nullptr) {
                dgain[i] += go[i] * xhat;
                dbias[i] += go[i];
            }
            dx[r * d + i] += rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

// tanh approximation of GELU.
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)

inline void gelu_forward(double* out, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + 0.044715 * v * v * v)));
    }
}

inline void gelu_backward(double* dx, const double* x, const double* dout, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        const double inner = kGeluScale * (v + 0.044715 * v * v * v);
        const double t = std::tanh(inner);
        const double sech2 = 1.0 - t * t;
        const double local =
            0.5 * (1.0 + t) + 0.5 * v * sech2 * kGeluScale * (1.0 + 3.0 * 0.044715 * v * v);
        dx[i] += local * dout[i];
    }
}

// Stable log-softmax of one row: z - max - log(sum(exp(z - max))).
inline void log_softmax_row(double* out, const double* z, std::size_t v) {
    double mx = z[0];
    for (std::size_t j = 1; j < v; ++j) {
        mx = std::max(mx, z[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
        s += std::exp(z[j] - mx);
    }
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) {
        out[j] = z[j] - lse;
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Checked tensor-level API.

inline void require_finite(const Tensor& t, const char* where) { t.require_finite(where); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects rank-2 operands");
    }
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul inner dimensions differ: " + std::to_string(a.dim(1)) +
                             " vs " + std::to_string(b.dim(0)));
    }
    require_finite(a, "matmul lhs");
    require_finite(b, "matmul rhs");
    Tensor out({a.dim(0), b.dim(1)});
    kernels::matmul_forward(out.data().data(), a.data().data(), b.data().data(), nullptr,
                            a.dim(0), a.dim(1), b.dim(1));
    return out;
}

struct MatmulGrads {
    Tensor da;
    Tensor db;
};

inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout) {
    if (a.rank() != 2 || b.rank() != 2 || dout.rank() != 2 || a.dim(1) != b.dim(0) ||
        dout.dim(0) != a.dim(0) || dout.dim(1) != b.dim(1)) {
        throw DimensionError("matmul_backward shape mismatch");
    }
    require_finite(dout, "matmul_backward upstream gradient");
    MatmulGrads g{Tensor(a.shape()), Tensor(b.shape())};
    kernels::matmul_backward(g.da.data().data(), g.db.data().data(), nullptr,
                             dout.data().data(), a.data().data(), b.data().data(), a.dim(0),
                             a.dim(1), b.dim(1));
    return g;
}

inline Tensor log_softmax(const Tensor& z) {
    if (z.last_dim() < 2) {
        throw DimensionError("log_softmax needs a last dimension of at least 2");
    }
    require_finite(z, "log_softmax input");
    Tensor out(z.shape());
    const std::size_t v = z.last_dim();
    for (std::size_t r = 0; r < z.outer_rows(); ++r) {
        kernels::log_softmax_row(out.row(r).data(), z.row(r).data(), v);
    }
    return out;
}

// Given y = log_softmax(z) and dL/dy, returns dL/dz = dy - softmax(z) * sum(dy).
inline Tensor log_softmax_backward(const Tensor& y, const Tensor& dy) {
    if (y.shape() != dy.shape()) {
        throw DimensionError("log_softmax_backward shape mismatch");
    }
    Tensor dz(y.shape());
    for (std::size_t r = 0; r < y.outer_rows(); ++r) {
        const auto yr = y.row(r);
        const auto gr = dy.row(r);
        double s = 0.0;
        for (double g : gr) {
            s += g;
        }
        auto out = dz.row(r);
        for (std::size_t j = 0; j < yr.size(); ++j) {
            out[j] = gr[j] - std::exp(yr[j]) * s;
        }
    }
    return dz;
}

struct LayerNormOutput {
    Tensor y;
    std::vector<double> mean;
    std::vector<double> rstd;
};

inline LayerNormOutput layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = x.last_dim();
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm affine parameters must match the feature dimension");
    }
    require_finite(x, "layer_norm input");
    LayerNormOutput o{Tensor(x.shape()), std::vector<double>(x.outer_rows()),
                      std::vector<double>(x.outer_rows())};
    kernels::layernorm_forward(o.y.data().data(), o.mean.data(), o.rstd.data(), x.data().data(),
                               gain.data().data(), bias.data().data(), x.outer_rows(), d);
    return o;
}

struct LayerNormGrads {
    Tensor dx;
    Tensor dgain;
    Tensor dbias;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gain,
                                          const LayerNormOutput& fwd, const Tensor& dy) {
    if (dy.shape() != x.shape() || gain.numel() != x.last_dim()) {
        throw DimensionError("layer_norm_backward shape mismatch");
    }
    const std::size_t d = x.last_dim();
    LayerNormGrads g{Tensor(x.shape()), Tensor({d}), Tensor({d})};
    kernels::layernorm_backward(g.dx.data().data(), g.dgain.data().data(), g.dbias.data().data(),
                                dy.data().data(), x.data().data(), fwd.mean.data(),
                                fwd.rstd.data(), gain.data().data(), x.outer_rows(), d);
    return g;
}

inline Tensor gelu(const Tensor& x) {
    require_finite(x, "gelu input");
    Tensor out(x.shape());
    kernels::gelu_forward(out.data().data(), x.data().data(), x.numel());
    return out;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
    if (x.shape() != dy.shape()) {
        throw DimensionError("gelu_backward shape mismatch");
    }
    Tensor dx(x.shape());
    kernels::gelu_backward(dx.data().data(), x.data().data(), dy.data().data(), x.numel());
    return dx;
}

inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) {
        throw DimensionError("embedding table must be rank 2");
    }
    if (ids.empty()) {
        throw DimensionError("embedding lookup needs at least one id");
    }
    const std::size_t d = table.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
            throw InputError("embedding id " + std::to_string(ids[i]) + " out of range");
        }
        const auto src = table.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

// Gradient w.r.t. the table; rows referenced more than once accumulate.
inline Tensor embedding_backward(std::span<const int> ids, const Tensor& dy,
                                 std::size_t table_rows) {
    if (dy.rank() != 2 || dy.dim(0) != ids.size()) {
        throw DimensionError("embedding_backward shape mismatch");
    }
    Tensor dtable({table_rows, dy.dim(1)});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto dst = dtable.row(static_cast<std::size_t>(ids[i]));
        const auto src = dy.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) {
            dst[j] += src[j];
        }
    }
    return dtable;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

// Max over the checked coordinates of |analytic - central FD| / (|FD| + 1e-8).
// `f` is evaluated at perturbed copies of `point`; an empty `coords` checks
// every coordinate.
template <typename F>
double grad_check(F&& f, const Tensor& point, const Tensor& analytic, double h = 1e-4,
                  std::span<const std::size_t> coords = {}) {
    if (analytic.shape() != point.shape()) {
        throw DimensionError("grad_check: analytic gradient shape differs from point");
    }
    Tensor probe = point;
    double worst = 0.0;
    auto check = [&](std::size_t i) {
        const double x0 = probe[i];
        probe[i] = x0 + h;
        const double fp = f(static_cast<const Tensor&>(probe));
        probe[i] = x0 - h;
        const double fm = f(static_cast<const Tensor&>(probe));
        probe[i] = x0;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: function not finite near point");
        }
        worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    };
    if (coords.empty()) {
        for (std::size_t i = 0; i < point.numel(); ++i) {
            check(i);
        }
    } else {
        for (auto i : coords) {
            check(i);
        }
    }
    return worst;
}

}  // namespace eksft

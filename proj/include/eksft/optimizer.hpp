#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "eksft/errors.hpp"
#include "eksft/model.hpp"

namespace eksft {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamWState {
    ParameterSet m;
    ParameterSet v;
    std::size_t step = 0;

    static AdamWState like(const ParameterSet& p) {
        return {ParameterSet::zeros_like(p), ParameterSet::zeros_like(p), 0};
    }
};

// Decoupled weight decay:
//   θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)
inline void adamw_step(ParameterSet& params, const ParameterSet& grads, AdamWState& state,
                       double lr, const AdamWConfig& cfg = {}) {
    if (grads.size() != params.size() || state.m.size() != params.size() ||
        state.v.size() != params.size()) {
        throw DimensionError("adamw_step: parameter, gradient and state sizes differ");
    }
    const auto g = grads.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
            std::string where = "?";
            for (const auto& s : params.slots()) {
                if (i >= s.offset && i < s.offset + s.size) {
                    where = s.name + "[" + std::to_string(i - s.offset) + "]";
                }
            }
            throw NumericError("non-finite gradient at " + where + " (value " +
                               std::to_string(g[i]) + ", optimizer step " +
                               std::to_string(state.step + 1) + "); step aborted");
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto p = params.values();
    auto m = state.m.values();
    auto v = state.v.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= lr * cfg.weight_decay * p[i];
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace eksft

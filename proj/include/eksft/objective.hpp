#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eksft/errors.hpp"
#include "eksft/log.hpp"
#include "eksft/numerics.hpp"
#include "eksft/rng.hpp"
#include "eksft/selection.hpp"

namespace eksft {

// Next-token targets aligned with a [batch x length x V] logit tensor. Only
// positions with valid == 1 (response tokens) take part in any objective.
struct LabelGrid {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> targets;
    std::vector<std::uint8_t> valid;

    std::size_t rows() const { return batch * length; }
};

struct LossBreakdown {
    double ce_masked = 0.0;
    double entropy_reg = 0.0;  // mean entropy over the regularized set
    double kl_reg = 0.0;       // mean KL over the regularized set
    double total = 0.0;
    std::size_t n_supervised = 0;
    std::size_t n_masked = 0;
    std::size_t n_regularized = 0;
    double lambda_h = 0.0;
    double lambda_kl = 0.0;
};

struct ObjectiveResult {
    LossBreakdown loss;
    Tensor dlogits;
    MaskSet mask;
    std::vector<TokenStats> stats;  // empty unless the objective ranks tokens
};

struct ScalarGrad {
    double value = 0.0;
    Tensor dlogits;
};

struct ValidToken {
    std::size_t row = 0;
    TokenRef ref;
};

// Valid positions in row-major order; token_position counts valid tokens
// within each sequence.
inline std::vector<ValidToken> valid_tokens(const LabelGrid& labels) {
    std::vector<ValidToken> out;
    for (std::size_t b = 0; b < labels.batch; ++b) {
        std::uint32_t pos = 0;
        for (std::size_t t = 0; t < labels.length; ++t) {
            const std::size_t r = b * labels.length + t;
            if (labels.valid[r] != 0) {
                out.push_back({r, {static_cast<std::uint32_t>(b), pos++}});
            }
        }
    }
    return out;
}

namespace detail {

inline void check_labels(const Tensor& logits, const LabelGrid& labels) {
    if (labels.targets.size() != labels.rows() || labels.valid.size() != labels.rows()) {
        throw DimensionError("label grid arrays do not match batch x length");
    }
    if (logits.outer_rows() != labels.rows() || logits.last_dim() < 2) {
        throw DimensionError("logits rows (" + std::to_string(logits.outer_rows()) +
                             ") do not match label grid rows (" +
                             std::to_string(labels.rows()) + ")");
    }
    const std::size_t V = logits.last_dim();
    for (std::size_t r = 0; r < labels.rows(); ++r) {
        if (labels.valid[r] != 0 &&
            (labels.targets[r] < 0 || static_cast<std::size_t>(labels.targets[r]) >= V)) {
            throw InputError("target id " + std::to_string(labels.targets[r]) +
                             " outside vocabulary");
        }
    }
    logits.require_finite("objective logits");
}

inline void check_reference(const Tensor& logits, const Tensor& reference) {
    if (reference.shape() != logits.shape()) {
        throw InputError("reference logits do not match the policy batch");
    }
    reference.require_finite("reference logits");
}

inline void check_lambdas(double lambda_h, double lambda_kl) {
    if (!(lambda_h >= 0.0) || !(lambda_kl >= 0.0)) {
        throw ConfigError("regularization weights must be non-negative");
    }
}

// Log-softmax rows for the valid tokens only, [|T| x V].
inline std::vector<double> valid_log_probs(const Tensor& logits,
                                           std::span<const ValidToken> tokens) {
    const std::size_t V = logits.last_dim();
    std::vector<double> out(tokens.size() * V);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        kernels::log_softmax_row(out.data() + i * V, logits.row(tokens[i].row).data(), V);
    }
    return out;
}

// Per-token roles for the shared loss arithmetic.
struct TokenRoles {
    std::vector<std::uint8_t> ce;      // supervised by cross-entropy
    std::vector<double> ce_weight;     // constant per-token CE weight
    std::vector<std::uint8_t> reg;     // entropy/KL regularized
};

// total = mean_{ce}(w * -log p(y)) - lambda_h * mean_{reg}(H) + lambda_kl * mean_{reg}(KL)
// with dL/dz computed in closed form per row:
//   CE       : (w / n_ce) (p - e_y)
//   entropy  : -lambda_h / n_reg * (-p_j (log p_j + H))
//   KL       :  lambda_kl / n_reg * p_j (log p_j - log q_j - KL)
// The regularizer terms never reference the target.
inline ObjectiveResult composite_loss(const Tensor& logits, const Tensor* reference,
                                      std::span<const ValidToken> tokens,
                                      const LabelGrid& labels, const TokenRoles& roles,
                                      double lambda_h, double lambda_kl,
                                      bool warn_on_empty_ce = true) {
    const std::size_t V = logits.last_dim();
    const std::size_t n = tokens.size();
    const auto lp = valid_log_probs(logits, tokens);
    std::vector<double> lref;
    if (reference != nullptr) {
        lref = valid_log_probs(*reference, tokens);
    }

    std::size_t n_ce = 0;
    std::size_t n_reg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        n_ce += roles.ce[i];
        n_reg += roles.reg[i];
    }

    ObjectiveResult res{{}, Tensor(logits.shape()), {}, {}};
    LossBreakdown& L = res.loss;
    L.lambda_h = lambda_h;
    L.lambda_kl = lambda_kl;
    L.n_supervised = n_ce;
    L.n_regularized = n_reg;

    if (n_ce == 0 && warn_on_empty_ce) {
        log::warn("cross-entropy set is empty; supervised loss defined as 0");
    }
    const double inv_ce = n_ce > 0 ? 1.0 / static_cast<double>(n_ce) : 0.0;
    const double inv_reg = n_reg > 0 ? 1.0 / static_cast<double>(n_reg) : 0.0;

    double ce_sum = 0.0;
    double h_sum = 0.0;
    double kl_sum = 0.0;
    std::vector<double> p(V);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = lp.data() + i * V;
        for (std::size_t j = 0; j < V; ++j) {
            p[j] = std::exp(row[j]);
        }
        double* g = res.dlogits.row(tokens[i].row).data();
        if (roles.ce[i] != 0) {
            const auto y = static_cast<std::size_t>(labels.targets[tokens[i].row]);
            const double w = roles.ce_weight.empty() ? 1.0 : roles.ce_weight[i];
            ce_sum += w * -row[y];
            const double scale = w * inv_ce;
            for (std::size_t j = 0; j < V; ++j) {
                g[j] += (p[j] - (j == y ? 1.0 : 0.0)) * scale;
            }
        }
        if (roles.reg[i] != 0) {
            const std::span<const double> rs(row, V);
            const double h = entropy_of(rs);
            h_sum += h;
            if (lambda_h != 0.0) {
                const double c = lambda_h * inv_reg;
                for (std::size_t j = 0; j < V; ++j) {
                    g[j] += c * p[j] * (row[j] + h);
                }
            }
            if (reference != nullptr) {
                const double* ref = lref.data() + i * V;
                double kl = 0.0;
                for (std::size_t j = 0; j < V; ++j) {
                    kl += p[j] * (row[j] - ref[j]);
                }
                kl_sum += kl_of(rs, std::span<const double>(ref, V));
                if (lambda_kl != 0.0) {
                    const double c = lambda_kl * inv_reg;
                    for (std::size_t j = 0; j < V; ++j) {
                        g[j] += c * p[j] * (row[j] - ref[j] - kl);
                    }
                }
            }
        }
    }
    L.ce_masked = ce_sum * inv_ce;
    L.entropy_reg = h_sum * inv_reg;
    L.kl_reg = kl_sum * inv_reg;
    L.total = L.ce_masked - lambda_h * L.entropy_reg + lambda_kl * L.kl_reg;
    return res;
}

inline std::vector<std::uint8_t> membership(std::span<const ValidToken> tokens,
                                            const std::vector<TokenRef>& sorted_set) {
    std::vector<std::uint8_t> in(tokens.size(), 0);
    std::size_t found = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (std::binary_search(sorted_set.begin(), sorted_set.end(), tokens[i].ref)) {
            in[i] = 1;
            ++found;
        }
    }
    if (found != sorted_set.size()) {
        throw InputError("mask refers to positions that are not valid response tokens");
    }
    return in;
}

inline std::vector<ValidToken> require_tokens(const LabelGrid& labels) {
    auto tokens = valid_tokens(labels);
    if (tokens.empty()) {
        throw DegenerateInputError("objective needs at least one valid response token");
    }
    return tokens;
}

}  // namespace detail

// Per-token entropy of the policy and KL to the reference, in batch order.
inline std::vector<TokenStats> token_stats(const Tensor& logits, const Tensor& reference,
                                           const LabelGrid& labels) {
    detail::check_labels(logits, labels);
    detail::check_reference(logits, reference);
    const auto tokens = valid_tokens(labels);
    const std::size_t V = logits.last_dim();
    const auto lp = detail::valid_log_probs(logits, tokens);
    const auto lref = detail::valid_log_probs(reference, tokens);
    std::vector<TokenStats> out(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::span<const double> row(lp.data() + i * V, V);
        const std::span<const double> ref(lref.data() + i * V, V);
        out[i] = {tokens[i].ref, detail::entropy_of(row), detail::kl_of(row, ref)};
    }
    return out;
}

// Mean negative log-likelihood over valid tokens.
inline ObjectiveResult sft_loss(const Tensor& logits, const LabelGrid& labels) {
    detail::check_labels(logits, labels);
    const auto tokens = detail::require_tokens(labels);
    detail::TokenRoles roles{std::vector<std::uint8_t>(tokens.size(), 1), {},
                             std::vector<std::uint8_t>(tokens.size(), 0)};
    return detail::composite_loss(logits, nullptr, tokens, labels, roles, 0.0, 0.0);
}

// Mean NLL over valid tokens outside mask.m_union; 0 (with a warning) when
// every valid token is masked.
inline double masked_ce(const Tensor& logits, const LabelGrid& labels, const MaskSet& mask) {
    detail::check_labels(logits, labels);
    const auto tokens = detail::require_tokens(labels);
    auto in_mask = detail::membership(tokens, mask.m_union);
    detail::TokenRoles roles{{}, {}, std::vector<std::uint8_t>(tokens.size(), 0)};
    for (auto m : in_mask) {
        roles.ce.push_back(m == 0 ? 1 : 0);
    }
    return detail::composite_loss(logits, nullptr, tokens, labels, roles, 0.0, 0.0)
        .loss.ce_masked;
}

// Mean entropy over the masked tokens (0 with zero gradient for an empty mask).
inline ScalarGrad entropy_reg(const Tensor& logits, const LabelGrid& labels,
                              const MaskSet& mask) {
    detail::check_labels(logits, labels);
    const auto tokens = valid_tokens(labels);
    detail::TokenRoles roles{std::vector<std::uint8_t>(tokens.size(), 0), {},
                             detail::membership(tokens, mask.m_union)};
    // The composite carries -lambda_h * H; negate to get the gradient of +mean(H).
    auto r = detail::composite_loss(logits, nullptr, tokens, labels, roles, 1.0, 0.0, false);
    ScalarGrad out{r.loss.entropy_reg, std::move(r.dlogits)};
    for (auto& g : out.dlogits.storage()) {
        g = -g;
    }
    return out;
}

// Mean KL(policy || reference) over the masked tokens. No gradient reaches
// the reference logits.
inline ScalarGrad kl_reg(const Tensor& logits, const Tensor& reference, const LabelGrid& labels,
                         const MaskSet& mask) {
    detail::check_labels(logits, labels);
    detail::check_reference(logits, reference);
    const auto tokens = valid_tokens(labels);
    detail::TokenRoles roles{std::vector<std::uint8_t>(tokens.size(), 0), {},
                             detail::membership(tokens, mask.m_union)};
    auto r = detail::composite_loss(logits, &reference, tokens, labels, roles, 0.0, 1.0, false);
    return {r.loss.kl_reg, std::move(r.dlogits)};
}

struct EksftParams {
    double rho = 0.2;
    double lambda_h = 0.05;
    double lambda_kl = 0.05;
};

// Masked CE on the complement of M = TopK_H ∪ TopK_KL, minus lambda_h times
// mean entropy on M, plus lambda_kl times mean KL on M. When `fixed_mask` is
// given it is used instead of recomputing the selection.
inline ObjectiveResult eksft_loss(const Tensor& logits, const Tensor& reference,
                                  const LabelGrid& labels, const EksftParams& params,
                                  const MaskSet* fixed_mask = nullptr) {
    detail::check_lambdas(params.lambda_h, params.lambda_kl);
    require_ratio(params.rho);
    detail::check_labels(logits, labels);
    detail::check_reference(logits, reference);
    const auto tokens = detail::require_tokens(labels);

    std::vector<TokenStats> stats = token_stats(logits, reference, labels);
    MaskSet mask = fixed_mask != nullptr ? *fixed_mask : build_mask(stats, params.rho);
    detail::TokenRoles roles;
    roles.reg = detail::membership(tokens, mask.m_union);
    roles.ce.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        roles.ce[i] = roles.reg[i] == 0 ? 1 : 0;
    }
    auto res = detail::composite_loss(logits, &reference, tokens, labels, roles,
                                      params.lambda_h, params.lambda_kl);
    res.loss.n_masked = mask.m_union.size();
    res.mask = std::move(mask);
    res.stats = std::move(stats);
    return res;
}

// Stop-gradient weights w_t = p(y_t) used by dft_loss.
inline std::vector<double> dft_weights(const Tensor& logits, const LabelGrid& labels) {
    detail::check_labels(logits, labels);
    const auto tokens = valid_tokens(labels);
    const std::size_t V = logits.last_dim();
    const auto lp = detail::valid_log_probs(logits, tokens);
    std::vector<double> w(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels.targets[tokens[i].row]);
        w[i] = std::exp(lp[i * V + y]);
    }
    return w;
}

// Probability-reweighted CE: mean over valid tokens of w_t * -log p(y_t) with
// w_t = p(y_t) held constant.
inline ObjectiveResult dft_loss(const Tensor& logits, const LabelGrid& labels,
                                const std::vector<double>* fixed_weights = nullptr) {
    detail::check_labels(logits, labels);
    const auto tokens = detail::require_tokens(labels);
    detail::TokenRoles roles{std::vector<std::uint8_t>(tokens.size(), 1),
                             fixed_weights != nullptr ? *fixed_weights
                                                      : dft_weights(logits, labels),
                             std::vector<std::uint8_t>(tokens.size(), 0)};
    if (roles.ce_weight.size() != tokens.size()) {
        throw DimensionError("dft weights do not match the number of valid tokens");
    }
    return detail::composite_loss(logits, nullptr, tokens, labels, roles, 0.0, 0.0);
}

// Uniformly drawn set of ceil(drop_fraction * |T|) valid tokens.
inline std::vector<TokenRef> random_mask(const LabelGrid& labels, double drop_fraction, Rng& rng) {
    if (!(drop_fraction >= 0.0 && drop_fraction < 1.0)) {
        throw ConfigError("drop_fraction must lie in [0, 1)");
    }
    const auto tokens = valid_tokens(labels);
    const std::size_t k = topk_count(drop_fraction, tokens.size());
    std::vector<std::size_t> idx(tokens.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
    std::vector<TokenRef> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(tokens[idx[i]].ref);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Same arithmetic as eksft_loss with a random drop set in place of the
// entropy/KL selection. MaskSet.m_union holds the dropped tokens; m_entropy
// and m_kl stay empty.
inline ObjectiveResult random_mask_loss(const Tensor& logits, const Tensor& reference,
                                        const LabelGrid& labels, double drop_fraction,
                                        double lambda_h, double lambda_kl, Rng& rng,
                                        const MaskSet* fixed_mask = nullptr) {
    detail::check_lambdas(lambda_h, lambda_kl);
    detail::check_labels(logits, labels);
    detail::check_reference(logits, reference);
    const auto tokens = detail::require_tokens(labels);
    MaskSet mask;
    if (fixed_mask != nullptr) {
        mask = *fixed_mask;
    } else {
        mask.m_union = random_mask(labels, drop_fraction, rng);
        mask.k = mask.m_union.size();
        mask.total_valid = tokens.size();
    }
    detail::TokenRoles roles;
    roles.reg = detail::membership(tokens, mask.m_union);
    roles.ce.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        roles.ce[i] = roles.reg[i] == 0 ? 1 : 0;
    }
    auto res = detail::composite_loss(logits, &reference, tokens, labels, roles, lambda_h,
                                      lambda_kl);
    res.loss.n_masked = mask.m_union.size();
    res.mask = std::move(mask);
    return res;
}

// Full CE on every valid token plus entropy and KL regularization on every
// valid token.
inline ObjectiveResult global_reg_loss(const Tensor& logits, const Tensor& reference,
                                       const LabelGrid& labels, double lambda_h,
                                       double lambda_kl) {
    detail::check_lambdas(lambda_h, lambda_kl);
    detail::check_labels(logits, labels);
    detail::check_reference(logits, reference);
    const auto tokens = detail::require_tokens(labels);
    detail::TokenRoles roles{std::vector<std::uint8_t>(tokens.size(), 1), {},
                             std::vector<std::uint8_t>(tokens.size(), 1)};
    return detail::composite_loss(logits, &reference, tokens, labels, roles, lambda_h,
                                  lambda_kl);
}

}  // namespace eksft

#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/errors.hpp"
#include "eksft/log.hpp"

namespace eksft {

// Identity of one valid response token inside a batch. Ordering on
// (sequence_index, token_position) is the deterministic tie-break key.
struct TokenRef {
    std::uint32_t sequence_index = 0;
    std::uint32_t token_position = 0;  // index within the response

    friend auto operator<=>(const TokenRef&, const TokenRef&) = default;
};

struct TokenStats {
    TokenRef ref;
    double entropy = 0.0;  // nats
    double kl = 0.0;       // nats, policy || reference
};

struct MaskSet {
    std::vector<TokenRef> m_entropy;  // sorted by key
    std::vector<TokenRef> m_kl;       // sorted by key
    std::vector<TokenRef> m_union;    // sorted by key
    std::size_t k = 0;
    std::size_t total_valid = 0;

    bool contains(const TokenRef& r) const {
        return std::binary_search(m_union.begin(), m_union.end(), r);
    }
};

inline constexpr double kDistributionTolerance = 1e-9;

namespace detail {

inline void require_distribution(std::span<const double> log_probs, const char* what) {
    if (log_probs.size() < 2) {
        throw InputError(std::string(what) + ": distribution needs at least two entries");
    }
    double s = 0.0;
    for (double lp : log_probs) {
        if (std::isnan(lp) || lp > 1e-12) {
            throw InputError(std::string(what) + ": entry is not a log-probability");
        }
        s += std::exp(lp);
    }
    if (std::abs(s - 1.0) > kDistributionTolerance) {
        throw InputError(std::string(what) + ": probabilities sum to " + std::to_string(s));
    }
}

// Unchecked forms used on rows produced by log_softmax.
inline double entropy_of(std::span<const double> log_probs) {
    double h = 0.0;
    for (double lp : log_probs) {
        const double p = std::exp(lp);
        if (p > 0.0) {
            h -= p * lp;
        }
    }
    const double upper = std::log(static_cast<double>(log_probs.size()));
    return std::clamp(h, 0.0, upper);
}

inline double kl_of(std::span<const double> policy, std::span<const double> reference) {
    double kl = 0.0;
    for (std::size_t j = 0; j < policy.size(); ++j) {
        const double p = std::exp(policy[j]);
        if (p > 0.0) {
            kl += p * (policy[j] - reference[j]);
        }
    }
    if (kl < 0.0 && kl >= -kDistributionTolerance) {
        kl = 0.0;
    }
    return kl;
}

}  // namespace detail

// Shannon entropy of a next-token distribution given as log-probabilities.
inline double token_entropy(std::span<const double> log_probs) {
    detail::require_distribution(log_probs, "token_entropy");
    return detail::entropy_of(log_probs);
}

// KL(policy || reference) over the full vocabulary. Values within 1e-9 below
// zero are reported as 0.
inline double token_kl(std::span<const double> policy_log_probs,
                       std::span<const double> reference_log_probs) {
    if (policy_log_probs.size() != reference_log_probs.size()) {
        throw InputError("token_kl: vocabulary sizes differ (" +
                         std::to_string(policy_log_probs.size()) + " vs " +
                         std::to_string(reference_log_probs.size()) + ")");
    }
    detail::require_distribution(policy_log_probs, "token_kl policy");
    detail::require_distribution(reference_log_probs, "token_kl reference");
    return detail::kl_of(policy_log_probs, reference_log_probs);
}

// Number of values >= value (1 for the unique maximum).
inline std::size_t rank(double value, std::span<const double> values) {
    return static_cast<std::size_t>(
        std::count_if(values.begin(), values.end(), [value](double v) { return v >= value; }));
}

inline void require_ratio(double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw ConfigError("Top-K ratio must lie in [0, 1], got " + std::to_string(rho));
    }
}

// k = ceil(rho * n). The product is snapped to the integer below when it lies
// within 1e-9 of it, so ratios such as 0.1 * 30 give 3 rather than 4.
inline std::size_t topk_count(double rho, std::size_t n) {
    require_ratio(rho);
    if (rho == 0.0 || n == 0) {
        return 0;
    }
    const double x = rho * static_cast<double>(n);
    const auto k = static_cast<std::size_t>(std::ceil(x - 1e-9));
    return std::min(k, n);
}

struct ScoredToken {
    TokenRef ref;
    double value = 0.0;
};

// Exactly k = topk_count(rho, |T|) tokens with the largest values; equal
// values are ordered by ascending TokenRef. The result is sorted by key.
inline std::vector<TokenRef> topk_select(std::span<const ScoredToken> scored, double rho) {
    const std::size_t k = topk_count(rho, scored.size());
    std::vector<ScoredToken> order(scored.begin(), scored.end());
    auto better = [](const ScoredToken& a, const ScoredToken& b) {
        if (a.value != b.value) {
            return a.value > b.value;
        }
        return a.ref < b.ref;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), better);
    std::vector<TokenRef> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(order[i].ref);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Batch-global Top-K by entropy and by KL, and their union. Treated as a
// constant by every backward pass.
inline MaskSet build_mask(std::span<const TokenStats> stats, double rho) {
    require_ratio(rho);
    MaskSet mask;
    mask.total_valid = stats.size();
    if (stats.empty()) {
        log::warn("build_mask: batch has no valid tokens; mask is empty");
        return mask;
    }
    mask.k = topk_count(rho, stats.size());
    std::vector<ScoredToken> scored(stats.size());
    for (std::size_t i = 0; i < stats.size(); ++i) {
        scored[i] = {stats[i].ref, stats[i].entropy};
    }
    mask.m_entropy = topk_select(scored, rho);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        scored[i].value = stats[i].kl;
    }
    mask.m_kl = topk_select(scored, rho);
    std::set_union(mask.m_entropy.begin(), mask.m_entropy.end(), mask.m_kl.begin(),
                   mask.m_kl.end(), std::back_inserter(mask.m_union));
    return mask;
}

// |a ∩ b| / |a ∪ b|, defined as 1 when both are empty.
template <typename T>
double iou(std::vector<T> a, std::vector<T> b) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    std::sort(b.begin(), b.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    if (a.empty() && b.empty()) {
        return 1.0;
    }
    std::vector<T> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    const double uni = static_cast<double>(a.size() + b.size() - inter.size());
    return static_cast<double>(inter.size()) / uni;
}

// One JSONL row per valid token:
// {"step","seq","pos","entropy","kl","in_mH","in_mKL"}
inline void write_mask_dump(std::ostream& out, std::size_t step,
                            std::span<const TokenStats> stats, const MaskSet& mask) {
    for (const auto& s : stats) {
        const nlohmann::json row = {
            {"step", step},
            {"seq", s.ref.sequence_index},
            {"pos", s.ref.token_position},
            {"entropy", s.entropy},
            {"kl", s.kl},
            {"in_mH", std::binary_search(mask.m_entropy.begin(), mask.m_entropy.end(), s.ref)},
            {"in_mKL", std::binary_search(mask.m_kl.begin(), mask.m_kl.end(), s.ref)},
        };
        out << row.dump() << '\n';
    }
}

}  // namespace eksft

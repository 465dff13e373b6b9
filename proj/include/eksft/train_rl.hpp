#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/csv.hpp"
#include "eksft/errors.hpp"
#include "eksft/eval.hpp"
#include "eksft/log.hpp"
#include "eksft/model.hpp"
#include "eksft/objective.hpp"
#include "eksft/optimizer.hpp"
#include "eksft/rng.hpp"
#include "eksft/tasks.hpp"

namespace eksft {

// Desk-scale defaults; `full_scale()` gives the large-model RL values.
struct RlConfig {
    double learning_rate = 1e-4;
    std::size_t total_steps = 100;
    std::size_t rollout_group_size = 16;
    std::size_t prompts_per_step = 8;
    std::size_t minibatches = 2;  // optimizer steps per rollout batch
    double clip_low = 0.2;
    double clip_high = 0.28;
    double temperature = 1.0;
    std::size_t max_gen_len = 64;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;

    static RlConfig full_scale() {
        RlConfig c;
        c.learning_rate = 1e-6;
        c.total_steps = 200;
        c.prompts_per_step = 256;
        c.max_gen_len = 8192;
        return c;
    }

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw ConfigError("learning_rate must be > 0");
        }
        if (!(clip_low > 0.0 && clip_low < 1.0)) {
            throw ConfigError("clip_low must lie in (0, 1)");
        }
        if (!(clip_high > 0.0)) {
            throw ConfigError("clip_high must be > 0");
        }
        if (rollout_group_size < 2) {
            throw ConfigError("rollout_group_size must be >= 2");
        }
        if (prompts_per_step < 1 || total_steps < 1 || minibatches < 1 || max_gen_len < 1) {
            throw ConfigError("prompts_per_step, total_steps, minibatches and max_gen_len must be >= 1");
        }
        if (!(temperature > 0.0)) {
            throw ConfigError("temperature must be > 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const RlConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"total_steps", c.total_steps},
                       {"rollout_group_size", c.rollout_group_size},
                       {"prompts_per_step", c.prompts_per_step},
                       {"minibatches", c.minibatches},
                       {"clip_low", c.clip_low},
                       {"clip_high", c.clip_high},
                       {"temperature", c.temperature},
                       {"max_gen_len", c.max_gen_len},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, RlConfig& c) {
    const RlConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.total_steps = j.value("total_steps", d.total_steps);
    c.rollout_group_size = j.value("rollout_group_size", d.rollout_group_size);
    c.prompts_per_step = j.value("prompts_per_step", d.prompts_per_step);
    c.minibatches = j.value("minibatches", d.minibatches);
    c.clip_low = j.value("clip_low", d.clip_low);
    c.clip_high = j.value("clip_high", d.clip_high);
    c.temperature = j.value("temperature", d.temperature);
    c.max_gen_len = j.value("max_gen_len", d.max_gen_len);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.seed = j.value("seed", d.seed);
}

// a_i = (r_i − mean) / (std + 1e-8), population std.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) {
        throw ConfigError("group_advantages: group size must be >= 2");
    }
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= n;
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / n);
    std::vector<double> a(rewards.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = (rewards[i] - mean) / (sd + 1e-8);
    }
    return a;
}

struct PgLoss {
    double value = 0.0;
    std::vector<double> d_new;  // d loss / d new_logprob per token
    double clip_fraction = 0.0;
};

// Token mean of −min(r·A, clip(r, 1−c_l, 1+c_h)·A), r = exp(new − old).
inline PgLoss clipped_pg_loss(std::span<const double> new_logprobs,
                              std::span<const double> old_logprobs,
                              std::span<const double> advantages, double clip_low,
                              double clip_high) {
    const std::size_t n = new_logprobs.size();
    if (old_logprobs.size() != n || advantages.size() != n) {
        throw DimensionError("clipped_pg_loss: token arrays differ in length");
    }
    PgLoss out;
    out.d_new.assign(n, 0.0);
    if (n == 0) {
        return out;
    }
    const double inv = 1.0 / static_cast<double>(n);
    std::size_t clipped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ratio = std::exp(new_logprobs[i] - old_logprobs[i]);
        if (!std::isfinite(ratio)) {
            throw NumericError("clipped_pg_loss: non-finite importance ratio at token " +
                               std::to_string(i));
        }
        const double a = advantages[i];
        const double r_clip = std::clamp(ratio, 1.0 - clip_low, 1.0 + clip_high);
        const double unclipped = ratio * a;
        const double bounded = r_clip * a;
        if (unclipped <= bounded) {
            out.value -= unclipped * inv;
            out.d_new[i] = -unclipped * inv;
        } else {
            out.value -= bounded * inv;
            ++clipped;
        }
    }
    out.clip_fraction = static_cast<double>(clipped) * inv;
    return out;
}

using Verifier = std::function<bool(const Sample&, std::span<const int>)>;

struct RlMetrics {
    std::size_t step = 0;
    double mean_reward = 0.0;
    double frac_zero_var_groups = 0.0;
    double loss = 0.0;  // mean over the step's updates
    double clip_fraction = 0.0;
    double mean_entropy = 0.0;  // sampling distribution, along rollouts
    double mean_length = 0.0;
    std::size_t n_updates = 0;
    std::size_t verifier_errors = 0;
};

inline std::string rl_metrics_header() {
    return "step,mean_reward,frac_zero_var_groups,loss,clip_fraction,mean_entropy,mean_length,"
           "n_updates,verifier_errors\n";
}

inline std::string to_csv_row(const RlMetrics& m) {
    return std::to_string(m.step) + "," + format_double(m.mean_reward) + "," +
           format_double(m.frac_zero_var_groups) + "," + format_double(m.loss) + "," +
           format_double(m.clip_fraction) + "," + format_double(m.mean_entropy) + "," +
           format_double(m.mean_length) + "," + std::to_string(m.n_updates) + "," +
           std::to_string(m.verifier_errors) + "\n";
}

inline std::string to_csv(std::span<const RlMetrics> rows) {
    std::string out = rl_metrics_header();
    for (const auto& r : rows) {
        out += to_csv_row(r);
    }
    return out;
}

struct RlResult {
    ParameterSet params;
    std::vector<RlMetrics> metrics;
};

struct Rollout {
    const Sample* sample = nullptr;
    std::vector<int> prompt;
    Completion completion;
    double reward = 0.0;
    double advantage = 0.0;
};

struct RlHooks {
    std::function<void(const RlMetrics&)> on_step;
};

namespace detail {

// One clipped policy-gradient update on a slice of rollouts. Returns false
// (and leaves params untouched) when every advantage is zero.
inline bool pg_update(ParameterSet& params, AdamWState& opt, std::span<const Rollout> chunk,
                      const RlConfig& cfg, double& loss_out, double& clip_out) {
    if (std::all_of(chunk.begin(), chunk.end(),
                    [](const Rollout& r) { return r.advantage == 0.0; })) {
        return false;
    }
    const std::size_t V = params.config().vocab_size;
    std::size_t L = 0;
    for (const auto& r : chunk) {
        L = std::max(L, r.prompt.size() + r.completion.tokens.size());
    }
    const std::size_t B = chunk.size();
    std::vector<int> inputs(B * L, token::kPad);
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    std::vector<double> old_lp, adv;
    for (std::size_t b = 0; b < B; ++b) {
        const auto& r = chunk[b];
        std::vector<int> seq{token::kBos};
        seq.insert(seq.end(), r.prompt.begin(), r.prompt.end());
        seq.insert(seq.end(), r.completion.tokens.begin(), r.completion.tokens.end());
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            inputs[b * L + t] = seq[t];
            if (t >= r.prompt.size()) {
                rows.push_back(b * L + t);
                targets.push_back(seq[t + 1]);
                old_lp.push_back(r.completion.logprobs[t - r.prompt.size()]);
                adv.push_back(r.advantage);
            }
        }
    }
    auto fr = forward(params, B, L, inputs);
    std::vector<double> new_lp(rows.size());
    std::vector<std::vector<double>> lps(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        tempered_log_probs(lps[i], fr.logits.row(rows[i]), cfg.temperature);
        new_lp[i] = lps[i][static_cast<std::size_t>(targets[i])];
    }
    const PgLoss pg = clipped_pg_loss(new_lp, old_lp, adv, cfg.clip_low, cfg.clip_high);
    Tensor dlogits(fr.logits.shape());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (pg.d_new[i] == 0.0) {
            continue;
        }
        // d log softmax(z/T)_y / dz_j = (1[j=y] − p_j) / T
        double* g = dlogits.row(rows[i]).data();
        const double c = pg.d_new[i] / cfg.temperature;
        for (std::size_t j = 0; j < V; ++j) {
            const double e = j == static_cast<std::size_t>(targets[i]) ? 1.0 : 0.0;
            g[j] += c * (e - std::exp(lps[i][j]));
        }
    }
    const auto grad = backward(params, fr.cache, dlogits);
    adamw_step(params, grad, opt, cfg.learning_rate, {0.9, 0.95, 1e-8, cfg.weight_decay});
    loss_out = pg.value;
    clip_out = pg.clip_fraction;
    return true;
}

}  // namespace detail

// Clipped group-rollout policy gradient. Each step samples
// `rollout_group_size` completions for each of `prompts_per_step` prompts
// with the current policy, scores them with the binary verifier, normalizes
// rewards within each group and applies one clipped update per mini-batch.
inline RlResult train_rl(const ParameterSet& init, std::span<const Sample> prompts,
                         const RlConfig& cfg, const Verifier& verifier = verify,
                         const RlHooks& hooks = {}) {
    cfg.validate();
    if (prompts.empty()) {
        throw InputError("train_rl: empty prompt set");
    }
    RlResult out{init, {}};
    ParameterSet& params = out.params;
    AdamWState opt = AdamWState::like(params);

    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t pass = 0;
    auto next_prompt = [&]() {
        if (cursor == order.size()) {
            order.resize(prompts.size());
            for (std::size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            Rng r(derive_seed(cfg.seed, 0x9a55, pass++));
            r.shuffle(order);
            cursor = 0;
        }
        return order[cursor++];
    };

    const std::size_t G = cfg.rollout_group_size;
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        RlMetrics rec;
        rec.step = step;
        std::vector<Rollout> rollouts;
        rollouts.reserve(cfg.prompts_per_step * G);
        double h_sum = 0.0;
        std::size_t h_count = 0;
        std::size_t zero_var = 0;
        for (std::size_t p = 0; p < cfg.prompts_per_step; ++p) {
            const Sample& s = prompts[next_prompt()];
            const auto prompt = s.prompt_tokens();
            std::vector<double> rewards(G);
            for (std::size_t j = 0; j < G; ++j) {
                Rollout r;
                r.sample = &s;
                r.prompt = prompt;
                r.completion =
                    generate(params, prompt, {cfg.temperature, cfg.max_gen_len, false},
                             derive_seed(cfg.seed, step, p * G + j));
                try {
                    r.reward = verifier(s, r.completion.tokens) ? 1.0 : 0.0;
                } catch (const std::exception& e) {
                    r.reward = 0.0;
                    ++rec.verifier_errors;
                    log::warn("verifier failed on step " + std::to_string(step) + " prompt \"" +
                              s.prompt + "\": " + e.what() + "; scored 0");
                }
                rewards[j] = r.reward;
                rec.mean_reward += r.reward;
                rec.mean_length += static_cast<double>(r.completion.tokens.size());
                for (double h : r.completion.entropies) {
                    h_sum += h;
                }
                h_count += r.completion.entropies.size();
                rollouts.push_back(std::move(r));
            }
            const auto adv = group_advantages(rewards);
            bool all_zero = true;
            for (std::size_t j = 0; j < G; ++j) {
                rollouts[p * G + j].advantage = adv[j];
                all_zero = all_zero && adv[j] == 0.0;
            }
            zero_var += all_zero ? 1 : 0;
        }
        const double total = static_cast<double>(rollouts.size());
        rec.mean_reward /= total;
        rec.mean_length /= total;
        rec.mean_entropy = h_count ? h_sum / static_cast<double>(h_count) : 0.0;
        rec.frac_zero_var_groups =
            static_cast<double>(zero_var) / static_cast<double>(cfg.prompts_per_step);

        const std::size_t per = (rollouts.size() + cfg.minibatches - 1) / cfg.minibatches;
        for (std::size_t lo = 0; lo < rollouts.size(); lo += per) {
            const std::size_t hi = std::min(lo + per, rollouts.size());
            double loss = 0.0, clip = 0.0;
            if (detail::pg_update(params, opt,
                                  std::span<const Rollout>(rollouts.data() + lo, hi - lo), cfg,
                                  loss, clip)) {
                rec.loss += loss;
                rec.clip_fraction += clip;
                ++rec.n_updates;
            }
        }
        if (rec.n_updates > 0) {
            rec.loss /= static_cast<double>(rec.n_updates);
            rec.clip_fraction /= static_cast<double>(rec.n_updates);
        }
        if (hooks.on_step) {
            hooks.on_step(rec);
        }
        out.metrics.push_back(rec);
    }
    params.version = "rl-step" + std::to_string(cfg.total_steps);
    return out;
}

}  // namespace eksft

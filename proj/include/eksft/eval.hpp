#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/csv.hpp"
#include "eksft/errors.hpp"
#include "eksft/log.hpp"
#include "eksft/model.hpp"
#include "eksft/rng.hpp"
#include "eksft/tasks.hpp"

namespace eksft {

struct SampleOptions {
    double temperature = 1.0;
    std::size_t max_len = 64;  // generated tokens, EOS included
    bool greedy = false;
};

// One sampled continuation with the log-probability and entropy of the
// sampling distribution at every generated position.
struct Completion {
    std::vector<int> tokens;
    std::vector<double> logprobs;
    std::vector<double> entropies;
};

namespace detail {

inline void tempered_log_probs(std::vector<double>& out, std::span<const double> logits,
                               double temperature) {
    out.resize(logits.size());
    double mx = -INFINITY;
    for (double z : logits) {
        mx = std::max(mx, z / temperature);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = logits[j] / temperature - mx;
        sum += std::exp(out[j]);
    }
    const double lse = std::log(sum);
    for (auto& v : out) {
        v -= lse;
    }
}

}  // namespace detail

// Ancestral sampling from softmax(logits / temperature) after BOS + prompt,
// until EOS, max_len tokens, or the context is full. Greedy mode takes the
// argmax (lowest id on ties).
inline Completion generate(const ParameterSet& params, std::span<const int> prompt,
                           const SampleOptions& opt, std::uint64_t seed) {
    if (!opt.greedy && !(opt.temperature > 0.0)) {
        throw ConfigError("temperature must be > 0 (use greedy mode for the zero limit)");
    }
    const auto& c = params.config();
    if (prompt.size() + 1 >= c.context_len) {
        throw LengthError("prompt of " + std::to_string(prompt.size()) +
                          " tokens leaves no room in context " + std::to_string(c.context_len));
    }
    Decoder dec(params);
    Rng rng(seed);
    std::vector<double> logits = dec.step(token::kBos);
    for (int t : prompt) {
        logits = dec.step(t);
    }
    Completion out;
    std::vector<double> lp;
    const double temp = opt.greedy ? 1.0 : opt.temperature;
    while (out.tokens.size() < opt.max_len) {
        detail::tempered_log_probs(lp, logits, temp);
        double h = 0.0;
        for (double v : lp) {
            h -= std::exp(v) * v;
        }
        int next = 0;
        if (opt.greedy) {
            next = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        } else {
            const double u = rng.uniform();
            double acc = 0.0;
            next = static_cast<int>(lp.size()) - 1;
            for (std::size_t j = 0; j < lp.size(); ++j) {
                acc += std::exp(lp[j]);
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        out.tokens.push_back(next);
        out.logprobs.push_back(lp[static_cast<std::size_t>(next)]);
        out.entropies.push_back(std::max(0.0, h));
        if (next == token::kEos || dec.position() >= c.context_len) {
            break;
        }
        logits = dec.step(next);
    }
    return out;
}

inline std::vector<int> sample(const ParameterSet& params, std::span<const int> prompt,
                               double temperature, std::size_t max_len, std::uint64_t seed,
                               bool greedy = false) {
    return generate(params, prompt, {temperature, max_len, greedy}, seed).tokens;
}

// 1 − C(n−c, k)/C(n, k) as Π_{i=n−c+1}^{n} (1 − k/i).
inline double pass_at_k(std::size_t n, std::size_t c, std::size_t k) {
    if (c > n) {
        throw InputError("pass_at_k: c > n");
    }
    if (k < 1 || k > n) {
        throw InputError("pass_at_k: k must lie in [1, n], got k=" + std::to_string(k) +
                         " n=" + std::to_string(n));
    }
    if (n - c < k) {
        return 1.0;
    }
    double prod = 1.0;
    for (std::size_t i = n - c + 1; i <= n; ++i) {
        prod *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
    }
    return 1.0 - prod;
}

struct EvalOptions {
    std::size_t n_per_prompt = 32;
    std::vector<std::size_t> ks = {1, 4, 8, 16, 32};
    double temperature = 1.0;
    std::size_t max_len = 64;
    std::uint64_t seed = 0;
};

struct PromptResult {
    std::string prompt;
    std::size_t n = 0;
    std::size_t c = 0;
};

struct EvalReport {
    std::vector<PromptResult> prompts;
    std::map<std::size_t, double> pass_at;  // k -> mean pass@k
    double avg_at_n = 0.0;
    double mean_response_entropy = 0.0;
    EvalOptions options;
};

inline std::uint64_t sample_seed(std::uint64_t base, std::size_t prompt, std::size_t draw) {
    return derive_seed(base, 0xe7a1 + prompt, draw);
}

inline EvalReport evaluate(const ParameterSet& params, std::span<const Sample> eval_set,
                           const EvalOptions& opt) {
    if (eval_set.empty()) {
        throw InputError("evaluate: empty eval set");
    }
    if (opt.ks.empty()) {
        throw ConfigError("evaluate: no k values requested");
    }
    for (auto k : opt.ks) {
        if (k < 1 || k > opt.n_per_prompt) {
            throw ConfigError("evaluate: k=" + std::to_string(k) + " outside [1, n=" +
                              std::to_string(opt.n_per_prompt) + "]");
        }
    }
    EvalReport rep;
    rep.options = opt;
    double h_sum = 0.0;
    std::size_t h_count = 0;
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
        const auto& s = eval_set[i];
        const auto prompt = s.prompt_tokens();
        PromptResult pr{s.prompt, opt.n_per_prompt, 0};
        for (std::size_t j = 0; j < opt.n_per_prompt; ++j) {
            const auto comp = generate(params, prompt, {opt.temperature, opt.max_len, false},
                                       sample_seed(opt.seed, i, j));
            pr.c += verify(s, comp.tokens) ? 1 : 0;
            for (double h : comp.entropies) {
                h_sum += h;
            }
            h_count += comp.entropies.size();
        }
        rep.prompts.push_back(pr);
    }
    for (auto k : opt.ks) {
        double acc = 0.0;
        for (const auto& pr : rep.prompts) {
            acc += pass_at_k(pr.n, pr.c, k);
        }
        rep.pass_at[k] = acc / static_cast<double>(rep.prompts.size());
    }
    double avg = 0.0;
    for (const auto& pr : rep.prompts) {
        avg += static_cast<double>(pr.c) / static_cast<double>(pr.n);
    }
    rep.avg_at_n = avg / static_cast<double>(rep.prompts.size());
    rep.mean_response_entropy = h_count ? h_sum / static_cast<double>(h_count) : 0.0;
    return rep;
}

// Mean per-step entropy of the sampling distribution along n sampled
// responses per prompt.
inline double mean_response_entropy(const ParameterSet& params, std::span<const Sample> prompts,
                                    std::size_t n, double temperature, std::uint64_t seed,
                                    std::size_t max_len = 64) {
    if (n < 1) {
        throw ConfigError("mean_response_entropy: n must be >= 1");
    }
    if (prompts.empty()) {
        throw InputError("mean_response_entropy: no prompts");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto prompt = prompts[i].prompt_tokens();
        for (std::size_t j = 0; j < n; ++j) {
            const auto comp = generate(params, prompt, {temperature, max_len, false},
                                       derive_seed(seed, 0xe4 + i, j));
            for (double h : comp.entropies) {
                sum += h;
            }
            count += comp.entropies.size();
        }
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json pass = nlohmann::json::object();
    for (const auto& [k, v] : r.pass_at) {
        pass[std::to_string(k)] = v;
    }
    nlohmann::json prompts = nlohmann::json::array();
    for (const auto& p : r.prompts) {
        prompts.push_back({{"prompt", p.prompt}, {"n", p.n}, {"c", p.c}});
    }
    return {{"pass_at_k", pass},
            {"avg_at_n", r.avg_at_n},
            {"mean_response_entropy", r.mean_response_entropy},
            {"config",
             {{"n_per_prompt", r.options.n_per_prompt},
              {"ks", r.options.ks},
              {"temperature", r.options.temperature},
              {"max_len", r.options.max_len},
              {"seed", r.options.seed}}},
            {"prompts", prompts}};
}

// Flat CSV: checkpoint,k,pass_at_k,avg_at_n,mean_response_entropy
inline std::string eval_csv_header() {
    return "checkpoint,k,pass_at_k,avg_at_n,mean_response_entropy\n";
}

inline std::string eval_csv_rows(const EvalReport& r, const std::string& checkpoint) {
    std::string out;
    for (const auto& [k, v] : r.pass_at) {
        out += checkpoint + "," + std::to_string(k) + "," + format_double(v) + "," +
               format_double(r.avg_at_n) + "," + format_double(r.mean_response_entropy) + "\n";
    }
    return out;
}

}  // namespace eksft

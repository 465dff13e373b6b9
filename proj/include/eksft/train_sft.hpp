#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/batch.hpp"
#include "eksft/csv.hpp"
#include "eksft/errors.hpp"
#include "eksft/model.hpp"
#include "eksft/objective.hpp"
#include "eksft/optimizer.hpp"
#include "eksft/rng.hpp"
#include "eksft/selection.hpp"

namespace eksft {

enum class SftMethod { sft, eksft, dft, random_mask, global_reg };

inline std::string to_string(SftMethod m) {
    switch (m) {
        case SftMethod::sft: return "sft";
        case SftMethod::eksft: return "eksft";
        case SftMethod::dft: return "dft";
        case SftMethod::random_mask: return "random_mask";
        case SftMethod::global_reg: return "global_reg";
    }
    return "?";
}

inline SftMethod parse_sft_method(const std::string& s) {
    for (auto m : {SftMethod::sft, SftMethod::eksft, SftMethod::dft, SftMethod::random_mask,
                   SftMethod::global_reg}) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw ConfigError("unknown method '" + s + "' (expected sft|eksft|dft|random_mask|global_reg)");
}

// Defaults are the desk-scale preset; `full_scale()` gives the large-model values.
struct SftConfig {
    SftMethod method = SftMethod::eksft;
    double learning_rate = 1e-3;
    std::size_t epochs = 8;
    std::size_t grad_accum = 1;
    std::size_t batch_size = 8;
    double rho = 0.2;
    double lambda_h = 0.05;
    double lambda_kl = 0.05;
    double drop_fraction = 0.10;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::size_t max_sample_len = 0;  // 0: the model context

    static SftConfig full_scale() {
        SftConfig c;
        c.learning_rate = 1e-5;
        c.epochs = 8;
        c.grad_accum = 8;
        c.batch_size = 1;
        return c;
    }

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw ConfigError("learning_rate must be > 0");
        }
        if (epochs < 1 || grad_accum < 1 || batch_size < 1) {
            throw ConfigError("epochs, grad_accum and batch_size must be >= 1");
        }
        require_ratio(rho);
        if (!(lambda_h >= 0.0) || !(lambda_kl >= 0.0)) {
            throw ConfigError("lambda_h and lambda_kl must be >= 0");
        }
        if (!(drop_fraction >= 0.0 && drop_fraction < 1.0)) {
            throw ConfigError("drop_fraction must lie in [0, 1)");
        }
        if (!(weight_decay >= 0.0)) {
            throw ConfigError("weight_decay must be >= 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const SftConfig& c) {
    j = nlohmann::json{{"method", to_string(c.method)},
                       {"learning_rate", c.learning_rate},
                       {"epochs", c.epochs},
                       {"grad_accum", c.grad_accum},
                       {"batch_size", c.batch_size},
                       {"rho", c.rho},
                       {"lambda_h", c.lambda_h},
                       {"lambda_kl", c.lambda_kl},
                       {"drop_fraction", c.drop_fraction},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed},
                       {"max_sample_len", c.max_sample_len}};
}

inline void from_json(const nlohmann::json& j, SftConfig& c) {
    const SftConfig d;
    c.method = parse_sft_method(j.value("method", to_string(d.method)));
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.epochs = j.value("epochs", d.epochs);
    c.grad_accum = j.value("grad_accum", d.grad_accum);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.rho = j.value("rho", d.rho);
    c.lambda_h = j.value("lambda_h", d.lambda_h);
    c.lambda_kl = j.value("lambda_kl", d.lambda_kl);
    c.drop_fraction = j.value("drop_fraction", d.drop_fraction);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.seed = j.value("seed", d.seed);
    c.max_sample_len = j.value("max_sample_len", d.max_sample_len);
}

// One row per optimizer step. Loss components are means over the step's
// micro-batches; counts are sums.
struct SftMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double ce_masked = 0.0;
    double entropy_reg = 0.0;
    double kl_reg = 0.0;
    std::size_t n_valid = 0;
    std::size_t n_supervised = 0;
    std::size_t n_masked = 0;
    std::size_t k = 0;
    double mean_entropy = 0.0;  // teacher-forced, over all valid tokens
    double mean_kl = 0.0;       // to the reference, over all valid tokens
    double mask_iou = std::numeric_limits<double>::quiet_NaN();
};

inline std::string sft_metrics_header() {
    return "step,epoch,loss,ce_masked,entropy_reg,kl_reg,n_valid,n_supervised,n_masked,k,"
           "mean_entropy,mean_kl,mask_iou\n";
}

inline std::string to_csv_row(const SftMetrics& m) {
    return std::to_string(m.step) + "," + std::to_string(m.epoch) + "," + format_double(m.loss) +
           "," + format_double(m.ce_masked) + "," + format_double(m.entropy_reg) + "," +
           format_double(m.kl_reg) + "," + std::to_string(m.n_valid) + "," +
           std::to_string(m.n_supervised) + "," + std::to_string(m.n_masked) + "," +
           std::to_string(m.k) + "," + format_double(m.mean_entropy) + "," +
           format_double(m.mean_kl) + "," + format_double(m.mask_iou) + "\n";
}

inline std::string to_csv(std::span<const SftMetrics> rows) {
    std::string out = sft_metrics_header();
    for (const auto& r : rows) {
        out += to_csv_row(r);
    }
    return out;
}

// What one micro-batch saw; handed to the observer hook.
struct MicroBatchInfo {
    std::size_t step = 0;
    std::size_t micro = 0;
    const TokenBatch* batch = nullptr;
    const ObjectiveResult* result = nullptr;
};

struct SftHooks {
    std::function<void(const MicroBatchInfo&)> on_micro_batch;
    std::function<void(const SftMetrics&)> on_step;
    std::ostream* mask_dump = nullptr;  // JSONL, sequence index offset per micro-batch
};

struct SftResult {
    ParameterSet params;
    std::vector<SftMetrics> metrics;
};

inline ObjectiveResult sft_objective(const SftConfig& cfg, const Tensor& logits,
                                     const Tensor& reference, const LabelGrid& labels, Rng& rng) {
    switch (cfg.method) {
        case SftMethod::sft: return sft_loss(logits, labels);
        case SftMethod::eksft:
            return eksft_loss(logits, reference, labels, {cfg.rho, cfg.lambda_h, cfg.lambda_kl});
        case SftMethod::dft: return dft_loss(logits, labels);
        case SftMethod::random_mask:
            return random_mask_loss(logits, reference, labels, cfg.drop_fraction, cfg.lambda_h,
                                    cfg.lambda_kl, rng);
        case SftMethod::global_reg:
            return global_reg_loss(logits, reference, labels, cfg.lambda_h, cfg.lambda_kl);
    }
    throw ConfigError("unhandled method");
}

// Supervised stage. Each epoch visits the samples in a seeded shuffled
// order; `batch_size` samples form a micro-batch, `grad_accum` micro-batches
// form one optimizer step (gradients averaged over micro-batches). Token
// ranking is per micro-batch.
inline SftResult train_sft(const ParameterSet& init, const ReferenceModel& reference,
                           std::span<const Sample> data, const SftConfig& cfg,
                           const SftHooks& hooks = {}) {
    cfg.validate();
    if (data.empty()) {
        throw InputError("train_sft: empty dataset");
    }
    if (reference.params().config_hash() != init.config_hash()) {
        throw InputError("train_sft: reference and policy architectures differ");
    }
    const std::size_t limit = cfg.max_sample_len ? std::min(cfg.max_sample_len,
                                                            init.config().context_len)
                                                 : init.config().context_len;
    check_fits_context(data, limit, "training");

    SftResult out{init, {}};
    ParameterSet& params = out.params;
    AdamWState opt = AdamWState::like(params);
    const AdamWConfig adam{0.9, 0.95, 1e-8, cfg.weight_decay};
    const std::size_t micro_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;

    std::size_t step = 0;
    std::size_t micro_global = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5a17, epoch));
        shuffle_rng.shuffle(order);

        std::size_t mb = 0;
        while (mb < micro_per_epoch) {
            const std::size_t n_micro = std::min(cfg.grad_accum, micro_per_epoch - mb);
            ParameterSet grad = ParameterSet::zeros_like(params);
            SftMetrics rec;
            rec.step = step;
            rec.epoch = epoch;
            double h_sum = 0.0, kl_sum = 0.0;
            std::size_t inter = 0, uni = 0;
            bool ranked = false;
            for (std::size_t u = 0; u < n_micro; ++u, ++mb, ++micro_global) {
                const std::size_t lo = mb * cfg.batch_size;
                const std::size_t hi = std::min(lo + cfg.batch_size, data.size());
                const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
                const TokenBatch batch = make_batch(data, idx);
                auto fr = forward(params, batch.batch(), batch.length(), batch.inputs);
                const Tensor ref_logits = forward_logits(reference.params(), batch.batch(),
                                                         batch.length(), batch.inputs);
                Rng mask_rng(derive_seed(cfg.seed, 0x3a5c, micro_global));
                ObjectiveResult res =
                    sft_objective(cfg, fr.logits, ref_logits, batch.labels, mask_rng);
                const auto g = backward(params, fr.cache, res.dlogits);
                auto gv = grad.values();
                const auto src = g.values();
                for (std::size_t i = 0; i < gv.size(); ++i) {
                    gv[i] += src[i];
                }

                const auto stats = res.stats.empty()
                                       ? token_stats(fr.logits, ref_logits, batch.labels)
                                       : res.stats;
                for (const auto& s : stats) {
                    h_sum += s.entropy;
                    kl_sum += s.kl;
                }
                rec.loss += res.loss.total;
                rec.ce_masked += res.loss.ce_masked;
                rec.entropy_reg += res.loss.entropy_reg;
                rec.kl_reg += res.loss.kl_reg;
                rec.n_valid += stats.size();
                rec.n_supervised += res.loss.n_supervised;
                rec.n_masked += res.loss.n_masked;
                rec.k += res.mask.k;
                if (cfg.method == SftMethod::eksft) {
                    ranked = true;
                    std::vector<TokenRef> both;
                    std::set_intersection(res.mask.m_entropy.begin(), res.mask.m_entropy.end(),
                                          res.mask.m_kl.begin(), res.mask.m_kl.end(),
                                          std::back_inserter(both));
                    inter += both.size();
                    uni += res.mask.m_union.size();
                    if (hooks.mask_dump != nullptr) {
                        // Sequence indices are made unique within the step.
                        const auto shift = static_cast<std::uint32_t>(u * cfg.batch_size);
                        auto shifted = [shift](std::vector<TokenRef> v) {
                            for (auto& r : v) {
                                r.sequence_index += shift;
                            }
                            return v;
                        };
                        std::vector<TokenStats> st = stats;
                        for (auto& s : st) {
                            s.ref.sequence_index += shift;
                        }
                        MaskSet m = res.mask;
                        m.m_entropy = shifted(m.m_entropy);
                        m.m_kl = shifted(m.m_kl);
                        m.m_union = shifted(m.m_union);
                        write_mask_dump(*hooks.mask_dump, step, st, m);
                    }
                }
                if (hooks.on_micro_batch) {
                    hooks.on_micro_batch({step, u, &batch, &res});
                }
            }
            const double inv = 1.0 / static_cast<double>(n_micro);
            for (auto& v : grad.values()) {
                v *= inv;
            }
            rec.loss *= inv;
            rec.ce_masked *= inv;
            rec.entropy_reg *= inv;
            rec.kl_reg *= inv;
            rec.mean_entropy = rec.n_valid ? h_sum / static_cast<double>(rec.n_valid) : 0.0;
            rec.mean_kl = rec.n_valid ? kl_sum / static_cast<double>(rec.n_valid) : 0.0;
            if (ranked) {
                rec.mask_iou = uni == 0 ? 1.0
                                        : static_cast<double>(inter) / static_cast<double>(uni);
            }
            adamw_step(params, grad, opt, cfg.learning_rate, adam);
            if (hooks.on_step) {
                hooks.on_step(rec);
            }
            out.metrics.push_back(rec);
            ++step;
        }
    }
    params.version = to_string(cfg.method) + "-step" + std::to_string(step);
    return out;
}

}  // namespace eksft

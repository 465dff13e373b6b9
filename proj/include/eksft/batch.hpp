#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "eksft/errors.hpp"
#include "eksft/model.hpp"
#include "eksft/objective.hpp"
#include "eksft/tasks.hpp"

namespace eksft {

// Teacher-forced batch: inputs are BOS + prompt + response (minus the last
// token), targets are shifted by one, right-padded with PAD. Only response
// targets (EOS included) are valid.
struct TokenBatch {
    std::vector<int> inputs;
    LabelGrid labels;

    std::size_t batch() const { return labels.batch; }
    std::size_t length() const { return labels.length; }
};

inline TokenBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> order) {
    if (order.empty()) {
        throw DegenerateInputError("make_batch: no samples selected");
    }
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> prompt_len;
    std::size_t L = 0;
    for (auto idx : order) {
        const auto& s = samples[idx];
        std::vector<int> seq{token::kBos};
        const auto p = s.prompt_tokens();
        const auto r = s.response_tokens();
        seq.insert(seq.end(), p.begin(), p.end());
        seq.insert(seq.end(), r.begin(), r.end());
        prompt_len.push_back(p.size());
        L = std::max(L, seq.size() - 1);
        seqs.push_back(std::move(seq));
    }
    TokenBatch b;
    b.labels.batch = seqs.size();
    b.labels.length = L;
    b.inputs.assign(b.labels.batch * L, token::kPad);
    b.labels.targets.assign(b.labels.batch * L, token::kPad);
    b.labels.valid.assign(b.labels.batch * L, 0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto& seq = seqs[i];
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            b.inputs[i * L + t] = seq[t];
            b.labels.targets[i * L + t] = seq[t + 1];
            b.labels.valid[i * L + t] = t >= prompt_len[i] ? 1 : 0;
        }
    }
    return b;
}

inline TokenBatch make_batch(std::span<const Sample> samples) {
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return make_batch(samples, all);
}

// Rejects samples that do not fit the model context, naming the sample.
inline void check_fits_context(std::span<const Sample> samples, std::size_t context_len,
                               const std::string& split) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::size_t n = samples[i].sequence_length() - 1;
        if (n > context_len) {
            throw LengthError(split + " sample " + std::to_string(i) + " (prompt \"" +
                              samples[i].prompt + "\") needs " + std::to_string(n) +
                              " positions, context is " + std::to_string(context_len));
        }
    }
}

}  // namespace eksft

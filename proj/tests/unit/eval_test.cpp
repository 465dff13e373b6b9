#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "eksft/eval.hpp"
#include "eksft/model.hpp"
#include "eksft/tasks.hpp"
#include "eksft/train_sft.hpp"

using namespace eksft;

namespace {

ModelConfig small_model(std::uint64_t seed = 1) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.context_len = 24;
    c.seed = seed;
    return c;
}

// Logits are zero everywhere except `boost` on the EOS column.
ParameterSet constant_head(double boost) {
    auto p = init_parameters(small_model());
    for (auto& v : p.view("lnf.g")) v = 0.0;
    auto b = p.view("lnf.b");
    std::fill(b.begin(), b.end(), 0.0);
    b[0] = 1.0;
    auto head = p.view("head.w");
    std::fill(head.begin(), head.end(), 0.0);
    head[token::kEos] = boost;
    return p;
}

double binom(std::size_t n, std::size_t k) {
    double r = 1.0;
    for (std::size_t i = 1; i <= k; ++i) {
        r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
    }
    return r;
}

// Fraction of k-subsets of n items (c of them correct) containing a correct one.
double enumerate_pass(std::size_t n, std::size_t c, std::size_t k) {
    std::size_t hit = 0, total = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
        ++total;
        hit += (mask & ((1u << c) - 1)) != 0 ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

TEST(PassAtK, Examples) {
    EXPECT_EQ(pass_at_k(4, 4, 1), 1.0);
    for (std::size_t k = 1; k <= 10; ++k) EXPECT_EQ(pass_at_k(10, 0, k), 0.0);
    EXPECT_NEAR(pass_at_k(4, 1, 2), 0.5, 1e-15);
    EXPECT_THROW(pass_at_k(4, 1, 5), InputError);
    EXPECT_THROW(pass_at_k(4, 1, 0), InputError);
    EXPECT_THROW(pass_at_k(4, 5, 1), InputError);
}

TEST(PassAtK, MatchesEnumeration) {
    for (std::size_t n = 1; n <= 12; ++n) {
        for (std::size_t c = 0; c <= n; ++c) {
            for (std::size_t k = 1; k <= n; ++k) {
                EXPECT_NEAR(pass_at_k(n, c, k), enumerate_pass(n, c, k), 1e-12)
                    << n << " " << c << " " << k;
            }
        }
    }
}

TEST(PassAtK, PropertiesAtLargeN) {
    for (std::size_t c = 0; c <= 200; c += 7) {
        EXPECT_NEAR(pass_at_k(200, c, 1), static_cast<double>(c) / 200.0, 1e-12);
        double prev = 0.0;
        for (std::size_t k = 1; k <= 200; k += 9) {
            const double v = pass_at_k(200, c, k);
            EXPECT_GE(v, prev - 1e-15);
            EXPECT_LE(v, 1.0);
            prev = v;
        }
        if (200 - c < 50) {
            EXPECT_EQ(pass_at_k(200, c, 50), 1.0);
        } else if (c > 0) {
            EXPECT_NEAR(pass_at_k(200, c, 50), 1.0 - binom(200 - c, 50) / binom(200, 50), 1e-9);
        }
    }
}

TEST(Sample, SameSeedSameSequence) {
    const auto p = init_parameters(small_model());
    const auto prompt = tokenize("1+2=");
    EXPECT_EQ(sample(p, prompt, 1.0, 12, 42), sample(p, prompt, 1.0, 12, 42));
    EXPECT_THROW(sample(p, prompt, 0.0, 12, 42), ConfigError);
}

TEST(Sample, GreedyIsArgmax) {
    const auto p = init_parameters(small_model(4));
    const auto prompt = tokenize("ab>");
    const auto out = sample(p, prompt, 1.0, 6, 0, true);
    std::vector<int> ids = {token::kBos};
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    for (int t : out) {
        const Tensor logits = forward_logits(p, 1, ids.size(), ids);
        const auto last = logits.row(ids.size() - 1);
        const int arg = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        EXPECT_EQ(t, arg);
        ids.push_back(t);
    }
}

TEST(Sample, FrequenciesMatchSoftmax) {
    auto p = init_parameters(small_model(6));
    for (auto& v : p.view("head.w")) v *= 60.0;  // spread out the distribution
    const auto prompt = tokenize("7=");
    std::vector<int> ids = {token::kBos};
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    const Tensor logits = forward_logits(p, 1, ids.size(), ids);
    const auto row = logits.row(ids.size() - 1);
    const Tensor lp = log_softmax(Tensor({row.size()}, std::vector<double>(row.begin(), row.end())));
    const std::size_t draws = 100000;
    std::vector<std::size_t> counts(row.size(), 0);
    for (std::size_t i = 0; i < draws; ++i) {
        counts[static_cast<std::size_t>(sample(p, prompt, 1.0, 1, i)[0])]++;
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
        const double q = std::exp(lp[j]);
        const double sd = std::sqrt(draws * q * (1 - q));
        EXPECT_LE(std::abs(static_cast<double>(counts[j]) - draws * q), 4 * sd + 1e-9) << j;
    }
}

TEST(Evaluate, AllCorrectGivesOne) {
    // Memorize one sample so every draw reproduces it.
    const std::vector<Sample> set = {{"ab>", "#ba", "ba"}};
    const auto p0 = init_parameters(small_model(3));
    SftConfig cfg;
    cfg.method = SftMethod::sft;
    cfg.epochs = 150;
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-2;
    const auto p = train_sft(p0, snapshot_reference(p0), set, cfg).params;
    EvalOptions o;
    o.n_per_prompt = 8;
    o.ks = {1, 2, 8};
    const auto rep = evaluate(p, set, o);
    EXPECT_EQ(rep.prompts[0].c, 8u);
    for (const auto& [k, v] : rep.pass_at) EXPECT_EQ(v, 1.0);
}

TEST(Evaluate, ReportInvariants) {
    const auto p = init_parameters(small_model(2));
    TaskSpec spec;
    spec.counts = {0, 0, 0, 6};
    const auto ds = generate_dataset(spec);
    EvalOptions o;
    o.n_per_prompt = 8;
    o.ks = {1, 2, 4, 8};
    o.max_len = 12;
    const auto a = evaluate(p, ds.eval, o);
    const auto b = evaluate(p, ds.eval, o);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_NEAR(a.avg_at_n, a.pass_at.at(1), 1e-15);
    double prev = 0.0;
    for (const auto& [k, v] : a.pass_at) {
        EXPECT_GE(v, prev);
        prev = v;
    }
    for (const auto& pr : a.prompts) EXPECT_LE(pr.c, pr.n);
    EXPECT_THROW(evaluate(p, std::vector<Sample>{}, o), InputError);
    o.ks = {16};
    EXPECT_THROW(evaluate(p, ds.eval, o), ConfigError);
}

TEST(ResponseEntropy, DeterministicAndUniformModels) {
    const auto prompts = std::vector<Sample>{{"1+1=", "#2", "2"}, {"2+3=", "#5", "5"}};
    EXPECT_NEAR(mean_response_entropy(constant_head(200.0), prompts, 4, 1.0, 3), 0.0, 1e-60);
    EXPECT_NEAR(mean_response_entropy(constant_head(0.0), prompts, 4, 1.0, 3, 5),
                std::log(32.0), 1e-12);
}

TEST(ResponseEntropy, StableAcrossSeeds) {
    const auto p = init_parameters(small_model(8));
    const auto prompts = std::vector<Sample>{{"1+1=", "#2", "2"}};
    const double a = mean_response_entropy(p, prompts, 256, 1.0, 1, 8);
    const double b = mean_response_entropy(p, prompts, 256, 1.0, 2, 8);
    EXPECT_LE(std::abs(a - b) / a, 0.05);
}

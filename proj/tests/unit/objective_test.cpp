#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "eksft/log.hpp"
#include "eksft/numerics.hpp"
#include "eksft/objective.hpp"
#include "eksft/rng.hpp"

using namespace eksft;

namespace {

constexpr std::size_t kB = 3, kL = 5, kV = 7;

Tensor random_logits(Rng& rng, double scale = 1.5) {
    Tensor t({kB, kL, kV});
    for (auto& v : t.storage()) {
        v = rng.normal(0.0, scale);
    }
    return t;
}

LabelGrid random_labels(Rng& rng) {
    LabelGrid g{kB, kL, std::vector<int>(kB * kL), std::vector<std::uint8_t>(kB * kL)};
    for (std::size_t i = 0; i < g.rows(); ++i) {
        g.targets[i] = static_cast<int>(rng.below(kV));
        g.valid[i] = (i % kL) >= 1 ? 1 : 0;
    }
    return g;
}

double fd_error(const std::function<double(const Tensor&)>& f, const Tensor& x,
                const Tensor& analytic) {
    return grad_check(f, x, analytic);
}

}  // namespace

TEST(SftLoss, PerfectModelIsZero) {
    Tensor logits({1, 2, 4}, -1e3);
    logits.at(0, 1) = 1e3;
    logits[4 + 3] = 1e3;
    LabelGrid g{1, 2, {1, 3}, {1, 1}};
    EXPECT_NEAR(sft_loss(logits, g).loss.total, 0.0, 1e-12);
}

TEST(SftLoss, UniformIsLogV) {
    const Tensor logits({2, 3, 32}, 0.0);
    LabelGrid g{2, 3, {0, 5, 9, 31, 2, 2}, {1, 1, 1, 1, 1, 0}};
    EXPECT_NEAR(sft_loss(logits, g).loss.total, std::log(32.0), 1e-12);
}

TEST(SftLoss, NoValidTokens) {
    const Tensor logits({1, 2, 4}, 0.0);
    LabelGrid g{1, 2, {0, 0}, {0, 0}};
    EXPECT_THROW(sft_loss(logits, g), DegenerateInputError);
}

TEST(SftLoss, GradientIsSoftmaxMinusOneHot) {
    Rng rng(1);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    const auto r = sft_loss(z, g);
    const double n = 12.0;
    for (std::size_t row = 0; row < g.rows(); ++row) {
        const auto lp = log_softmax(Tensor({kV}, std::vector<double>(z.row(row).begin(),
                                                                      z.row(row).end())));
        for (std::size_t j = 0; j < kV; ++j) {
            const double expect =
                g.valid[row] ? (std::exp(lp[j]) - (static_cast<int>(j) == g.targets[row])) / n
                             : 0.0;
            EXPECT_NEAR(r.dlogits.row(row)[j], expect, 1e-14);
        }
    }
}

TEST(MaskedCe, HandArithmetic) {
    // Two valid tokens whose target log-probs are -1 and -2.
    Tensor logits({1, 2, 2});
    const double a = std::log(std::exp(-1.0) / (1 - std::exp(-1.0)));
    const double b = std::log(std::exp(-2.0) / (1 - std::exp(-2.0)));
    logits.storage() = {a, 0.0, b, 0.0};
    LabelGrid g{1, 2, {0, 0}, {1, 1}};
    MaskSet m;
    m.m_union = {{0, 1}};
    EXPECT_NEAR(masked_ce(logits, g, m), 1.0, 1e-12);
    EXPECT_NEAR(masked_ce(logits, g, MaskSet{}), sft_loss(logits, g).loss.total, 0.0);
}

TEST(MaskedCe, FullMaskIsZeroWithWarning) {
    Rng rng(2);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    MaskSet m;
    for (const auto& t : valid_tokens(g)) {
        m.m_union.push_back(t.ref);
    }
    log::ScopedCapture capture;
    EXPECT_EQ(masked_ce(z, g, m), 0.0);
    EXPECT_FALSE(capture.messages().empty());
}

TEST(MaskedCe, InvalidPositionRejected) {
    Rng rng(3);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    MaskSet m;
    m.m_union = {{0, 9}};
    EXPECT_THROW(masked_ce(z, g, m), InputError);
}

TEST(EntropyReg, UniformAndPeaked) {
    LabelGrid g{1, 2, {0, 0}, {1, 1}};
    MaskSet m;
    m.m_union = {{0, 0}, {0, 1}};
    EXPECT_NEAR(entropy_reg(Tensor({1, 2, 9}, 0.0), g, m).value, std::log(9.0), 1e-12);
    Tensor peaked({1, 2, 9}, 0.0);
    peaked[0] = 60.0;
    peaked[9] = 60.0;
    EXPECT_NEAR(entropy_reg(peaked, g, m).value, 0.0, 1e-20);
    EXPECT_EQ(entropy_reg(peaked, g, MaskSet{}).value, 0.0);
}

TEST(KlReg, SelfIsZero) {
    Rng rng(4);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    MaskSet m;
    m.m_union = {{0, 0}, {2, 3}};
    const auto r = kl_reg(z, z, g, m);
    EXPECT_EQ(r.value, 0.0);
    for (double v : r.dlogits.data()) {
        EXPECT_NEAR(v, 0.0, 1e-16);
    }
}

TEST(KlReg, BatchMismatch) {
    Rng rng(5);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    EXPECT_THROW(kl_reg(z, Tensor({1, kL, kV}), g, MaskSet{}), InputError);
}

TEST(Eksft, ReducesToSft) {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor z = random_logits(rng);
        const Tensor ref = random_logits(rng);
        const LabelGrid g = random_labels(rng);
        const auto e = eksft_loss(z, ref, g, {0.0, 0.0, 0.0});
        const auto s = sft_loss(z, g);
        EXPECT_NEAR(e.loss.total, s.loss.total, 1e-12);
        EXPECT_EQ(e.dlogits, s.dlogits);
    }
}

TEST(Eksft, NegativeLambdaRejected) {
    Rng rng(7);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    EXPECT_THROW(eksft_loss(z, z, g, {0.2, -0.1, 0.05}), ConfigError);
}

TEST(Eksft, MaskSizesFollowRatio) {
    Rng rng(8);
    const Tensor z = random_logits(rng);
    const Tensor ref = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    const auto r = eksft_loss(z, ref, g, {0.2, 0.05, 0.05});
    EXPECT_EQ(r.mask.k, 3u);  // ceil(0.2 * 12)
    EXPECT_EQ(r.mask.m_entropy.size(), 3u);
    EXPECT_EQ(r.mask.m_kl.size(), 3u);
    EXPECT_EQ(r.loss.n_supervised + r.loss.n_masked, 12u);
}

TEST(Eksft, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor z = random_logits(rng);
        const Tensor ref = random_logits(rng);
        const LabelGrid g = random_labels(rng);
        const EksftParams p{0.3, 0.2, 0.3};
        const auto r = eksft_loss(z, ref, g, p);
        const MaskSet mask = r.mask;
        auto f = [&](const Tensor& x) { return eksft_loss(x, ref, g, p, &mask).loss.total; };
        EXPECT_LE(fd_error(f, z, r.dlogits), 1e-6);
    }
}

TEST(Eksft, MaskedGradientIgnoresLabels) {
    Rng rng(10);
    const Tensor z = random_logits(rng);
    const Tensor ref = random_logits(rng);
    LabelGrid g = random_labels(rng);
    const auto a = eksft_loss(z, ref, g, {0.3, 0.1, 0.1});
    for (const auto& t : valid_tokens(g)) {
        if (a.mask.contains(t.ref)) {
            g.targets[t.row] = (g.targets[t.row] + 1 + static_cast<int>(rng.below(kV - 1))) %
                               static_cast<int>(kV);
        }
    }
    const auto b = eksft_loss(z, ref, g, {0.3, 0.1, 0.1}, &a.mask);
    EXPECT_EQ(a.dlogits, b.dlogits);
    EXPECT_EQ(a.loss.total, b.loss.total);
}

TEST(Dft, PerfectModelIsZero) {
    Tensor logits({1, 1, 3}, -1e3);
    logits[2] = 1e3;
    LabelGrid g{1, 1, {2}, {1}};
    EXPECT_NEAR(dft_loss(logits, g).loss.total, 0.0, 1e-12);
}

TEST(Dft, HardTokenGradientVanishes) {
    // Target probability 1e-6: the weighted gradient is about 1e-6 times the CE one.
    Tensor logits({1, 1, 2});
    logits.storage() = {std::log(1e-6 / (1 - 1e-6)), 0.0};
    LabelGrid g{1, 1, {0}, {1}};
    const auto d = dft_loss(logits, g);
    const auto s = sft_loss(logits, g);
    EXPECT_NEAR(d.dlogits[0] / s.dlogits[0], 1e-6, 1e-12);
}

TEST(Dft, GradientWithFrozenWeights) {
    Rng rng(11);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    const auto w = dft_weights(z, g);
    const auto r = dft_loss(z, g, &w);
    auto f = [&](const Tensor& x) { return dft_loss(x, g, &w).loss.total; };
    EXPECT_LE(fd_error(f, z, r.dlogits), 1e-6);
}

TEST(RandomMask, SizeSeedAndReduction) {
    Rng rng(12);
    const Tensor z = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    Rng a(5), b(5);
    EXPECT_EQ(random_mask(g, 0.1, a), random_mask(g, 0.1, b));
    Rng c(6);
    EXPECT_EQ(random_mask(g, 0.1, c).size(), 2u);  // ceil(1.2)
    Rng d(7);
    const auto r = random_mask_loss(z, z, g, 0.0, 0.05, 0.05, d);
    EXPECT_NEAR(r.loss.total, sft_loss(z, g).loss.total, 1e-15);
    Rng e(7);
    EXPECT_THROW(random_mask(g, 1.0, e), ConfigError);
}

TEST(RandomMask, GradientWithFixedMask) {
    Rng rng(13);
    const Tensor z = random_logits(rng);
    const Tensor ref = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    Rng mrng(3);
    const auto r = random_mask_loss(z, ref, g, 0.3, 0.2, 0.3, mrng);
    const MaskSet mask = r.mask;
    auto f = [&](const Tensor& x) {
        Rng unused(0);
        return random_mask_loss(x, ref, g, 0.3, 0.2, 0.3, unused, &mask).loss.total;
    };
    EXPECT_LE(fd_error(f, z, r.dlogits), 1e-6);
}

TEST(GlobalReg, ReductionsAndGradient) {
    Rng rng(14);
    const Tensor z = random_logits(rng);
    const Tensor ref = random_logits(rng);
    const LabelGrid g = random_labels(rng);
    EXPECT_NEAR(global_reg_loss(z, ref, g, 0.0, 0.0).loss.total, sft_loss(z, g).loss.total,
                1e-15);
    EXPECT_EQ(global_reg_loss(z, z, g, 0.1, 0.1).loss.kl_reg, 0.0);
    const auto r = global_reg_loss(z, ref, g, 0.2, 0.3);
    auto f = [&](const Tensor& x) { return global_reg_loss(x, ref, g, 0.2, 0.3).loss.total; };
    EXPECT_LE(fd_error(f, z, r.dlogits), 1e-6);
}

// For a row pi and target y, ||pi - e_y||^2 <= 2 (1 - pi(y)).
TEST(CeGradientBound, HoldsOnRandomRows) {
    Rng rng(15);
    for (int trial = 0; trial < 20000; ++trial) {
        const std::size_t v = 2 + rng.below(40);
        std::vector<double> p(v);
        double s = 0.0;
        for (auto& x : p) {
            x = std::exp(rng.normal(0.0, 3.0));
            s += x;
        }
        for (auto& x : p) x /= s;
        const std::size_t y = rng.below(v);
        double norm = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double d = p[j] - (j == y ? 1.0 : 0.0);
            norm += d * d;
        }
        EXPECT_LE(norm, 2.0 * (1.0 - p[y]) + 1e-15);
    }
}

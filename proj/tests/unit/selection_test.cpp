#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "eksft/log.hpp"
#include "eksft/rng.hpp"
#include "eksft/selection.hpp"

using namespace eksft;

namespace {

std::vector<double> log_of(std::vector<double> p) {
    for (auto& x : p) {
        x = std::log(x);
    }
    return p;
}

std::vector<ScoredToken> scored(const std::vector<double>& values) {
    std::vector<ScoredToken> out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out.push_back({{0, static_cast<std::uint32_t>(i)}, values[i]});
    }
    return out;
}

// Full sort on (-value, key), take the first k, union via std::set.
std::set<TokenRef> oracle_top(const std::vector<TokenStats>& stats, bool by_kl, std::size_t k) {
    std::vector<std::pair<double, TokenRef>> v;
    for (const auto& s : stats) {
        v.push_back({-(by_kl ? s.kl : s.entropy), s.ref});
    }
    std::sort(v.begin(), v.end());
    std::set<TokenRef> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.insert(v[i].second);
    }
    return out;
}

}  // namespace

TEST(Entropy, UniformIsLogV) {
    const std::vector<double> lp(32, -std::log(32.0));
    EXPECT_NEAR(token_entropy(lp), std::log(32.0), 1e-12);
    EXPECT_NEAR(token_entropy(lp), 3.4657, 1e-4);
}

TEST(Entropy, OneHotIsZero) {
    const std::vector<double> lp = {0.0, -INFINITY, -INFINITY};
    EXPECT_EQ(token_entropy(lp), 0.0);
}

TEST(Entropy, TwoPointDistribution) {
    const double expect = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
    EXPECT_NEAR(token_entropy(log_of({0.25, 0.75})), expect, 1e-12);
    EXPECT_NEAR(token_entropy(log_of({0.25, 0.75})), 0.5623, 1e-4);
}

TEST(Entropy, RejectsNonDistribution) {
    EXPECT_THROW(token_entropy(log_of({0.3, 0.3})), InputError);
    EXPECT_THROW(token_entropy(std::vector<double>{0.0}), InputError);
}

TEST(Kl, IdenticalIsZero) {
    const auto p = log_of({0.2, 0.3, 0.5});
    EXPECT_EQ(token_kl(p, p), 0.0);
}

TEST(Kl, HandValue) {
    const double expect = 0.75 * std::log(0.75 / 0.5) + 0.25 * std::log(0.25 / 0.5);
    EXPECT_NEAR(token_kl(log_of({0.75, 0.25}), log_of({0.5, 0.5})), expect, 1e-12);
    EXPECT_NEAR(expect, 0.13081, 1e-5);
}

TEST(Kl, VocabularyMismatch) {
    EXPECT_THROW(token_kl(log_of({0.5, 0.5}), log_of({0.2, 0.3, 0.5})), InputError);
}

TEST(Kl, GibbsInequalityOnRandomPairs) {
    Rng rng(17);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t v = 2 + rng.below(30);
        std::vector<double> p(v), q(v);
        double sp = 0.0, sq = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            p[j] = std::exp(rng.normal(0.0, 2.0));
            q[j] = std::exp(rng.normal(0.0, 2.0));
            sp += p[j];
            sq += q[j];
        }
        for (std::size_t j = 0; j < v; ++j) {
            p[j] /= sp;
            q[j] /= sq;
        }
        EXPECT_GE(token_kl(log_of(p), log_of(q)), 0.0);
        const double h = token_entropy(log_of(p));
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(static_cast<double>(v)) + 1e-12);
    }
}

TEST(Rank, Examples) {
    const std::vector<double> v = {0.5, 0.9, 0.9, 0.1};
    EXPECT_EQ(rank(0.9, v), 2u);
    EXPECT_EQ(rank(0.5, v), 3u);
    const std::vector<double> w = {0.1, 0.7, 0.3};
    EXPECT_EQ(rank(0.7, w), 1u);
    const std::vector<double> same(5, 0.4);
    EXPECT_EQ(rank(0.4, same), 5u);
}

TEST(TopkCount, CeilingWithSnap) {
    EXPECT_EQ(topk_count(0.2, 7), 2u);
    EXPECT_EQ(topk_count(0.1, 30), 3u);
    EXPECT_EQ(topk_count(0.0, 10), 0u);
    EXPECT_EQ(topk_count(1.0, 10), 10u);
    EXPECT_EQ(topk_count(0.01, 5), 1u);
    EXPECT_THROW(topk_count(1.5, 3), ConfigError);
    EXPECT_THROW(topk_count(-0.1, 3), ConfigError);
}

TEST(TopkSelect, ClearWinners) {
    const auto s = scored({0.9, 0.9, 0.5, 0.1});
    const auto out = topk_select(s, 0.5);
    EXPECT_EQ(out, (std::vector<TokenRef>{{0, 0}, {0, 1}}));
}

TEST(TopkSelect, TieBrokenByKey) {
    const auto s = scored({0.9, 0.9, 0.9, 0.1});
    EXPECT_EQ(topk_select(s, 0.5), (std::vector<TokenRef>{{0, 0}, {0, 1}}));
}

TEST(TopkSelect, ZeroRatioIsEmpty) { EXPECT_TRUE(topk_select(scored({1, 2, 3}), 0.0).empty()); }

TEST(BuildMask, ZeroRatioEmptiesEverything) {
    std::vector<TokenStats> stats = {{{0, 0}, 1.0, 1.0}, {{0, 1}, 2.0, 0.5}};
    const auto m = build_mask(stats, 0.0);
    EXPECT_TRUE(m.m_entropy.empty());
    EXPECT_TRUE(m.m_kl.empty());
    EXPECT_TRUE(m.m_union.empty());
}

TEST(BuildMask, DisjointTopsDoubleTheUnion) {
    std::vector<TokenStats> stats;
    for (std::uint32_t i = 0; i < 10; ++i) {
        stats.push_back({{0, i}, static_cast<double>(i), static_cast<double>(10 - i)});
    }
    const auto m = build_mask(stats, 0.2);
    EXPECT_EQ(m.k, 2u);
    EXPECT_EQ(m.m_union.size(), 4u);
}

TEST(BuildMask, EmptyBatchWarns) {
    log::ScopedCapture capture;
    const auto m = build_mask(std::vector<TokenStats>{}, 0.2);
    EXPECT_EQ(m.k, 0u);
    EXPECT_TRUE(m.m_union.empty());
    EXPECT_FALSE(capture.messages().empty());
}

TEST(BuildMask, MatchesSortAndUnionOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(60);
        const double rho = static_cast<double>(rng.below(101)) / 100.0;
        // Few distinct levels force many ties.
        const bool ties = trial % 3 == 0;
        std::vector<TokenStats> stats;
        for (std::size_t i = 0; i < n; ++i) {
            const auto seq = static_cast<std::uint32_t>(i / 7);
            const auto pos = static_cast<std::uint32_t>(i % 7);
            const double h = ties ? static_cast<double>(rng.below(3)) : rng.uniform();
            const double kl = ties ? static_cast<double>(rng.below(2)) : rng.uniform();
            stats.push_back({{seq, pos}, h, kl});
        }
        Rng shuffle_rng(trial);
        shuffle_rng.shuffle(stats);
        const auto m = build_mask(stats, rho);
        const std::size_t k = static_cast<std::size_t>(std::ceil(rho * n - 1e-9));
        EXPECT_EQ(m.k, k);
        EXPECT_EQ(m.m_entropy.size(), k);
        EXPECT_EQ(m.m_kl.size(), k);
        const auto oh = oracle_top(stats, false, k);
        const auto okl = oracle_top(stats, true, k);
        std::set<TokenRef> ou = oh;
        ou.insert(okl.begin(), okl.end());
        EXPECT_EQ(std::set<TokenRef>(m.m_entropy.begin(), m.m_entropy.end()), oh);
        EXPECT_EQ(std::set<TokenRef>(m.m_kl.begin(), m.m_kl.end()), okl);
        EXPECT_EQ(std::set<TokenRef>(m.m_union.begin(), m.m_union.end()), ou);
    }
}

TEST(Iou, Examples) {
    EXPECT_DOUBLE_EQ(iou(std::vector<int>{1, 2, 3}, std::vector<int>{3, 4}), 0.25);
    EXPECT_DOUBLE_EQ(iou(std::vector<int>{5, 6}, std::vector<int>{6, 5}), 1.0);
    EXPECT_DOUBLE_EQ(iou(std::vector<int>{}, std::vector<int>{}), 1.0);
    EXPECT_DOUBLE_EQ(iou(std::vector<int>{1}, std::vector<int>{2}), 0.0);
}

TEST(MaskDump, OneRowPerToken) {
    std::vector<TokenStats> stats = {{{0, 0}, 1.0, 0.1}, {{0, 1}, 0.2, 0.9}, {{1, 0}, 0.5, 0.5}};
    const auto m = build_mask(stats, 0.3);
    std::ostringstream out;
    write_mask_dump(out, 4, stats, m);
    std::istringstream in(out.str());
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["step"], 4);
        const TokenRef r{j["seq"].get<std::uint32_t>(), j["pos"].get<std::uint32_t>()};
        EXPECT_EQ(j["in_mH"].get<bool>(),
                  std::binary_search(m.m_entropy.begin(), m.m_entropy.end(), r));
        EXPECT_EQ(j["in_mKL"].get<bool>(), std::binary_search(m.m_kl.begin(), m.m_kl.end(), r));
        ++rows;
    }
    EXPECT_EQ(rows, 3);
}

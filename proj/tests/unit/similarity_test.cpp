#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "reviewrec/error.hpp"
#include "reviewrec/similarity.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::similarity;
using rrtest::review;

namespace {

std::vector<corpus::Review> rows(std::vector<std::tuple<std::string, std::string, int>> cells) {
    std::vector<corpus::Review> out;
    int n = 0;
    for (auto& [u, i, r] : cells) out.push_back(review("r" + std::to_string(n++), u, i, r));
    return out;
}

}  // namespace

TEST(Center, ObservedEntriesOnly) {
    auto m = RatingMatrix::from_reviews(rows({{"u", "a", 2}, {"u", "b", 4}, {"v", "a", 5}, {"w", "a", 4}, {"w", "b", 4}}));
    auto c = mean_center(m);
    auto u = m.user_index.at("u"), v = m.user_index.at("v"), w = m.user_index.at("w");
    ASSERT_EQ(c.rows[u].size(), 2u);
    EXPECT_DOUBLE_EQ(c.rows[u][0].second, -1.0);
    EXPECT_DOUBLE_EQ(c.rows[u][1].second, 1.0);
    ASSERT_EQ(c.rows[v].size(), 1u);  // unobserved cells stay absent
    EXPECT_DOUBLE_EQ(c.rows[v][0].second, 0.0);
    EXPECT_DOUBLE_EQ(c.rows[w][0].second, 0.0);
}

TEST(Center, DuplicateCellsAverage) {
    auto m = RatingMatrix::from_reviews(rows({{"u", "a", 2}, {"u", "a", 4}, {"u", "b", 5}}));
    ASSERT_EQ(m.rows[0].size(), 2u);
    EXPECT_DOUBLE_EQ(m.rows[0][0].second, 3.0);
}

TEST(Cosine, HandCases) {
    auto c1 = rows({{"u", "i1", 2}, {"u", "i2", 4}, {"v", "i1", 1}, {"v", "i2", 5}});
    auto m1 = RatingMatrix::from_reviews(c1);
    auto cm1 = mean_center(m1);
    cm1.base = &m1;
    EXPECT_NEAR(adjusted_cosine("u", "v", cm1), 1.0, 1e-12);

    auto c2 = rows({{"u", "i1", 2}, {"u", "i2", 4}, {"v", "i1", 5}, {"v", "i2", 5}, {"v", "i3", 1}});
    auto m2 = RatingMatrix::from_reviews(c2);
    auto cm2 = mean_center(m2);
    cm2.base = &m2;
    EXPECT_NEAR(adjusted_cosine("u", "v", cm2), 0.0, 1e-12);

    auto c3 = rows({{"u", "i1", 2}, {"u", "i2", 4}, {"v", "i3", 1}, {"v", "i4", 5}});
    auto m3 = RatingMatrix::from_reviews(c3);
    auto cm3 = mean_center(m3);
    cm3.base = &m3;
    EXPECT_EQ(adjusted_cosine("u", "v", cm3), 0.0);
    EXPECT_EQ(adjusted_cosine("u", "nobody", cm3), 0.0);
}

TEST(Cosine, SymmetryRangeAndSelf) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> rating(1, 5);
    std::bernoulli_distribution observed(0.5);
    std::vector<std::tuple<std::string, std::string, int>> cells;
    for (int u = 0; u < 30; ++u)
        for (int i = 0; i < 12; ++i)
            if (observed(rng)) cells.emplace_back("u" + std::to_string(u), "i" + std::to_string(i), rating(rng));
    auto m = RatingMatrix::from_reviews(rows(cells));
    auto c = mean_center(m);
    for (std::uint32_t a = 0; a < m.users.size(); ++a) {
        double self = 0.0;
        for (auto [_, x] : c.rows[a]) self += x * x;
        if (self > 0) {
            EXPECT_NEAR(adjusted_cosine(a, a, c), 1.0, 1e-12);
        }
        for (std::uint32_t b = 0; b < m.users.size(); ++b) {
            double s = adjusted_cosine(a, b, c);
            EXPECT_EQ(s, adjusted_cosine(b, a, c));
            EXPECT_LE(std::abs(s), 1.0 + 1e-9);
        }
    }
}

TEST(Cosine, ParallelScoringMatchesSerial) {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> rating(1, 10);
    std::bernoulli_distribution observed(0.3);
    std::vector<std::tuple<std::string, std::string, int>> cells;
    for (int u = 0; u < 400; ++u)
        for (int i = 0; i < 60; ++i)
            if (observed(rng)) cells.emplace_back("u" + std::to_string(u), "i" + std::to_string(i), rating(rng));
    auto m = RatingMatrix::from_reviews(rows(cells));
    auto c = mean_center(m);
    std::vector<std::uint32_t> cand(m.users.size());
    std::iota(cand.begin(), cand.end(), 0u);
    std::vector<double> par(cand.size()), ser(cand.size());
    score_candidates(c, c.rows[0], cand, par);
    score_candidates_serial(c, c.rows[0], cand, ser);
    EXPECT_EQ(par, ser);
}

TEST(Neighbors, TopKAgainstExhaustiveSort) {
    // target t and five raters of X with distinct similarity to t
    std::vector<std::tuple<std::string, std::string, int>> cells{{"t", "A", 5}, {"t", "B", 1}, {"t", "C", 3}};
    const std::vector<std::array<int, 3>> tastes{{5, 1, 3}, {4, 2, 5}, {1, 5, 3}, {3, 3, 5}, {5, 2, 1}};
    for (std::size_t n = 0; n < tastes.size(); ++n) {
        const std::string u = "n" + std::to_string(n);
        cells.emplace_back(u, "A", tastes[n][0]);
        cells.emplace_back(u, "B", tastes[n][1]);
        cells.emplace_back(u, "C", tastes[n][2]);
        cells.emplace_back(u, "X", 3);
    }
    auto train = rows(cells);
    NeighborIndex idx(train);
    std::vector<Neighbor> all;
    for (std::size_t n = 0; n < tastes.size(); ++n) {
        const std::string u = "n" + std::to_string(n);
        all.push_back({u, idx.similarity("t", u)});
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.score != b.score ? a.score > b.score : a.user_id < b.user_id;
    });
    all.resize(3);
    auto res = idx.top_k("t", "X", 3);
    EXPECT_EQ(res.neighbors, all);
    EXPECT_EQ(idx.top_k("t", "X", 10).neighbors.size(), 5u);
    EXPECT_TRUE(idx.top_k("t", "nothing").neighbors.empty());
    EXPECT_THROW(idx.top_k("t", "X", 0), ConfigError);
    auto j = neighbors_to_json(res);
    EXPECT_EQ(j.at("neighbors").size(), 3u);
}

TEST(Neighbors, TiesBreakByUserId) {
    auto train = rows({{"t", "A", 5}, {"b", "X", 2}, {"a", "X", 4}, {"c", "X", 1}});
    NeighborIndex idx(train);
    auto res = idx.top_k("t", "X", 2);
    ASSERT_EQ(res.neighbors.size(), 2u);
    EXPECT_EQ(res.neighbors[0].user_id, "a");
    EXPECT_EQ(res.neighbors[1].user_id, "b");
}

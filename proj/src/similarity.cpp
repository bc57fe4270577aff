#include "reviewrec/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <omp.h>

#include "reviewrec/error.hpp"

namespace reviewrec::similarity {

RatingMatrix RatingMatrix::from_reviews(std::span<const corpus::Review> reviews) {
    RatingMatrix m;
    std::set<std::string> users, items;
    for (const auto& r : reviews) {
        users.insert(r.user_id);
        items.insert(r.item_id);
    }
    m.users.assign(users.begin(), users.end());
    m.items.assign(items.begin(), items.end());
    for (std::uint32_t i = 0; i < m.users.size(); ++i) m.user_index.emplace(m.users[i], i);
    for (std::uint32_t i = 0; i < m.items.size(); ++i) m.item_index.emplace(m.items[i], i);

    std::vector<std::map<std::uint32_t, std::pair<double, int>>> acc(m.users.size());
    for (const auto& r : reviews) {
        auto& cell = acc[m.user_index.at(r.user_id)][m.item_index.at(r.item_id)];
        cell.first += r.rating;
        ++cell.second;
    }
    m.rows.resize(m.users.size());
    m.raters.resize(m.items.size());
    for (std::uint32_t u = 0; u < acc.size(); ++u) {
        for (const auto& [item, s] : acc[u]) {
            m.rows[u].emplace_back(item, s.first / s.second);
            m.raters[item].push_back(u);
        }
    }
    return m;
}

std::vector<double> RatingMatrix::user_means() const {
    std::vector<double> means(rows.size(), 0.0);
    for (std::size_t u = 0; u < rows.size(); ++u) {
        if (rows[u].empty()) continue;
        double s = 0.0;
        for (const auto& [i, v] : rows[u]) s += v;
        means[u] = s / static_cast<double>(rows[u].size());
    }
    return means;
}

CenteredMatrix mean_center(const RatingMatrix& matrix) {
    if (matrix.rows.empty()) throw ConfigError("cannot mean-center an empty rating matrix");
    CenteredMatrix c;
    c.base = &matrix;
    c.means = matrix.user_means();
    c.rows.resize(matrix.rows.size());
    for (std::size_t u = 0; u < matrix.rows.size(); ++u) {
        c.rows[u].reserve(matrix.rows[u].size());
        for (const auto& [i, v] : matrix.rows[u]) c.rows[u].emplace_back(i, v - c.means[u]);
    }
    return c;
}

double adjusted_cosine(std::span<const Entry> u, std::span<const Entry> v) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    std::size_t a = 0, b = 0;
    bool any = false;
    while (a < u.size() && b < v.size()) {
        if (u[a].first < v[b].first) {
            ++a;
        } else if (v[b].first < u[a].first) {
            ++b;
        } else {
            const double x = u[a].second, y = v[b].second;
            dot += x * y;
            nu += x * x;
            nv += y * y;
            any = true;
            ++a;
            ++b;
        }
    }
    if (!any || nu == 0.0 || nv == 0.0) return 0.0;
    return dot / std::sqrt(nu * nv);
}

double adjusted_cosine(std::uint32_t u, std::uint32_t v, const CenteredMatrix& centered) {
    return adjusted_cosine(centered.rows.at(u), centered.rows.at(v));
}

double adjusted_cosine(const std::string& u, const std::string& v, const CenteredMatrix& centered) {
    const auto& idx = centered.base->user_index;
    auto a = idx.find(u), b = idx.find(v);
    if (a == idx.end() || b == idx.end()) return 0.0;
    return adjusted_cosine(a->second, b->second, centered);
}

void score_candidates(const CenteredMatrix& centered, std::span<const Entry> target,
                      std::span<const std::uint32_t> candidates, std::span<double> out) {
    const auto n = static_cast<std::ptrdiff_t>(candidates.size());
#pragma omp parallel for schedule(static) if (n > 256)
    for (std::ptrdiff_t c = 0; c < n; ++c) {
        out[static_cast<std::size_t>(c)] = adjusted_cosine(target, centered.rows[candidates[static_cast<std::size_t>(c)]]);
    }
}

void score_candidates_serial(const CenteredMatrix& centered, std::span<const Entry> target,
                             std::span<const std::uint32_t> candidates, std::span<double> out) {
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        out[c] = adjusted_cosine(target, centered.rows[candidates[c]]);
    }
}

namespace {

void rank_neighbors(NeighborResult& result, std::vector<Neighbor> scored, int k) {
    std::sort(scored.begin(), scored.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.score != b.score ? a.score > b.score : a.user_id < b.user_id;
    });
    if (scored.size() > static_cast<std::size_t>(k)) scored.resize(static_cast<std::size_t>(k));
    result.neighbors = std::move(scored);
}

}  // namespace

NeighborResult top_k_neighbors(const CenteredMatrix& centered, const std::string& target_user,
                               const std::string& target_item, int k) {
    if (k < 1) throw ConfigError("neighbor count k must be >= 1");
    NeighborResult result{target_user, target_item, {}};
    const auto& m = *centered.base;
    auto item_it = m.item_index.find(target_item);
    if (item_it == m.item_index.end()) return result;

    std::vector<std::uint32_t> candidates;
    auto user_it = m.user_index.find(target_user);
    for (auto v : m.raters[item_it->second]) {
        if (user_it != m.user_index.end() && v == user_it->second) continue;
        candidates.push_back(v);
    }
    std::vector<double> scores(candidates.size(), 0.0);
    if (user_it != m.user_index.end()) {
        score_candidates(centered, centered.rows[user_it->second], candidates, scores);
    }
    std::vector<Neighbor> scored;
    scored.reserve(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) scored.push_back({m.users[candidates[c]], scores[c]});
    rank_neighbors(result, std::move(scored), k);
    return result;
}

NeighborIndex::NeighborIndex(std::span<const corpus::Review> train, std::size_t memo_capacity)
    : matrix_(RatingMatrix::from_reviews(train)), memo_capacity_(memo_capacity) {
    centered_ = mean_center(matrix_);
    centered_.base = &matrix_;
}

double NeighborIndex::similarity(const std::string& u, const std::string& v) const {
    auto a = matrix_.user_index.find(u), b = matrix_.user_index.find(v);
    if (a == matrix_.user_index.end() || b == matrix_.user_index.end()) return 0.0;
    auto lo = std::min(a->second, b->second), hi = std::max(a->second, b->second);
    const std::uint64_t key = (static_cast<std::uint64_t>(lo) << 32) | hi;
    {
        std::lock_guard lock(memo_mutex_);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    double s = adjusted_cosine(lo, hi, centered_);
    std::lock_guard lock(memo_mutex_);
    if (memo_.size() >= memo_capacity_) memo_.clear();
    memo_.emplace(key, s);
    return s;
}

NeighborResult NeighborIndex::top_k(const std::string& target_user, const std::string& target_item, int k) const {
    if (k < 1) throw ConfigError("neighbor count k must be >= 1");
    NeighborResult result{target_user, target_item, {}};
    auto item_it = matrix_.item_index.find(target_item);
    if (item_it == matrix_.item_index.end()) return result;
    std::vector<Neighbor> scored;
    for (auto v : matrix_.raters[item_it->second]) {
        const auto& vid = matrix_.users[v];
        if (vid == target_user) continue;
        scored.push_back({vid, similarity(target_user, vid)});
    }
    rank_neighbors(result, std::move(scored), k);
    return result;
}

nlohmann::json neighbors_to_json(const NeighborResult& result) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& n : result.neighbors) list.push_back({{"user_id", n.user_id}, {"similarity", n.score}});
    return {{"target_user", result.target_user}, {"target_item", result.target_item}, {"neighbors", list}};
}

}  // namespace reviewrec::similarity

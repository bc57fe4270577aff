#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reviewrec/corpus.hpp"

namespace reviewrec::similarity {

using Entry = std::pair<std::uint32_t, double>;  // (item index, value)

/// Sparse user x item matrix of observed train ratings. Repeated (user, item)
/// interactions collapse to their mean rating.
struct RatingMatrix {
    std::vector<std::string> users;  // sorted
    std::vector<std::string> items;  // sorted
    std::unordered_map<std::string, std::uint32_t> user_index;
    std::unordered_map<std::string, std::uint32_t> item_index;
    std::vector<std::vector<Entry>> rows;              // per user, sorted by item index
    std::vector<std::vector<std::uint32_t>> raters;    // per item, sorted user indices

    static RatingMatrix from_reviews(std::span<const corpus::Review> reviews);
    /// Per-user mean over observed entries only.
    std::vector<double> user_means() const;
};

/// R'_ui = R_ui - mu_u over observed entries; unobserved cells stay absent.
struct CenteredMatrix {
    const RatingMatrix* base = nullptr;
    std::vector<std::vector<Entry>> rows;
    std::vector<double> means;
};

CenteredMatrix mean_center(const RatingMatrix& matrix);

/// Cosine over the co-rated items of two centered rows. 0 when there are no
/// co-rated items or either co-rated norm vanishes.
double adjusted_cosine(std::span<const Entry> u, std::span<const Entry> v);
double adjusted_cosine(std::uint32_t u, std::uint32_t v, const CenteredMatrix& centered);
/// Unknown user ids score 0.
double adjusted_cosine(const std::string& u, const std::string& v, const CenteredMatrix& centered);

struct Neighbor {
    std::string user_id;
    double score = 0.0;

    bool operator==(const Neighbor&) const = default;
};

struct NeighborResult {
    std::string target_user;
    std::string target_item;
    std::vector<Neighbor> neighbors;  // score descending, ties by user id
};

inline constexpr int kDefaultNeighbors = 3;

/// Similarity of `target` to each candidate row. OpenMP-parallel over candidates.
void score_candidates(const CenteredMatrix& centered, std::span<const Entry> target,
                      std::span<const std::uint32_t> candidates, std::span<double> out);
/// Serial reference for score_candidates.
void score_candidates_serial(const CenteredMatrix& centered, std::span<const Entry> target,
                             std::span<const std::uint32_t> candidates, std::span<double> out);

/// Train users other than the target who rated `target_item`, best `k` by
/// adjusted cosine. Empty when nobody qualifies.
NeighborResult top_k_neighbors(const CenteredMatrix& centered, const std::string& target_user,
                               const std::string& target_item, int k = kDefaultNeighbors);

/// Lazily evaluated neighbor queries over one train matrix, with a bounded
/// memo of pairwise similarities. Safe for concurrent queries.
class NeighborIndex {
public:
    explicit NeighborIndex(std::span<const corpus::Review> train, std::size_t memo_capacity = 1u << 20);

    NeighborResult top_k(const std::string& target_user, const std::string& target_item,
                         int k = kDefaultNeighbors) const;
    double similarity(const std::string& u, const std::string& v) const;

    const RatingMatrix& matrix() const noexcept { return matrix_; }
    const CenteredMatrix& centered() const noexcept { return centered_; }

private:
    RatingMatrix matrix_;
    CenteredMatrix centered_;
    std::size_t memo_capacity_;
    mutable std::mutex memo_mutex_;
    mutable std::unordered_map<std::uint64_t, double> memo_;
};

nlohmann::json neighbors_to_json(const NeighborResult& result);

}  // namespace reviewrec::similarity

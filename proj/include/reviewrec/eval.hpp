#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reviewrec/corpus.hpp"
#include "reviewrec/error.hpp"

namespace reviewrec::eval {

class EvaluationError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Throws EvaluationError on empty or mismatched input.
double rmse(std::span<const double> predicted, std::span<const double> actual);
double mae(std::span<const double> predicted, std::span<const double> actual);

/// |top-k ∩ relevant| / |relevant|; 0 for an empty relevant set.
double recall_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, int k);
/// Binary gain 1/log2(rank+1), normalized by the ideal DCG of min(|relevant|, k) hits.
double ndcg_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, int k);

struct MetricRow {
    std::string metric;  // rmse, mae, recall, ndcg
    std::string subset;  // total, warm, cold, unseen
    int k = 0;           // ranking cutoff, 0 for rating metrics
    double value = 0.0;
    std::size_t support = 0;
};

struct MetricReport {
    std::string task;  // rating or topk
    std::vector<MetricRow> rows;
    std::vector<std::string> notes;
    std::vector<std::string> warnings;
    std::string config_digest;

    const MetricRow* find(const std::string& metric, const std::string& subset, int k = 0) const;
    nlohmann::json to_json() const;
    /// metric,subset,k,value,support
    std::string to_csv() const;
};

inline constexpr double kDefaultCoverageThreshold = 0.95;

/// RMSE/MAE for the total and each non-empty subset, with `predictions`
/// keyed by review id. Totals pool every covered pair.
MetricReport evaluate_rating(const std::map<std::string, double>& predictions, std::span<const corpus::Review> test,
                             const std::map<std::string, corpus::Subset>& tags,
                             double coverage_threshold = kDefaultCoverageThreshold);

struct TopkProtocol {
    int keep_min = 6;   // interactions rated below this are dropped
    int high_min = 9;   // highly preferred from here up
    std::uint64_t seed = 7;
};

struct TopkTestbed {
    std::vector<corpus::Review> train;
    std::vector<corpus::Review> test;
    std::map<std::string, std::set<std::string>> relevant;  // user -> test items
    std::size_t excluded = 0;
};

/// Keeps ratings >= keep_min; per user, the highly preferred interactions are
/// shuffled (seeded) and split with floor(n/2) in test and the rest in train.
/// Throws ProtocolError when the scale cannot hold highly preferred ratings.
TopkTestbed build_balanced_topk_testbed(const corpus::Corpus& corpus, const TopkProtocol& protocol = {});

using RankedLists = std::map<std::string, std::vector<std::string>>;  // user -> item ids, best first

/// Per-user [recall@k..., ndcg@k...] for the users in `relevant` with a
/// non-empty set; a user without a list scores 0. OpenMP over users.
std::vector<std::vector<double>> topk_user_metrics(const RankedLists& lists,
                                                   const std::map<std::string, std::set<std::string>>& relevant,
                                                   std::span<const int> ks);
/// Serial reference for topk_user_metrics.
std::vector<std::vector<double>> topk_user_metrics_serial(const RankedLists& lists,
                                                          const std::map<std::string, std::set<std::string>>& relevant,
                                                          std::span<const int> ks);

/// Mean Recall@k and NDCG@k rows, one per cutoff.
MetricReport evaluate_topk(const RankedLists& lists, const std::map<std::string, std::set<std::string>>& relevant,
                           std::span<const int> ks);

}  // namespace reviewrec::eval

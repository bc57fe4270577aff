#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reviewrec/cf.hpp"
#include "reviewrec/error.hpp"

namespace reviewrec::ranking {

struct RankedItem {
    std::string item_id;
    double generator_score = 0.0;
    int generator_rank = 0;  // 1-based position in the candidate list
    std::optional<double> expected_rating;
    int final_rank = 0;  // 1-based
    /// The predictor failed; the item sits at the tail.
    bool failed = false;
    std::string error;
};

struct RankedList {
    std::string user_id;
    std::string generator;
    std::vector<RankedItem> items;
    int k = 0;

    std::vector<std::string> item_ids() const;
};

/// Every prediction for the user failed.
class RerankError : public Error {
public:
    using Error::Error;
};

/// Expected rating for (user, item). Throws on failure.
using Predictor = std::function<double(const std::string& user, const std::string& item)>;

/// Stable sort by expected rating descending, ties by generator rank; failed
/// predictions keep generator order at the tail.
RankedList rerank(const cf::CandidateList& candidates, const Predictor& predict);

/// Same ordering from precomputed scores (nullopt = failed), one per candidate.
RankedList rerank_scored(const cf::CandidateList& candidates, std::span<const std::optional<double>> scores,
                         std::span<const std::string> errors = {});

/// First k items; ranks are left untouched.
RankedList truncate(RankedList list, int k);

nlohmann::json ranked_to_json(const RankedList& list);

using CandidateSource = std::function<cf::CandidateList(const std::string& user)>;

struct TimingReport {
    double generate_seconds = 0.0;  // summed over users
    double rerank_seconds = 0.0;
    double wall_seconds = 0.0;
    std::size_t users = 0;
    std::size_t predictions = 0;

    nlohmann::json to_json() const;
};

struct PipelineResult {
    std::map<std::string, RankedList> lists;
    /// user -> reason (empty candidate list, rerank error, generator failure).
    std::map<std::string, std::string> failures;
    TimingReport timing;
};

/// Per user: n candidates from `source`, rerank, truncate to k. Users run with
/// up to `workers` threads; results do not depend on scheduling.
PipelineResult run_pipeline(std::span<const std::string> users, int n, int k, const CandidateSource& source,
                            const Predictor& predict, int workers);

}  // namespace reviewrec::ranking

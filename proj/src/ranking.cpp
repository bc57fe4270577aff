#include "reviewrec/ranking.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include <omp.h>

namespace reviewrec::ranking {

using nlohmann::json;

std::vector<std::string> RankedList::item_ids() const {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.item_id);
    return out;
}

RankedList rerank_scored(const cf::CandidateList& candidates, std::span<const std::optional<double>> scores,
                         std::span<const std::string> errors) {
    if (scores.size() != candidates.items.size()) throw ConfigError("one score per candidate required");
    RankedList out;
    out.user_id = candidates.user_id;
    out.generator = candidates.generator;
    for (std::size_t i = 0; i < candidates.items.size(); ++i) {
        RankedItem item;
        item.item_id = candidates.items[i].item_id;
        item.generator_score = candidates.items[i].score;
        item.generator_rank = static_cast<int>(i) + 1;
        item.expected_rating = scores[i];
        item.failed = !scores[i].has_value();
        if (item.failed && i < errors.size()) item.error = errors[i];
        out.items.push_back(std::move(item));
    }
    if (!out.items.empty() && std::all_of(out.items.begin(), out.items.end(), [](const auto& x) { return x.failed; })) {
        throw RerankError("every prediction failed for user '" + candidates.user_id + "'");
    }
    std::stable_sort(out.items.begin(), out.items.end(), [](const RankedItem& a, const RankedItem& b) {
        if (a.failed != b.failed) return !a.failed;
        if (!a.failed && *a.expected_rating != *b.expected_rating) return *a.expected_rating > *b.expected_rating;
        return a.generator_rank < b.generator_rank;
    });
    for (std::size_t i = 0; i < out.items.size(); ++i) out.items[i].final_rank = static_cast<int>(i) + 1;
    out.k = static_cast<int>(out.items.size());
    return out;
}

RankedList rerank(const cf::CandidateList& candidates, const Predictor& predict) {
    std::vector<std::optional<double>> scores;
    std::vector<std::string> errors;
    for (const auto& c : candidates.items) {
        try {
            scores.emplace_back(predict(candidates.user_id, c.item_id));
            errors.emplace_back();
        } catch (const std::exception& e) {
            scores.emplace_back(std::nullopt);
            errors.emplace_back(e.what());
        }
    }
    return rerank_scored(candidates, scores, errors);
}

RankedList truncate(RankedList list, int k) {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (list.items.size() > static_cast<std::size_t>(k)) list.items.resize(static_cast<std::size_t>(k));
    list.k = k;
    return list;
}

json ranked_to_json(const RankedList& list) {
    json items = json::array();
    for (const auto& it : list.items) {
        json j{{"item_id", it.item_id},
               {"generator_rank", it.generator_rank},
               {"generator_score", it.generator_score},
               {"final_rank", it.final_rank},
               {"expected_rating", it.expected_rating ? json(*it.expected_rating) : json(nullptr)},
               {"failed", it.failed}};
        if (it.failed) j["error"] = it.error;
        items.push_back(std::move(j));
    }
    return {{"user_id", list.user_id}, {"generator", list.generator}, {"k", list.k}, {"items", items}};
}

json TimingReport::to_json() const {
    return {{"generate_seconds", generate_seconds},
            {"rerank_seconds", rerank_seconds},
            {"wall_seconds", wall_seconds},
            {"users", users},
            {"predictions", predictions}};
}

PipelineResult run_pipeline(std::span<const std::string> users, int n, int k, const CandidateSource& source,
                            const Predictor& predict, int workers) {
    if (k < 1 || n < k) throw ConfigError("need 1 <= k <= n (got n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
    using clock = std::chrono::steady_clock;
    const auto wall_start = clock::now();

    struct Slot {
        std::optional<RankedList> list;
        std::string failure;
        double gen = 0.0, rr = 0.0;
        std::size_t predictions = 0;
    };
    std::vector<Slot> slots(users.size());
    const auto count = static_cast<std::ptrdiff_t>(users.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers))
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        auto& slot = slots[static_cast<std::size_t>(i)];
        const auto& user = users[static_cast<std::size_t>(i)];
        try {
            auto t0 = clock::now();
            auto cands = source(user);
            auto t1 = clock::now();
            slot.gen = std::chrono::duration<double>(t1 - t0).count();
            if (cands.items.size() > static_cast<std::size_t>(n)) cands.items.resize(static_cast<std::size_t>(n));
            if (cands.items.empty()) {
                slot.failure = "empty candidate list";
                continue;
            }
            slot.predictions = cands.items.size();
            auto ranked = rerank(cands, predict);
            slot.rr = std::chrono::duration<double>(clock::now() - t1).count();
            slot.list = truncate(std::move(ranked), k);
        } catch (const std::exception& e) {
            slot.failure = e.what();
        }
    }

    PipelineResult result;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto& s = slots[i];
        result.timing.generate_seconds += s.gen;
        result.timing.rerank_seconds += s.rr;
        result.timing.predictions += s.predictions;
        if (s.list) {
            result.lists.emplace(users[i], std::move(*s.list));
        } else {
            result.failures.emplace(users[i], s.failure);
        }
    }
    result.timing.users = users.size();
    result.timing.wall_seconds = std::chrono::duration<double>(clock::now() - wall_start).count();
    return result;
}

}  // namespace reviewrec::ranking

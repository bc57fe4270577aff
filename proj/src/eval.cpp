#include "reviewrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <omp.h>

namespace reviewrec::eval {

using nlohmann::json;

namespace {

void check_pairs(std::span<const double> p, std::span<const double> a) {
    if (p.empty()) throw EvaluationError("no prediction/actual pairs");
    if (p.size() != a.size()) throw EvaluationError("prediction and actual lengths differ");
}

}  // namespace

double rmse(std::span<const double> predicted, std::span<const double> actual) {
    check_pairs(predicted, actual);
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double e = predicted[i] - actual[i];
        s += e * e;
    }
    return std::sqrt(s / static_cast<double>(predicted.size()));
}

double mae(std::span<const double> predicted, std::span<const double> actual) {
    check_pairs(predicted, actual);
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted[i] - actual[i]);
    return s / static_cast<double>(predicted.size());
}

double recall_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, int k) {
    if (k < 1) throw EvaluationError("k must be >= 1");
    if (relevant.empty()) return 0.0;
    const auto n = std::min(ranked.size(), static_cast<std::size_t>(k));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += relevant.contains(ranked[i]);
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant, int k) {
    if (k < 1) throw EvaluationError("k must be >= 1");
    if (relevant.empty()) return 0.0;
    const auto n = std::min(ranked.size(), static_cast<std::size_t>(k));
    double dcg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (relevant.contains(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
    const auto ideal_hits = std::min(relevant.size(), static_cast<std::size_t>(k));
    double idcg = 0.0;
    for (std::size_t i = 0; i < ideal_hits; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    return dcg / idcg;
}

const MetricRow* MetricReport::find(const std::string& metric, const std::string& subset, int k) const {
    for (const auto& r : rows) {
        if (r.metric == metric && r.subset == subset && r.k == k) return &r;
    }
    return nullptr;
}

json MetricReport::to_json() const {
    json rs = json::array();
    for (const auto& r : rows) {
        rs.push_back({{"metric", r.metric}, {"subset", r.subset}, {"k", r.k}, {"value", r.value}, {"support", r.support}});
    }
    return {{"task", task}, {"rows", rs}, {"notes", notes}, {"warnings", warnings}, {"config_digest", config_digest}};
}

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out.precision(10);
    out << "metric,subset,k,value,support\n";
    for (const auto& r : rows) out << r.metric << ',' << r.subset << ',' << r.k << ',' << r.value << ',' << r.support << '\n';
    return out.str();
}

MetricReport evaluate_rating(const std::map<std::string, double>& predictions, std::span<const corpus::Review> test,
                             const std::map<std::string, corpus::Subset>& tags, double coverage_threshold) {
    MetricReport report;
    report.task = "rating";
    if (test.empty()) throw EvaluationError("empty test set");

    struct Bucket {
        std::vector<double> p, a;
    };
    std::map<std::string, Bucket> buckets;
    std::size_t missing = 0;
    for (const auto& r : test) {
        auto it = predictions.find(r.id);
        if (it == predictions.end()) {
            ++missing;
            continue;
        }
        auto tag = tags.find(r.id);
        if (tag == tags.end()) throw EvaluationError("test review '" + r.id + "' has no subset tag");
        for (const std::string& name : {std::string("total"), std::string(corpus::to_string(tag->second))}) {
            buckets[name].p.push_back(it->second);
            buckets[name].a.push_back(r.rating);
        }
    }
    const double coverage = static_cast<double>(test.size() - missing) / static_cast<double>(test.size());
    if (missing) report.notes.push_back(std::to_string(missing) + " test pair(s) have no prediction");
    if (coverage < coverage_threshold) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "prediction coverage %.4f below threshold %.2f", coverage, coverage_threshold);
        report.warnings.emplace_back(buf);
    }
    if (!buckets.contains("total")) throw EvaluationError("no test pair has a prediction");
    for (const char* metric : {"rmse", "mae"}) {
        for (const char* subset : {"total", "warm", "cold", "unseen"}) {
            auto b = buckets.find(subset);
            if (b == buckets.end()) {
                if (std::string(metric) == "rmse") report.notes.push_back(std::string(subset) + " subset is empty");
                continue;
            }
            const double v = std::string(metric) == "rmse" ? rmse(b->second.p, b->second.a) : mae(b->second.p, b->second.a);
            report.rows.push_back({metric, subset, 0, v, b->second.p.size()});
        }
    }
    return report;
}

TopkTestbed build_balanced_topk_testbed(const corpus::Corpus& corpus, const TopkProtocol& protocol) {
    const auto& s = corpus.scale;
    if (!s.contains(protocol.high_min) || !s.contains(protocol.keep_min) || protocol.keep_min > protocol.high_min) {
        throw ProtocolError("scale " + std::to_string(s.min) + ".." + std::to_string(s.max) +
                            " cannot hold the top-k protocol thresholds (keep >= " + std::to_string(protocol.keep_min) +
                            ", highly preferred >= " + std::to_string(protocol.high_min) + ")");
    }
    TopkTestbed bed;
    std::map<std::string, std::vector<const corpus::Review*>> high;
    for (const auto& r : corpus.reviews) {
        if (r.rating < protocol.keep_min) {
            ++bed.excluded;
        } else if (r.rating >= protocol.high_min) {
            high[r.user_id].push_back(&r);
        } else {
            bed.train.push_back(r);
        }
    }
    std::mt19937_64 rng(protocol.seed);
    for (auto& [user, items] : high) {
        std::sort(items.begin(), items.end(), [](const auto* a, const auto* b) {
            return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->id < b->id;
        });
        std::shuffle(items.begin(), items.end(), rng);
        const auto n_test = items.size() / 2;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (i < n_test) {
                bed.test.push_back(*items[i]);
                bed.relevant[user].insert(items[i]->item_id);
            } else {
                bed.train.push_back(*items[i]);
            }
        }
    }
    auto by_id = [](const corpus::Review& a, const corpus::Review& b) { return a.id < b.id; };
    std::sort(bed.train.begin(), bed.train.end(), by_id);
    std::sort(bed.test.begin(), bed.test.end(), by_id);
    return bed;
}

namespace {

std::vector<double> user_row(const RankedLists& lists, const std::string& user, const std::set<std::string>& rel,
                             std::span<const int> ks) {
    static const std::vector<std::string> none;
    auto it = lists.find(user);
    const auto& ranked = it == lists.end() ? none : it->second;
    std::vector<double> row;
    row.reserve(ks.size() * 2);
    for (int k : ks) row.push_back(recall_at_k(ranked, rel, k));
    for (int k : ks) row.push_back(ndcg_at_k(ranked, rel, k));
    return row;
}

std::vector<const std::pair<const std::string, std::set<std::string>>*> evaluable(
    const std::map<std::string, std::set<std::string>>& relevant) {
    std::vector<const std::pair<const std::string, std::set<std::string>>*> out;
    for (const auto& kv : relevant) {
        if (!kv.second.empty()) out.push_back(&kv);
    }
    return out;
}

}  // namespace

std::vector<std::vector<double>> topk_user_metrics(const RankedLists& lists,
                                                   const std::map<std::string, std::set<std::string>>& relevant,
                                                   std::span<const int> ks) {
    const auto users = evaluable(relevant);
    std::vector<std::vector<double>> out(users.size());
    const auto n = static_cast<std::ptrdiff_t>(users.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto* u = users[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(i)] = user_row(lists, u->first, u->second, ks);
    }
    return out;
}

std::vector<std::vector<double>> topk_user_metrics_serial(const RankedLists& lists,
                                                          const std::map<std::string, std::set<std::string>>& relevant,
                                                          std::span<const int> ks) {
    std::vector<std::vector<double>> out;
    for (const auto* u : evaluable(relevant)) out.push_back(user_row(lists, u->first, u->second, ks));
    return out;
}

MetricReport evaluate_topk(const RankedLists& lists, const std::map<std::string, std::set<std::string>>& relevant,
                           std::span<const int> ks) {
    if (ks.empty()) throw EvaluationError("no cutoffs given");
    for (int k : ks) {
        if (k < 1) throw EvaluationError("k must be >= 1");
    }
    MetricReport report;
    report.task = "topk";
    report.notes.push_back("binary relevance; gain 1/log2(rank+1)");
    std::size_t skipped = 0, missing = 0;
    for (const auto& [user, rel] : relevant) {
        if (rel.empty()) ++skipped;
        else if (!lists.contains(user)) ++missing;
    }
    if (skipped) report.warnings.push_back(std::to_string(skipped) + " user(s) without relevant items skipped");
    if (missing) report.notes.push_back(std::to_string(missing) + " user(s) without a ranked list scored as 0");

    const auto rows = topk_user_metrics(lists, relevant, ks);
    if (rows.empty()) throw EvaluationError("no user has relevant test items");
    std::vector<double> sums(ks.size() * 2, 0.0);
    for (const auto& r : rows) {
        for (std::size_t j = 0; j < sums.size(); ++j) sums[j] += r[j];
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
        report.rows.push_back({"recall", "total", ks[j], sums[j] / static_cast<double>(rows.size()), rows.size()});
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
        report.rows.push_back(
            {"ndcg", "total", ks[j], sums[ks.size() + j] / static_cast<double>(rows.size()), rows.size()});
    }
    return report;
}

}  // namespace reviewrec::eval

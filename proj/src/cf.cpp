#include "reviewrec/cf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <omp.h>

namespace reviewrec::cf {

using nlohmann::json;

std::vector<RatingTriple> triples_from_reviews(std::span<const corpus::Review> reviews) {
    std::vector<RatingTriple> out;
    out.reserve(reviews.size());
    for (const auto& r : reviews) out.push_back({r.user_id, r.item_id, static_cast<double>(r.rating)});
    return out;
}

std::vector<Interaction> interactions_from_reviews(std::span<const corpus::Review> reviews) {
    std::vector<Interaction> out;
    out.reserve(reviews.size());
    for (const auto& r : reviews) out.push_back({r.user_id, r.item_id});
    return out;
}

void TrainConfig::validate() const {
    if (dimension < 1) throw ConfigError("dimension must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (regularization < 0.0) throw ConfigError("regularization must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be >= 0");
}

IdIndex IdIndex::build(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    IdIndex idx;
    idx.ids = std::move(ids);
    for (std::uint32_t i = 0; i < idx.ids.size(); ++i) idx.index.emplace(idx.ids[i], i);
    return idx;
}

std::optional<std::uint32_t> IdIndex::find(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) return std::nullopt;
    return it->second;
}

namespace {

double dot(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
}

void init_factors(std::vector<double>& v, std::size_t n, int d, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, scale);
    v.resize(n * static_cast<std::size_t>(d));
    for (auto& x : v) x = scale > 0.0 ? dist(rng) : 0.0;
}

}  // namespace

double MfModel::predict(const std::string& user, const std::string& item) const {
    double p = global_mean;
    auto u = users.find(user);
    auto i = items.find(item);
    if (u) p += user_bias[*u];
    if (i) p += item_bias[*i];
    if (u && i) {
        p += dot(&user_factors[static_cast<std::size_t>(*u) * dimension],
                 &item_factors[static_cast<std::size_t>(*i) * dimension], dimension);
    }
    return std::clamp(p, clamp_min, clamp_max);
}

double predict_mf(const MfModel& model, const std::string& user, const std::string& item) {
    return model.predict(user, item);
}

MfModel train_mf(std::span<const RatingTriple> train, const TrainConfig& config, std::span<const RatingTriple> valid,
                 std::optional<std::pair<double, double>> clamp, TrainReport* report) {
    config.validate();
    if (train.empty()) throw TrainingError("cannot train MF on an empty train set");

    MfModel m;
    m.dimension = config.dimension;
    {
        std::vector<std::string> us, is;
        for (const auto& t : train) {
            us.push_back(t.user);
            is.push_back(t.item);
        }
        m.users = IdIndex::build(std::move(us));
        m.items = IdIndex::build(std::move(is));
    }
    if (clamp) {
        m.clamp_min = clamp->first;
        m.clamp_max = clamp->second;
    }
    double sum = 0.0;
    for (const auto& t : train) sum += t.rating;
    m.global_mean = sum / static_cast<double>(train.size());
    m.user_bias.assign(m.users.size(), 0.0);
    m.item_bias.assign(m.items.size(), 0.0);
    std::mt19937_64 rng(config.seed);
    init_factors(m.user_factors, m.users.size(), config.dimension, config.init_scale, rng);
    init_factors(m.item_factors, m.items.size(), config.dimension, config.init_scale, rng);

    struct Obs {
        std::uint32_t u, i;
        double r;
    };
    std::vector<Obs> obs;
    obs.reserve(train.size());
    for (const auto& t : train) obs.push_back({m.users.index.at(t.user), m.items.index.at(t.item), t.rating});

    const int d = config.dimension;
    const double lr = config.learning_rate, reg = config.regularization;
    std::vector<double> pu_old(static_cast<std::size_t>(d));
    TrainReport local;
    double best_metric = std::numeric_limits<double>::infinity();
    MfModel best = m;
    int stale = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(obs.begin(), obs.end(), rng);
        double loss = 0.0;
        for (const auto& o : obs) {
            double* pu = &m.user_factors[static_cast<std::size_t>(o.u) * d];
            double* qi = &m.item_factors[static_cast<std::size_t>(o.i) * d];
            const double pred = m.global_mean + m.user_bias[o.u] + m.item_bias[o.i] + dot(pu, qi, d);
            const double err = o.r - pred;
            loss += err * err;
            m.user_bias[o.u] += lr * (err - reg * m.user_bias[o.u]);
            m.item_bias[o.i] += lr * (err - reg * m.item_bias[o.i]);
            std::copy(pu, pu + d, pu_old.begin());
            for (int k = 0; k < d; ++k) {
                pu[k] += lr * (err * qi[k] - reg * pu[k]);
                qi[k] += lr * (err * pu_old[static_cast<std::size_t>(k)] - reg * qi[k]);
            }
        }
        loss /= static_cast<double>(obs.size());
        if (!std::isfinite(loss)) {
            throw TrainingError("MF training diverged at epoch " + std::to_string(epoch) +
                                "; try a smaller learning rate");
        }
        local.train_loss.push_back(loss);
        local.epochs_run = epoch;

        double metric = loss;
        if (!valid.empty()) {
            double se = 0.0;
            for (const auto& v : valid) {
                double e = v.rating - m.predict(v.user, v.item);
                se += e * e;
            }
            metric = std::sqrt(se / static_cast<double>(valid.size()));
            local.valid_rmse.push_back(metric);
        }
        if (metric < best_metric - 1e-9) {
            best_metric = metric;
            local.best_epoch = epoch;
            stale = 0;
            if (!valid.empty()) best = m;
        } else if (++stale >= config.patience) {
            break;
        }
    }
    if (report) *report = local;
    return valid.empty() ? m : best;
}

// ---------------------------------------------------------------------------
// BPR

double BprModel::score(std::uint32_t user, std::uint32_t item) const {
    return dot(&user_factors[static_cast<std::size_t>(user) * dimension],
               &item_factors[static_cast<std::size_t>(item) * dimension], dimension);
}

std::optional<double> BprModel::score(const std::string& user, const std::string& item) const {
    auto u = users.find(user);
    auto i = items.find(item);
    if (!u || !i) return std::nullopt;
    return score(*u, *i);
}

BprModel train_bpr(std::span<const Interaction> train, const TrainConfig& config, TrainReport* report) {
    config.validate();
    if (train.empty()) throw TrainingError("cannot train BPR on an empty train set");
    BprModel m;
    m.dimension = config.dimension;
    {
        std::vector<std::string> us, is;
        for (const auto& t : train) {
            us.push_back(t.user);
            is.push_back(t.item);
        }
        m.users = IdIndex::build(std::move(us));
        m.items = IdIndex::build(std::move(is));
    }
    std::mt19937_64 rng(config.seed);
    init_factors(m.user_factors, m.users.size(), config.dimension, config.init_scale, rng);
    init_factors(m.item_factors, m.items.size(), config.dimension, config.init_scale, rng);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> pos;
    std::vector<std::vector<std::uint32_t>> user_items(m.users.size());
    for (const auto& t : train) {
        auto u = m.users.index.at(t.user), i = m.items.index.at(t.item);
        pos.emplace_back(u, i);
        user_items[u].push_back(i);
    }
    for (auto& v : user_items) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    const auto n_items = static_cast<std::uint32_t>(m.items.size());
    const int d = config.dimension;
    const double lr = config.learning_rate, reg = config.regularization;
    std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
    std::uniform_int_distribution<std::uint32_t> pick_item(0, n_items - 1);
    std::vector<double> pu_old(static_cast<std::size_t>(d));

    TrainReport local;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        double loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t s = 0; s < pos.size(); ++s) {
            auto [u, i] = pos[pick_pos(rng)];
            const auto& mine = user_items[u];
            if (mine.size() >= n_items) continue;  // nothing to contrast against
            std::uint32_t j;
            do {
                j = pick_item(rng);
            } while (std::binary_search(mine.begin(), mine.end(), j));

            double* pu = &m.user_factors[static_cast<std::size_t>(u) * d];
            double* qi = &m.item_factors[static_cast<std::size_t>(i) * d];
            double* qj = &m.item_factors[static_cast<std::size_t>(j) * d];
            const double x = dot(pu, qi, d) - dot(pu, qj, d);
            // d/dx of log sigmoid(x) = sigmoid(-x)
            const double g = 1.0 / (1.0 + std::exp(x));
            loss += x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
            ++steps;
            std::copy(pu, pu + d, pu_old.begin());
            for (int k = 0; k < d; ++k) {
                const double diff = qi[k] - qj[k];
                pu[k] += lr * (g * diff - reg * pu[k]);
                qi[k] += lr * (g * pu_old[static_cast<std::size_t>(k)] - reg * qi[k]);
                qj[k] += lr * (-g * pu_old[static_cast<std::size_t>(k)] - reg * qj[k]);
            }
        }
        const double mean_loss = steps ? loss / static_cast<double>(steps) : 0.0;
        if (!std::isfinite(mean_loss)) {
            throw TrainingError("BPR training diverged at epoch " + std::to_string(epoch) +
                                "; try a smaller learning rate");
        }
        local.train_loss.push_back(mean_loss);
        local.epochs_run = epoch;
    }
    local.best_epoch = local.epochs_run;
    if (report) *report = local;
    return m;
}

// ---------------------------------------------------------------------------
// Candidates

SeenItems::SeenItems(std::span<const corpus::Review> train) {
    for (const auto& r : train) seen_[r.user_id].insert(r.item_id);
}

SeenItems::SeenItems(std::span<const Interaction> train) {
    for (const auto& t : train) seen_[t.user].insert(t.item);
}

bool SeenItems::seen(const std::string& user, const std::string& item) const {
    auto it = seen_.find(user);
    return it != seen_.end() && it->second.contains(item);
}

const std::unordered_set<std::string>* SeenItems::of(const std::string& user) const {
    auto it = seen_.find(user);
    return it == seen_.end() ? nullptr : &it->second;
}

CandidateList generate_candidates(const BprModel& model, const std::string& user, int n, const SeenItems& seen) {
    if (n < 1) throw ConfigError("candidate count must be >= 1");
    CandidateList out;
    out.user_id = user;
    out.generator = "bpr-mf";
    auto u = model.users.find(user);
    if (!u) {
        out.short_list = true;
        return out;
    }
    const auto* mine = seen.of(user);
    std::vector<std::pair<double, std::uint32_t>> scored;
    scored.reserve(model.items.size());
    for (std::uint32_t i = 0; i < model.items.size(); ++i) {
        if (mine && mine->contains(model.items.ids[i])) continue;
        scored.emplace_back(model.score(*u, i), i);
    }
    // Item ids are sorted, so index order is item-id order.
    auto better = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(n), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
    scored.resize(keep);
    for (const auto& [s, i] : scored) out.items.push_back({model.items.ids[i], s});
    out.short_list = keep < static_cast<std::size_t>(n);
    return out;
}

std::vector<CandidateList> generate_candidates_batch(const BprModel& model, std::span<const std::string> users, int n,
                                                     const SeenItems& seen) {
    std::vector<CandidateList> out(users.size());
    const auto count = static_cast<std::ptrdiff_t>(users.size());
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t k = 0; k < count; ++k) {
        out[static_cast<std::size_t>(k)] = generate_candidates(model, users[static_cast<std::size_t>(k)], n, seen);
    }
    return out;
}

std::vector<CandidateList> generate_candidates_batch_serial(const BprModel& model, std::span<const std::string> users,
                                                            int n, const SeenItems& seen) {
    std::vector<CandidateList> out;
    out.reserve(users.size());
    for (const auto& u : users) out.push_back(generate_candidates(model, u, n, seen));
    return out;
}

ExternalCandidates load_external_candidates(const std::filesystem::path& path,
                                            const std::unordered_set<std::string>& known_items,
                                            const SeenItems& seen) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open candidate file " + path.string());
    ExternalCandidates out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw LoadError(lineno, std::string("malformed JSON: ") + e.what());
        }
        CandidateList list;
        try {
            list.user_id = j.at("user_id").get<std::string>();
            list.generator = j.value("generator", std::string("external"));
            std::set<std::string> distinct;
            double prev = std::numeric_limits<double>::infinity();
            for (const auto& item : j.at("items")) {
                Candidate c{item.at("item_id").get<std::string>(), item.at("score").get<double>()};
                if (!known_items.empty() && !known_items.contains(c.item_id)) {
                    throw LoadError(lineno, "unknown item '" + c.item_id + "'");
                }
                if (!distinct.insert(c.item_id).second) {
                    throw LoadError(lineno, "duplicate item '" + c.item_id + "'");
                }
                if (seen.seen(list.user_id, c.item_id)) {
                    throw LoadError(lineno, "item '" + c.item_id + "' already seen by user '" + list.user_id +
                                                "' in train");
                }
                if (c.score > prev) throw LoadError(lineno, "items are not ordered by descending score");
                prev = c.score;
                list.items.push_back(std::move(c));
            }
        } catch (const json::exception& e) {
            throw LoadError(lineno, std::string("schema violation: ") + e.what());
        }
        if (out.lists.contains(list.user_id)) throw LoadError(lineno, "duplicate user '" + list.user_id + "'");
        out.lists.emplace(list.user_id, std::move(list));
    }
    if (out.lists.empty()) out.warnings.push_back("candidate file " + path.string() + " is empty");
    return out;
}

json candidates_to_json(const CandidateList& list) {
    json items = json::array();
    for (const auto& c : list.items) items.push_back({{"item_id", c.item_id}, {"score", c.score}});
    return {{"user_id", list.user_id}, {"items", items}, {"generator", list.generator}};
}

namespace {

json factor_rows(const std::vector<double>& flat, std::size_t rows, int d) {
    json out = json::array();
    for (std::size_t r = 0; r < rows; ++r) {
        out.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(r * d),
                                          flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * d)));
    }
    return out;
}

std::vector<double> flatten(const json& rows, std::size_t expected_rows, int d) {
    if (rows.size() != expected_rows) throw ConfigError("checkpoint factor row count mismatch");
    std::vector<double> flat;
    flat.reserve(expected_rows * static_cast<std::size_t>(d));
    for (const auto& row : rows) {
        auto v = row.get<std::vector<double>>();
        if (v.size() != static_cast<std::size_t>(d)) throw ConfigError("checkpoint factor width mismatch");
        for (double x : v) {
            if (!std::isfinite(x)) throw ConfigError("checkpoint contains a non-finite parameter");
        }
        flat.insert(flat.end(), v.begin(), v.end());
    }
    return flat;
}

void check_header(const json& j, const char* kind) {
    if (j.value("format", "") != "reviewrec-cf" || j.value("version", 0) != 1 || j.value("kind", "") != kind) {
        throw ConfigError(std::string("not a version-1 ") + kind + " checkpoint");
    }
}

}  // namespace

json checkpoint(const MfModel& m) {
    return {{"format", "reviewrec-cf"},
            {"version", 1},
            {"kind", "mf"},
            {"dimension", m.dimension},
            {"global_mean", m.global_mean},
            {"clamp", {m.clamp_min, m.clamp_max}},
            {"users", m.users.ids},
            {"items", m.items.ids},
            {"user_bias", m.user_bias},
            {"item_bias", m.item_bias},
            {"user_factors", factor_rows(m.user_factors, m.users.size(), m.dimension)},
            {"item_factors", factor_rows(m.item_factors, m.items.size(), m.dimension)}};
}

json checkpoint(const BprModel& m) {
    return {{"format", "reviewrec-cf"},
            {"version", 1},
            {"kind", "bpr"},
            {"dimension", m.dimension},
            {"users", m.users.ids},
            {"items", m.items.ids},
            {"user_factors", factor_rows(m.user_factors, m.users.size(), m.dimension)},
            {"item_factors", factor_rows(m.item_factors, m.items.size(), m.dimension)}};
}

MfModel mf_from_checkpoint(const json& j) {
    check_header(j, "mf");
    MfModel m;
    m.dimension = j.at("dimension").get<int>();
    m.global_mean = j.at("global_mean").get<double>();
    m.clamp_min = j.at("clamp").at(0).get<double>();
    m.clamp_max = j.at("clamp").at(1).get<double>();
    m.users = IdIndex::build(j.at("users").get<std::vector<std::string>>());
    m.items = IdIndex::build(j.at("items").get<std::vector<std::string>>());
    m.user_bias = j.at("user_bias").get<std::vector<double>>();
    m.item_bias = j.at("item_bias").get<std::vector<double>>();
    if (m.user_bias.size() != m.users.size() || m.item_bias.size() != m.items.size()) {
        throw ConfigError("checkpoint bias length mismatch");
    }
    m.user_factors = flatten(j.at("user_factors"), m.users.size(), m.dimension);
    m.item_factors = flatten(j.at("item_factors"), m.items.size(), m.dimension);
    return m;
}

BprModel bpr_from_checkpoint(const json& j) {
    check_header(j, "bpr");
    BprModel m;
    m.dimension = j.at("dimension").get<int>();
    m.users = IdIndex::build(j.at("users").get<std::vector<std::string>>());
    m.items = IdIndex::build(j.at("items").get<std::vector<std::string>>());
    m.user_factors = flatten(j.at("user_factors"), m.users.size(), m.dimension);
    m.item_factors = flatten(j.at("item_factors"), m.items.size(), m.dimension);
    return m;
}

}  // namespace reviewrec::cf

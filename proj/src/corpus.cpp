#include "reviewrec/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <tuple>
#include <unordered_set>

#include <boost/tokenizer.hpp>

#include "reviewrec/digest.hpp"
#include "reviewrec/error.hpp"

namespace reviewrec::corpus {

using nlohmann::json;

std::size_t Corpus::user_count() const {
    std::unordered_set<std::string> users;
    for (const auto& r : reviews) users.insert(r.user_id);
    return users.size();
}

std::size_t Corpus::item_count() const {
    std::unordered_set<std::string> items;
    for (const auto& r : reviews) items.insert(r.item_id);
    return items.size();
}

namespace {

std::string id_field(const json& obj, const char* name) {
    auto it = obj.find(name);
    if (it == obj.end() || it->is_null()) throw ParseError(std::string("missing field '") + name + "'");
    if (it->is_string()) {
        auto s = it->get<std::string>();
        if (s.empty()) throw ParseError(std::string("empty field '") + name + "'");
        return s;
    }
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    throw ParseError(std::string("field '") + name + "' must be a string");
}

std::int64_t integral_field(const json& v, const char* name) {
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
        double d = v.get<double>();
        if (std::isfinite(d) && std::floor(d) == d) return static_cast<std::int64_t>(d);
    }
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        std::size_t used = 0;
        try {
            double d = std::stod(s, &used);
            if (used == s.size() && std::floor(d) == d) return static_cast<std::int64_t>(d);
        } catch (const std::exception&) {
        }
    }
    throw ParseError(std::string("field '") + name + "' must be an integer");
}

std::string composite_id(const Review& r) {
    return r.user_id + "|" + r.item_id + "|" + std::to_string(r.timestamp);
}

// Tracks duplicate (user, item, timestamp) triples across records.
struct TripleKey {
    std::string user, item;
    std::int64_t ts;
    auto operator<=>(const TripleKey&) const = default;
};

void append_checked(IngestResult& result, std::set<TripleKey>& seen,
                    std::unordered_set<std::string>& ids, Review review, std::size_t line) {
    TripleKey key{review.user_id, review.item_id, review.timestamp};
    if (!seen.insert(key).second) {
        result.issues.push_back({line, "duplicate (user_id, item_id, timestamp) triple"});
        return;
    }
    if (!ids.insert(review.id).second) {
        result.issues.push_back({line, "duplicate review_id '" + review.id + "'"});
        return;
    }
    result.corpus.reviews.push_back(std::move(review));
}

IngestResult ingest_jsonl(std::istream& in, const IngestOptions& options) {
    IngestResult result;
    result.corpus.scale = options.scale;
    std::set<TripleKey> seen;
    std::unordered_set<std::string> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto obj = json::parse(line);
            if (!obj.is_object()) throw ParseError("record is not a JSON object");
            Review r;
            if (!review_from_json(obj, options.scale, r)) {
                ++result.unrated_dropped;
                continue;
            }
            append_checked(result, seen, ids, std::move(r), lineno);
        } catch (const json::exception& e) {
            result.issues.push_back({lineno, std::string("malformed JSON: ") + e.what()});
        } catch (const ParseError& e) {
            result.issues.push_back({lineno, e.what()});
        }
    }
    return result;
}

IngestResult ingest_csv(std::istream& in, const IngestOptions& options) {
    using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
    IngestResult result;
    result.corpus.scale = options.scale;
    std::string line;
    if (!std::getline(in, line)) return result;
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::map<std::string, std::size_t> header;
    {
        Tokenizer tok(line);
        std::size_t col = 0;
        for (const auto& name : tok) header[name] = col++;
    }
    auto column_of = [&](const std::string& field) -> std::optional<std::size_t> {
        auto mapped = options.csv_columns.find(field);
        const std::string& name = mapped == options.csv_columns.end() ? field : mapped->second;
        auto it = header.find(name);
        if (it == header.end()) return std::nullopt;
        return it->second;
    };
    for (const char* required : {"user_id", "item_id", "rating", "timestamp"}) {
        if (!column_of(required)) {
            throw ConfigError(std::string("CSV header lacks a column for '") + required + "'");
        }
    }

    std::set<TripleKey> seen;
    std::unordered_set<std::string> ids;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            std::vector<std::string> cells;
            Tokenizer tok(line);
            cells.assign(tok.begin(), tok.end());
            json obj = json::object();
            for (const char* field :
                 {"review_id", "user_id", "item_id", "rating", "text", "timestamp", "helpful_votes"}) {
                auto col = column_of(field);
                if (!col || *col >= cells.size()) continue;
                const auto& cell = cells[*col];
                if (cell.empty() && std::string(field) == "rating") {
                    obj[field] = nullptr;
                } else {
                    obj[field] = cell;
                }
            }
            Review r;
            if (!review_from_json(obj, options.scale, r)) {
                ++result.unrated_dropped;
                continue;
            }
            append_checked(result, seen, ids, std::move(r), lineno);
        } catch (const boost::escaped_list_error& e) {
            result.issues.push_back({lineno, std::string("malformed CSV: ") + e.what()});
        } catch (const ParseError& e) {
            result.issues.push_back({lineno, e.what()});
        }
    }
    return result;
}

}  // namespace

bool review_from_json(const json& obj, const RatingScale& scale, Review& out) {
    Review r;
    r.user_id = id_field(obj, "user_id");
    r.item_id = id_field(obj, "item_id");
    auto rating = obj.find("rating");
    if (rating == obj.end() || rating->is_null()) return false;
    auto value = integral_field(*rating, "rating");
    if (value < scale.min || value > scale.max) {
        throw ParseError("rating " + std::to_string(value) + " outside scale " +
                         std::to_string(scale.min) + ".." + std::to_string(scale.max));
    }
    r.rating = static_cast<int>(value);

    auto ts = obj.find("timestamp");
    if (ts == obj.end() || ts->is_null()) throw ParseError("missing field 'timestamp'");
    r.timestamp = integral_field(*ts, "timestamp");
    if (r.timestamp < 0) throw ParseError("timestamp must be non-negative");

    if (auto text = obj.find("text"); text != obj.end() && !text->is_null()) {
        if (!text->is_string()) throw ParseError("field 'text' must be a string");
        r.text = text->get<std::string>();
    }
    if (auto votes = obj.find("helpful_votes"); votes != obj.end() && !votes->is_null() &&
                                                 !(votes->is_string() && votes->get<std::string>().empty())) {
        r.helpful_votes = integral_field(*votes, "helpful_votes");
        if (r.helpful_votes < 0) throw ParseError("helpful_votes must be non-negative");
    }
    if (auto rid = obj.find("review_id"); rid != obj.end() && !rid->is_null() &&
                                           !(rid->is_string() && rid->get<std::string>().empty())) {
        r.id = id_field(obj, "review_id");
    } else {
        r.id = composite_id(r);
    }
    out = std::move(r);
    return true;
}

json review_to_json(const Review& r) {
    return json{{"review_id", r.id},   {"user_id", r.user_id},     {"item_id", r.item_id},
                {"rating", r.rating},  {"text", r.text},           {"timestamp", r.timestamp},
                {"helpful_votes", r.helpful_votes}};
}

IngestResult ingest(const std::filesystem::path& path, const std::string& format,
                    const IngestOptions& options) {
    if (format != "jsonl" && format != "csv") {
        throw ConfigError("unknown source format '" + format + "' (expected jsonl or csv)");
    }
    options.scale.validate();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open review source " + path.string());
    IngestResult result = format == "jsonl" ? ingest_jsonl(in, options) : ingest_csv(in, options);
    refresh_unresolved(result.corpus);
    return result;
}

std::vector<RecordIssue> load_item_meta(const std::filesystem::path& path, Corpus& corpus) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open item metadata " + path.string());
    std::vector<RecordIssue> issues;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto obj = json::parse(line);
            ItemMeta meta;
            meta.item_id = id_field(obj, "item_id");
            meta.title = obj.value("title", std::string{});
            meta.description = obj.value("description", std::string{});
            if (auto attrs = obj.find("attributes"); attrs != obj.end() && attrs->is_object()) {
                for (const auto& [k, v] : attrs->items()) {
                    meta.attributes[k] = v.is_string() ? v.get<std::string>() : v.dump();
                }
            }
            if (corpus.items.contains(meta.item_id)) {
                issues.push_back({lineno, "duplicate item_id '" + meta.item_id + "'"});
                continue;
            }
            corpus.items.emplace(meta.item_id, std::move(meta));
        } catch (const json::exception& e) {
            issues.push_back({lineno, std::string("malformed JSON: ") + e.what()});
        } catch (const ParseError& e) {
            issues.push_back({lineno, e.what()});
        }
    }
    refresh_unresolved(corpus);
    return issues;
}

void refresh_unresolved(Corpus& corpus) {
    std::set<std::string> missing;
    for (const auto& r : corpus.reviews) {
        if (!corpus.items.contains(r.item_id)) missing.insert(r.item_id);
    }
    corpus.unresolved_items.assign(missing.begin(), missing.end());
}

json item_to_json(const ItemMeta& item) {
    return json{{"item_id", item.item_id},
                {"title", item.title},
                {"description", item.description},
                {"attributes", item.attributes}};
}

void write_reviews_jsonl(const std::filesystem::path& path, std::span<const Review> reviews) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    for (const auto& r : reviews) out << review_to_json(r).dump() << '\n';
}

void write_items_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    for (const auto& [id, item] : corpus.items) out << item_to_json(item).dump() << '\n';
}

std::string corpus_digest(const Corpus& corpus) {
    std::vector<const Review*> sorted;
    sorted.reserve(corpus.reviews.size());
    for (const auto& r : corpus.reviews) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
    std::string buf;
    for (const auto* r : sorted) {
        buf += review_to_json(*r).dump();
        buf.push_back('\n');
    }
    for (const auto& [id, item] : corpus.items) {
        buf += item_to_json(item).dump();
        buf.push_back('\n');
    }
    buf += std::to_string(corpus.scale.min) + ":" + std::to_string(corpus.scale.max) + ":" +
           std::to_string(corpus.scale.token_offset);
    return sha256_hex(buf);
}

std::unordered_map<std::string, std::size_t> index_by_id(const Corpus& corpus) {
    std::unordered_map<std::string, std::size_t> idx;
    idx.reserve(corpus.reviews.size());
    for (std::size_t i = 0; i < corpus.reviews.size(); ++i) idx.emplace(corpus.reviews[i].id, i);
    return idx;
}

Corpus kcore_filter(const Corpus& corpus, int k) {
    if (k < 1) throw ConfigError("k-core requires k >= 1");
    const auto& reviews = corpus.reviews;
    std::unordered_map<std::string, std::vector<std::size_t>> by_user, by_item;
    for (std::size_t e = 0; e < reviews.size(); ++e) {
        by_user[reviews[e].user_id].push_back(e);
        by_item[reviews[e].item_id].push_back(e);
    }
    std::unordered_map<std::string, std::size_t> user_deg, item_deg;
    for (const auto& [u, es] : by_user) user_deg[u] = es.size();
    for (const auto& [i, es] : by_item) item_deg[i] = es.size();

    std::vector<char> alive(reviews.size(), 1);
    std::unordered_set<std::string> dead_users, dead_items;
    // (is_user, id) removal queue; each node enters at most once.
    std::deque<std::pair<bool, std::string>> queue;
    const auto kk = static_cast<std::size_t>(k);
    for (const auto& [u, d] : user_deg) {
        if (d < kk) {
            dead_users.insert(u);
            queue.emplace_back(true, u);
        }
    }
    for (const auto& [i, d] : item_deg) {
        if (d < kk) {
            dead_items.insert(i);
            queue.emplace_back(false, i);
        }
    }
    while (!queue.empty()) {
        auto [is_user, id] = std::move(queue.front());
        queue.pop_front();
        const auto& edges = is_user ? by_user[id] : by_item[id];
        for (auto e : edges) {
            if (!alive[e]) continue;
            alive[e] = 0;
            if (is_user) {
                const auto& item = reviews[e].item_id;
                if (--item_deg[item] < kk && dead_items.insert(item).second) queue.emplace_back(false, item);
            } else {
                const auto& user = reviews[e].user_id;
                if (--user_deg[user] < kk && dead_users.insert(user).second) queue.emplace_back(true, user);
            }
        }
    }

    Corpus out;
    out.scale = corpus.scale;
    out.items = corpus.items;
    for (std::size_t e = 0; e < reviews.size(); ++e) {
        if (alive[e]) out.reviews.push_back(reviews[e]);
    }
    refresh_unresolved(out);
    return out;
}

std::array<std::size_t, 3> largest_remainder_sizes(std::size_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r{ratios.train, ratios.valid, ratios.test};
    for (double x : r) {
        if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError("split ratios must be positive");
    }
    const double total = r[0] + r[1] + r[2];
    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t j = 0; j < 3; ++j) {
        double quota = static_cast<double>(n) * r[j] / total;
        double fl = std::floor(quota + 1e-9);
        sizes[j] = static_cast<std::size_t>(fl);
        remainder[j] = quota - fl;
        assigned += sizes[j];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b] + 1e-12; });
    for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++sizes[order[j % 3]];
    return sizes;
}

SplitAssignment temporal_split(const Corpus& corpus, const SplitRatios& ratios) {
    if (corpus.reviews.empty()) throw ConfigError("cannot split an empty corpus");
    std::vector<const Review*> order;
    order.reserve(corpus.reviews.size());
    for (const auto& r : corpus.reviews) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const Review* a, const Review* b) {
        return std::tie(a->timestamp, a->user_id, a->item_id, a->id) <
               std::tie(b->timestamp, b->user_id, b->item_id, b->id);
    });
    auto sizes = largest_remainder_sizes(order.size(), ratios);
    SplitAssignment split;
    split.ratios = ratios;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < sizes[0]; ++i) split.train.push_back(order[pos++]->id);
    for (std::size_t i = 0; i < sizes[1]; ++i) split.valid.push_back(order[pos++]->id);
    for (std::size_t i = 0; i < sizes[2]; ++i) split.test.push_back(order[pos++]->id);
    return split;
}

const char* to_string(Subset s) {
    switch (s) {
        case Subset::warm: return "warm";
        case Subset::cold: return "cold";
        case Subset::unseen: return "unseen";
    }
    return "unknown";
}

Subset subset_from_string(const std::string& s) {
    if (s == "warm") return Subset::warm;
    if (s == "cold") return Subset::cold;
    if (s == "unseen") return Subset::unseen;
    throw ParseError("unknown subset tag '" + s + "'");
}

std::map<std::string, Subset> tag_test_subsets(const SplitAssignment& split, const Corpus& corpus) {
    auto idx = index_by_id(corpus);
    auto lookup = [&](const std::string& id) -> const Review& {
        auto it = idx.find(id);
        if (it == idx.end()) throw ConfigError("split references unknown review id '" + id + "'");
        return corpus.reviews[it->second];
    };
    std::unordered_map<std::string, std::size_t> train_count;
    for (const auto& id : split.train) ++train_count[lookup(id).user_id];
    std::map<std::string, Subset> tags;
    for (const auto& id : split.test) {
        auto it = train_count.find(lookup(id).user_id);
        if (it == train_count.end()) {
            tags[id] = Subset::unseen;
        } else {
            tags[id] = it->second > kWarmThreshold ? Subset::warm : Subset::cold;
        }
    }
    return tags;
}

double BiasMeans::user_mean(const std::string& user_id) const {
    auto it = user.find(user_id);
    return it == user.end() ? global : it->second;
}

double BiasMeans::item_mean(const std::string& item_id) const {
    auto it = item.find(item_id);
    return it == item.end() ? global : it->second;
}

BiasMeans bias_means(std::span<const Review> train) {
    if (train.empty()) throw ConfigError("bias means need a non-empty train set");
    std::map<std::string, std::pair<double, std::size_t>> u, i;
    double total = 0.0;
    for (const auto& r : train) {
        auto& us = u[r.user_id];
        us.first += r.rating;
        ++us.second;
        auto& is = i[r.item_id];
        is.first += r.rating;
        ++is.second;
        total += r.rating;
    }
    BiasMeans out;
    out.global = total / static_cast<double>(train.size());
    for (const auto& [id, s] : u) out.user[id] = s.first / static_cast<double>(s.second);
    for (const auto& [id, s] : i) out.item[id] = s.first / static_cast<double>(s.second);
    return out;
}

json bias_to_json(const BiasMeans& bias) {
    return json{{"global", bias.global}, {"user", bias.user}, {"item", bias.item}};
}

BiasMeans bias_from_json(const json& j) {
    BiasMeans b;
    b.global = j.at("global").get<double>();
    b.user = j.at("user").get<std::map<std::string, double>>();
    b.item = j.at("item").get<std::map<std::string, double>>();
    return b;
}

std::vector<Review> select_reviews(const Corpus& corpus, std::span<const std::string> ids) {
    auto idx = index_by_id(corpus);
    std::vector<Review> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = idx.find(id);
        if (it == idx.end()) throw ConfigError("unknown review id '" + id + "'");
        out.push_back(corpus.reviews[it->second]);
    }
    return out;
}

json split_manifest(const SplitAssignment& split, const std::map<std::string, Subset>& tags) {
    json t = json::object();
    for (const auto& [id, s] : tags) t[id] = to_string(s);
    return json{{"ratios", {split.ratios.train, split.ratios.valid, split.ratios.test}},
                {"train", split.train},
                {"valid", split.valid},
                {"test", split.test},
                {"subset_tags", t}};
}

SplitAssignment split_from_manifest(const json& j) {
    SplitAssignment s;
    auto r = j.at("ratios");
    s.ratios = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    s.train = j.at("train").get<std::vector<std::string>>();
    s.valid = j.at("valid").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
}

std::map<std::string, Subset> tags_from_manifest(const json& j) {
    std::map<std::string, Subset> tags;
    for (const auto& [id, v] : j.at("subset_tags").items()) tags[id] = subset_from_string(v.get<std::string>());
    return tags;
}

}  // namespace reviewrec::corpus

#include "reviewrec/profiling.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>

#include <omp.h>

#include "reviewrec/digest.hpp"
#include "reviewrec/error.hpp"

namespace reviewrec::profiling {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

enum class Section { none, like, dislike };

// Recognizes "[Like]" / "[Dislike]" (any case, optional emphasis markers and
// colon). On success `rest` holds whatever follows the tag on the same line.
std::optional<Section> tag_of(std::string_view line, std::string_view& rest) {
    std::size_t lead = 0;
    while (lead < line.size() && (line[lead] == '*' || line[lead] == '#' || line[lead] == ' ')) ++lead;
    line.remove_prefix(lead);
    if (line.empty() || line.front() != '[') return std::nullopt;
    auto close = line.find(']');
    if (close == std::string_view::npos) return std::nullopt;
    std::string inner;
    for (char c : line.substr(1, close - 1)) {
        if (c != '*' && c != '_' && c != ' ') inner.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    Section s;
    if (inner == "like") {
        s = Section::like;
    } else if (inner == "dislike") {
        s = Section::dislike;
    } else {
        return std::nullopt;
    }
    rest = line.substr(close + 1);
    while (!rest.empty() && (rest.front() == '*' || rest.front() == ':' || rest.front() == ' ')) rest.remove_prefix(1);
    return s;
}

std::string_view strip_bullet(std::string_view line) {
    line = trim(line);
    if (line.starts_with("\xE2\x80\xA2")) {
        line.remove_prefix(3);
    } else if (!line.empty() && (line.front() == '-' || line.front() == '*')) {
        line.remove_prefix(1);
    }
    return trim(line);
}

bool is_none(std::string_view s) {
    auto l = lower(s);
    while (!l.empty() && l.back() == '.') l.pop_back();
    return l == "none";
}

void add_bullet(Markup& m, Section section, std::string_view raw) {
    auto bullet = strip_bullet(raw);
    if (bullet.empty() || is_none(bullet)) return;
    if (section == Section::like) m.likes.emplace_back(bullet);
    if (section == Section::dislike) m.dislikes.emplace_back(bullet);
}

}  // namespace

Markup parse_preference_markup(std::string_view text) {
    Markup m;
    Section section = Section::none;
    bool saw_tag = false;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        std::string_view rest;
        if (auto tag = tag_of(trim(line), rest)) {
            section = *tag;
            saw_tag = true;
            add_bullet(m, section, rest);
            continue;
        }
        if (section != Section::none) add_bullet(m, section, line);
    }
    if (!saw_tag) throw ParseError("no [Like] or [Dislike] tag in output");
    return m;
}

std::string format_preference_markup(std::span<const std::string> likes, std::span<const std::string> dislikes) {
    std::string out = "[Like]\n";
    if (likes.empty()) out += "None.\n";
    for (const auto& l : likes) out += "- " + l + "\n";
    out += "[Dislike]\n";
    if (dislikes.empty()) out += "None.";
    for (std::size_t i = 0; i < dislikes.size(); ++i) {
        out += "- " + dislikes[i];
        if (i + 1 < dislikes.size()) out.push_back('\n');
    }
    return out;
}

llm::CompletionRequest extraction_request(const corpus::Review& review, const llm::TemplateRegistry& templates) {
    llm::CompletionRequest req;
    req.template_id = std::string(llm::to_string(llm::TemplateId::preference_extraction));
    req.messages = {{llm::Role::user, templates.render(llm::TemplateId::preference_extraction, {{"review", review.text}})}};
    return req;
}

PreferenceList extract_preferences(const corpus::Review& review, llm::Gateway& gateway,
                                   const llm::TemplateRegistry& templates) {
    PreferenceList out;
    out.source_review_id = review.id;
    if (trim(review.text).empty()) return out;
    auto result = gateway.complete(extraction_request(review, templates));
    try {
        auto m = parse_preference_markup(result.text);
        out.likes = std::move(m.likes);
        out.dislikes = std::move(m.dislikes);
    } catch (const ParseError& e) {
        throw ExtractionError("review " + review.id + ": " + e.what(), result.text);
    }
    return out;
}

json preference_to_json(const PreferenceList& p) {
    return json{{"review_id", p.source_review_id}, {"likes", p.likes}, {"dislikes", p.dislikes}};
}

PreferenceList preference_from_json(const json& j) {
    PreferenceList p;
    p.source_review_id = j.at("review_id").get<std::string>();
    p.likes = j.at("likes").get<std::vector<std::string>>();
    p.dislikes = j.at("dislikes").get<std::vector<std::string>>();
    return p;
}

void write_preferences(const std::filesystem::path& path, const PreferenceMap& prefs) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    for (const auto& [id, p] : prefs) out << preference_to_json(p).dump() << '\n';
}

PreferenceMap read_preferences(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw StorageError("cannot read " + path.string());
    PreferenceMap prefs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto p = preference_from_json(json::parse(line));
            prefs[p.source_review_id] = std::move(p);
        } catch (const json::exception& e) {
            throw StorageError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return prefs;
}

// ---------------------------------------------------------------------------
// Selection

SelectionStrategy SelectionStrategy::helpfulness(int n) {
    if (n < 1) throw ConfigError("helpfulness selection needs n >= 1");
    SelectionStrategy s;
    s.kind = Kind::helpfulness;
    s.n = n;
    return s;
}

SelectionStrategy SelectionStrategy::neighbor(int k) {
    if (k < 1) throw ConfigError("neighbor selection needs k >= 1");
    SelectionStrategy s;
    s.kind = Kind::neighbor;
    s.k = k;
    return s;
}

SelectionStrategy SelectionStrategy::parse(std::string_view spec) {
    auto number = [&](std::string_view digits) {
        int v = 0;
        auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
        if (ec != std::errc{} || p != digits.data() + digits.size()) {
            throw ConfigError("bad selection strategy '" + std::string(spec) + "'");
        }
        return v;
    };
    if (spec == "all") return all();
    if (spec.starts_with("helpful:")) return helpfulness(number(spec.substr(8)));
    if (spec.starts_with("neighbor:")) return neighbor(number(spec.substr(9)));
    throw ConfigError("bad selection strategy '" + std::string(spec) + "' (expected all, helpful:N or neighbor:K)");
}

std::string SelectionStrategy::to_string() const {
    switch (kind) {
        case Kind::all: return "all";
        case Kind::helpfulness: return "helpful:" + std::to_string(n);
        case Kind::neighbor: return "neighbor:" + std::to_string(k);
    }
    return "all";
}

std::string_view to_string(SubjectKind kind) { return kind == SubjectKind::user ? "user" : "item"; }

std::vector<std::string> PreferenceSet::source_review_ids() const {
    std::vector<std::string> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.source_review_id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

TrainView::TrainView(std::span<const corpus::Review> train, const PreferenceMap* preferences,
                     const similarity::NeighborIndex* neighbors)
    : train_(train.begin(), train.end()), preferences_(preferences), neighbors_(neighbors) {
    for (const auto& r : train_) {
        by_item_[r.item_id].push_back(&r);
        by_user_[r.user_id].push_back(&r);
    }
    auto chrono = [](const corpus::Review* a, const corpus::Review* b) {
        return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->id < b->id;
    };
    for (auto& [id, v] : by_item_) std::sort(v.begin(), v.end(), chrono);
    for (auto& [id, v] : by_user_) std::sort(v.begin(), v.end(), chrono);
}

std::span<const corpus::Review* const> TrainView::item_reviews(const std::string& item_id) const {
    auto it = by_item_.find(item_id);
    if (it == by_item_.end()) return {};
    return it->second;
}

std::span<const corpus::Review* const> TrainView::user_reviews(const std::string& user_id) const {
    auto it = by_user_.find(user_id);
    if (it == by_user_.end()) return {};
    return it->second;
}

const PreferenceList* TrainView::preferences(const std::string& review_id) const {
    if (!preferences_) return nullptr;
    auto it = preferences_->find(review_id);
    return it == preferences_->end() ? nullptr : &it->second;
}

namespace {

void add_entries(PreferenceSet& set, const TrainView& view, std::span<const corpus::Review* const> reviews) {
    for (const auto* r : reviews) {
        if (const auto* p = view.preferences(r->id)) set.entries.push_back(*p);
    }
}

}  // namespace

PreferenceSet select_user_preferences(const std::string& user_id, const TrainView& view) {
    PreferenceSet set;
    set.kind = SubjectKind::user;
    set.subject = user_id;
    auto reviews = view.user_reviews(user_id);
    set.cold = reviews.empty();
    add_entries(set, view, reviews);
    return set;
}

PreferenceSet select_item_preferences(const std::string& item_id, const SelectionStrategy& strategy,
                                      const TrainView& view, const std::optional<std::string>& target_user) {
    PreferenceSet set;
    set.kind = SubjectKind::item;
    set.subject = item_id;
    set.strategy = strategy;
    auto reviews = view.item_reviews(item_id);
    set.cold = reviews.empty();
    if (set.cold) return set;

    switch (strategy.kind) {
        case SelectionStrategy::Kind::all:
            add_entries(set, view, reviews);
            break;
        case SelectionStrategy::Kind::helpfulness: {
            std::vector<const corpus::Review*> ranked(reviews.begin(), reviews.end());
            std::sort(ranked.begin(), ranked.end(), [](const corpus::Review* a, const corpus::Review* b) {
                if (a->helpful_votes != b->helpful_votes) return a->helpful_votes > b->helpful_votes;
                if (a->timestamp != b->timestamp) return a->timestamp > b->timestamp;
                return a->id < b->id;
            });
            if (ranked.size() > static_cast<std::size_t>(strategy.n)) ranked.resize(static_cast<std::size_t>(strategy.n));
            add_entries(set, view, ranked);
            break;
        }
        case SelectionStrategy::Kind::neighbor: {
            if (!target_user) throw ConfigError("neighbor-based selection needs a target user");
            if (!view.neighbors()) throw ConfigError("neighbor-based selection needs a neighbor index");
            set.target_user = *target_user;
            auto result = view.neighbors()->top_k(*target_user, item_id, strategy.k);
            std::vector<const corpus::Review*> chosen;
            if (result.neighbors.empty()) {
                set.fallback_all = true;
                for (const auto* r : reviews) {
                    if (r->user_id != *target_user) chosen.push_back(r);
                }
            } else {
                for (const auto& n : result.neighbors) {
                    for (const auto* r : reviews) {
                        if (r->user_id == n.user_id) chosen.push_back(r);
                    }
                }
            }
            add_entries(set, view, chosen);
            break;
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Profiles

json profile_to_json(const Profile& p) {
    return json{{"kind", to_string(p.kind)},
                {"subject", p.subject},
                {"likes", p.likes},
                {"dislikes", p.dislikes},
                {"source_review_ids", p.source_review_ids},
                {"strategy", p.strategy.to_string()},
                {"target_user", p.target_user},
                {"built_at", p.built_at}};
}

Profile profile_from_json(const json& j) {
    Profile p;
    auto kind = j.at("kind").get<std::string>();
    if (kind != "user" && kind != "item") throw ParseError("bad profile kind '" + kind + "'");
    p.kind = kind == "user" ? SubjectKind::user : SubjectKind::item;
    p.subject = j.at("subject").get<std::string>();
    p.likes = j.at("likes").get<std::vector<std::string>>();
    p.dislikes = j.at("dislikes").get<std::vector<std::string>>();
    p.source_review_ids = j.at("source_review_ids").get<std::vector<std::string>>();
    p.strategy = SelectionStrategy::parse(j.at("strategy").get<std::string>());
    p.target_user = j.value("target_user", std::string{});
    p.built_at = j.value("built_at", std::string{});
    return p;
}

std::string profile_text(const Profile& p) { return format_preference_markup(p.likes, p.dislikes); }

std::string preferences_binding(const PreferenceSet& set) {
    std::string out;
    for (const auto& e : set.entries) {
        if (e.empty()) continue;
        out += out.empty() ? "\n" : "\n\n";
        out += format_preference_markup(e.likes, e.dislikes);
    }
    return out;
}

bool degenerate(const PreferenceSet& set) {
    return std::all_of(set.entries.begin(), set.entries.end(), [](const auto& e) { return e.empty(); });
}

llm::CompletionRequest profile_request(const PreferenceSet& set, const llm::TemplateRegistry& templates) {
    auto id = set.kind == SubjectKind::user ? llm::TemplateId::user_profile : llm::TemplateId::item_profile;
    llm::CompletionRequest req;
    req.template_id = std::string(llm::to_string(id));
    req.messages = {{llm::Role::user, templates.render(id, {{"preferences", preferences_binding(set)}})}};
    return req;
}

Profile build_profile(const PreferenceSet& set, llm::Gateway& gateway, const llm::TemplateRegistry& templates,
                      const std::string& built_at) {
    Profile p;
    p.kind = set.kind;
    p.subject = set.subject;
    p.strategy = set.kind == SubjectKind::user ? SelectionStrategy::all() : set.strategy;
    p.target_user = set.target_user;
    p.source_review_ids = set.source_review_ids();
    p.built_at = built_at;
    if (degenerate(set)) return p;
    const std::string who = std::string(to_string(set.kind)) + " " + set.subject;
    try {
        auto result = gateway.complete(profile_request(set, templates));
        auto m = parse_preference_markup(result.text);
        p.likes = std::move(m.likes);
        p.dislikes = std::move(m.dislikes);
    } catch (const std::exception& e) {
        throw Error("profile for " + who + ": " + e.what());
    }
    return p;
}

std::string profile_key(const PreferenceSet& set) {
    auto ids = set.source_review_ids();
    std::string strategy = set.kind == SubjectKind::user ? "all" : set.strategy.to_string();
    std::string target = set.strategy.kind == SelectionStrategy::Kind::neighbor ? set.target_user : "";
    return std::string(to_string(set.kind)) + "|" + set.subject + "|" + strategy + "|" + target + "|" +
           digest_id_set(ids);
}

// ---------------------------------------------------------------------------
// Store

namespace {

constexpr const char* kDataFile = "profiles.jsonl";
constexpr const char* kIndexFile = "index.jsonl";

}  // namespace

ProfileStore::ProfileStore(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {
    if (!dir_) return;
    std::error_code ec;
    std::filesystem::create_directories(*dir_, ec);
    if (ec) throw StorageError("cannot create profile store " + dir_->string() + ": " + ec.message());

    const auto data_path = *dir_ / kDataFile;
    std::ifstream data(data_path, std::ios::binary);
    if (!data) return;
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::streamoff> offsets;
    std::streamoff offset = 0;
    while (std::getline(data, line)) {
        ++lineno;
        const auto here = offset;
        offset += static_cast<std::streamoff>(line.size() + 1);
        if (line.empty()) continue;
        try {
            auto j = json::parse(line);
            auto key = j.at("key").get<std::string>();
            profiles_[key] = profile_from_json(j.at("profile"));
            offsets[key] = here;
        } catch (const std::exception& e) {
            throw StorageError(data_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    // Rewrite the index when it disagrees with the data file.
    std::map<std::string, std::streamoff> indexed;
    if (std::ifstream idx(*dir_ / kIndexFile); idx) {
        while (std::getline(idx, line)) {
            try {
                auto j = json::parse(line);
                indexed[j.at("key").get<std::string>()] = j.at("offset").get<std::streamoff>();
            } catch (const std::exception&) {
                indexed.clear();
                break;
            }
        }
    }
    if (indexed != offsets) {
        std::ofstream idx(*dir_ / kIndexFile, std::ios::binary | std::ios::trunc);
        std::vector<std::pair<std::streamoff, std::string>> ordered;
        for (const auto& [k, o] : offsets) ordered.emplace_back(o, k);
        std::sort(ordered.begin(), ordered.end());
        for (const auto& [o, k] : ordered) idx << json{{"key", k}, {"offset", o}}.dump() << '\n';
    }
}

std::optional<Profile> ProfileStore::find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = profiles_.find(key);
    if (it == profiles_.end()) return std::nullopt;
    return it->second;
}

void ProfileStore::append_locked(const std::string& key, const Profile& profile) {
    if (dir_) {
        const auto data_path = *dir_ / kDataFile;
        std::error_code ec;
        auto offset = std::filesystem::exists(data_path) ? std::filesystem::file_size(data_path, ec) : 0;
        if (ec) throw StorageError("cannot stat " + data_path.string() + ": " + ec.message());
        std::ofstream data(data_path, std::ios::binary | std::ios::app);
        std::ofstream idx(*dir_ / kIndexFile, std::ios::binary | std::ios::app);
        if (!data || !idx) throw StorageError("cannot append to profile store " + dir_->string());
        data << json{{"key", key}, {"profile", profile_to_json(profile)}}.dump() << '\n';
        idx << json{{"key", key}, {"offset", offset}}.dump() << '\n';
        if (!data || !idx) throw StorageError("write to profile store " + dir_->string() + " failed");
    }
    profiles_[key] = profile;
}

std::shared_ptr<std::mutex> ProfileStore::key_lock(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto& m = key_locks_[key];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
}

Profile ProfileStore::get_or_build(const PreferenceSet& set, const Builder& build) {
    const auto key = profile_key(set);
    if (auto hit = find(key)) return *hit;
    auto guard = key_lock(key);
    std::lock_guard build_lock(*guard);
    if (auto hit = find(key)) return *hit;
    Profile p = build(set);
    std::lock_guard lock(mutex_);
    append_locked(key, p);
    ++builds_;
    return p;
}

std::vector<Profile> ProfileStore::build_all(std::span<const PreferenceSet> sets, const Builder& build, int workers,
                                             std::vector<std::string>* errors) {
    std::vector<std::string> keys(sets.size());
    std::vector<std::optional<Profile>> results(sets.size());
    std::vector<std::string> failures(sets.size());
    std::vector<std::size_t> todo;
    std::set<std::string> scheduled;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        keys[i] = profile_key(sets[i]);
        if (auto hit = find(keys[i])) {
            results[i] = std::move(hit);
        } else if (scheduled.insert(keys[i]).second) {
            todo.push_back(i);
        }
    }
    const auto n = static_cast<std::ptrdiff_t>(todo.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers))
    for (std::ptrdiff_t t = 0; t < n; ++t) {
        const auto i = todo[static_cast<std::size_t>(t)];
        try {
            results[i] = build(sets[i]);
        } catch (const std::exception& e) {
            failures[i] = e.what();
        }
    }
    {
        std::vector<std::size_t> order(todo);
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return keys[a] < keys[b]; });
        std::lock_guard lock(mutex_);
        for (auto i : order) {
            if (!results[i]) continue;
            append_locked(keys[i], *results[i]);
            ++builds_;
        }
    }
    std::vector<Profile> out;
    out.reserve(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (!results[i]) {
            if (auto hit = find(keys[i])) results[i] = std::move(hit);  // duplicate key built earlier in this batch
        }
        if (results[i]) {
            out.push_back(*results[i]);
        } else if (errors && !failures[i].empty()) {
            errors->push_back(failures[i]);
        }
    }
    return out;
}

std::size_t ProfileStore::size() const {
    std::lock_guard lock(mutex_);
    return profiles_.size();
}

}  // namespace reviewrec::profiling

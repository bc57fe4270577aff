#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <omp.h>

#include "cli.hpp"
#include "reviewrec/digest.hpp"
#include "reviewrec/ranking.hpp"
#include "reviewrec/reasoner.hpp"
#include "reviewrec/similarity.hpp"

namespace reviewrec::cli {

using nlohmann::json;

namespace {

// -- small I/O helpers --------------------------------------------------------

std::string jsonl(const std::vector<json>& rows) {
    std::string out;
    for (const auto& r : rows) out += r.dump() + "\n";
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw StorageError("cannot read " + path.string());
    return json::parse(in);
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw StorageError("cannot read " + path.string());
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) rows.push_back(json::parse(line));
    }
    return rows;
}

std::string reviews_jsonl(std::span<const corpus::Review> reviews) {
    std::string out;
    for (const auto& r : reviews) out += corpus::review_to_json(r).dump() + "\n";
    return out;
}

std::vector<corpus::Review> read_reviews(const RunConfig& c, const fs::path& rel) {
    corpus::IngestOptions opt;
    opt.scale = c.scale;
    auto res = corpus::ingest(c.out_dir / rel, "jsonl", opt);
    if (!res.issues.empty()) {
        throw StorageError((c.out_dir / rel).string() + ": " + res.issues.front().message);
    }
    auto reviews = std::move(res.corpus.reviews);
    std::sort(reviews.begin(), reviews.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return reviews;
}

corpus::Corpus load_ingested(const RunConfig& c) {
    corpus::Corpus corpus;
    corpus.scale = c.scale;
    corpus.reviews = read_reviews(c, "ingest/reviews.jsonl");
    corpus::load_item_meta(c.out_dir / "ingest" / "items.jsonl", corpus);
    corpus::refresh_unresolved(corpus);
    return corpus;
}

std::string json_line(const std::string& key, const std::string& id, const std::string& error) {
    return json{{key, id}, {"error", error}}.dump();
}

void reset_stage_dir(const RunConfig& c, const std::string& stage) {
    std::error_code ec;
    fs::remove_all(c.out_dir / stage_dir(stage), ec);
    fs::remove(c.out_dir / "logs" / (stage + "_errors.jsonl"), ec);
}

llm::TemplateRegistry templates() {
    if (const char* dir = std::getenv("REVIEWREC_TEMPLATE_DIR")) return llm::TemplateRegistry::load(dir);
    return llm::TemplateRegistry::load_default();
}

std::shared_ptr<llm::Gateway> make_gateway(const RunConfig& c, const BackendConfig& b) {
    std::shared_ptr<llm::ChatBackend> backend;
    if (b.kind == "mock") {
        auto script = read_json(b.script);
        if (!b.token_scores) script["token_scores"] = false;
        backend = llm::MockBackend::from_script(script);
    } else {
        auto opt = llm::HttpBackend::options_from_env();
        opt.endpoint = b.endpoint;
        opt.model = b.model;
        opt.token_scores = b.token_scores;
        backend = std::make_shared<llm::HttpBackend>(opt);
    }
    llm::GatewayOptions g;
    g.cache = c.cache;
    if (c.cache) g.cache_dir = c.out_dir / "cache";
    g.max_attempts = c.max_attempts;
    g.backoff = std::chrono::milliseconds(c.backoff_ms);
    g.workers = c.workers;
    return std::make_shared<llm::Gateway>(backend, g);
}

// -- split artifacts -------------------------------------------------------------

struct SplitData {
    std::vector<corpus::Review> train, valid, test;
    std::map<std::string, corpus::Subset> tags;
    std::map<std::string, std::set<std::string>> relevant;
    corpus::BiasMeans bias;
    std::string protocol;
};

SplitData load_split(const RunConfig& c) {
    SplitData s;
    s.train = read_reviews(c, "split/train.jsonl");
    s.valid = read_reviews(c, "split/valid.jsonl");
    s.test = read_reviews(c, "split/test.jsonl");
    auto meta = read_json(c.out_dir / "split" / "split.json");
    s.protocol = meta.at("protocol").get<std::string>();
    if (s.protocol == "temporal") s.tags = corpus::tags_from_manifest(meta);
    if (fs::exists(c.out_dir / "split" / "relevant.json")) {
        s.relevant = read_json(c.out_dir / "split" / "relevant.json").get<std::map<std::string, std::set<std::string>>>();
    }
    s.bias = corpus::bias_from_json(read_json(c.out_dir / "split" / "bias.json"));
    return s;
}

std::string snapshot_digest(std::span<const corpus::Review> train) {
    std::vector<std::string> ids;
    for (const auto& r : train) ids.push_back(r.id);
    return digest_id_set(ids);
}

// -- profiles ---------------------------------------------------------------------

/// Profiles from the profile stage, plus anything a later stage has to build
/// itself (neighbor-based item profiles for pairs the profile stage could not
/// anticipate). Local builds go to the calling stage's own directory.
class ProfileResolver {
public:
    ProfileResolver(const RunConfig& c, const std::string& stage, const SplitData& split,
                    const profiling::PreferenceMap& prefs, llm::Gateway& gateway, const llm::TemplateRegistry& tpl)
        : config_(c),
          upstream_(c.out_dir / "profile"),
          local_(c.out_dir / stage_dir(stage) / "profiles"),
          neighbors_(c.strategy.kind == profiling::SelectionStrategy::Kind::neighbor
                         ? std::make_unique<similarity::NeighborIndex>(split.train)
                         : nullptr),
          view_(split.train, &prefs, neighbors_.get()),
          gateway_(gateway),
          templates_(tpl),
          built_at_(snapshot_digest(split.train)) {}

    profiling::PreferenceSet user_set(const std::string& user) const {
        return profiling::select_user_preferences(user, view_);
    }
    profiling::PreferenceSet item_set(const std::string& item, const std::string& user) const {
        const bool nb = config_.strategy.kind == profiling::SelectionStrategy::Kind::neighbor;
        return profiling::select_item_preferences(item, config_.strategy, view_,
                                                  nb ? std::optional<std::string>(user) : std::nullopt);
    }

    /// Builds whatever is missing; returns build error messages.
    std::vector<std::string> ensure(const std::vector<profiling::PreferenceSet>& sets) {
        std::vector<profiling::PreferenceSet> missing;
        std::set<std::string> seen;
        for (const auto& s : sets) {
            auto key = profiling::profile_key(s);
            if (upstream_.find(key) || !seen.insert(key).second) continue;
            missing.push_back(s);
        }
        std::vector<std::string> errors;
        if (!missing.empty()) {
            local_.build_all(missing, builder(), config_.workers, &errors);
        }
        return errors;
    }

    std::optional<profiling::Profile> get(const profiling::PreferenceSet& set) const {
        auto key = profiling::profile_key(set);
        if (auto p = upstream_.find(key)) return p;
        return local_.find(key);
    }

    profiling::ProfileStore::Builder builder() {
        return [this](const profiling::PreferenceSet& s) {
            return profiling::build_profile(s, gateway_, templates_, built_at_);
        };
    }

    std::size_t local_builds() const { return local_.builds(); }
    const profiling::TrainView& view() const { return view_; }

private:
    const RunConfig& config_;
    profiling::ProfileStore upstream_;
    profiling::ProfileStore local_;
    std::unique_ptr<similarity::NeighborIndex> neighbors_;
    profiling::TrainView view_;
    llm::Gateway& gateway_;
    const llm::TemplateRegistry& templates_;
    std::string built_at_;
};

std::string item_description(const corpus::Corpus& corpus, const std::string& item) {
    auto it = corpus.items.find(item);
    if (it == corpus.items.end()) return {};
    if (!it->second.description.empty()) return it->second.description;
    return it->second.title;
}

/// Prompt inputs for (user, item); nullopt when a profile could not be built.
std::optional<reasoner::PromptInputs> prompt_inputs(const ProfileResolver& profiles, const corpus::Corpus& corpus,
                                                    const corpus::BiasMeans& bias, const std::string& user,
                                                    const std::string& item) {
    auto up = profiles.get(profiles.user_set(user));
    auto ip = profiles.get(profiles.item_set(item, user));
    if (!up || !ip) return std::nullopt;
    reasoner::PromptInputs in;
    in.user_profile = profiling::profile_text(*up);
    in.item_profile = profiling::profile_text(*ip);
    in.item_description = item_description(corpus, item);
    in.user_mean = bias.user_mean(user);
    in.item_mean = bias.item_mean(item);
    return in;
}

void add_store_outputs(const RunConfig& c, Manifest& m, const fs::path& rel_dir) {
    for (const char* f : {"profiles.jsonl", "index.jsonl"}) {
        auto rel = rel_dir / f;
        if (fs::exists(c.out_dir / rel)) m.outputs[rel.generic_string()] = sha256_file(c.out_dir / rel);
    }
}

Manifest begin(const RunConfig& c, const std::string& stage) {
    Manifest m;
    m.stage = stage;
    m.config_digest = stage_digest(c, stage);
    m.upstream = verify_upstream(c, stage);
    return m;
}

// -- stages -----------------------------------------------------------------------

int stage_ingest(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "ingest");
    reset_stage_dir(c, "ingest");
    corpus::IngestOptions opt;
    opt.scale = c.scale;
    opt.csv_columns = c.csv_columns;
    auto res = corpus::ingest(c.reviews, c.format, opt);
    std::vector<corpus::RecordIssue> issues = res.issues;
    if (c.items) {
        auto meta_issues = corpus::load_item_meta(*c.items, res.corpus);
        for (auto& i : meta_issues) {
            i.message = "item metadata: " + i.message;
            issues.push_back(std::move(i));
        }
    }
    corpus::Corpus corpus = c.kcore > 0 ? corpus::kcore_filter(res.corpus, c.kcore) : std::move(res.corpus);
    corpus::refresh_unresolved(corpus);
    std::sort(corpus.reviews.begin(), corpus.reviews.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

    write_output(c, m, "ingest/reviews.jsonl", reviews_jsonl(corpus.reviews));
    std::vector<json> items;
    for (const auto& [id, meta] : corpus.items) items.push_back(corpus::item_to_json(meta));
    write_output(c, m, "ingest/items.jsonl", jsonl(items));
    for (const auto& i : issues) {
        append_log(c, "ingest_errors.jsonl", json{{"line", i.line}, {"error", i.message}}.dump());
    }
    m.stats = {{"reviews", corpus.reviews.size()},
               {"users", corpus.user_count()},
               {"items", corpus.item_count()},
               {"unresolved_items", corpus.unresolved_items.size()},
               {"record_issues", issues.size()},
               {"unrated_dropped", res.unrated_dropped},
               {"corpus_digest", corpus::corpus_digest(corpus)}};
    write_manifest(c, m);
    out << "ingest: " << corpus.reviews.size() << " reviews, " << corpus.user_count() << " users, "
        << corpus.item_count() << " items";
    if (!issues.empty()) out << "; " << issues.size() << " bad record(s), see logs/ingest_errors.jsonl";
    out << "\n";
    return issues.empty() ? kOk : kPartial;
}

int stage_split(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "split");
    auto corpus = load_ingested(c);
    reset_stage_dir(c, "split");
    std::vector<corpus::Review> train, valid, test;
    json meta;
    if (c.protocol == "temporal") {
        auto split = corpus::temporal_split(corpus, c.ratios);
        auto tags = corpus::tag_test_subsets(split, corpus);
        train = corpus::select_reviews(corpus, split.train);
        valid = corpus::select_reviews(corpus, split.valid);
        test = corpus::select_reviews(corpus, split.test);
        meta = corpus::split_manifest(split, tags);
        meta["protocol"] = "temporal";
        std::map<std::string, std::size_t> counts;
        for (const auto& [id, s] : tags) ++counts[corpus::to_string(s)];
        m.stats["subsets"] = counts;
    } else {
        auto bed = eval::build_balanced_topk_testbed(corpus, c.topk);
        train = std::move(bed.train);
        test = std::move(bed.test);
        std::vector<std::string> train_ids, test_ids;
        for (const auto& r : train) train_ids.push_back(r.id);
        for (const auto& r : test) test_ids.push_back(r.id);
        meta = {{"protocol", "balanced_topk"}, {"train", train_ids}, {"test", test_ids}, {"excluded", bed.excluded}};
        write_output(c, m, "split/relevant.json", json(bed.relevant).dump(2) + "\n");
        m.stats["excluded"] = bed.excluded;
        m.stats["relevant_users"] = bed.relevant.size();
    }
    if (train.empty()) throw ConfigError("the split left no train interactions");
    auto by_id = [](const auto& a, const auto& b) { return a.id < b.id; };
    std::sort(train.begin(), train.end(), by_id);
    std::sort(valid.begin(), valid.end(), by_id);
    std::sort(test.begin(), test.end(), by_id);
    write_output(c, m, "split/split.json", meta.dump(2) + "\n");
    write_output(c, m, "split/train.jsonl", reviews_jsonl(train));
    write_output(c, m, "split/valid.jsonl", reviews_jsonl(valid));
    write_output(c, m, "split/test.jsonl", reviews_jsonl(test));
    write_output(c, m, "split/bias.json", corpus::bias_to_json(corpus::bias_means(train)).dump(2) + "\n");
    m.stats["train"] = train.size();
    m.stats["valid"] = valid.size();
    m.stats["test"] = test.size();
    m.stats["protocol"] = c.protocol;
    write_manifest(c, m);
    out << "split (" << c.protocol << "): " << train.size() << " train, " << valid.size() << " valid, " << test.size()
        << " test\n";
    return kOk;
}

int stage_extract(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "extract");
    auto split = load_split(c);
    reset_stage_dir(c, "extract");
    auto tpl = templates();
    auto gateway = make_gateway(c, c.backend);
    const auto& train = split.train;
    std::vector<std::optional<profiling::PreferenceList>> results(train.size());
    std::vector<std::string> errors(train.size());
    const auto n = static_cast<std::ptrdiff_t>(train.size());
#pragma omp parallel for schedule(dynamic) num_threads(c.workers)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            results[k] = profiling::extract_preferences(train[k], *gateway, tpl);
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    }
    profiling::PreferenceMap prefs;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (results[i]) {
            prefs[train[i].id] = std::move(*results[i]);
        } else {
            ++failed;
            append_log(c, "extract_errors.jsonl", json_line("review_id", train[i].id, errors[i]));
        }
    }
    std::string body;
    for (const auto& [id, p] : prefs) body += profiling::preference_to_json(p).dump() + "\n";
    write_output(c, m, "extract/preferences.jsonl", body);
    m.stats = {{"reviews", train.size()}, {"extracted", prefs.size()}, {"failed", failed}, {"backend", gateway->backend_id()}};
    write_manifest(c, m);
    out << "extract: " << prefs.size() << "/" << train.size() << " reviews";
    if (failed) out << "; " << failed << " failed, see logs/extract_errors.jsonl";
    out << "\n";
    return failed ? kPartial : kOk;
}

std::vector<std::string> sorted_users(std::span<const corpus::Review> reviews) {
    std::set<std::string> s;
    for (const auto& r : reviews) s.insert(r.user_id);
    return {s.begin(), s.end()};
}

std::vector<std::string> sorted_items(std::span<const corpus::Review> reviews) {
    std::set<std::string> s;
    for (const auto& r : reviews) s.insert(r.item_id);
    return {s.begin(), s.end()};
}

int stage_profile(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "profile");
    auto split = load_split(c);
    auto prefs = profiling::read_preferences(c.out_dir / "extract" / "preferences.jsonl");
    reset_stage_dir(c, "profile");
    auto tpl = templates();
    auto gateway = make_gateway(c, c.backend);

    std::unique_ptr<similarity::NeighborIndex> neighbors;
    const bool nb = c.strategy.kind == profiling::SelectionStrategy::Kind::neighbor;
    if (nb) neighbors = std::make_unique<similarity::NeighborIndex>(split.train);
    profiling::TrainView view(split.train, &prefs, neighbors.get());
    const auto built_at = snapshot_digest(split.train);

    std::vector<profiling::PreferenceSet> sets;
    for (const auto& u : sorted_users(split.train)) sets.push_back(profiling::select_user_preferences(u, view));
    if (!nb) {
        for (const auto& i : sorted_items(split.train)) sets.push_back(profiling::select_item_preferences(i, c.strategy, view));
    } else if (split.protocol == "temporal") {
        // Neighbor profiles are per (item, user); build the ones test prediction needs.
        for (const auto& r : split.test) {
            sets.push_back(profiling::select_item_preferences(r.item_id, c.strategy, view, r.user_id));
        }
    }
    profiling::ProfileStore store(c.out_dir / "profile");
    std::vector<std::string> errors;
    store.build_all(sets, [&](const profiling::PreferenceSet& s) { return profiling::build_profile(s, *gateway, tpl, built_at); },
                    c.workers, &errors);
    for (const auto& e : errors) append_log(c, "profile_errors.jsonl", json{{"error", e}}.dump());
    add_store_outputs(c, m, "profile");
    m.stats = {{"sets", sets.size()},
               {"profiles", store.size()},
               {"failed", errors.size()},
               {"strategy", c.strategy.to_string()},
               {"built_at", built_at}};
    write_manifest(c, m);
    out << "profile (" << c.strategy.to_string() << "): " << store.size() << " profiles";
    if (!errors.empty()) out << "; " << errors.size() << " failed, see logs/profile_errors.jsonl";
    out << "\n";
    return errors.empty() ? kOk : kPartial;
}

int stage_distill(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "distill-export");
    auto corpus = load_ingested(c);
    auto split = load_split(c);
    auto prefs = profiling::read_preferences(c.out_dir / "extract" / "preferences.jsonl");
    reset_stage_dir(c, "distill-export");
    auto tpl = templates();
    auto student = make_gateway(c, c.backend);
    auto teacher = make_gateway(c, c.teacher);
    ProfileResolver profiles(c, "distill-export", split, prefs, *student, tpl);
    const bool nb = c.strategy.kind == profiling::SelectionStrategy::Kind::neighbor;
    auto wants = [&](distill::Step s) { return std::find(c.steps.begin(), c.steps.end(), s) != c.steps.end(); };

    std::vector<distill::InstructionExample> examples;
    std::vector<std::string> log;
    std::size_t failures = 0;
    auto take = [&](distill::BuildResult r) {
        for (auto& e : r.examples) examples.push_back(std::move(e));
        for (auto& l : r.log) {
            if (l.find("teacher failed") != std::string::npos || l.find("unparseable") != std::string::npos) ++failures;
            log.push_back(std::move(l));
        }
    };

    if (wants(distill::Step::preference_extraction)) {
        take(distill::build_extraction_set(split.train, *teacher, tpl));
    }
    if (wants(distill::Step::profile_construction)) {
        std::vector<profiling::PreferenceSet> sets;
        for (const auto& u : sorted_users(split.train)) sets.push_back(profiles.user_set(u));
        if (!nb) {
            for (const auto& i : sorted_items(split.train)) sets.push_back(profiles.item_set(i, ""));
        } else {
            for (const auto& r : split.train) sets.push_back(profiles.item_set(r.item_id, r.user_id));
        }
        take(distill::build_profile_set(sets, *teacher, tpl));
    }
    if (wants(distill::Step::rating_prediction)) {
        std::vector<profiling::PreferenceSet> needed;
        for (const auto& r : split.train) {
            needed.push_back(profiles.user_set(r.user_id));
            needed.push_back(profiles.item_set(r.item_id, r.user_id));
        }
        for (const auto& e : profiles.ensure(needed)) {
            log.push_back("profile build failed: " + e);
            ++failures;
        }
        std::vector<distill::ReasoningInput> inputs;
        for (const auto& r : split.train) {
            auto in = prompt_inputs(profiles, corpus, split.bias, r.user_id, r.item_id);
            if (!in) {
                log.push_back("review " + r.id + ": profiles unavailable, skipped");
                continue;
            }
            inputs.push_back({r, std::move(*in)});
        }
        take(distill::build_reasoning_set(inputs, *teacher, tpl, c.scale, c.recommend_threshold));
    }

    std::set<std::string> train_ids;
    for (const auto& r : split.train) train_ids.insert(r.id);
    if (auto bad = distill::leakage_violations(examples, train_ids); !bad.empty()) {
        throw Error("leakage guard: " + std::to_string(bad.size()) + " example source(s) outside train, e.g. " + bad[0]);
    }
    const auto rel = fs::path("distill-export") / "sft.jsonl";
    fs::create_directories(c.out_dir / rel.parent_path());
    const auto corpus_digest =
        read_json(manifest_path(c, "ingest")).at("stats").at("corpus_digest").get<std::string>();
    auto ds = distill::export_sft(std::move(examples), c.out_dir / rel, corpus_digest, tpl.checksums(),
                                  teacher->backend_id());
    m.outputs[rel.generic_string()] = ds.sha256;
    write_output(c, m, "distill-export/sft.manifest.json", ds.to_json().dump(2) + "\n");
    add_store_outputs(c, m, "distill-export/profiles");
    for (const auto& l : log) append_log(c, "distill.log", l);
    m.stats = {{"counts", ds.counts}, {"total", ds.total}, {"skipped", log.size()}, {"failed", failures}};
    write_manifest(c, m);
    out << "distill-export: " << ds.total << " examples (";
    bool first = true;
    for (const auto& [step, n] : ds.counts) {
        out << (first ? "" : ", ") << step << " " << n;
        first = false;
    }
    out << ")";
    if (!log.empty()) out << "; " << log.size() << " skipped, see logs/distill.log";
    out << "\n";
    return failures ? kPartial : kOk;
}

int stage_predict(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "predict");
    auto corpus = load_ingested(c);
    auto split = load_split(c);
    if (split.protocol != "temporal") {
        throw RefusalError("predict needs a temporal split (split.protocol is '" + split.protocol +
                           "'); use rerank for the top-k protocol");
    }
    auto prefs = profiling::read_preferences(c.out_dir / "extract" / "preferences.jsonl");
    reset_stage_dir(c, "predict");
    auto tpl = templates();
    auto gateway = make_gateway(c, c.backend);
    ProfileResolver profiles(c, "predict", split, prefs, *gateway, tpl);

    std::vector<profiling::PreferenceSet> needed;
    for (const auto& r : split.test) {
        needed.push_back(profiles.user_set(r.user_id));
        needed.push_back(profiles.item_set(r.item_id, r.user_id));
    }
    std::size_t failed = 0;
    for (const auto& e : profiles.ensure(needed)) {
        append_log(c, "predict_errors.jsonl", json{{"error", "profile build failed: " + e}}.dump());
        ++failed;
    }
    std::vector<reasoner::PredictionTask> tasks;
    for (const auto& r : split.test) {
        auto in = prompt_inputs(profiles, corpus, split.bias, r.user_id, r.item_id);
        if (!in) {
            append_log(c, "predict_errors.jsonl", json_line("review_id", r.id, "profiles unavailable"));
            ++failed;
            continue;
        }
        tasks.push_back({r.id, r.user_id, r.item_id, std::move(*in)});
    }
    auto outcomes = reasoner::predict_batch(tasks, *gateway, tpl, c.scale);
    std::vector<json> rows;
    std::size_t fallbacks = 0;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (outcomes[i].prediction) {
            fallbacks += outcomes[i].prediction->fallback_used;
            rows.push_back(reasoner::prediction_to_json(*outcomes[i].prediction));
        } else {
            ++failed;
            append_log(c, "predict_errors.jsonl", json_line("review_id", tasks[i].review_id, outcomes[i].error));
        }
    }
    write_output(c, m, "predict/predictions.jsonl", jsonl(rows));

    // MF baseline on the same split.
    auto train = cf::triples_from_reviews(split.train);
    auto valid = cf::triples_from_reviews(split.valid);
    cf::TrainReport report;
    auto model = cf::train_mf(train, c.mf, valid, std::pair<double, double>(c.scale.min, c.scale.max), &report);
    write_output(c, m, "predict/mf.json", cf::checkpoint(model).dump() + "\n");
    std::vector<json> mf_rows;
    for (const auto& r : split.test) {
        mf_rows.push_back({{"review_id", r.id},
                           {"user_id", r.user_id},
                           {"item_id", r.item_id},
                           {"expected_rating", model.predict(r.user_id, r.item_id)}});
    }
    write_output(c, m, "predict/mf_predictions.jsonl", jsonl(mf_rows));
    add_store_outputs(c, m, "predict/profiles");
    m.stats = {{"test_pairs", split.test.size()},
               {"predicted", rows.size()},
               {"failed", failed},
               {"fallback_used", fallbacks},
               {"mf_epochs", report.epochs_run},
               {"mf_best_epoch", report.best_epoch},
               {"backend", gateway->backend_id()}};
    write_manifest(c, m);
    out << "predict: " << rows.size() << "/" << split.test.size() << " pairs (" << fallbacks << " fallback); MF "
        << report.epochs_run << " epochs";
    if (failed) out << "; " << failed << " failed, see logs/predict_errors.jsonl";
    out << "\n";
    return failed ? kPartial : kOk;
}

int stage_rerank(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "rerank");
    auto corpus = load_ingested(c);
    auto split = load_split(c);
    if (split.protocol != "balanced_topk") {
        throw RefusalError("rerank needs the balanced_topk split (split.protocol is '" + split.protocol +
                           "'); re-run split with --protocol balanced_topk");
    }
    auto prefs = profiling::read_preferences(c.out_dir / "extract" / "preferences.jsonl");
    reset_stage_dir(c, "rerank");
    auto tpl = templates();
    auto gateway = make_gateway(c, c.backend);
    ProfileResolver profiles(c, "rerank", split, prefs, *gateway, tpl);

    std::vector<std::string> users;
    for (const auto& [u, rel] : split.relevant) users.push_back(u);
    cf::SeenItems seen(std::span<const corpus::Review>(split.train));
    std::map<std::string, cf::CandidateList> lists;
    using clock = std::chrono::steady_clock;
    const auto g0 = clock::now();
    if (c.generator == "bpr") {
        auto model = cf::train_bpr(cf::interactions_from_reviews(split.train), c.bpr);
        write_output(c, m, "rerank/bpr.json", cf::checkpoint(model).dump() + "\n");
        for (auto& l : cf::generate_candidates_batch(model, users, c.n, seen)) lists.emplace(l.user_id, std::move(l));
    } else {
        std::unordered_set<std::string> known;
        for (const auto& r : corpus.reviews) known.insert(r.item_id);
        for (const auto& [id, meta] : corpus.items) known.insert(id);
        auto ext = cf::load_external_candidates(*c.candidates, known, seen);
        for (const auto& w : ext.warnings) out << "warning: " << w << "\n";
        for (const auto& u : users) {
            auto it = ext.lists.find(u);
            cf::CandidateList l;
            if (it != ext.lists.end()) l = it->second;
            l.user_id = u;
            if (l.items.size() > static_cast<std::size_t>(c.n)) l.items.resize(static_cast<std::size_t>(c.n));
            l.short_list = l.items.size() < static_cast<std::size_t>(c.n);
            lists.emplace(u, std::move(l));
        }
    }
    const double generate_seconds = std::chrono::duration<double>(clock::now() - g0).count();
    std::vector<json> cand_rows;
    std::size_t short_lists = 0;
    for (const auto& [u, l] : lists) {
        cand_rows.push_back(cf::candidates_to_json(l));
        short_lists += l.short_list;
    }
    write_output(c, m, "rerank/candidates.jsonl", jsonl(cand_rows));

    std::vector<profiling::PreferenceSet> needed;
    for (const auto& [u, l] : lists) {
        needed.push_back(profiles.user_set(u));
        for (const auto& cand : l.items) needed.push_back(profiles.item_set(cand.item_id, u));
    }
    std::size_t failed = 0;
    for (const auto& e : profiles.ensure(needed)) {
        append_log(c, "rerank_errors.jsonl", json{{"error", "profile build failed: " + e}}.dump());
        ++failed;
    }
    ranking::Predictor predictor = [&](const std::string& user, const std::string& item) {
        auto in = prompt_inputs(profiles, corpus, split.bias, user, item);
        if (!in) throw reasoner::PredictionError("profiles unavailable for (" + user + ", " + item + ")");
        return reasoner::predict_rating({"", user, item, std::move(*in)}, *gateway, tpl, c.scale).expected_rating;
    };
    auto source = [&](const std::string& user) { return lists.at(user); };
    auto result = ranking::run_pipeline(users, c.n, c.n, source, predictor, c.workers);
    result.timing.generate_seconds += generate_seconds;

    std::vector<json> ranked_rows;
    std::size_t failed_predictions = 0;
    for (const auto& [u, list] : result.lists) {
        ranked_rows.push_back(ranking::ranked_to_json(list));
        for (const auto& it : list.items) failed_predictions += it.failed;
    }
    write_output(c, m, "rerank/ranked.jsonl", jsonl(ranked_rows));
    std::size_t skipped = 0;
    for (const auto& [u, why] : result.failures) {
        const bool empty = why == "empty candidate list";
        skipped += empty;
        failed += !empty;
        append_log(c, "rerank_errors.jsonl", json_line("user_id", u, why));
    }
    fs::create_directories(c.out_dir / "logs");
    std::ofstream(c.out_dir / "logs" / "rerank_timing.json") << result.timing.to_json().dump(2) << "\n";
    add_store_outputs(c, m, "rerank/profiles");
    m.stats = {{"users", users.size()},
               {"ranked", result.lists.size()},
               {"skipped_empty", skipped},
               {"failed_users", failed},
               {"failed_predictions", failed_predictions},
               {"short_lists", short_lists},
               {"generator", c.generator},
               {"n", c.n}};
    write_manifest(c, m);
    out << "rerank (" << c.generator << ", n=" << c.n << "): " << result.lists.size() << "/" << users.size()
        << " users";
    if (skipped) out << "; " << skipped << " skipped (no candidates)";
    if (failed || failed_predictions) out << "; failures logged to logs/rerank_errors.jsonl";
    out << "\n";
    return failed || failed_predictions ? kPartial : kOk;
}

void print_report(std::ostream& out, const std::string& title, const eval::MetricReport& r) {
    out << title << "\n";
    for (const auto& row : r.rows) {
        char buf[160];
        if (row.k > 0) {
            std::snprintf(buf, sizeof buf, "  %-7s @%-3d %-7s %.5f  (n=%zu)\n", row.metric.c_str(), row.k,
                          row.subset.c_str(), row.value, row.support);
        } else {
            std::snprintf(buf, sizeof buf, "  %-7s %-7s %.5f  (n=%zu)\n", row.metric.c_str(), row.subset.c_str(),
                          row.value, row.support);
        }
        out << buf;
    }
    for (const auto& w : r.warnings) out << "  warning: " << w << "\n";
    for (const auto& n : r.notes) out << "  note: " << n << "\n";
}

std::map<std::string, double> read_predictions(const fs::path& path) {
    std::map<std::string, double> out;
    for (const auto& row : read_jsonl(path)) {
        out[row.at("review_id").get<std::string>()] = row.at("expected_rating").get<double>();
    }
    return out;
}

int stage_evaluate_rating(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "evaluate-rating");
    auto split = load_split(c);
    reset_stage_dir(c, "evaluate-rating");
    std::map<std::string, eval::MetricReport> reports;
    reports["llm"] = eval::evaluate_rating(read_predictions(c.out_dir / "predict" / "predictions.jsonl"), split.test,
                                           split.tags, c.coverage_threshold);
    reports["mf"] = eval::evaluate_rating(read_predictions(c.out_dir / "predict" / "mf_predictions.jsonl"), split.test,
                                          split.tags, c.coverage_threshold);
    for (auto& [name, r] : reports) {
        r.config_digest = m.config_digest;
        write_output(c, m, "evaluate/rating/report_" + name + ".json", r.to_json().dump(2) + "\n");
        write_output(c, m, "evaluate/rating/report_" + name + ".csv", r.to_csv());
        print_report(out, "rating (" + name + ")", r);
    }
    write_manifest(c, m);
    return kOk;
}

int stage_evaluate_topk(const RunConfig& c, std::ostream& out) {
    Manifest m = begin(c, "evaluate-topk");
    auto split = load_split(c);
    reset_stage_dir(c, "evaluate-topk");
    eval::RankedLists reranked, generator;
    for (const auto& row : read_jsonl(c.out_dir / "rerank" / "ranked.jsonl")) {
        auto& v = reranked[row.at("user_id").get<std::string>()];
        for (const auto& it : row.at("items")) v.push_back(it.at("item_id").get<std::string>());
    }
    for (const auto& row : read_jsonl(c.out_dir / "rerank" / "candidates.jsonl")) {
        auto& v = generator[row.at("user_id").get<std::string>()];
        for (const auto& it : row.at("items")) v.push_back(it.at("item_id").get<std::string>());
    }
    std::map<std::string, eval::MetricReport> reports;
    reports["reranked"] = eval::evaluate_topk(reranked, split.relevant, c.ks);
    reports["generator"] = eval::evaluate_topk(generator, split.relevant, c.ks);
    for (auto& [name, r] : reports) {
        r.config_digest = m.config_digest;
        if (std::find(c.ks.begin(), c.ks.end(), c.n) != c.ks.end()) {
            r.notes.push_back("recall@" + std::to_string(c.n) + " equals the generator's: reranking " +
                              std::to_string(c.n) + " candidates cannot change their set");
        }
        write_output(c, m, "evaluate/topk/report_" + name + ".json", r.to_json().dump(2) + "\n");
        write_output(c, m, "evaluate/topk/report_" + name + ".csv", r.to_csv());
        print_report(out, "top-k (" + name + ")", r);
    }
    write_manifest(c, m);
    return kOk;
}

int stage_report(const RunConfig& c, std::ostream& out) {
    Manifest m;
    m.stage = "report";
    m.config_digest = stage_digest(c, "report");
    std::ostringstream md;
    md << "# Evaluation summary\n";
    bool any = false;
    for (const auto& [stage, task] : {std::pair{"evaluate-rating", "rating"}, std::pair{"evaluate-topk", "topk"}}) {
        if (!fs::exists(manifest_path(c, stage))) continue;
        // The evaluate stage's own upstream chain must still be intact.
        verify_upstream(c, stage);
        m.upstream[stage] = sha256_file(manifest_path(c, stage));
        any = true;
        const auto dir = c.out_dir / stage_dir(stage);
        for (const auto& entry : std::set<fs::path>{fs::directory_iterator(dir), fs::directory_iterator()}) {
            if (entry.extension() != ".json" || entry.filename() == "manifest.json") continue;
            auto r = read_json(entry);
            md << "\n## " << task << ": " << entry.stem().string().substr(7) << "\n\n";
            md << "| metric | subset | k | value | support |\n|---|---|---|---|---|\n";
            for (const auto& row : r.at("rows")) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.5f", row.at("value").get<double>());
                md << "| " << row.at("metric").get<std::string>() << " | " << row.at("subset").get<std::string>()
                   << " | " << row.at("k").get<int>() << " | " << buf << " | " << row.at("support").get<std::size_t>()
                   << " |\n";
            }
            for (const auto& n : r.at("notes")) md << "\n_" << n.get<std::string>() << "_\n";
        }
    }
    if (!any) throw RefusalError("report needs evaluation output; run `reviewrec evaluate --task rating|topk` first");
    reset_stage_dir(c, "report");
    write_output(c, m, "report/summary.md", md.str());
    write_manifest(c, m);
    out << md.str();
    return kOk;
}

std::vector<std::string> planned_outputs(const std::string& stage) {
    if (stage == "ingest") return {"ingest/reviews.jsonl", "ingest/items.jsonl"};
    if (stage == "split") return {"split/split.json", "split/{train,valid,test}.jsonl", "split/bias.json", "split/relevant.json (top-k)"};
    if (stage == "extract") return {"extract/preferences.jsonl"};
    if (stage == "profile") return {"profile/profiles.jsonl", "profile/index.jsonl"};
    if (stage == "distill-export") return {"distill-export/sft.jsonl", "distill-export/sft.manifest.json"};
    if (stage == "predict") return {"predict/predictions.jsonl", "predict/mf.json", "predict/mf_predictions.jsonl"};
    if (stage == "rerank") return {"rerank/candidates.jsonl", "rerank/ranked.jsonl", "rerank/bpr.json"};
    if (stage == "evaluate-rating") return {"evaluate/rating/report_{llm,mf}.{json,csv}"};
    if (stage == "evaluate-topk") return {"evaluate/topk/report_{reranked,generator}.{json,csv}"};
    return {"report/summary.md"};
}

}  // namespace

int run_stage(const std::string& stage, const RunConfig& c, const StageOptions& options, std::ostream& out) {
    std::string name = stage;
    if (stage == "evaluate") {
        if (options.task != "rating" && options.task != "topk") throw ConfigError("evaluate needs --task rating|topk");
        name = "evaluate-" + options.task;
    }
    if (options.dry_run) {
        out << "plan: " << stage << (stage == "evaluate" ? " --task " + options.task : "") << "\n";
        out << "  run directory: " << c.out_dir.string() << "\n";
        out << "  config digest: " << stage_digest(c, name) << "\n";
        if (name != "report") {
            for (const auto& [up, sha] : verify_upstream(c, name)) out << "  upstream " << up << ": ok (" << sha.substr(0, 12) << ")\n";
        }
        for (const auto& o : planned_outputs(name)) out << "  would write " << o << "\n";
        out << "  would write " << (stage_dir(name) / "manifest.json").generic_string() << "\n";
        return kOk;
    }
    fs::create_directories(c.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    int code = kOk;
    if (name == "ingest") code = stage_ingest(c, out);
    else if (name == "split") code = stage_split(c, out);
    else if (name == "extract") code = stage_extract(c, out);
    else if (name == "profile") code = stage_profile(c, out);
    else if (name == "distill-export") code = stage_distill(c, out);
    else if (name == "predict") code = stage_predict(c, out);
    else if (name == "rerank") code = stage_rerank(c, out);
    else if (name == "evaluate-rating") code = stage_evaluate_rating(c, out);
    else if (name == "evaluate-topk") code = stage_evaluate_topk(c, out);
    else if (name == "report") code = stage_report(c, out);
    else throw ConfigError("unknown subcommand '" + stage + "'");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    append_log(c, "timing.jsonl", json{{"stage", name}, {"seconds", secs}, {"exit", code}}.dump());
    return code;
}

}  // namespace reviewrec::cli

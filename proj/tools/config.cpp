#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "reviewrec/digest.hpp"

namespace reviewrec::cli {

using nlohmann::json;

namespace {

void only_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : obj.items()) {
        if (!ok.contains(k)) throw ConfigError("unknown config key '" + where + "." + k + "'");
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return fallback;
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

fs::path existing(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
    return p;
}

BackendConfig backend_from(const json& j, const fs::path& base, const std::string& where) {
    only_keys(j, where, {"kind", "script", "endpoint", "model", "token_scores"});
    BackendConfig b;
    b.kind = get_or<std::string>(j, "kind", "mock", where);
    b.model = get_or<std::string>(j, "model", b.model, where);
    b.token_scores = get_or<bool>(j, "token_scores", true, where);
    if (b.kind == "mock") {
        auto script = get_or<std::string>(j, "script", "", where);
        if (script.empty()) throw ConfigError(where + ".script is required for a mock backend");
        b.script = existing(resolve(base, script), "mock script");
    } else if (b.kind == "http") {
        b.endpoint = get_or<std::string>(j, "endpoint", "", where);
        if (b.endpoint.empty()) {
            if (const char* env = std::getenv("REVIEWREC_ENDPOINT")) b.endpoint = env;
        }
        if (b.endpoint.empty()) throw ConfigError(where + ".endpoint is empty and REVIEWREC_ENDPOINT is not set");
    } else {
        throw ConfigError(where + ".kind must be 'mock' or 'http' (got '" + b.kind + "')");
    }
    return b;
}

json backend_view(const BackendConfig& b) {
    json v{{"kind", b.kind}, {"model", b.model}, {"token_scores", b.token_scores}};
    if (b.kind == "mock") v["script_sha256"] = sha256_file(b.script);
    else v["endpoint"] = b.endpoint;
    return v;
}

cf::TrainConfig train_from(const json& j, const std::string& where, cf::TrainConfig d) {
    only_keys(j, where, {"dimension", "learning_rate", "regularization", "epochs", "patience", "seed", "init_scale"});
    d.dimension = get_or<int>(j, "dimension", d.dimension, where);
    d.learning_rate = get_or<double>(j, "learning_rate", d.learning_rate, where);
    d.regularization = get_or<double>(j, "regularization", d.regularization, where);
    d.epochs = get_or<int>(j, "epochs", d.epochs, where);
    d.patience = get_or<int>(j, "patience", d.patience, where);
    d.seed = get_or<std::uint64_t>(j, "seed", d.seed, where);
    d.init_scale = get_or<double>(j, "init_scale", d.init_scale, where);
    d.validate();
    return d;
}

json train_view(const cf::TrainConfig& c) {
    return {{"dimension", c.dimension},   {"learning_rate", c.learning_rate}, {"regularization", c.regularization},
            {"epochs", c.epochs},         {"patience", c.patience},           {"seed", c.seed},
            {"init_scale", c.init_scale}};
}

}  // namespace

std::vector<int> parse_k_list(const std::string& text) {
    std::vector<int> ks;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            int k = std::stoi(part, &used);
            if (used != part.size() || k < 1) throw std::invalid_argument(part);
            ks.push_back(k);
        } catch (const std::exception&) {
            throw ConfigError("bad cutoff '" + part + "' in k list '" + text + "'");
        }
    }
    if (ks.empty()) throw ConfigError("empty k list");
    return ks;
}

RunConfig config_from_json(json j, const fs::path& base_dir) {
    only_keys(j, "config",
              {"out_dir", "workers", "corpus", "scale", "kcore", "split", "backend", "teacher", "gateway", "selection",
               "distill", "mf", "bpr", "generator", "evaluate"});
    RunConfig c;
    c.out_dir = resolve(base_dir, get_or<std::string>(j, "out_dir", "run", "config"));
    c.workers = get_or<int>(j, "workers", c.workers, "config");
    if (c.workers < 1) throw ConfigError("workers must be >= 1");

    if (!j.contains("corpus")) throw ConfigError("config.corpus is required");
    const auto& cj = j["corpus"];
    only_keys(cj, "corpus", {"reviews", "format", "items", "csv_columns"});
    auto reviews = get_or<std::string>(cj, "reviews", "", "corpus");
    if (reviews.empty()) throw ConfigError("corpus.reviews is required");
    c.reviews = existing(resolve(base_dir, reviews), "review file");
    c.format = get_or<std::string>(cj, "format", c.format, "corpus");
    if (c.format != "jsonl" && c.format != "csv") throw ConfigError("corpus.format must be 'jsonl' or 'csv'");
    if (auto items = get_or<std::string>(cj, "items", "", "corpus"); !items.empty()) {
        c.items = existing(resolve(base_dir, items), "item metadata file");
    }
    c.csv_columns = get_or<std::map<std::string, std::string>>(cj, "csv_columns", {}, "corpus");

    const json sj = j.value("scale", json::object());
    only_keys(sj, "scale", {"min", "max", "token_offset"});
    c.scale = RatingScale::with_default_offset(get_or<int>(sj, "min", 1, "scale"), get_or<int>(sj, "max", 5, "scale"));
    c.scale.token_offset = get_or<int>(sj, "token_offset", c.scale.token_offset, "scale");
    c.scale.validate();
    c.kcore = get_or<int>(j, "kcore", 0, "config");
    if (c.kcore < 0) throw ConfigError("kcore must be >= 0");

    const json pj = j.value("split", json::object());
    only_keys(pj, "split", {"protocol", "ratios", "keep_min", "high_min", "seed"});
    c.protocol = get_or<std::string>(pj, "protocol", c.protocol, "split");
    if (c.protocol != "temporal" && c.protocol != "balanced_topk") {
        throw ConfigError("split.protocol must be 'temporal' or 'balanced_topk'");
    }
    auto ratios = get_or<std::vector<double>>(pj, "ratios", {8, 1, 1}, "split");
    if (ratios.size() != 3 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || ratios[0] + ratios[1] + ratios[2] <= 0) {
        throw ConfigError("split.ratios must be three non-negative numbers with a positive sum");
    }
    c.ratios = {ratios[0], ratios[1], ratios[2]};
    c.topk.keep_min = get_or<int>(pj, "keep_min", c.topk.keep_min, "split");
    c.topk.high_min = get_or<int>(pj, "high_min", c.topk.high_min, "split");
    c.topk.seed = get_or<std::uint64_t>(pj, "seed", c.topk.seed, "split");

    if (!j.contains("backend")) throw ConfigError("config.backend is required");
    c.backend = backend_from(j["backend"], base_dir, "backend");
    c.teacher = j.contains("teacher") ? backend_from(j["teacher"], base_dir, "teacher") : c.backend;

    const json gj = j.value("gateway", json::object());
    only_keys(gj, "gateway", {"cache", "max_attempts", "backoff_ms"});
    c.cache = get_or<bool>(gj, "cache", c.cache, "gateway");
    c.max_attempts = get_or<int>(gj, "max_attempts", c.max_attempts, "gateway");
    c.backoff_ms = get_or<int>(gj, "backoff_ms", c.backoff_ms, "gateway");
    if (c.max_attempts < 1 || c.backoff_ms < 0) throw ConfigError("gateway.max_attempts >= 1 and backoff_ms >= 0 required");

    c.strategy = profiling::SelectionStrategy::parse(get_or<std::string>(j, "selection", "all", "config"));

    const json dj = j.value("distill", json::object());
    only_keys(dj, "distill", {"steps", "recommend_threshold"});
    c.steps = distill::parse_steps(get_or<std::string>(dj, "steps", "pe,pc,rp", "distill"));
    c.recommend_threshold = get_or<int>(dj, "recommend_threshold", c.recommend_threshold, "distill");

    c.mf = train_from(j.value("mf", json::object()), "mf", {});
    cf::TrainConfig bpr_defaults;
    bpr_defaults.learning_rate = 0.05;
    bpr_defaults.regularization = 0.01;
    bpr_defaults.epochs = 30;
    c.bpr = train_from(j.value("bpr", json::object()), "bpr", bpr_defaults);

    const json rj = j.value("generator", json::object());
    only_keys(rj, "generator", {"kind", "n", "candidates"});
    c.generator = get_or<std::string>(rj, "kind", c.generator, "generator");
    c.n = get_or<int>(rj, "n", c.n, "generator");
    if (c.n < 1) throw ConfigError("generator.n must be >= 1");
    if (c.generator == "external") {
        auto path = get_or<std::string>(rj, "candidates", "", "generator");
        if (path.empty()) throw ConfigError("generator.candidates is required for an external generator");
        c.candidates = existing(resolve(base_dir, path), "candidate file");
    } else if (c.generator != "bpr") {
        throw ConfigError("generator.kind must be 'bpr' or 'external'");
    }

    const json ej = j.value("evaluate", json::object());
    only_keys(ej, "evaluate", {"k", "coverage_threshold"});
    c.ks = get_or<std::vector<int>>(ej, "k", c.ks, "evaluate");
    if (c.ks.empty()) throw ConfigError("evaluate.k must not be empty");
    for (int k : c.ks) {
        if (k < 1) throw ConfigError("evaluate.k entries must be >= 1");
    }
    c.coverage_threshold = get_or<double>(ej, "coverage_threshold", c.coverage_threshold, "evaluate");

    std::vector<std::string> step_names;
    for (auto s : c.steps) step_names.emplace_back(distill::to_string(s));
    c.effective = {
        {"corpus",
         {{"format", c.format},
          {"csv_columns", c.csv_columns},
          {"reviews_sha256", sha256_file(c.reviews)},
          {"items_sha256", c.items ? json(sha256_file(*c.items)) : json(nullptr)}}},
        {"scale", {{"min", c.scale.min}, {"max", c.scale.max}, {"token_offset", c.scale.token_offset}}},
        {"kcore", c.kcore},
        {"split",
         {{"protocol", c.protocol},
          {"ratios", ratios},
          {"keep_min", c.topk.keep_min},
          {"high_min", c.topk.high_min},
          {"seed", c.topk.seed}}},
        {"backend", backend_view(c.backend)},
        {"teacher", backend_view(c.teacher)},
        {"selection", c.strategy.to_string()},
        {"distill", {{"steps", step_names}, {"recommend_threshold", c.recommend_threshold}}},
        {"mf", train_view(c.mf)},
        {"bpr", train_view(c.bpr)},
        {"generator",
         {{"kind", c.generator},
          {"n", c.n},
          {"candidates_sha256", c.candidates ? json(sha256_file(*c.candidates)) : json(nullptr)}}},
        {"evaluate", {{"k", c.ks}, {"coverage_threshold", c.coverage_threshold}}},
    };
    return c;
}

RunConfig load_config(const fs::path& path, const Overrides& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    for (const auto& [pointer, value] : overrides) {
        try {
            j[json::json_pointer(pointer)] = value;
        } catch (const json::exception& e) {
            throw ConfigError("cannot apply override " + pointer + ": " + e.what());
        }
    }
    return config_from_json(std::move(j), fs::absolute(path).parent_path());
}

}  // namespace reviewrec::cli

#include <fstream>
#include <set>

#include "cli.hpp"
#include "reviewrec/digest.hpp"

namespace reviewrec::cli {

using nlohmann::json;

std::vector<std::string> upstream_of(const std::string& stage) {
    static const std::map<std::string, std::vector<std::string>> deps{
        {"ingest", {}},
        {"split", {"ingest"}},
        {"extract", {"split"}},
        {"profile", {"extract"}},
        {"distill-export", {"profile"}},
        {"predict", {"profile"}},
        {"rerank", {"profile"}},
        {"evaluate-rating", {"predict"}},
        {"evaluate-topk", {"rerank"}},
        {"report", {}},
    };
    auto it = deps.find(stage);
    if (it == deps.end()) throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

fs::path stage_dir(const std::string& stage) {
    if (stage == "evaluate-rating") return fs::path("evaluate") / "rating";
    if (stage == "evaluate-topk") return fs::path("evaluate") / "topk";
    return stage;
}

namespace {

std::vector<std::string> sections_of(const std::string& stage) {
    if (stage == "ingest") return {"corpus", "scale", "kcore"};
    if (stage == "split") return {"split"};
    if (stage == "extract") return {"backend"};
    if (stage == "profile") return {"selection"};
    if (stage == "distill-export") return {"teacher", "distill"};
    if (stage == "predict") return {"mf"};
    if (stage == "rerank") return {"generator", "bpr"};
    if (stage == "evaluate-rating" || stage == "evaluate-topk") return {"evaluate"};
    return {};
}

std::string command_of(const std::string& stage) {
    if (stage == "evaluate-rating") return "evaluate --task rating";
    if (stage == "evaluate-topk") return "evaluate --task topk";
    return stage;
}

}  // namespace

std::string stage_digest(const RunConfig& config, const std::string& stage) {
    json view = json::object();
    for (const auto& s : sections_of(stage)) view[s] = config.effective.at(s);
    std::string material = stage + "\n" + view.dump() + "\n";
    for (const auto& up : upstream_of(stage)) material += stage_digest(config, up) + "\n";
    return sha256_hex(material);
}

json Manifest::to_json() const {
    return {{"stage", stage}, {"config_digest", config_digest}, {"upstream", upstream}, {"outputs", outputs}, {"stats", stats}};
}

Manifest Manifest::from_json(const json& j) {
    Manifest m;
    m.stage = j.at("stage").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.upstream = j.at("upstream").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.stats = j.value("stats", json::object());
    return m;
}

fs::path manifest_path(const RunConfig& config, const std::string& stage) {
    return config.out_dir / stage_dir(stage) / "manifest.json";
}

namespace {

void verify_one(const RunConfig& config, const std::string& stage, const std::string& requester,
                std::map<std::string, std::string>& verified) {
    if (verified.contains(stage)) return;
    const auto path = manifest_path(config, stage);
    const std::string rerun = "run `reviewrec " + command_of(stage) + "` with this config first";
    if (!fs::exists(path)) {
        throw RefusalError(requester + " needs the '" + stage + "' stage, but " + path.string() + " is missing; " +
                           rerun);
    }
    Manifest m;
    try {
        std::ifstream in(path);
        m = Manifest::from_json(json::parse(in));
    } catch (const std::exception& e) {
        throw RefusalError("manifest " + path.string() + " is unreadable (" + e.what() + "); " + rerun);
    }
    if (m.config_digest != stage_digest(config, stage)) {
        throw RefusalError("'" + stage + "' output in " + (config.out_dir / stage_dir(stage)).string() +
                           " was produced with a different configuration (flag overrides count as configuration); " +
                           "re-run `reviewrec " + command_of(stage) + "` and the stages after it");
    }
    for (const auto& [rel, sha] : m.outputs) {
        const auto file = config.out_dir / rel;
        if (!fs::exists(file) || sha256_file(file) != sha) {
            throw RefusalError("artifact " + file.string() + " is missing or was modified after '" + stage +
                               "' ran; re-run `reviewrec " + command_of(stage) + "`");
        }
    }
    for (const auto& up : upstream_of(stage)) {
        verify_one(config, up, stage, verified);
        auto it = m.upstream.find(up);
        if (it == m.upstream.end() || it->second != verified.at(up)) {
            throw RefusalError("'" + stage + "' was built from a different '" + up + "' run; re-run `reviewrec " +
                               command_of(stage) + "`");
        }
    }
    verified[stage] = sha256_file(path);
}

}  // namespace

std::map<std::string, std::string> verify_upstream(const RunConfig& config, const std::string& stage) {
    std::map<std::string, std::string> verified;
    for (const auto& up : upstream_of(stage)) verify_one(config, up, stage, verified);
    std::map<std::string, std::string> direct;
    for (const auto& up : upstream_of(stage)) direct[up] = verified.at(up);
    return direct;
}

void write_output(const RunConfig& config, Manifest& manifest, const fs::path& rel, const std::string& bytes) {
    const auto path = config.out_dir / rel;
    fs::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot write " + tmp);
        out << bytes;
        if (!out) throw StorageError("write failed for " + tmp);
    }
    fs::rename(tmp, path);
    manifest.outputs[rel.generic_string()] = sha256_hex(bytes);
}

void write_manifest(const RunConfig& config, const Manifest& manifest) {
    const auto path = manifest_path(config, manifest.stage);
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    out << manifest.to_json().dump(2) << '\n';
}

void append_log(const RunConfig& config, const std::string& name, const std::string& line) {
    const auto dir = config.out_dir / "logs";
    fs::create_directories(dir);
    std::ofstream out(dir / name, std::ios::app);
    out << line << '\n';
}

}  // namespace reviewrec::cli

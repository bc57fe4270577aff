#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reviewrec/cf.hpp"
#include "reviewrec/corpus.hpp"
#include "reviewrec/distill.hpp"
#include "reviewrec/eval.hpp"
#include "reviewrec/gateway.hpp"
#include "reviewrec/profiling.hpp"

namespace reviewrec::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kPartial = 1, kInvalid = 2 };

/// Missing or stale upstream stage; maps to exit code 2.
class RefusalError : public Error {
public:
    using Error::Error;
};

struct BackendConfig {
    std::string kind = "mock";  // mock | http
    fs::path script;            // mock
    std::string endpoint;       // http; REVIEWREC_ENDPOINT overrides when empty
    std::string model = "default";
    bool token_scores = true;
};

struct RunConfig {
    fs::path out_dir;
    int workers = 4;

    fs::path reviews;
    std::string format = "jsonl";
    std::optional<fs::path> items;
    std::map<std::string, std::string> csv_columns;
    RatingScale scale = RatingScale::with_default_offset(1, 5);
    int kcore = 0;

    std::string protocol = "temporal";  // temporal | balanced_topk
    corpus::SplitRatios ratios;
    eval::TopkProtocol topk;

    BackendConfig backend;
    BackendConfig teacher;
    bool cache = true;
    int max_attempts = 3;
    int backoff_ms = 200;

    profiling::SelectionStrategy strategy;
    std::vector<distill::Step> steps{distill::Step::preference_extraction, distill::Step::profile_construction,
                                     distill::Step::rating_prediction};
    int recommend_threshold = distill::kDefaultRecommendThreshold;

    cf::TrainConfig mf;
    cf::TrainConfig bpr;
    std::string generator = "bpr";  // bpr | external
    std::optional<fs::path> candidates;
    int n = cf::kDefaultCandidates;

    std::vector<int> ks{5, 10, 15, 20};
    double coverage_threshold = eval::kDefaultCoverageThreshold;

    /// Effective configuration (file + overrides, paths resolved, input
    /// digests attached). Stage digests are computed from its sections.
    nlohmann::json effective;
};

/// Flag overrides, applied on top of the file as JSON pointers.
using Overrides = std::vector<std::pair<std::string, nlohmann::json>>;

/// Reads, overrides and validates a config. Relative paths resolve against the
/// config file's directory. Throws ConfigError.
RunConfig load_config(const fs::path& path, const Overrides& overrides = {});
RunConfig config_from_json(nlohmann::json j, const fs::path& base_dir);

std::vector<int> parse_k_list(const std::string& text);

// -- manifests --------------------------------------------------------------

/// Stage names, in pipeline order.
inline const std::vector<std::string> kStages{"ingest",  "split",  "extract",         "profile",       "distill-export",
                                              "predict", "rerank", "evaluate-rating", "evaluate-topk", "report"};

std::vector<std::string> upstream_of(const std::string& stage);
/// Directory of a stage's artifacts, relative to the run directory.
fs::path stage_dir(const std::string& stage);

/// Digest over the config sections a stage and its upstream stages read.
std::string stage_digest(const RunConfig& config, const std::string& stage);

struct Manifest {
    std::string stage;
    std::string config_digest;
    std::map<std::string, std::string> upstream;  // stage -> sha256 of its manifest file
    std::map<std::string, std::string> outputs;   // path relative to run dir -> sha256
    nlohmann::json stats = nlohmann::json::object();

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
};

fs::path manifest_path(const RunConfig& config, const std::string& stage);

/// Verifies the stage's upstream manifests (recursively): presence, config
/// digest and output checksums. Returns stage -> manifest sha. Throws RefusalError.
std::map<std::string, std::string> verify_upstream(const RunConfig& config, const std::string& stage);

/// Writes bytes to out_dir/rel and records the checksum in `manifest`.
void write_output(const RunConfig& config, Manifest& manifest, const fs::path& rel, const std::string& bytes);
void write_manifest(const RunConfig& config, const Manifest& manifest);

/// Appends to out_dir/logs/<name>; logs are not part of the artifact tree.
void append_log(const RunConfig& config, const std::string& name, const std::string& line);

// -- stages -----------------------------------------------------------------

struct StageOptions {
    bool dry_run = false;
    std::string task;  // evaluate: rating | topk
};

/// Runs one subcommand. Returns an exit code; throws on config errors.
int run_stage(const std::string& stage, const RunConfig& config, const StageOptions& options, std::ostream& out);

/// CLI entry point (argument parsing included).
int main_entry(int argc, char** argv);

}  // namespace reviewrec::cli

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reviewrec/corpus.hpp"
#include "reviewrec/gateway.hpp"
#include "reviewrec/profiling.hpp"
#include "reviewrec/reasoner.hpp"
#include "reviewrec/templates.hpp"

namespace reviewrec::distill {

enum class Step { preference_extraction, profile_construction, rating_prediction };

std::string_view to_string(Step step);
Step step_from_string(std::string_view name);  // also accepts pe, pc, rp
/// "pe,pc,rp" -> steps, in canonical order. Throws ConfigError.
std::vector<Step> parse_steps(std::string_view list);

struct InstructionExample {
    Step step = Step::preference_extraction;
    std::vector<llm::Message> messages;  // the full input prompt
    std::string target;                  // assistant completion
    /// Character offset in `target` where the loss-bearing span starts.
    std::size_t mask_from = 0;
    /// Source review ids, sorted.
    std::vector<std::string> provenance;
};

nlohmann::json example_to_json(const InstructionExample& ex);
InstructionExample example_from_json(const nlohmann::json& j);

struct BuildResult {
    std::vector<InstructionExample> examples;
    /// One line per skipped or excluded input.
    std::vector<std::string> log;
};

/// One example per review: the extraction prompt and the teacher's markup.
/// Empty reviews, teacher failures and unparseable markup are skipped.
BuildResult build_extraction_set(std::span<const corpus::Review> train, llm::Gateway& teacher,
                                 const llm::TemplateRegistry& templates);

/// One example per preference set; degenerate sets are excluded.
BuildResult build_profile_set(std::span<const profiling::PreferenceSet> sets, llm::Gateway& teacher,
                              const llm::TemplateRegistry& templates);

struct ReasoningInput {
    corpus::Review review;  // carries the true rating
    reasoner::PromptInputs inputs;
};

inline constexpr int kDefaultRecommendThreshold = 3;

/// Teacher prompt with the true rating (reasoning generation template).
llm::CompletionRequest teacher_reasoning_request(const ReasoningInput& in, const llm::TemplateRegistry& templates,
                                                 int recommend_threshold = kDefaultRecommendThreshold);

/// Teacher sees the rating; the exported input is the inference prompt without
/// it and the target ends in the digit-mapped true rating.
BuildResult build_reasoning_set(std::span<const ReasoningInput> inputs, llm::Gateway& teacher,
                                const llm::TemplateRegistry& templates, const RatingScale& scale,
                                int recommend_threshold = kDefaultRecommendThreshold);

struct DatasetManifest {
    std::map<std::string, std::size_t> counts;  // step -> examples
    std::size_t total = 0;
    std::string corpus_digest;
    std::map<std::string, std::string> template_checksums;
    std::string teacher_backend;
    std::string sha256;  // of the exported JSONL

    nlohmann::json to_json() const;
};

/// Sorted by (step, provenance, messages); every example must have a non-empty
/// target, mask_from <= target length and non-empty provenance.
std::vector<InstructionExample> canonical_order(std::vector<InstructionExample> examples);

/// Writes `path` (JSONL) and returns its manifest. Throws ConfigError on an
/// invalid example and StorageError on I/O failure.
DatasetManifest export_sft(std::vector<InstructionExample> examples, const std::filesystem::path& path,
                           const std::string& corpus_digest, const std::map<std::string, std::string>& template_checksums,
                           const std::string& teacher_backend);

/// Provenance ids that are not in `train_ids`.
std::vector<std::string> leakage_violations(std::span<const InstructionExample> examples,
                                            const std::set<std::string>& train_ids);

}  // namespace reviewrec::distill

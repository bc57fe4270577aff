#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reviewrec/error.hpp"
#include "reviewrec/gateway.hpp"
#include "reviewrec/scale.hpp"
#include "reviewrec/templates.hpp"

namespace reviewrec::reasoner {

inline constexpr std::string_view kRatingTag = "Predicted User Rating:";
inline constexpr std::string_view kReasoningTag = "Reasoning:";
inline constexpr std::string_view kNoDescription = "(no description available)";

/// The rating integer parsed fine but lies outside the scale's digit range.
class RangeError : public ParseError {
public:
    using ParseError::ParseError;
};

/// No digit token of the scale was found among the scored alternatives.
class DistributionError : public Error {
public:
    using Error::Error;
};

class PredictionError : public Error {
public:
    using Error::Error;
};

/// "0, 1, 2, ..., 9" style enumeration of the scale's digits.
std::string digit_list(const RatingScale& scale);

/// A rating mean written in digit space with two decimals.
std::string format_average(double mean, const RatingScale& scale);

struct PromptInputs {
    std::string user_profile;  // "[Like] ... [Dislike] ..." text
    std::string item_profile;
    std::string item_description;
    double user_mean = 0.0;
    double item_mean = 0.0;
};

/// System + user messages for the inference prompt.
std::vector<llm::Message> build_prediction_prompt(const PromptInputs& in, const RatingScale& scale,
                                                  const llm::TemplateRegistry& templates);

struct ParsedOutput {
    std::string reasoning;
    int rating = 0;
    std::vector<std::string> warnings;
};

/// Reasoning is the text after "Reasoning:" (or the start) up to the rating tag;
/// the rating is the first integer after the tag, mapped from digit space.
/// Missing tag or integer -> ParseError; out-of-range digit -> RangeError.
ParsedOutput parse_prediction_output(std::string_view text, const RatingScale& scale);

struct RatingDistribution {
    std::map<int, double> probabilities;  // rating -> p, every scale rating present
    /// Probability mass the model put on the scale's digit tokens.
    double coverage_mass = 0.0;
};

/// Softmax over per-rating log scores; ratings without a score get p = 0.
/// Throws DistributionError when no finite score is present.
RatingDistribution distribution_from_scores(const std::map<int, double>& log_scores, const RatingScale& scale);

/// Index of the first digit-bearing token after the rating tag.
std::optional<std::size_t> rating_token_position(std::span<const llm::TokenScore> scores);

/// Distribution at the rating position. Alternatives are matched after
/// trimming whitespace; several spellings of one digit are pooled.
RatingDistribution rating_distribution(std::span<const llm::TokenScore> scores, const RatingScale& scale);

/// Sum of r * p(r), clamped to the scale.
double expected_rating(const RatingDistribution& dist, const RatingScale& scale);

struct Prediction {
    std::string review_id;
    std::string user_id;
    std::string item_id;
    std::string reasoning;
    int parsed_rating = 0;
    double expected_rating = 0.0;
    std::optional<RatingDistribution> distribution;
    bool fallback_used = false;
    double coverage_mass = 0.0;
    std::vector<std::string> warnings;
};

struct PredictionTask {
    std::string review_id;
    std::string user_id;
    std::string item_id;
    PromptInputs inputs;
};

llm::CompletionRequest prediction_request(const PromptInputs& in, const RatingScale& scale,
                                          const llm::TemplateRegistry& templates, bool want_scores);

/// Prompt -> completion with token scores -> parse -> expectation. Without
/// usable scores the parsed integer is the prediction (fallback_used).
/// Throws PredictionError.
Prediction predict_rating(const PredictionTask& task, llm::Gateway& gateway, const llm::TemplateRegistry& templates,
                          const RatingScale& scale);

struct BatchOutcome {
    std::optional<Prediction> prediction;
    std::string error;
};

/// Runs tasks with the gateway's worker bound; outcomes keep input order.
std::vector<BatchOutcome> predict_batch(std::span<const PredictionTask> tasks, llm::Gateway& gateway,
                                        const llm::TemplateRegistry& templates, const RatingScale& scale);

nlohmann::json prediction_to_json(const Prediction& p);
Prediction prediction_from_json(const nlohmann::json& j);

}  // namespace reviewrec::reasoner

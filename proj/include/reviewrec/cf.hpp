#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reviewrec/corpus.hpp"
#include "reviewrec/error.hpp"

namespace reviewrec::cf {

struct RatingTriple {
    std::string user;
    std::string item;
    double rating = 0.0;
};

std::vector<RatingTriple> triples_from_reviews(std::span<const corpus::Review> reviews);

struct TrainConfig {
    int dimension = 32;
    double learning_rate = 0.01;
    double regularization = 0.02;
    int epochs = 100;
    std::uint64_t seed = 42;
    int patience = 3;
    /// Standard deviation of the initial latent factors.
    double init_scale = 0.01;

    void validate() const;  // throws ConfigError
};

class TrainingError : public Error {
public:
    using Error::Error;
};

struct TrainReport {
    std::vector<double> train_loss;  // per-epoch mean loss
    std::vector<double> valid_rmse;  // MF only, when a validation set is given
    int epochs_run = 0;
    int best_epoch = 0;
};

/// Dense id <-> index mapping, ids sorted.
struct IdIndex {
    std::vector<std::string> ids;
    std::unordered_map<std::string, std::uint32_t> index;

    static IdIndex build(std::vector<std::string> ids);
    std::optional<std::uint32_t> find(const std::string& id) const;
    std::size_t size() const noexcept { return ids.size(); }
};

/// Biased matrix factorization: global + b_u + b_i + p_u . q_i.
struct MfModel {
    int dimension = 0;
    double global_mean = 0.0;
    IdIndex users;
    IdIndex items;
    std::vector<double> user_bias;
    std::vector<double> item_bias;
    std::vector<double> user_factors;  // users.size() x dimension, row-major
    std::vector<double> item_factors;
    double clamp_min = -1e300;
    double clamp_max = 1e300;

    /// Unknown users or items contribute no bias and no interaction term.
    double predict(const std::string& user, const std::string& item) const;
};

/// SGD on squared error. With a validation set, stops after `patience` epochs
/// without RMSE improvement and keeps the best epoch's parameters.
MfModel train_mf(std::span<const RatingTriple> train, const TrainConfig& config,
                 std::span<const RatingTriple> valid = {},
                 std::optional<std::pair<double, double>> clamp = std::nullopt, TrainReport* report = nullptr);

double predict_mf(const MfModel& model, const std::string& user, const std::string& item);

/// Pairwise-ranking factor model trained on implicit positives.
struct BprModel {
    int dimension = 0;
    IdIndex users;
    IdIndex items;
    std::vector<double> user_factors;
    std::vector<double> item_factors;

    double score(std::uint32_t user, std::uint32_t item) const;
    std::optional<double> score(const std::string& user, const std::string& item) const;
};

struct Interaction {
    std::string user;
    std::string item;
};

std::vector<Interaction> interactions_from_reviews(std::span<const corpus::Review> reviews);

/// Minimizes -log sigmoid(s(u,i+) - s(u,i-)) with uniformly sampled negatives.
/// One epoch draws as many triples as there are interactions.
BprModel train_bpr(std::span<const Interaction> train, const TrainConfig& config, TrainReport* report = nullptr);

/// Items each user has interacted with in train.
class SeenItems {
public:
    SeenItems() = default;
    explicit SeenItems(std::span<const corpus::Review> train);
    explicit SeenItems(std::span<const Interaction> train);

    bool seen(const std::string& user, const std::string& item) const;
    const std::unordered_set<std::string>* of(const std::string& user) const;

private:
    std::unordered_map<std::string, std::unordered_set<std::string>> seen_;
};

struct Candidate {
    std::string item_id;
    double score = 0.0;

    bool operator==(const Candidate&) const = default;
};

struct CandidateList {
    std::string user_id;
    std::vector<Candidate> items;  // score descending, ties by item id
    std::string generator;
    /// Fewer than the requested number of unseen items existed.
    bool short_list = false;
};

inline constexpr int kDefaultCandidates = 20;

/// Top-n unseen items by model score.
CandidateList generate_candidates(const BprModel& model, const std::string& user, int n, const SeenItems& seen);

/// generate_candidates for many users, OpenMP-parallel over users.
std::vector<CandidateList> generate_candidates_batch(const BprModel& model, std::span<const std::string> users, int n,
                                                     const SeenItems& seen);
/// Serial reference for generate_candidates_batch.
std::vector<CandidateList> generate_candidates_batch_serial(const BprModel& model, std::span<const std::string> users,
                                                            int n, const SeenItems& seen);

class LoadError : public Error {
public:
    LoadError(std::size_t line, const std::string& message)
        : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct ExternalCandidates {
    std::map<std::string, CandidateList> lists;
    std::vector<std::string> warnings;
};

/// Reads candidate JSONL ({user_id, items:[{item_id, score}], generator}).
/// Items must be known (when `known_items` is non-empty), distinct, unseen in
/// train and in non-increasing score order. Violations throw LoadError.
ExternalCandidates load_external_candidates(const std::filesystem::path& path,
                                            const std::unordered_set<std::string>& known_items,
                                            const SeenItems& seen);

nlohmann::json candidates_to_json(const CandidateList& list);

nlohmann::json checkpoint(const MfModel& model);
nlohmann::json checkpoint(const BprModel& model);
MfModel mf_from_checkpoint(const nlohmann::json& j);
BprModel bpr_from_checkpoint(const nlohmann::json& j);

}  // namespace reviewrec::cf

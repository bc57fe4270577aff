#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "reviewrec/scale.hpp"

namespace reviewrec::corpus {

struct Review {
    std::string id;
    std::string user_id;
    std::string item_id;
    int rating = 0;
    std::string text;
    std::int64_t timestamp = 0;
    std::int64_t helpful_votes = 0;

    bool operator==(const Review&) const = default;
};

struct ItemMeta {
    std::string item_id;
    std::string title;
    std::string description;
    std::map<std::string, std::string> attributes;
};

/// Reviews plus item metadata. Immutable once built; share by const reference.
struct Corpus {
    std::vector<Review> reviews;
    std::map<std::string, ItemMeta> items;
    RatingScale scale;
    /// Item ids referenced by reviews but missing from the metadata map.
    std::vector<std::string> unresolved_items;

    std::size_t user_count() const;
    std::size_t item_count() const;
};

/// A record that failed validation during ingestion; the rest of the file is kept.
struct RecordIssue {
    std::size_t line = 0;
    std::string message;
};

struct IngestOptions {
    RatingScale scale = RatingScale::with_default_offset(1, 5);
    /// CSV only: review field name -> header column name. Unmapped fields
    /// are looked up under their own name.
    std::map<std::string, std::string> csv_columns;
};

struct IngestResult {
    Corpus corpus;
    std::vector<RecordIssue> issues;
    /// Records whose rating was absent or null; such users carry no rating signal.
    std::size_t unrated_dropped = 0;
};

/// Reads reviews from `path`. `format` is "jsonl" or "csv"; anything else is a
/// ConfigError. Malformed records become RecordIssues with their line number.
IngestResult ingest(const std::filesystem::path& path, const std::string& format,
                    const IngestOptions& options = {});

/// Parses one JSON review object. Returns false when the record carries no
/// rating. Throws ParseError on schema violations; callers attach the line.
bool review_from_json(const nlohmann::json& obj, const RatingScale& scale, Review& out);
nlohmann::json review_to_json(const Review& review);

/// Loads JSONL item metadata into `corpus.items` and recomputes unresolved items.
std::vector<RecordIssue> load_item_meta(const std::filesystem::path& path, Corpus& corpus);
void refresh_unresolved(Corpus& corpus);
nlohmann::json item_to_json(const ItemMeta& item);

void write_reviews_jsonl(const std::filesystem::path& path, std::span<const Review> reviews);
void write_items_jsonl(const std::filesystem::path& path, const Corpus& corpus);

/// Digest over the reviews (sorted by id) and item metadata.
std::string corpus_digest(const Corpus& corpus);

std::unordered_map<std::string, std::size_t> index_by_id(const Corpus& corpus);

/// Iteratively removes users and items with fewer than `k` interactions until
/// every survivor has at least `k`. Returns the maximal fixed point.
Corpus kcore_filter(const Corpus& corpus, int k);

struct SplitRatios {
    double train = 8.0;
    double valid = 1.0;
    double test = 1.0;
};

struct SplitAssignment {
    std::vector<std::string> train;
    std::vector<std::string> valid;
    std::vector<std::string> test;
    SplitRatios ratios;
};

/// Partition sizes for `n` items under `ratios`; largest-remainder rounding so the
/// sizes sum to n. Remainder ties go to the earlier partition.
std::array<std::size_t, 3> largest_remainder_sizes(std::size_t n, const SplitRatios& ratios);

/// Global chronological split. Reviews are ordered by (timestamp, user_id,
/// item_id, id) and cut into consecutive train/valid/test runs.
SplitAssignment temporal_split(const Corpus& corpus, const SplitRatios& ratios = {});

enum class Subset { warm, cold, unseen };

const char* to_string(Subset s);
Subset subset_from_string(const std::string& s);

/// Users with more than this many train interactions are warm.
inline constexpr std::size_t kWarmThreshold = 3;

/// Tags every test review id as warm / cold / unseen by its user's train count.
std::map<std::string, Subset> tag_test_subsets(const SplitAssignment& split, const Corpus& corpus);

struct BiasMeans {
    std::map<std::string, double> user;
    std::map<std::string, double> item;
    double global = 0.0;

    double user_mean(const std::string& user_id) const;
    double item_mean(const std::string& item_id) const;
};

/// Arithmetic means over train ratings. Throws ConfigError on an empty train set.
BiasMeans bias_means(std::span<const Review> train);

nlohmann::json bias_to_json(const BiasMeans& bias);
BiasMeans bias_from_json(const nlohmann::json& j);

/// Resolves review ids against the corpus. Unknown ids throw ConfigError.
std::vector<Review> select_reviews(const Corpus& corpus, std::span<const std::string> ids);

nlohmann::json split_manifest(const SplitAssignment& split,
                              const std::map<std::string, Subset>& tags);
SplitAssignment split_from_manifest(const nlohmann::json& j);
std::map<std::string, Subset> tags_from_manifest(const nlohmann::json& j);

}  // namespace reviewrec::corpus

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "reviewrec/corpus.hpp"
#include "reviewrec/gateway.hpp"
#include "reviewrec/similarity.hpp"
#include "reviewrec/templates.hpp"

namespace reviewrec::profiling {

/// Like/Dislike bullets extracted from one review.
struct PreferenceList {
    std::string source_review_id;
    std::vector<std::string> likes;
    std::vector<std::string> dislikes;

    bool empty() const noexcept { return likes.empty() && dislikes.empty(); }
    bool operator==(const PreferenceList&) const = default;
};

struct Markup {
    std::vector<std::string> likes;
    std::vector<std::string> dislikes;
};

/// Tolerant reader for the "[Like] ... [Dislike] ..." output shape. Accepts
/// "-", "*" and "•" bullets, case-insensitive tags and blank lines; "None."
/// sections are empty. Throws ParseError when neither tag is present.
Markup parse_preference_markup(std::string_view text);

/// Writes the canonical markup; an empty section is written as "None.".
std::string format_preference_markup(std::span<const std::string> likes, std::span<const std::string> dislikes);

/// Extraction output that did not parse. Keeps the raw completion.
class ExtractionError : public Error {
public:
    ExtractionError(const std::string& message, std::string raw)
        : Error(message), raw_text_(std::move(raw)) {}
    const std::string& raw_text() const noexcept { return raw_text_; }

private:
    std::string raw_text_;
};

llm::CompletionRequest extraction_request(const corpus::Review& review, const llm::TemplateRegistry& templates);

/// One gateway call per non-empty review; empty text yields an empty list
/// without calling the backend.
PreferenceList extract_preferences(const corpus::Review& review, llm::Gateway& gateway,
                                   const llm::TemplateRegistry& templates);

using PreferenceMap = std::map<std::string, PreferenceList>;  // review id -> preferences

nlohmann::json preference_to_json(const PreferenceList& p);
PreferenceList preference_from_json(const nlohmann::json& j);
void write_preferences(const std::filesystem::path& path, const PreferenceMap& prefs);
PreferenceMap read_preferences(const std::filesystem::path& path);

struct SelectionStrategy {
    enum class Kind { all, helpfulness, neighbor };
    Kind kind = Kind::all;
    int n = 5;  // helpfulness: reviews kept
    int k = similarity::kDefaultNeighbors;

    static SelectionStrategy all() { return {}; }
    static SelectionStrategy helpfulness(int n);
    static SelectionStrategy neighbor(int k);
    /// "all", "helpful:N" or "neighbor:K". Throws ConfigError.
    static SelectionStrategy parse(std::string_view spec);
    std::string to_string() const;

    bool operator==(const SelectionStrategy&) const = default;
};

enum class SubjectKind { user, item };
std::string_view to_string(SubjectKind kind);

struct PreferenceSet {
    SubjectKind kind = SubjectKind::user;
    std::string subject;
    std::vector<PreferenceList> entries;
    SelectionStrategy strategy;
    /// Set for neighbor-based item sets: the user the profile is personalized for.
    std::string target_user;
    /// The subject has no train reviews.
    bool cold = false;
    /// Neighbor selection found nobody and fell back to every other user's review.
    bool fallback_all = false;

    std::vector<std::string> source_review_ids() const;
};

/// Train reviews indexed by user and item, plus their extracted preferences.
class TrainView {
public:
    TrainView(std::span<const corpus::Review> train, const PreferenceMap* preferences,
              const similarity::NeighborIndex* neighbors = nullptr);

    /// Reviews ordered by (timestamp, id).
    std::span<const corpus::Review* const> item_reviews(const std::string& item_id) const;
    std::span<const corpus::Review* const> user_reviews(const std::string& user_id) const;
    const PreferenceList* preferences(const std::string& review_id) const;
    const similarity::NeighborIndex* neighbors() const noexcept { return neighbors_; }

private:
    std::vector<corpus::Review> train_;
    std::unordered_map<std::string, std::vector<const corpus::Review*>> by_item_;
    std::unordered_map<std::string, std::vector<const corpus::Review*>> by_user_;
    const PreferenceMap* preferences_;
    const similarity::NeighborIndex* neighbors_;
};

/// User sets always draw on every train review of the user.
PreferenceSet select_user_preferences(const std::string& user_id, const TrainView& view);

/// Item preference set under `strategy`. Neighbor selection needs `target_user`
/// and a neighbor index and never cites the target user's own reviews.
PreferenceSet select_item_preferences(const std::string& item_id, const SelectionStrategy& strategy,
                                      const TrainView& view, const std::optional<std::string>& target_user = {});

struct Profile {
    SubjectKind kind = SubjectKind::user;
    std::string subject;
    std::vector<std::string> likes;
    std::vector<std::string> dislikes;
    std::vector<std::string> source_review_ids;  // sorted
    SelectionStrategy strategy;
    std::string target_user;
    /// Digest of the data snapshot the profile was built from.
    std::string built_at;

    bool empty() const noexcept { return likes.empty() && dislikes.empty(); }
};

nlohmann::json profile_to_json(const Profile& p);
Profile profile_from_json(const nlohmann::json& j);

/// The profile as "[Like] ... [Dislike] ..." text for downstream prompts.
std::string profile_text(const Profile& p);

/// Value bound to {preferences}: each entry's markup, blank-line separated.
std::string preferences_binding(const PreferenceSet& set);

/// True when the set carries no bullets at all; such sets never reach the LLM.
bool degenerate(const PreferenceSet& set);

llm::CompletionRequest profile_request(const PreferenceSet& set, const llm::TemplateRegistry& templates);

/// Summarizes the set through the gateway. Degenerate sets give an empty
/// profile with zero gateway calls.
Profile build_profile(const PreferenceSet& set, llm::Gateway& gateway, const llm::TemplateRegistry& templates,
                      const std::string& built_at);

/// Cache key: subject kind, subject, strategy, target user (neighbor only) and
/// the digest of the source review set.
std::string profile_key(const PreferenceSet& set);

/// Append-only JSONL profile store with a JSONL offset index. A missing or
/// stale index is rebuilt from the data file on open.
class ProfileStore {
public:
    /// In-memory only when `dir` is empty.
    explicit ProfileStore(std::optional<std::filesystem::path> dir = std::nullopt);

    using Builder = std::function<Profile(const PreferenceSet&)>;

    std::optional<Profile> find(const std::string& key) const;
    /// Builds at most once per key even under concurrent calls.
    Profile get_or_build(const PreferenceSet& set, const Builder& build);
    /// Builds every missing set with up to `workers` threads, then appends the
    /// new profiles in key order so the files do not depend on scheduling.
    std::vector<Profile> build_all(std::span<const PreferenceSet> sets, const Builder& build, int workers,
                                   std::vector<std::string>* errors = nullptr);

    std::size_t size() const;
    std::size_t builds() const noexcept { return builds_; }

private:
    void append_locked(const std::string& key, const Profile& profile);
    std::shared_ptr<std::mutex> key_lock(const std::string& key);

    std::optional<std::filesystem::path> dir_;
    mutable std::mutex mutex_;
    std::map<std::string, Profile> profiles_;
    std::map<std::string, std::shared_ptr<std::mutex>> key_locks_;
    std::size_t builds_ = 0;
};

}  // namespace reviewrec::profiling

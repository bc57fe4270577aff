#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reviewrec/error.hpp"

namespace reviewrec::llm {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

struct Message {
    Role role = Role::user;
    std::string content;

    bool operator==(const Message&) const = default;
};

struct CompletionRequest {
    std::vector<Message> messages;
    bool want_token_scores = false;
    int top_alternatives = 10;
    double temperature = 0.0;
    int max_tokens = 512;
    /// Routing tag (the prompt template that produced the messages). Scripted
    /// backends dispatch on it; HTTP backends ignore it. Part of the cache key.
    std::string template_id;

    /// Throws ConfigError on an empty message list or bad limits.
    void validate() const;
};

/// Canonical (key-sorted) serialization used for digests and cache keys.
nlohmann::json canonical_json(const CompletionRequest& request);
std::string request_digest(const CompletionRequest& request);

struct TokenAlternative {
    std::string token;
    double logprob = 0.0;

    bool operator==(const TokenAlternative&) const = default;
};

struct TokenScore {
    std::size_t position = 0;
    std::string token;
    double logprob = 0.0;
    /// Sorted by non-increasing logprob.
    std::vector<TokenAlternative> alternatives;

    bool operator==(const TokenScore&) const = default;
};

struct CompletionResult {
    std::string text;
    std::optional<std::vector<TokenScore>> token_scores;
    std::string backend_id;
    bool cached = false;
};

nlohmann::json result_to_json(const CompletionResult& result);
CompletionResult result_from_json(const nlohmann::json& j);

/// Transport-level failure; retryable. `attempts` counts tries made so far.
class TransportError : public Error {
public:
    TransportError(const std::string& message, int attempts = 1)
        : Error(message + " (after " + std::to_string(attempts) + " attempt(s))"), detail_(message), attempts_(attempts) {}
    int attempts() const noexcept { return attempts_; }
    /// The message without the attempt count.
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string detail_;
    int attempts_;
};

/// The backend cannot return per-token scores. Callers fall back to parsing.
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// A scripted backend had no rule for the request.
class ScriptedMissError : public Error {
public:
    explicit ScriptedMissError(std::string digest, const std::string& template_id)
        : Error("scripted backend has no rule for request " + digest +
                (template_id.empty() ? std::string() : " (template " + template_id + ")")),
          digest_(std::move(digest)) {}
    const std::string& digest() const noexcept { return digest_; }

private:
    std::string digest_;
};

/// Non-retryable backend response (4xx, malformed body).
class BackendError : public Error {
public:
    using Error::Error;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string id() const = 0;
    virtual bool supports_token_scores() const = 0;
    /// Must be safe to call concurrently.
    virtual CompletionResult complete(const CompletionRequest& request) = 0;
};

/// Splits text into tokens the way the mock backend reports them: every
/// decimal digit is its own token, whitespace attaches to the following word.
std::vector<std::string> mock_tokenize(std::string_view text);

/// Deterministic scripted backend. Rules are tried in registration order and
/// the first match answers. Immutable once shared with a Gateway.
class MockBackend : public ChatBackend {
public:
    struct Reply {
        std::string text;
        /// Digit token -> log-probability, reported as the alternatives at the
        /// rating position when token scores are requested.
        std::optional<std::map<std::string, double>> scores;
    };
    using Matcher = std::function<bool(const CompletionRequest&)>;
    using Responder = std::function<Reply(const CompletionRequest&)>;

    explicit MockBackend(std::string id, bool token_scores = true);

    /// Script format:
    ///   {"backend_id": "...", "token_scores": true,
    ///    "rules": [{"template_id": "...", "contains": "...",
    ///               "text": "...", "scores": {"0": -2.0, ...}},
    ///              {"match": "*", "choices": [{"text": ...}, ...]}]}
    /// A rule with "choices" picks one deterministically by request digest.
    static std::shared_ptr<MockBackend> from_script(const nlohmann::json& script);

    void add_rule(Matcher matcher, Responder responder);
    /// `template_id` of "*" matches every request.
    void add_reply(std::string template_id, Reply reply);

    std::string id() const override { return id_; }
    bool supports_token_scores() const override { return token_scores_; }
    CompletionResult complete(const CompletionRequest& request) override;

    std::size_t calls() const noexcept { return calls_.load(); }

private:
    struct Rule {
        Matcher matcher;
        Responder responder;
    };
    std::string id_;
    bool token_scores_;
    std::vector<Rule> rules_;
    std::atomic<std::size_t> calls_{0};
};

/// OpenAI-style chat-completions endpoint.
class HttpBackend : public ChatBackend {
public:
    struct Options {
        std::string endpoint;  // full URL, e.g. http://localhost:8000/v1/chat/completions
        std::string api_key;
        std::string model = "default";
        bool token_scores = true;
        std::chrono::seconds timeout{120};
    };

    /// Reads REVIEWREC_ENDPOINT, REVIEWREC_API_KEY and REVIEWREC_MODEL.
    static Options options_from_env();

    explicit HttpBackend(Options options);

    std::string id() const override;
    bool supports_token_scores() const override { return options_.token_scores; }
    CompletionResult complete(const CompletionRequest& request) override;

    /// Request body sent for `request` (exposed for tests).
    nlohmann::json request_body(const CompletionRequest& request) const;
    /// Parses a response body. Throws BackendError or CapabilityError.
    static CompletionResult parse_response(const nlohmann::json& body, bool want_scores,
                                           const std::string& backend_id);

private:
    Options options_;
    std::string scheme_host_port_;
    std::string path_;
};

/// Response cache keyed by request digest, optionally persisted as one JSON
/// file per key. Writes are serialized.
class ResponseCache {
public:
    explicit ResponseCache(std::optional<std::filesystem::path> dir = std::nullopt);

    std::optional<CompletionResult> get(const std::string& key) const;
    void put(const std::string& key, const CompletionResult& result);
    std::size_t size() const;

private:
    std::optional<std::filesystem::path> dir_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, CompletionResult> memory_;
};

struct GatewayOptions {
    bool cache = true;
    std::optional<std::filesystem::path> cache_dir;
    int max_attempts = 3;
    std::chrono::milliseconds backoff{200};
    int workers = 4;
};

class Gateway {
public:
    explicit Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options = {});

    /// Cache lookup, then backend call with exponential-backoff retries on
    /// TransportError. Throws CapabilityError when scores are requested from a
    /// backend that cannot provide them.
    CompletionResult complete(const CompletionRequest& request);

    struct Outcome {
        std::optional<CompletionResult> result;
        std::string error;
        bool capability_error = false;
    };
    /// Issues requests with at most `workers` in flight; outcomes keep input order.
    std::vector<Outcome> complete_all(std::span<const CompletionRequest> requests);

    std::string backend_id() const { return backend_->id(); }
    bool supports_token_scores() const { return backend_->supports_token_scores(); }
    int workers() const noexcept { return options_.workers; }

    std::size_t backend_calls() const noexcept { return backend_calls_.load(); }
    std::size_t cache_hits() const noexcept { return cache_hits_.load(); }

    std::string cache_key(const CompletionRequest& request) const;

private:
    std::shared_ptr<ChatBackend> backend_;
    GatewayOptions options_;
    ResponseCache cache_;
    std::atomic<std::size_t> backend_calls_{0};
    std::atomic<std::size_t> cache_hits_{0};
};

/// Named backends available to a run.
class BackendRegistry {
public:
    /// Builds a MockBackend from `script` and returns its backend id.
    std::string register_mock(const nlohmann::json& script);
    std::string add(std::shared_ptr<ChatBackend> backend);
    std::shared_ptr<ChatBackend> get(const std::string& id) const;

private:
    std::map<std::string, std::shared_ptr<ChatBackend>> backends_;
};

}  // namespace reviewrec::llm

#include "reviewrec/gateway.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <omp.h>

#include "reviewrec/digest.hpp"

namespace reviewrec::llm {

using nlohmann::json;

std::string_view to_string(Role role) {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(std::string_view name) {
    if (name == "system") return Role::system;
    if (name == "user") return Role::user;
    if (name == "assistant") return Role::assistant;
    throw ParseError("unknown message role '" + std::string(name) + "'");
}

void CompletionRequest::validate() const {
    if (messages.empty()) throw ConfigError("completion request has no messages");
    if (top_alternatives < 0) throw ConfigError("top_alternatives must be non-negative");
    if (max_tokens < 1) throw ConfigError("max_tokens must be positive");
    if (!std::isfinite(temperature) || temperature < 0.0) throw ConfigError("temperature must be >= 0");
}

json canonical_json(const CompletionRequest& request) {
    json msgs = json::array();
    for (const auto& m : request.messages) {
        msgs.push_back(json{{"role", to_string(m.role)}, {"content", m.content}});
    }
    // nlohmann::json objects are std::map backed, so keys serialize sorted.
    return json{{"messages", msgs},
                {"want_token_scores", request.want_token_scores},
                {"top_alternatives", request.want_token_scores ? request.top_alternatives : 0},
                {"temperature", request.temperature},
                {"max_tokens", request.max_tokens},
                {"template_id", request.template_id}};
}

std::string request_digest(const CompletionRequest& request) {
    return sha256_hex(canonical_json(request).dump());
}

json result_to_json(const CompletionResult& result) {
    json j{{"text", result.text}, {"backend_id", result.backend_id}};
    if (result.token_scores) {
        json scores = json::array();
        for (const auto& ts : *result.token_scores) {
            json alts = json::array();
            for (const auto& a : ts.alternatives) alts.push_back(json{{"token", a.token}, {"logprob", a.logprob}});
            scores.push_back(json{{"position", ts.position},
                                  {"token", ts.token},
                                  {"logprob", ts.logprob},
                                  {"alternatives", alts}});
        }
        j["token_scores"] = scores;
    } else {
        j["token_scores"] = nullptr;
    }
    return j;
}

CompletionResult result_from_json(const json& j) {
    CompletionResult r;
    r.text = j.at("text").get<std::string>();
    r.backend_id = j.value("backend_id", std::string{});
    if (auto it = j.find("token_scores"); it != j.end() && !it->is_null()) {
        std::vector<TokenScore> scores;
        for (const auto& ts : *it) {
            TokenScore s;
            s.position = ts.at("position").get<std::size_t>();
            s.token = ts.at("token").get<std::string>();
            s.logprob = ts.at("logprob").get<double>();
            for (const auto& a : ts.at("alternatives")) {
                s.alternatives.push_back({a.at("token").get<std::string>(), a.at("logprob").get<double>()});
            }
            scores.push_back(std::move(s));
        }
        r.token_scores = std::move(scores);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Mock backend

std::vector<std::string> mock_tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string pending_space;
    std::size_t i = 0;
    auto is_alpha = [](unsigned char c) { return std::isalpha(c) || c >= 0x80; };
    while (i < text.size()) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            pending_space.push_back(text[i++]);
            continue;
        }
        std::string tok = std::move(pending_space);
        pending_space.clear();
        if (std::isdigit(c)) {
            tok.push_back(text[i++]);
        } else if (is_alpha(c)) {
            while (i < text.size() && is_alpha(static_cast<unsigned char>(text[i]))) tok.push_back(text[i++]);
        } else {
            tok.push_back(text[i++]);
        }
        tokens.push_back(std::move(tok));
    }
    if (!pending_space.empty()) tokens.push_back(std::move(pending_space));
    return tokens;
}

namespace {

constexpr std::string_view kRatingTag = "Predicted User Rating:";

std::string trim_copy(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<TokenScore> mock_scores(const std::string& text, const MockBackend::Reply& reply,
                                    int top_alternatives) {
    auto tokens = mock_tokenize(text);
    std::vector<TokenScore> out;
    out.reserve(tokens.size());

    // Locate the first digit token after the rating tag (or the first digit overall).
    std::size_t tag_end = std::string::npos;
    if (auto p = text.find(kRatingTag); p != std::string::npos) tag_end = p + kRatingTag.size();
    std::size_t rating_pos = tokens.size();
    std::size_t offset = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        auto core = trim_copy(tokens[t]);
        bool digit = core.size() == 1 && std::isdigit(static_cast<unsigned char>(core[0]));
        if (digit && (tag_end == std::string::npos || offset >= tag_end)) {
            rating_pos = t;
            break;
        }
        offset += tokens[t].size();
    }

    for (std::size_t t = 0; t < tokens.size(); ++t) {
        TokenScore ts;
        ts.position = t;
        ts.token = tokens[t];
        if (t == rating_pos && reply.scores) {
            const auto emitted = trim_copy(tokens[t]);
            std::vector<TokenAlternative> alts;
            bool emitted_listed = false;
            for (const auto& [tok, lp] : *reply.scores) {
                alts.push_back({tok, lp});
                if (tok == emitted) {
                    ts.logprob = lp;
                    emitted_listed = true;
                }
            }
            if (!emitted_listed) {
                ts.logprob = -30.0;
                alts.push_back({emitted, -30.0});
            }
            std::sort(alts.begin(), alts.end(), [](const auto& a, const auto& b) {
                return a.logprob != b.logprob ? a.logprob > b.logprob : a.token < b.token;
            });
            if (top_alternatives > 0 && alts.size() > static_cast<std::size_t>(top_alternatives)) {
                alts.resize(static_cast<std::size_t>(top_alternatives));
            }
            ts.alternatives = std::move(alts);
        } else {
            ts.logprob = 0.0;
            ts.alternatives = {{tokens[t], 0.0}};
        }
        out.push_back(std::move(ts));
    }
    return out;
}

MockBackend::Reply reply_from_json(const json& j) {
    MockBackend::Reply reply;
    reply.text = j.at("text").get<std::string>();
    if (auto s = j.find("scores"); s != j.end() && !s->is_null()) {
        std::map<std::string, double> table;
        for (const auto& [tok, v] : s->items()) {
            double lp = v.get<double>();
            if (lp > 0.0 || std::isnan(lp)) throw ConfigError("mock score for token '" + tok + "' must be <= 0");
            table[tok] = lp;
        }
        reply.scores = std::move(table);
    }
    return reply;
}

std::string joined_content(const CompletionRequest& r) {
    std::string s;
    for (const auto& m : r.messages) {
        s += m.content;
        s.push_back('\n');
    }
    return s;
}

}  // namespace

MockBackend::MockBackend(std::string id, bool token_scores) : id_(std::move(id)), token_scores_(token_scores) {}

std::shared_ptr<MockBackend> MockBackend::from_script(const json& script) {
    auto backend = std::make_shared<MockBackend>(script.value("backend_id", std::string("mock")),
                                                 script.value("token_scores", true));
    const auto& rules = script.at("rules");
    if (!rules.is_array()) throw ConfigError("mock script 'rules' must be an array");
    for (const auto& rule : rules) {
        std::optional<std::string> tmpl, contains;
        if (auto t = rule.find("template_id"); t != rule.end()) tmpl = t->get<std::string>();
        if (auto c = rule.find("contains"); c != rule.end()) contains = c->get<std::string>();
        if (auto m = rule.find("match"); m != rule.end() && m->get<std::string>() != "*") {
            tmpl = m->get<std::string>();
        }
        Matcher matcher = [tmpl, contains](const CompletionRequest& r) {
            if (tmpl && *tmpl != "*" && r.template_id != *tmpl) return false;
            if (contains && joined_content(r).find(*contains) == std::string::npos) return false;
            return true;
        };
        Responder responder;
        if (auto choices = rule.find("choices"); choices != rule.end()) {
            std::vector<Reply> options;
            for (const auto& c : *choices) options.push_back(reply_from_json(c));
            if (options.empty()) throw ConfigError("mock rule has an empty 'choices' list");
            responder = [options](const CompletionRequest& r) {
                auto digest = request_digest(r);
                auto pick = std::stoull(digest.substr(0, 12), nullptr, 16) % options.size();
                return options[pick];
            };
        } else {
            Reply reply = reply_from_json(rule);
            responder = [reply](const CompletionRequest&) { return reply; };
        }
        backend->add_rule(std::move(matcher), std::move(responder));
    }
    return backend;
}

void MockBackend::add_rule(Matcher matcher, Responder responder) {
    rules_.push_back({std::move(matcher), std::move(responder)});
}

void MockBackend::add_reply(std::string template_id, Reply reply) {
    add_rule(
        [template_id](const CompletionRequest& r) { return template_id == "*" || r.template_id == template_id; },
        [reply](const CompletionRequest&) { return reply; });
}

CompletionResult MockBackend::complete(const CompletionRequest& request) {
    request.validate();
    ++calls_;
    if (request.want_token_scores && !token_scores_) {
        throw CapabilityError("backend " + id_ + " does not provide token scores");
    }
    for (const auto& rule : rules_) {
        if (!rule.matcher(request)) continue;
        Reply reply = rule.responder(request);
        CompletionResult result;
        result.text = reply.text;
        result.backend_id = id_;
        if (request.want_token_scores) result.token_scores = mock_scores(reply.text, reply, request.top_alternatives);
        return result;
    }
    throw ScriptedMissError(request_digest(request), request.template_id);
}

// ---------------------------------------------------------------------------
// Response cache

ResponseCache::ResponseCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {
    if (dir_) {
        std::error_code ec;
        std::filesystem::create_directories(*dir_, ec);
        if (ec) throw StorageError("cannot create cache directory " + dir_->string() + ": " + ec.message());
    }
}

std::optional<CompletionResult> ResponseCache::get(const std::string& key) const {
    std::lock_guard lock(mutex_);
    if (auto it = memory_.find(key); it != memory_.end()) return it->second;
    if (!dir_) return std::nullopt;
    auto path = *dir_ / (key + ".json");
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    try {
        auto result = result_from_json(json::parse(in));
        memory_[key] = result;
        return result;
    } catch (const json::exception&) {
        return std::nullopt;  // torn or foreign file: treat as a miss
    }
}

void ResponseCache::put(const std::string& key, const CompletionResult& result) {
    std::lock_guard lock(mutex_);
    memory_[key] = result;
    if (!dir_) return;
    auto path = *dir_ / (key + ".json");
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot write cache entry " + tmp.string());
        out << result_to_json(result).dump();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw StorageError("cannot commit cache entry " + path.string() + ": " + ec.message());
}

std::size_t ResponseCache::size() const {
    std::lock_guard lock(mutex_);
    return memory_.size();
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options)
    : backend_(std::move(backend)),
      options_(std::move(options)),
      cache_(options_.cache ? options_.cache_dir : std::nullopt) {
    if (!backend_) throw ConfigError("gateway needs a backend");
    if (options_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
    if (options_.workers < 1) throw ConfigError("workers must be >= 1");
}

std::string Gateway::cache_key(const CompletionRequest& request) const {
    return sha256_hex(backend_->id() + "\n" + canonical_json(request).dump());
}

CompletionResult Gateway::complete(const CompletionRequest& request) {
    request.validate();
    if (request.want_token_scores && !backend_->supports_token_scores()) {
        throw CapabilityError("backend " + backend_->id() + " does not provide token scores");
    }
    const auto key = cache_key(request);
    if (options_.cache) {
        if (auto hit = cache_.get(key)) {
            ++cache_hits_;
            hit->cached = true;
            return *hit;
        }
    }
    auto delay = options_.backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            ++backend_calls_;
            auto result = backend_->complete(request);
            result.cached = false;
            if (result.backend_id.empty()) result.backend_id = backend_->id();
            if (options_.cache) cache_.put(key, result);
            return result;
        } catch (const TransportError& e) {
            if (attempt >= options_.max_attempts) throw TransportError(e.detail(), attempt);
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
}

std::vector<Gateway::Outcome> Gateway::complete_all(std::span<const CompletionRequest> requests) {
    std::vector<Outcome> outcomes(requests.size());
    const auto n = static_cast<std::ptrdiff_t>(requests.size());
#pragma omp parallel for schedule(dynamic) num_threads(options_.workers)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto& out = outcomes[static_cast<std::size_t>(i)];
        try {
            out.result = complete(requests[static_cast<std::size_t>(i)]);
        } catch (const CapabilityError& e) {
            out.error = e.what();
            out.capability_error = true;
        } catch (const std::exception& e) {
            out.error = e.what();
        }
    }
    return outcomes;
}

// ---------------------------------------------------------------------------
// Registry

std::string BackendRegistry::register_mock(const json& script) {
    return add(MockBackend::from_script(script));
}

std::string BackendRegistry::add(std::shared_ptr<ChatBackend> backend) {
    if (!backend) throw ConfigError("null backend");
    auto id = backend->id();
    if (backends_.contains(id)) throw ConfigError("backend id '" + id + "' already registered");
    backends_.emplace(id, std::move(backend));
    return id;
}

std::shared_ptr<ChatBackend> BackendRegistry::get(const std::string& id) const {
    auto it = backends_.find(id);
    if (it == backends_.end()) throw ConfigError("unknown backend '" + id + "'");
    return it->second;
}

}  // namespace reviewrec::llm

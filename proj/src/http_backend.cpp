#include <httplib.h>

#include <algorithm>
#include <cstdlib>

#include "reviewrec/gateway.hpp"

namespace reviewrec::llm {

using nlohmann::json;

namespace {

std::string env_or(const char* name, std::string fallback) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::move(fallback);
}

}  // namespace

HttpBackend::Options HttpBackend::options_from_env() {
    Options o;
    o.endpoint = env_or("REVIEWREC_ENDPOINT", "");
    o.api_key = env_or("REVIEWREC_API_KEY", "");
    o.model = env_or("REVIEWREC_MODEL", o.model);
    return o;
}

HttpBackend::HttpBackend(Options options) : options_(std::move(options)) {
    const auto& url = options_.endpoint;
    auto scheme_end = url.find("://");
    if (url.empty() || scheme_end == std::string::npos) {
        throw ConfigError("HTTP backend endpoint must be an absolute URL (got '" + url + "')");
    }
    auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/v1/chat/completions" : url.substr(path_start);
}

std::string HttpBackend::id() const { return "http:" + options_.model + "@" + options_.endpoint; }

json HttpBackend::request_body(const CompletionRequest& request) const {
    json messages = json::array();
    for (const auto& m : request.messages) {
        messages.push_back(json{{"role", to_string(m.role)}, {"content", m.content}});
    }
    json body{{"model", options_.model},
              {"messages", messages},
              {"temperature", request.temperature},
              {"max_tokens", request.max_tokens}};
    if (request.want_token_scores) {
        body["logprobs"] = true;
        body["top_logprobs"] = request.top_alternatives;
    }
    return body;
}

CompletionResult HttpBackend::parse_response(const json& body, bool want_scores, const std::string& backend_id) {
    CompletionResult result;
    result.backend_id = backend_id;
    try {
        const auto& choice = body.at("choices").at(0);
        result.text = choice.at("message").at("content").get<std::string>();
        if (!want_scores) return result;
        auto lp = choice.find("logprobs");
        if (lp == choice.end() || lp->is_null() || !lp->contains("content") || lp->at("content").is_null()) {
            throw CapabilityError("endpoint returned no token log-probabilities");
        }
        std::vector<TokenScore> scores;
        std::size_t position = 0;
        for (const auto& entry : lp->at("content")) {
            TokenScore ts;
            ts.position = position++;
            ts.token = entry.at("token").get<std::string>();
            ts.logprob = std::min(0.0, entry.at("logprob").get<double>());
            if (auto top = entry.find("top_logprobs"); top != entry.end() && top->is_array()) {
                for (const auto& alt : *top) {
                    ts.alternatives.push_back(
                        {alt.at("token").get<std::string>(), std::min(0.0, alt.at("logprob").get<double>())});
                }
            }
            std::stable_sort(ts.alternatives.begin(), ts.alternatives.end(),
                             [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
            scores.push_back(std::move(ts));
        }
        result.token_scores = std::move(scores);
    } catch (const json::exception& e) {
        throw BackendError(std::string("malformed chat-completion response: ") + e.what());
    }
    return result;
}

CompletionResult HttpBackend::complete(const CompletionRequest& request) {
    request.validate();
    if (request.want_token_scores && !options_.token_scores) {
        throw CapabilityError("backend " + id() + " is configured without token scores");
    }
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(options_.timeout);
    client.set_read_timeout(options_.timeout);
    httplib::Headers headers;
    if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

    auto res = client.Post(path_, headers, request_body(request).dump(), "application/json");
    if (!res) throw TransportError("POST " + options_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
        throw TransportError("POST " + options_.endpoint + " returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw BackendError("POST " + options_.endpoint + " returned HTTP " + std::to_string(res->status) + ": " +
                           res->body.substr(0, 200));
    }
    json body;
    try {
        body = json::parse(res->body);
    } catch (const json::exception& e) {
        throw BackendError(std::string("response is not JSON: ") + e.what());
    }
    return parse_response(body, request.want_token_scores, id());
}

}  // namespace reviewrec::llm

#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "reviewrec/gateway.hpp"
#include "reviewrec/reasoner.hpp"
#include "reviewrec/templates.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::llm;
using nlohmann::json;

namespace {

const std::filesystem::path kGolden = REVIEWREC_GOLDEN_DIR;

CompletionRequest simple(const std::string& text, const std::string& tmpl = "t") {
    CompletionRequest r;
    r.messages = {{Role::user, text}};
    r.template_id = tmpl;
    return r;
}

Bindings bindings_for(const std::string& name) {
    auto all = json::parse(rrtest::read_file(kGolden / "bindings.json"));
    return all.at(name).get<Bindings>();
}

}  // namespace

// -- templates -----------------------------------------------------------------

TEST(Templates, PlaceholderScan) {
    EXPECT_EQ(placeholders_in("a {user profile} b {x} {Not One} {}"),
              (std::vector<std::string>{"user profile", "x"}));
}

TEST(Templates, SinglePassSubstitution) {
    EXPECT_EQ(render_body("<{a}|{b}>", {{"a", "{b}"}, {"b", "2"}}), "<{b}|2>");
    EXPECT_THROW(render_body("{missing}", {}), TemplateError);
    // JSON-ish braces are not placeholders
    EXPECT_EQ(render_body("{\"k\": 1}", {}), "{\"k\": 1}");
}

TEST(Templates, EveryTemplateMatchesGolden) {
    auto reg = TemplateRegistry::load_default();
    for (auto id : kAllTemplates) {
        const std::string name(to_string(id));
        SCOPED_TRACE(name);
        EXPECT_EQ(reg.render(id, bindings_for(name)), rrtest::read_file(kGolden / (name + ".txt")));
    }
}

TEST(Templates, PredictionPromptForTenPointScaleMatchesGolden) {
    auto reg = TemplateRegistry::load_default();
    auto b = bindings_for("prediction_user");
    reasoner::PromptInputs in;
    in.user_profile = b.at("user profile");
    in.item_profile = b.at("item profile");
    in.item_description = b.at("item description");
    in.user_mean = 7.5;
    in.item_mean = 6.25;
    auto msgs = reasoner::build_prediction_prompt(in, RatingScale::with_default_offset(1, 10), reg);
    ASSERT_EQ(msgs.size(), 2u);
    EXPECT_EQ(msgs[0].role, Role::system);
    EXPECT_EQ(msgs[0].content, rrtest::read_file(kGolden / "prediction_system.txt"));
    EXPECT_EQ(msgs[1].content, rrtest::read_file(kGolden / "prediction_user.txt"));
    EXPECT_NE(msgs[0].content.find("0 to 9: 0, 1, 2, 3, 4, 5, 6, 7, 8, 9."), std::string::npos);
}

TEST(Templates, RejectsUndeclaredPlaceholderAndMissingFile) {
    rrtest::TempDir dir;
    for (auto id : kAllTemplates) {
        std::filesystem::copy_file(TemplateRegistry::default_dir() / (std::string(to_string(id)) + ".txt"),
                                   dir / (std::string(to_string(id)) + ".txt"));
    }
    EXPECT_NO_THROW(TemplateRegistry::load(dir.path()));
    auto reg = TemplateRegistry::load(dir.path());
    EXPECT_EQ(reg.checksums().size(), kAllTemplates.size());
    rrtest::write_file(dir / "user_profile.txt", "Hello {favourite colour}");
    EXPECT_THROW(TemplateRegistry::load(dir.path()), TemplateError);
    std::filesystem::remove(dir / "user_profile.txt");
    EXPECT_THROW(TemplateRegistry::load(dir.path()), TemplateError);
}

// -- requests and mock ---------------------------------------------------------------

TEST(Request, DigestIsCanonicalAndSensitive) {
    auto a = simple("hi");
    auto b = simple("hi");
    EXPECT_EQ(request_digest(a), request_digest(b));
    b.want_token_scores = true;
    EXPECT_NE(request_digest(a), request_digest(b));
    CompletionRequest empty;
    EXPECT_THROW(empty.validate(), ConfigError);
}

TEST(Mock, TokenizerSplitsDigits) {
    EXPECT_EQ(mock_tokenize("Rating: 10 ok"), (std::vector<std::string>{"Rating", ":", " 1", "0", " ok"}));
}

TEST(Mock, ScriptRulesAndScores) {
    auto script = json::parse(R"({
      "backend_id": "m", "token_scores": true,
      "rules": [
        {"template_id": "a", "contains": "special", "text": "special answer"},
        {"template_id": "a", "text": "Reasoning: fine\nPredicted User Rating: 4", "scores": {"4": -0.2, "3": -1.9}},
        {"match": "*", "choices": [{"text": "x"}, {"text": "y"}]}
      ]})");
    auto mock = MockBackend::from_script(script);
    EXPECT_EQ(mock->complete(simple("a special one", "a")).text, "special answer");
    auto req = simple("plain", "a");
    req.want_token_scores = true;
    auto res = mock->complete(req);
    ASSERT_TRUE(res.token_scores);
    auto pos = reasoner::rating_token_position(*res.token_scores);
    ASSERT_TRUE(pos);
    const auto& at = (*res.token_scores)[*pos];
    EXPECT_EQ(at.logprob, -0.2);
    ASSERT_EQ(at.alternatives.size(), 2u);
    EXPECT_GE(at.alternatives[0].logprob, at.alternatives[1].logprob);
    // choices are a deterministic function of the request
    auto c1 = mock->complete(simple("q1", "z")).text;
    EXPECT_EQ(mock->complete(simple("q1", "z")).text, c1);
}

TEST(Mock, MissAndCapability) {
    MockBackend mock("m", false);
    mock.add_reply("only", {"ok", std::nullopt});
    EXPECT_THROW(mock.complete(simple("x", "other")), ScriptedMissError);
    auto req = simple("x", "only");
    req.want_token_scores = true;
    EXPECT_THROW(mock.complete(req), CapabilityError);
}

// -- gateway -----------------------------------------------------------------

namespace {

class FlakyBackend : public ChatBackend {
public:
    explicit FlakyBackend(int failures) : failures_(failures) {}
    std::string id() const override { return "flaky"; }
    bool supports_token_scores() const override { return false; }
    CompletionResult complete(const CompletionRequest& r) override {
        if (calls++ < failures_) throw TransportError("connection reset");
        return {"echo:" + r.messages.back().content, std::nullopt, "", false};
    }
    std::atomic<int> calls{0};

private:
    int failures_;
};

}  // namespace

TEST(Gateway, RetriesTransportErrorsWithBackoff) {
    auto flaky = std::make_shared<FlakyBackend>(2);
    Gateway gw(flaky, {.cache = false, .cache_dir = {}, .max_attempts = 3, .backoff = std::chrono::milliseconds(1)});
    EXPECT_EQ(gw.complete(simple("q")).text, "echo:q");
    EXPECT_EQ(flaky->calls.load(), 3);

    auto hopeless = std::make_shared<FlakyBackend>(100);
    Gateway gw2(hopeless, {.cache = false, .cache_dir = {}, .max_attempts = 2, .backoff = std::chrono::milliseconds(1)});
    try {
        gw2.complete(simple("q"));
        FAIL() << "expected TransportError";
    } catch (const TransportError& e) {
        EXPECT_EQ(e.attempts(), 2);
        EXPECT_EQ(std::string(e.what()), "connection reset (after 2 attempt(s))");
    }
}

TEST(Gateway, CacheServesRepeatsAndPersists) {
    rrtest::TempDir dir;
    auto mock = std::make_shared<MockBackend>("m");
    mock->add_reply("*", {"answer", std::nullopt});
    {
        Gateway gw(mock, {.cache = true, .cache_dir = dir.path()});
        EXPECT_FALSE(gw.complete(simple("q")).cached);
        EXPECT_TRUE(gw.complete(simple("q")).cached);
        EXPECT_EQ(gw.backend_calls(), 1u);
        EXPECT_EQ(gw.cache_hits(), 1u);
    }
    Gateway again(mock, {.cache = true, .cache_dir = dir.path()});
    auto r = again.complete(simple("q"));
    EXPECT_TRUE(r.cached);
    EXPECT_EQ(r.text, "answer");
    EXPECT_EQ(mock->calls(), 1u);
}

TEST(Gateway, CapabilityCheckedBeforeBackend) {
    auto flaky = std::make_shared<FlakyBackend>(0);
    Gateway gw(flaky);
    auto req = simple("q");
    req.want_token_scores = true;
    EXPECT_THROW(gw.complete(req), CapabilityError);
    EXPECT_EQ(flaky->calls.load(), 0);
}

TEST(Gateway, CompleteAllKeepsOrder) {
    auto mock = std::make_shared<MockBackend>("m");
    mock->add_rule([](const CompletionRequest&) { return true; },
                   [](const CompletionRequest& r) { return MockBackend::Reply{r.messages[0].content, std::nullopt}; });
    Gateway gw(mock, {.cache = false, .cache_dir = {}, .max_attempts = 1, .backoff = {}, .workers = 4});
    std::vector<CompletionRequest> reqs;
    for (int i = 0; i < 50; ++i) reqs.push_back(simple(std::to_string(i)));
    auto out = gw.complete_all(reqs);
    for (int i = 0; i < 50; ++i) {
        ASSERT_TRUE(out[i].result);
        EXPECT_EQ(out[i].result->text, std::to_string(i));
    }
}

TEST(Registry, RejectsDuplicateIds) {
    BackendRegistry reg;
    auto id = reg.register_mock(json::parse(R"({"backend_id":"m","rules":[]})"));
    EXPECT_EQ(id, "m");
    EXPECT_THROW(reg.register_mock(json::parse(R"({"backend_id":"m","rules":[]})")), ConfigError);
    EXPECT_THROW(reg.get("nope"), ConfigError);
}

TEST(CacheResult, JsonRoundTrip) {
    CompletionResult r{"text", std::vector<TokenScore>{{0, " 7", -0.1, {{" 7", -0.1}, {"6", -2.5}}}}, "b", false};
    auto back = result_from_json(result_to_json(r));
    EXPECT_EQ(back.text, r.text);
    EXPECT_EQ(back.token_scores, r.token_scores);
}

// -- HTTP backend against a local server ------------------------------------

namespace {

json chat_body(const std::string& text, bool with_logprobs) {
    json choice{{"message", {{"role", "assistant"}, {"content", text}}}};
    if (with_logprobs) {
        choice["logprobs"] = {{"content",
                               {{{"token", "Predicted User Rating:"}, {"logprob", -0.01}, {"top_logprobs", json::array()}},
                                {{"token", " 8"},
                                 {"logprob", -0.3},
                                 {"top_logprobs", {{{"token", "7"}, {"logprob", -1.5}}, {{"token", " 8"}, {"logprob", -0.3}}}}}}}};
    }
    return {{"choices", {choice}}};
}

}  // namespace

TEST(Http, ParsesScoresAndReportsMissingOnes) {
    auto r = HttpBackend::parse_response(chat_body("Predicted User Rating: 8", true), true, "h");
    ASSERT_TRUE(r.token_scores);
    EXPECT_EQ((*r.token_scores)[1].alternatives[0].token, " 8");  // sorted by logprob
    EXPECT_THROW(HttpBackend::parse_response(chat_body("x", false), true, "h"), CapabilityError);
    EXPECT_THROW(HttpBackend::parse_response(json::object(), false, "h"), BackendError);
    HttpBackend::Options bad;
    bad.endpoint = "localhost:80";
    EXPECT_THROW(HttpBackend{bad}, ConfigError);
}

TEST(Http, RoundTripWithRetryOnServerError) {
    httplib::Server server;
    std::atomic<int> hits{0};
    json seen;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        if (hits++ == 0) {
            res.status = 503;
            return;
        }
        seen = json::parse(req.body);
        res.set_content(chat_body("Predicted User Rating: 8", true).dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpBackend::Options opt;
    opt.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    opt.model = "tiny";
    Gateway gw(std::make_shared<HttpBackend>(opt),
               {.cache = false, .cache_dir = {}, .max_attempts = 3, .backoff = std::chrono::milliseconds(1)});
    auto req = simple("hello");
    req.want_token_scores = true;
    auto res = gw.complete(req);
    server.stop();
    t.join();

    EXPECT_EQ(hits.load(), 2);
    EXPECT_EQ(res.text, "Predicted User Rating: 8");
    EXPECT_EQ(seen.at("model"), "tiny");
    EXPECT_EQ(seen.at("logprobs"), true);
    EXPECT_EQ(seen.at("messages")[0].at("content"), "hello");
}

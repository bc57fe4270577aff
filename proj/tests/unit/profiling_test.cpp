#include <gtest/gtest.h>

#include <thread>

#include "reviewrec/profiling.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::profiling;
using rrtest::review;

namespace {

std::shared_ptr<llm::MockBackend> summarizer(const std::string& text) {
    auto mock = std::make_shared<llm::MockBackend>("m");
    mock->add_reply("*", {text, std::nullopt});
    return mock;
}

PreferenceList prefs(std::string id, std::vector<std::string> likes, std::vector<std::string> dislikes = {}) {
    return {std::move(id), std::move(likes), std::move(dislikes)};
}

}  // namespace

TEST(Markup, TolerantParse) {
    auto m = parse_preference_markup("Sure!\n[like]\n* Sharp dialogue\n\n•  Good cast \n[DISLIKE] - Slow start\nNone.");
    EXPECT_EQ(m.likes, (std::vector<std::string>{"Sharp dialogue", "Good cast"}));
    EXPECT_EQ(m.dislikes, std::vector<std::string>{"Slow start"});
    auto none = parse_preference_markup("[Like]\nNone.\n[Dislike]\nNone.");
    EXPECT_TRUE(none.likes.empty());
    EXPECT_TRUE(none.dislikes.empty());
    EXPECT_THROW(parse_preference_markup("I liked it a lot."), ParseError);
}

TEST(Markup, FormatRoundTrip) {
    std::vector<std::string> likes{"a", "b"}, dislikes;
    auto text = format_preference_markup(likes, dislikes);
    EXPECT_EQ(text, "[Like]\n- a\n- b\n[Dislike]\nNone.");
    auto back = parse_preference_markup(text);
    EXPECT_EQ(back.likes, likes);
    EXPECT_TRUE(back.dislikes.empty());
}

TEST(Extract, EmptyReviewSkipsBackend) {
    auto mock = summarizer("[Like]\n- x\n[Dislike]\nNone.");
    llm::Gateway gw(mock);
    auto tpl = llm::TemplateRegistry::load_default();
    auto empty = extract_preferences(review("r", "u", "i", 3, 0, "   "), gw, tpl);
    EXPECT_TRUE(empty.empty());
    EXPECT_EQ(mock->calls(), 0u);
    auto full = extract_preferences(review("r2", "u", "i", 3, 0, "Loved the score"), gw, tpl);
    EXPECT_EQ(full.likes, std::vector<std::string>{"x"});
    EXPECT_EQ(full.source_review_id, "r2");
}

TEST(Extract, UnparseableOutputKeepsRawText) {
    llm::Gateway gw(summarizer("no tags here"));
    auto tpl = llm::TemplateRegistry::load_default();
    try {
        extract_preferences(review("r", "u", "i", 3, 0, "text"), gw, tpl);
        FAIL();
    } catch (const ExtractionError& e) {
        EXPECT_EQ(e.raw_text(), "no tags here");
    }
}

TEST(Extract, PreferenceFileRoundTrip) {
    rrtest::TempDir dir;
    PreferenceMap m{{"a", prefs("a", {"x"}, {"y"})}, {"b", prefs("b", {})}};
    write_preferences(dir / "p.jsonl", m);
    EXPECT_EQ(read_preferences(dir / "p.jsonl"), m);
}

TEST(Strategy, ParseAndPrint) {
    EXPECT_EQ(SelectionStrategy::parse("all"), SelectionStrategy::all());
    EXPECT_EQ(SelectionStrategy::parse("helpful:5").to_string(), "helpful:5");
    EXPECT_EQ(SelectionStrategy::parse("neighbor:3").k, 3);
    EXPECT_THROW(SelectionStrategy::parse("neighbor:"), ConfigError);
    EXPECT_THROW(SelectionStrategy::parse("neighbor:0"), ConfigError);
    EXPECT_THROW(SelectionStrategy::parse("random"), ConfigError);
}

namespace {

struct Fixture {
    std::vector<corpus::Review> train;
    PreferenceMap pm;
    Fixture() {
        // u1 and u2 agree; u3 disagrees; everyone rated item X.
        train = {review("a1", "u1", "A", 5, 1), review("a2", "u1", "B", 1, 2), review("a3", "u1", "X", 4, 3),
                 review("b1", "u2", "A", 5, 4), review("b2", "u2", "B", 2, 5), review("b3", "u2", "X", 5, 6),
                 review("c1", "u3", "A", 1, 7), review("c2", "u3", "B", 5, 8), review("c3", "u3", "X", 1, 9),
                 review("t1", "ut", "A", 5, 10), review("t2", "ut", "B", 1, 11)};
        train[3].helpful_votes = 10;
        train[6].helpful_votes = 3;
        for (const auto& r : train) pm[r.id] = prefs(r.id, {"liked " + r.id});
    }
};

}  // namespace

TEST(Select, UserSetsUseAllTrainReviews) {
    Fixture f;
    TrainView view(f.train, &f.pm);
    auto s = select_user_preferences("u1", view);
    EXPECT_EQ(s.source_review_ids(), (std::vector<std::string>{"a1", "a2", "a3"}));
    EXPECT_TRUE(select_user_preferences("ghost", view).cold);
}

TEST(Select, HelpfulnessKeepsTopN) {
    Fixture f;
    TrainView view(f.train, &f.pm);
    auto s = select_item_preferences("A", SelectionStrategy::helpfulness(2), view);
    EXPECT_EQ(s.source_review_ids(), (std::vector<std::string>{"b1", "c1"}));
    EXPECT_EQ(select_item_preferences("A", SelectionStrategy::all(), view).entries.size(), 4u);
}

TEST(Select, NeighborsExcludeTargetAndFollowSimilarity) {
    Fixture f;
    similarity::NeighborIndex idx(f.train);
    TrainView view(f.train, &f.pm, &idx);
    auto s = select_item_preferences("X", SelectionStrategy::neighbor(2), view, std::string("ut"));
    EXPECT_EQ(s.target_user, "ut");
    EXPECT_FALSE(s.fallback_all);
    // ut agrees with u1 and u2 on A and B
    EXPECT_EQ(s.source_review_ids(), (std::vector<std::string>{"a3", "b3"}));
    EXPECT_THROW(select_item_preferences("X", SelectionStrategy::neighbor(2), view), ConfigError);
}

TEST(Select, NeighborFallbackWhenNoOtherRater) {
    // only the target rated X
    std::vector<corpus::Review> train{review("a", "u1", "X", 4), review("b", "u2", "Y", 3)};
    PreferenceMap pm{{"a", prefs("a", {"x"})}, {"b", prefs("b", {"y"})}};
    similarity::NeighborIndex idx(train);
    TrainView view(train, &pm, &idx);
    auto s = select_item_preferences("X", SelectionStrategy::neighbor(3), view, std::string("u1"));
    EXPECT_TRUE(s.fallback_all);
    EXPECT_TRUE(s.entries.empty());
    // a rater with no co-rated items still counts, at similarity 0
    auto t = select_item_preferences("X", SelectionStrategy::neighbor(3), view, std::string("u2"));
    EXPECT_FALSE(t.fallback_all);
    EXPECT_EQ(t.source_review_ids(), std::vector<std::string>{"a"});
}

TEST(Profile, DegenerateSetsNeverReachTheBackend) {
    auto mock = summarizer("[Like]\n- everything\n[Dislike]\nNone.");
    llm::Gateway gw(mock);
    auto tpl = llm::TemplateRegistry::load_default();
    PreferenceSet set;
    set.subject = "u";
    set.entries = {prefs("r1", {}), prefs("r2", {})};
    EXPECT_TRUE(degenerate(set));
    auto p = build_profile(set, gw, tpl, "snap");
    EXPECT_TRUE(p.empty());
    EXPECT_EQ(p.source_review_ids, (std::vector<std::string>{"r1", "r2"}));
    EXPECT_EQ(mock->calls(), 0u);

    set.entries.push_back(prefs("r3", {"x"}));
    auto q = build_profile(set, gw, tpl, "snap");
    EXPECT_EQ(q.likes, std::vector<std::string>{"everything"});
    EXPECT_EQ(mock->calls(), 1u);
    auto back = profile_from_json(profile_to_json(q));
    EXPECT_EQ(back.likes, q.likes);
    EXPECT_EQ(back.built_at, "snap");
}

TEST(Profile, KeyDependsOnSourcesAndTarget) {
    PreferenceSet a;
    a.kind = SubjectKind::item;
    a.subject = "X";
    a.strategy = SelectionStrategy::neighbor(3);
    a.target_user = "u1";
    a.entries = {prefs("r1", {"x"})};
    auto b = a;
    b.target_user = "u2";
    EXPECT_NE(profile_key(a), profile_key(b));
    auto c = a;
    c.entries.push_back(prefs("r2", {}));
    EXPECT_NE(profile_key(a), profile_key(c));
    auto d = a;
    d.entries = {prefs("r1", {"changed bullets do not matter"})};
    EXPECT_EQ(profile_key(a), profile_key(d));
}

TEST(Store, BuildsOncePerKeyUnderConcurrency) {
    ProfileStore store;
    PreferenceSet set;
    set.subject = "u";
    set.entries = {prefs("r", {"x"})};
    std::atomic<int> builds{0};
    auto build = [&](const PreferenceSet& s) {
        ++builds;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
        Profile p;
        p.subject = s.subject;
        return p;
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) threads.emplace_back([&] { store.get_or_build(set, build); });
    for (auto& t : threads) t.join();
    EXPECT_EQ(builds.load(), 1);
    EXPECT_EQ(store.size(), 1u);
}

TEST(Store, PersistsAndRebuildsIndex) {
    rrtest::TempDir dir;
    std::vector<PreferenceSet> sets;
    for (std::string s : {"c", "a", "b"}) {
        PreferenceSet set;
        set.subject = s;
        set.entries = {prefs("r" + s, {"x"})};
        sets.push_back(set);
    }
    auto build = [](const PreferenceSet& s) {
        Profile p;
        p.subject = s.subject;
        p.likes = {"like " + s.subject};
        return p;
    };
    std::string first;
    {
        ProfileStore store(dir.path());
        std::vector<std::string> errors;
        auto out = store.build_all(sets, build, 4, &errors);
        EXPECT_TRUE(errors.empty());
        ASSERT_EQ(out.size(), 3u);
        EXPECT_EQ(out[0].subject, "c");  // input order
        first = rrtest::read_file(dir / "profiles.jsonl");
    }
    std::filesystem::remove(dir / "index.jsonl");
    ProfileStore reopened(dir.path());
    EXPECT_EQ(reopened.size(), 3u);
    EXPECT_TRUE(std::filesystem::exists(dir / "index.jsonl"));
    std::size_t rebuilt = 0;
    reopened.build_all(sets, [&](const PreferenceSet& s) {
        ++rebuilt;
        return build(s);
    }, 2);
    EXPECT_EQ(rebuilt, 0u);
    EXPECT_EQ(rrtest::read_file(dir / "profiles.jsonl"), first);

    // file order does not depend on thread scheduling
    rrtest::TempDir other;
    ProfileStore serial(other.path());
    serial.build_all(sets, build, 1);
    EXPECT_EQ(rrtest::read_file(other / "profiles.jsonl"), first);
}

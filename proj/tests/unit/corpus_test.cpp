#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "reviewrec/corpus.hpp"
#include "reviewrec/error.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::corpus;
using rrtest::review;

TEST(RatingScale, DefaultOffsets) {
    auto ten = RatingScale::with_default_offset(1, 10);
    EXPECT_EQ(ten.token_offset, -1);
    EXPECT_EQ(ten.digit_min(), 0);
    EXPECT_EQ(ten.digit_max(), 9);
    auto five = RatingScale::with_default_offset(1, 5);
    EXPECT_EQ(five.token_offset, 0);
    EXPECT_EQ(five.to_digit(4), 4);
    EXPECT_THROW((RatingScale{5, 1, 0}.validate()), ConfigError);
    // digits must stay single characters
    EXPECT_THROW((RatingScale{1, 10, 0}.validate()), ConfigError);
}

TEST(Ingest, JsonlKeepsGoodRecordsAndReportsLines) {
    rrtest::TempDir dir;
    rrtest::write_file(dir / "r.jsonl",
                       R"({"review_id":"a","user_id":"u1","item_id":"i1","rating":4,"text":"fine","timestamp":10})"
                       "\n"
                       "not json\n"
                       R"({"review_id":"b","user_id":"u1","item_id":"i2","rating":9,"timestamp":11})"
                       "\n"
                       R"({"review_id":"c","user_id":"u2","item_id":"i1","rating":null,"timestamp":12})"
                       "\n\n"
                       R"({"user_id":"u2","item_id":"i2","rating":"3","timestamp":13,"helpful_votes":2})"
                       "\n");
    auto res = ingest(dir / "r.jsonl", "jsonl");
    ASSERT_EQ(res.corpus.reviews.size(), 2u);
    EXPECT_EQ(res.corpus.reviews[0].id, "a");
    EXPECT_EQ(res.corpus.reviews[1].id, "u2|i2|13");  // composite id when absent
    EXPECT_EQ(res.corpus.reviews[1].helpful_votes, 2);
    EXPECT_EQ(res.unrated_dropped, 1u);
    ASSERT_EQ(res.issues.size(), 2u);
    EXPECT_EQ(res.issues[0].line, 2u);
    EXPECT_EQ(res.issues[1].line, 3u);
    EXPECT_NE(res.issues[1].message.find("outside scale"), std::string::npos);
}

TEST(Ingest, DuplicateTripleIsAnIssue) {
    rrtest::TempDir dir;
    rrtest::write_file(dir / "r.jsonl",
                       R"({"user_id":"u","item_id":"i","rating":3,"timestamp":1})"
                       "\n"
                       R"({"review_id":"x","user_id":"u","item_id":"i","rating":2,"timestamp":1})"
                       "\n");
    auto res = ingest(dir / "r.jsonl", "jsonl");
    EXPECT_EQ(res.corpus.reviews.size(), 1u);
    ASSERT_EQ(res.issues.size(), 1u);
    EXPECT_EQ(res.issues[0].line, 2u);
}

TEST(Ingest, CsvWithColumnMapping) {
    rrtest::TempDir dir;
    rrtest::write_file(dir / "r.csv",
                       "uid,iid,stars,body,time\n"
                       "u1,i1,5,\"great, really\",100\n"
                       "u1,i2,,skipped,101\n"
                       "u2,i1,2,meh,102\r\n");
    IngestOptions opt;
    opt.csv_columns = {{"user_id", "uid"}, {"item_id", "iid"}, {"rating", "stars"}, {"text", "body"},
                       {"timestamp", "time"}};
    auto res = ingest(dir / "r.csv", "csv", opt);
    ASSERT_EQ(res.corpus.reviews.size(), 2u);
    EXPECT_EQ(res.corpus.reviews[0].text, "great, really");
    EXPECT_EQ(res.unrated_dropped, 1u);
    EXPECT_TRUE(res.issues.empty());
}

TEST(Ingest, UnknownFormatAndMissingColumns) {
    rrtest::TempDir dir;
    rrtest::write_file(dir / "r.csv", "a,b\n1,2\n");
    EXPECT_THROW(ingest(dir / "r.csv", "parquet"), ConfigError);
    EXPECT_THROW(ingest(dir / "r.csv", "csv"), ConfigError);
    EXPECT_THROW(ingest(dir / "missing.jsonl", "jsonl"), ConfigError);
}

TEST(Ingest, UnresolvedItemsFollowMetadata) {
    rrtest::TempDir dir;
    rrtest::write_file(dir / "r.jsonl", R"({"user_id":"u","item_id":"i1","rating":3,"timestamp":1})"
                                        "\n"
                                        R"({"user_id":"u","item_id":"i2","rating":3,"timestamp":2})"
                                        "\n");
    rrtest::write_file(dir / "items.jsonl", R"({"item_id":"i1","title":"One","description":"first"})"
                                            "\n");
    auto res = ingest(dir / "r.jsonl", "jsonl");
    EXPECT_EQ(res.corpus.unresolved_items.size(), 2u);
    auto issues = load_item_meta(dir / "items.jsonl", res.corpus);
    EXPECT_TRUE(issues.empty());
    EXPECT_EQ(res.corpus.unresolved_items, std::vector<std::string>{"i2"});
    EXPECT_EQ(res.corpus.items.at("i1").title, "One");
}

TEST(Ingest, RoundTripThroughJsonl) {
    rrtest::TempDir dir;
    std::vector<Review> reviews{review("a", "u", "i", 4, 5, "line\nbreak \"quoted\""), review("b", "v", "i", 1, 6)};
    write_reviews_jsonl(dir / "r.jsonl", reviews);
    auto res = ingest(dir / "r.jsonl", "jsonl");
    EXPECT_EQ(res.corpus.reviews, reviews);
}

// -- k-core -------------------------------------------------------------------

namespace {

Corpus make(std::vector<std::pair<std::string, std::string>> edges) {
    Corpus c;
    c.scale = RatingScale::with_default_offset(1, 5);
    int n = 0;
    for (auto& [u, i] : edges) {
        c.reviews.push_back(review("r" + std::to_string(n), u, i, 3, n));
        ++n;
    }
    return c;
}

std::set<std::string> ids(const Corpus& c) {
    std::set<std::string> s;
    for (const auto& r : c.reviews) s.insert(r.id);
    return s;
}

}  // namespace

TEST(KCore, SmallBicliqueCollapses) {
    // {A,B,C} x {X,Y}: every item has 3 users but every user only 2 items.
    std::vector<std::pair<std::string, std::string>> e;
    for (auto u : {"A", "B", "C"})
        for (auto i : {"X", "Y"}) e.emplace_back(u, i);
    EXPECT_TRUE(kcore_filter(make(e), 3).reviews.empty());
    EXPECT_EQ(kcore_filter(make(e), 2).reviews.size(), 6u);
}

TEST(KCore, CascadingRemovalAndIdempotence) {
    // 3x3 complete block plus a pendant chain that unravels.
    std::vector<std::pair<std::string, std::string>> e;
    for (auto u : {"A", "B", "C"})
        for (auto i : {"X", "Y", "Z"}) e.emplace_back(u, i);
    e.emplace_back("D", "X");
    e.emplace_back("D", "W");
    e.emplace_back("E", "W");
    auto once = kcore_filter(make(e), 3);
    EXPECT_EQ(once.reviews.size(), 9u);
    EXPECT_EQ(ids(kcore_filter(once, 3)), ids(once));
    EXPECT_EQ(kcore_filter(make(e), 1).reviews.size(), e.size());
    EXPECT_THROW(kcore_filter(make(e), 0), ConfigError);
}

// -- split ---------------------------------------------------------------------

TEST(Split, LargestRemainderSizes) {
    using A = std::array<std::size_t, 3>;
    EXPECT_EQ(largest_remainder_sizes(10, {}), (A{8, 1, 1}));
    EXPECT_EQ(largest_remainder_sizes(5, {}), (A{4, 1, 0}));  // tie goes to valid
    EXPECT_EQ(largest_remainder_sizes(0, {}), (A{0, 0, 0}));
    EXPECT_EQ(largest_remainder_sizes(1, {}), (A{1, 0, 0}));
    EXPECT_EQ(largest_remainder_sizes(7, {1, 1, 1}), (A{3, 2, 2}));
    for (std::size_t n = 0; n < 200; ++n) {
        auto s = largest_remainder_sizes(n, {});
        EXPECT_EQ(s[0] + s[1] + s[2], n);
    }
}

TEST(Split, TemporalOrderAndTags) {
    Corpus c;
    c.scale = RatingScale::with_default_offset(1, 5);
    // u1: 4 early reviews (warm), u2: 3 early (cold), u3 only late (unseen)
    int t = 0;
    for (int k = 0; k < 4; ++k) c.reviews.push_back(review("a" + std::to_string(k), "u1", "i" + std::to_string(k), 3, t++));
    for (int k = 0; k < 3; ++k) c.reviews.push_back(review("b" + std::to_string(k), "u2", "i" + std::to_string(k), 3, t++));
    c.reviews.push_back(review("c0", "u1", "i9", 3, t++));
    c.reviews.push_back(review("c1", "u2", "i9", 3, t++));
    c.reviews.push_back(review("c2", "u3", "i9", 3, t++));
    auto split = temporal_split(c, {7, 1, 2});
    ASSERT_EQ(split.train.size(), 7u);
    EXPECT_EQ(split.valid, std::vector<std::string>{"c0"});
    EXPECT_EQ(split.test, (std::vector<std::string>{"c1", "c2"}));
    auto tags = tag_test_subsets(split, c);
    EXPECT_EQ(tags.at("c1"), Subset::cold);
    EXPECT_EQ(tags.at("c2"), Subset::unseen);
    split.test.push_back("c0");
    EXPECT_EQ(tag_test_subsets(split, c).at("c0"), Subset::warm);
}

TEST(Split, ManifestRoundTrip) {
    Corpus c;
    for (int k = 0; k < 10; ++k) c.reviews.push_back(review("r" + std::to_string(k), "u" + std::to_string(k % 3), "i", 3, k));
    auto split = temporal_split(c);
    auto tags = tag_test_subsets(split, c);
    auto j = split_manifest(split, tags);
    auto back = split_from_manifest(j);
    EXPECT_EQ(back.train, split.train);
    EXPECT_EQ(back.valid, split.valid);
    EXPECT_EQ(back.test, split.test);
    EXPECT_EQ(tags_from_manifest(j), tags);
    EXPECT_THROW(subset_from_string("lukewarm"), ParseError);
}

TEST(Bias, MeansAndFallbacks) {
    std::vector<Review> train{review("a", "u", "i", 4), review("b", "u", "j", 2), review("c", "v", "i", 5)};
    auto b = bias_means(train);
    EXPECT_DOUBLE_EQ(b.user_mean("u"), 3.0);
    EXPECT_DOUBLE_EQ(b.item_mean("i"), 4.5);
    EXPECT_DOUBLE_EQ(b.global, 11.0 / 3.0);
    EXPECT_DOUBLE_EQ(b.user_mean("nobody"), b.global);
    auto back = bias_from_json(bias_to_json(b));
    EXPECT_DOUBLE_EQ(back.item_mean("j"), 2.0);
    EXPECT_THROW(bias_means({}), ConfigError);
}

TEST(Corpus, DigestIgnoresReviewOrder) {
    Corpus a, b;
    a.reviews = {review("x", "u", "i", 3), review("y", "v", "i", 4)};
    b.reviews = {a.reviews[1], a.reviews[0]};
    EXPECT_EQ(corpus_digest(a), corpus_digest(b));
    b.reviews[0].rating = 5;
    EXPECT_NE(corpus_digest(a), corpus_digest(b));
}

TEST(Corpus, SelectReviewsRejectsUnknownIds) {
    Corpus c;
    c.reviews = {review("x", "u", "i", 3)};
    std::vector<std::string> good{"x"}, bad{"x", "nope"};
    EXPECT_EQ(select_reviews(c, good).size(), 1u);
    EXPECT_THROW(select_reviews(c, bad), ConfigError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "reviewrec/cf.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::cf;

namespace {

std::vector<RatingTriple> constant_corpus(double c) {
    std::vector<RatingTriple> t;
    for (int u = 0; u < 30; ++u)
        for (int i = 0; i < 20; ++i)
            if ((u * 7 + i * 3) % 4 == 0) t.push_back({"u" + std::to_string(u), "i" + std::to_string(i), c});
    return t;
}

std::vector<Interaction> grouped_interactions(int users, int items, int groups, int per_user, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int block = items / groups;
    std::uniform_int_distribution<int> in_block(0, block - 1);
    std::vector<Interaction> out;
    for (int u = 0; u < users; ++u) {
        std::set<int> mine;
        while (static_cast<int>(mine.size()) < per_user) mine.insert((u % groups) * block + in_block(rng));
        for (int i : mine) out.push_back({"u" + std::to_string(u), "i" + std::to_string(i)});
    }
    return out;
}

}  // namespace

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.dimension = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.learning_rate = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Mf, ConstantCorpusPredictsConstant) {
    auto train = constant_corpus(4.0);
    auto m = train_mf(train, TrainConfig{});
    for (const auto& t : train) EXPECT_NEAR(m.predict(t.user, t.item), 4.0, 0.05);
    EXPECT_NEAR(m.predict("stranger", "i0"), 4.0, 0.05);
    EXPECT_NEAR(m.predict("stranger", "unknown"), 4.0, 1e-12);  // global mean
}

TEST(Mf, ClampsToScale) {
    auto train = constant_corpus(5.0);
    TrainConfig cfg;
    cfg.epochs = 5;
    auto m = train_mf(train, cfg, {}, std::pair{1.0, 3.0});
    EXPECT_EQ(m.predict("u0", "i0"), 3.0);
}

TEST(Mf, UnknownUserFallsBackToItemBias) {
    std::vector<RatingTriple> train{{"a", "x", 5}, {"b", "x", 5}, {"a", "y", 1}, {"b", "y", 1}};
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 0.05;
    auto m = train_mf(train, cfg);
    EXPECT_GT(m.predict("new", "x"), m.predict("new", "y"));
}

TEST(Mf, EmptyTrainAndDivergence) {
    EXPECT_THROW(train_mf({}, TrainConfig{}), TrainingError);
    auto train = constant_corpus(1000.0);
    TrainConfig cfg;
    cfg.learning_rate = 50.0;
    try {
        train_mf(train, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("smaller learning rate"), std::string::npos);
    }
}

TEST(Mf, EarlyStoppingKeepsBestEpoch) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<RatingTriple> train, valid;
    for (int u = 0; u < 40; ++u)
        for (int i = 0; i < 30; ++i) {
            if ((u + i) % 3) continue;
            RatingTriple t{"u" + std::to_string(u), "i" + std::to_string(i), 3.0 + noise(rng)};
            ((u * 31 + i) % 5 ? train : valid).push_back(t);
        }
    TrainConfig cfg;
    cfg.epochs = 300;
    cfg.patience = 3;
    TrainReport rep;
    auto m = train_mf(train, cfg, valid, std::nullopt, &rep);
    ASSERT_EQ(rep.valid_rmse.size(), static_cast<std::size_t>(rep.epochs_run));
    EXPECT_LT(rep.epochs_run, 300);  // pure noise: validation stops improving
    double se = 0;
    for (const auto& v : valid) se += std::pow(m.predict(v.user, v.item) - v.rating, 2);
    EXPECT_NEAR(std::sqrt(se / valid.size()), rep.valid_rmse[rep.best_epoch - 1], 1e-9);
}

TEST(Mf, CheckpointRoundTrip) {
    auto train = constant_corpus(3.0);
    TrainConfig cfg;
    cfg.epochs = 3;
    auto m = train_mf(train, cfg);
    auto back = mf_from_checkpoint(checkpoint(m));
    for (const auto& t : train) EXPECT_EQ(back.predict(t.user, t.item), m.predict(t.user, t.item));
    EXPECT_THROW(mf_from_checkpoint(checkpoint(train_bpr(std::vector<Interaction>{{"u", "i"}}, cfg))), ConfigError);
}

TEST(Bpr, FixedSeedIsBitReproducible) {
    auto data = grouped_interactions(60, 40, 4, 6, 1);
    TrainConfig cfg;
    cfg.dimension = 8;
    cfg.epochs = 10;
    auto a = train_bpr(data, cfg);
    auto b = train_bpr(data, cfg);
    EXPECT_EQ(a.user_factors, b.user_factors);
    EXPECT_EQ(a.item_factors, b.item_factors);
    cfg.seed = 43;
    EXPECT_NE(train_bpr(data, cfg).user_factors, a.user_factors);
}

TEST(Bpr, LearnsGroupStructure) {
    auto data = grouped_interactions(80, 40, 4, 6, 2);
    TrainConfig cfg;
    cfg.dimension = 8;
    cfg.learning_rate = 0.05;
    cfg.regularization = 0.01;
    cfg.epochs = 40;
    auto m = train_bpr(data, cfg);
    // each user has 4 unseen in-group items; they should fill the top 4
    SeenItems seen(data);
    int wins = 0, total = 0;
    for (int u = 0; u < 80; ++u) {
        const std::string user = "u" + std::to_string(u);
        auto list = generate_candidates(m, user, 4, seen);
        for (const auto& c : list.items) {
            int item = std::stoi(c.item_id.substr(1));
            wins += item / 10 == u % 4;
            ++total;
        }
    }
    EXPECT_GT(static_cast<double>(wins) / total, 0.9);
}

TEST(Candidates, ExcludeSeenOrderedAndShort) {
    std::vector<Interaction> data{{"u", "a"}, {"u", "b"}, {"v", "c"}, {"v", "d"}, {"w", "a"}};
    TrainConfig cfg;
    cfg.dimension = 4;
    cfg.epochs = 5;
    auto m = train_bpr(data, cfg);
    SeenItems seen(data);
    auto list = generate_candidates(m, "u", 10, seen);
    EXPECT_TRUE(list.short_list);
    ASSERT_EQ(list.items.size(), 2u);
    for (const auto& c : list.items) EXPECT_FALSE(seen.seen("u", c.item_id));
    EXPECT_GE(list.items[0].score, list.items[1].score);
    EXPECT_EQ(list.generator, "bpr-mf");
    EXPECT_THROW(generate_candidates(m, "u", 0, seen), ConfigError);
}

TEST(Candidates, BatchMatchesSerial) {
    auto data = grouped_interactions(200, 120, 5, 10, 4);
    TrainConfig cfg;
    cfg.dimension = 8;
    cfg.epochs = 3;
    auto m = train_bpr(data, cfg);
    SeenItems seen(data);
    std::vector<std::string> users;
    for (int u = 0; u < 200; ++u) users.push_back("u" + std::to_string(u));
    auto par = generate_candidates_batch(m, users, 20, seen);
    auto ser = generate_candidates_batch_serial(m, users, 20, seen);
    ASSERT_EQ(par.size(), ser.size());
    for (std::size_t k = 0; k < par.size(); ++k) EXPECT_EQ(par[k].items, ser[k].items);
}

TEST(External, ValidatesEveryList) {
    rrtest::TempDir dir;
    std::unordered_set<std::string> known{"a", "b", "c", "d"};
    std::vector<Interaction> train{{"u", "a"}};
    SeenItems seen(train);
    auto load = [&](const std::string& body) {
        rrtest::write_file(dir / "c.jsonl", body);
        return load_external_candidates(dir / "c.jsonl", known, seen);
    };
    auto ok = load(R"({"user_id":"u","generator":"pop","items":[{"item_id":"b","score":2},{"item_id":"c","score":1}]})"
                   "\n");
    ASSERT_EQ(ok.lists.size(), 1u);
    EXPECT_EQ(ok.lists.at("u").generator, "pop");

    auto line_of = [&](const std::string& body) -> std::size_t {
        try {
            load(body);
        } catch (const LoadError& e) {
            return e.line();
        }
        return 0;
    };
    const std::string good = R"({"user_id":"v","items":[{"item_id":"b","score":1}]})" "\n";
    EXPECT_EQ(line_of(good + R"({"user_id":"u","items":[{"item_id":"zzz","score":1}]})"), 2u);   // unknown
    EXPECT_EQ(line_of(good + R"({"user_id":"u","items":[{"item_id":"a","score":1}]})"), 2u);     // seen
    EXPECT_EQ(line_of(good + R"({"user_id":"u","items":[{"item_id":"b","score":1},{"item_id":"b","score":0}]})"),
              2u);  // duplicate
    EXPECT_EQ(line_of(good + R"({"user_id":"u","items":[{"item_id":"b","score":1},{"item_id":"c","score":3}]})"),
              2u);  // not descending
    EXPECT_EQ(line_of(good + good), 2u);  // duplicate user
    EXPECT_FALSE(load("").warnings.empty());
}

TEST(Serialize, CandidatesJson) {
    CandidateList l{"u", {{"a", 1.5}}, "bpr-mf", true};
    auto j = candidates_to_json(l);
    EXPECT_EQ(j.at("user_id"), "u");
    EXPECT_EQ(j.at("items")[0].at("item_id"), "a");
}

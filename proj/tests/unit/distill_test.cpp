#include <gtest/gtest.h>

#include <fstream>

#include "reviewrec/distill.hpp"
#include "test_util.hpp"

using namespace reviewrec;
using namespace reviewrec::distill;
using rrtest::review;

namespace {

std::shared_ptr<llm::MockBackend> teacher() {
    auto mock = std::make_shared<llm::MockBackend>("teacher");
    mock->add_reply("preference_extraction", {"[Like]\n- pacing\n[Dislike]\nNone.", std::nullopt});
    mock->add_reply("user_profile", {"[Like]\n- pacing overall\n[Dislike]\nNone.", std::nullopt});
    mock->add_reply("item_profile", {"[Like]\nNone.\n[Dislike]\n- length", std::nullopt});
    mock->add_reply("reasoning_generation", {"  The user values pacing.  ", std::nullopt});
    return mock;
}

InstructionExample example(Step step, std::string id, std::string target = "t") {
    return {step, {{llm::Role::user, "prompt " + id}}, std::move(target), 0, {id}};
}

}  // namespace

TEST(Steps, ParseNamesAndAliases) {
    EXPECT_EQ(parse_steps("rp,pe"), (std::vector<Step>{Step::preference_extraction, Step::rating_prediction}));
    EXPECT_EQ(step_from_string("profile_construction"), Step::profile_construction);
    EXPECT_EQ(to_string(Step::rating_prediction), "rating_prediction");
    EXPECT_THROW(parse_steps("pe,zz"), ConfigError);
    EXPECT_THROW(parse_steps(""), ConfigError);
}

TEST(Build, ExtractionSkipsEmptyReviews) {
    llm::Gateway gw(teacher());
    auto tpl = llm::TemplateRegistry::load_default();
    std::vector<corpus::Review> train{review("r1", "u", "a", 4, 0, "Great pacing."), review("r2", "u", "b", 2, 0, " ")};
    auto out = build_extraction_set(train, gw, tpl);
    ASSERT_EQ(out.examples.size(), 1u);
    EXPECT_EQ(out.examples[0].provenance, std::vector<std::string>{"r1"});
    EXPECT_NE(out.examples[0].messages[0].content.find("Great pacing."), std::string::npos);
    ASSERT_EQ(out.log.size(), 1u);
    EXPECT_NE(out.log[0].find("r2"), std::string::npos);
}

TEST(Build, ProfileSetExcludesDegenerate) {
    llm::Gateway gw(teacher());
    auto tpl = llm::TemplateRegistry::load_default();
    profiling::PreferenceSet full, empty;
    full.subject = "u";
    full.entries = {{"r2", {"x"}, {}}, {"r1", {}, {"y"}}};
    empty.subject = "v";
    empty.entries = {{"r3", {}, {}}};
    std::vector<profiling::PreferenceSet> sets{full, empty};
    auto out = build_profile_set(sets, gw, tpl);
    ASSERT_EQ(out.examples.size(), 1u);
    EXPECT_EQ(out.examples[0].provenance, (std::vector<std::string>{"r1", "r2"}));
    EXPECT_EQ(out.examples[0].target, "[Like]\n- pacing overall\n[Dislike]\nNone.");
    EXPECT_EQ(out.log.size(), 1u);
}

TEST(Build, ReasoningHidesRatingFromInputAndTargetsDigit) {
    llm::Gateway gw(teacher());
    auto tpl = llm::TemplateRegistry::load_default();
    const auto scale = RatingScale::with_default_offset(1, 10);
    ReasoningInput in{review("r9", "u", "a", 8), {}};
    in.inputs.user_profile = "[Like]\n- pacing\n[Dislike]\nNone.";
    in.inputs.item_description = "A film.";
    in.inputs.user_mean = 7.0;
    in.inputs.item_mean = 6.0;
    auto req = teacher_reasoning_request(in, tpl);
    EXPECT_NE(req.messages[0].content.find('8'), std::string::npos);
    std::vector<ReasoningInput> inputs{in};
    auto out = build_reasoning_set(inputs, gw, tpl, scale);
    ASSERT_EQ(out.examples.size(), 1u);
    const auto& ex = out.examples[0];
    EXPECT_EQ(ex.target, "Reasoning: The user values pacing.\nPredicted User Rating: 7");
    EXPECT_EQ(ex.messages, reasoner::build_prediction_prompt(in.inputs, scale, tpl));
    auto parsed = reasoner::parse_prediction_output(ex.target, scale);
    EXPECT_EQ(parsed.rating, 8);
}

TEST(Export, CanonicalOrderAndManifest) {
    rrtest::TempDir dir;
    std::vector<InstructionExample> ex{example(Step::rating_prediction, "b"), example(Step::preference_extraction, "z"),
                                       example(Step::rating_prediction, "a")};
    auto ordered = canonical_order(ex);
    EXPECT_EQ(ordered[0].provenance[0], "z");
    EXPECT_EQ(ordered[1].provenance[0], "a");
    auto m = export_sft(ex, dir / "sft.jsonl", "cd", {{"t", "c"}}, "mock");
    EXPECT_EQ(m.total, 3u);
    EXPECT_EQ(m.counts.at("rating_prediction"), 2u);
    EXPECT_EQ(m.sha256.size(), 64u);

    std::reverse(ex.begin(), ex.end());
    rrtest::TempDir other;
    auto m2 = export_sft(ex, other / "sft.jsonl", "cd", {{"t", "c"}}, "mock");
    EXPECT_EQ(m2.sha256, m.sha256);
    EXPECT_EQ(rrtest::read_file(dir / "sft.jsonl"), rrtest::read_file(other / "sft.jsonl"));

    std::ifstream in(dir / "sft.jsonl");
    std::string line;
    std::getline(in, line);
    auto back = example_from_json(nlohmann::json::parse(line));
    EXPECT_EQ(back.step, Step::preference_extraction);
    EXPECT_EQ(back.messages, ordered[0].messages);
}

TEST(Export, RejectsInvalidExamples) {
    rrtest::TempDir dir;
    auto bad_target = example(Step::rating_prediction, "a", "");
    EXPECT_THROW(export_sft({bad_target}, dir / "x.jsonl", "", {}, "m"), ConfigError);
    auto bad_mask = example(Step::rating_prediction, "a", "abc");
    bad_mask.mask_from = 4;
    EXPECT_THROW(export_sft({bad_mask}, dir / "x.jsonl", "", {}, "m"), ConfigError);
    auto no_source = example(Step::rating_prediction, "a");
    no_source.provenance.clear();
    EXPECT_THROW(export_sft({no_source}, dir / "x.jsonl", "", {}, "m"), ConfigError);
}

TEST(Leakage, FlagsNonTrainProvenance) {
    std::vector<InstructionExample> ex{example(Step::preference_extraction, "train1"),
                                       example(Step::profile_construction, "test1")};
    ex[1].provenance.push_back("train1");
    EXPECT_EQ(leakage_violations(ex, {"train1"}), std::vector<std::string>{"test1"});
    EXPECT_TRUE(leakage_violations(ex, {"train1", "test1"}).empty());
}

#include "reviewrec/distill.hpp"

#include <algorithm>
#include <fstream>

#include "reviewrec/digest.hpp"

namespace reviewrec::distill {

using nlohmann::json;

std::string_view to_string(Step step) {
    switch (step) {
        case Step::preference_extraction: return "preference_extraction";
        case Step::profile_construction: return "profile_construction";
        case Step::rating_prediction: return "rating_prediction";
    }
    return "?";
}

Step step_from_string(std::string_view name) {
    if (name == "preference_extraction" || name == "pe") return Step::preference_extraction;
    if (name == "profile_construction" || name == "pc") return Step::profile_construction;
    if (name == "rating_prediction" || name == "rp") return Step::rating_prediction;
    throw ConfigError("unknown distillation step '" + std::string(name) + "' (expected pe, pc or rp)");
}

std::vector<Step> parse_steps(std::string_view list) {
    std::set<Step> steps;
    std::size_t start = 0;
    while (start <= list.size()) {
        auto comma = list.find(',', start);
        auto part = list.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
        while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
        if (part.empty()) throw ConfigError("empty entry in step list '" + std::string(list) + "'");
        steps.insert(step_from_string(part));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return {steps.begin(), steps.end()};
}

json example_to_json(const InstructionExample& ex) {
    json messages = json::array();
    for (const auto& m : ex.messages) messages.push_back({{"role", llm::to_string(m.role)}, {"content", m.content}});
    return {{"step", to_string(ex.step)},
            {"messages", messages},
            {"target", ex.target},
            {"mask_from", ex.mask_from},
            {"provenance", ex.provenance}};
}

InstructionExample example_from_json(const json& j) {
    InstructionExample ex;
    ex.step = step_from_string(j.at("step").get<std::string>());
    for (const auto& m : j.at("messages")) {
        ex.messages.push_back({llm::role_from_string(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
    }
    ex.target = j.at("target").get<std::string>();
    ex.mask_from = j.at("mask_from").get<std::size_t>();
    ex.provenance = j.at("provenance").get<std::vector<std::string>>();
    return ex;
}

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

BuildResult build_extraction_set(std::span<const corpus::Review> train, llm::Gateway& teacher,
                                 const llm::TemplateRegistry& templates) {
    BuildResult out;
    std::vector<const corpus::Review*> sources;
    std::vector<llm::CompletionRequest> requests;
    for (const auto& r : train) {
        if (trim(r.text).empty()) {
            out.log.push_back("review " + r.id + ": empty text, skipped");
            continue;
        }
        sources.push_back(&r);
        requests.push_back(profiling::extraction_request(r, templates));
    }
    auto outcomes = teacher.complete_all(requests);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& r = *sources[i];
        if (!outcomes[i].result) {
            out.log.push_back("review " + r.id + ": teacher failed: " + outcomes[i].error);
            continue;
        }
        const auto& text = outcomes[i].result->text;
        try {
            profiling::parse_preference_markup(text);
        } catch (const ParseError& e) {
            out.log.push_back("review " + r.id + ": teacher output unparseable: " + e.what());
            continue;
        }
        if (trim(text).empty()) continue;
        out.examples.push_back({Step::preference_extraction, requests[i].messages, text, 0, {r.id}});
    }
    return out;
}

BuildResult build_profile_set(std::span<const profiling::PreferenceSet> sets, llm::Gateway& teacher,
                              const llm::TemplateRegistry& templates) {
    BuildResult out;
    std::vector<const profiling::PreferenceSet*> sources;
    std::vector<llm::CompletionRequest> requests;
    for (const auto& s : sets) {
        const std::string who = std::string(profiling::to_string(s.kind)) + " " + s.subject;
        if (profiling::degenerate(s)) {
            out.log.push_back(who + ": empty preference set, excluded");
            continue;
        }
        sources.push_back(&s);
        requests.push_back(profiling::profile_request(s, templates));
    }
    auto outcomes = teacher.complete_all(requests);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& s = *sources[i];
        const std::string who = std::string(profiling::to_string(s.kind)) + " " + s.subject;
        if (!outcomes[i].result || trim(outcomes[i].result->text).empty()) {
            out.log.push_back(who + ": teacher failed: " +
                              (outcomes[i].result ? std::string("empty completion") : outcomes[i].error));
            continue;
        }
        auto ids = s.source_review_ids();
        std::sort(ids.begin(), ids.end());
        out.examples.push_back({Step::profile_construction, requests[i].messages, outcomes[i].result->text, 0, ids});
    }
    return out;
}

llm::CompletionRequest teacher_reasoning_request(const ReasoningInput& in, const llm::TemplateRegistry& templates,
                                                 int recommend_threshold) {
    const std::string description = trim(in.inputs.item_description).empty()
                                        ? std::string(reasoner::kNoDescription)
                                        : in.inputs.item_description;
    llm::CompletionRequest req;
    req.messages = {{llm::Role::user, templates.render(llm::TemplateId::reasoning_generation,
                                                       {{"user rating", std::to_string(in.review.rating)},
                                                        {"user profile", in.inputs.user_profile},
                                                        {"item description", description},
                                                        {"item profile", in.inputs.item_profile},
                                                        {"recommend threshold", std::to_string(recommend_threshold)}})}};
    req.template_id = std::string(llm::to_string(llm::TemplateId::reasoning_generation));
    return req;
}

BuildResult build_reasoning_set(std::span<const ReasoningInput> inputs, llm::Gateway& teacher,
                                const llm::TemplateRegistry& templates, const RatingScale& scale,
                                int recommend_threshold) {
    BuildResult out;
    std::vector<llm::CompletionRequest> requests;
    for (const auto& in : inputs) requests.push_back(teacher_reasoning_request(in, templates, recommend_threshold));
    auto outcomes = teacher.complete_all(requests);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& in = inputs[i];
        if (!outcomes[i].result) {
            out.log.push_back("review " + in.review.id + ": teacher failed: " + outcomes[i].error);
            continue;
        }
        auto explanation = trim(outcomes[i].result->text);
        if (explanation.empty()) {
            out.log.push_back("review " + in.review.id + ": empty explanation, skipped");
            continue;
        }
        if (!scale.contains(in.review.rating)) {
            out.log.push_back("review " + in.review.id + ": rating outside the scale, skipped");
            continue;
        }
        InstructionExample ex;
        ex.step = Step::rating_prediction;
        ex.messages = reasoner::build_prediction_prompt(in.inputs, scale, templates);
        ex.target = templates.render(llm::TemplateId::prediction_target,
                                     {{"reasoning", explanation}, {"rating", std::to_string(scale.to_digit(in.review.rating))}});
        ex.mask_from = 0;
        ex.provenance = {in.review.id};
        out.examples.push_back(std::move(ex));
    }
    return out;
}

json DatasetManifest::to_json() const {
    return {{"counts", counts},
            {"total", total},
            {"corpus_digest", corpus_digest},
            {"template_checksums", template_checksums},
            {"teacher_backend", teacher_backend},
            {"sha256", sha256},
            {"format", {{"fields", {"step", "messages", "target", "mask_from", "provenance"}},
                        {"loss", "negative log-likelihood over target characters from mask_from on; "
                                 "prompt messages carry no loss"}}}};
}

std::vector<InstructionExample> canonical_order(std::vector<InstructionExample> examples) {
    for (const auto& ex : examples) {
        if (ex.target.empty()) throw ConfigError("example with empty target");
        if (ex.mask_from > ex.target.size()) throw ConfigError("mask_from beyond target");
        if (ex.provenance.empty()) throw ConfigError("example without provenance");
        if (ex.messages.empty()) throw ConfigError("example without input messages");
    }
    std::sort(examples.begin(), examples.end(), [](const InstructionExample& a, const InstructionExample& b) {
        if (a.step != b.step) return a.step < b.step;
        if (a.provenance != b.provenance) return a.provenance < b.provenance;
        for (std::size_t i = 0; i < std::min(a.messages.size(), b.messages.size()); ++i) {
            if (a.messages[i].content != b.messages[i].content) return a.messages[i].content < b.messages[i].content;
        }
        if (a.messages.size() != b.messages.size()) return a.messages.size() < b.messages.size();
        return a.target < b.target;
    });
    return examples;
}

DatasetManifest export_sft(std::vector<InstructionExample> examples, const std::filesystem::path& path,
                           const std::string& corpus_digest, const std::map<std::string, std::string>& template_checksums,
                           const std::string& teacher_backend) {
    examples = canonical_order(std::move(examples));
    DatasetManifest m;
    m.corpus_digest = corpus_digest;
    m.template_checksums = template_checksums;
    m.teacher_backend = teacher_backend;
    std::string body;
    for (const auto& ex : examples) {
        body += example_to_json(ex).dump() + "\n";
        ++m.counts[std::string(to_string(ex.step))];
    }
    m.total = examples.size();
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot write " + path.string());
        out << body;
        if (!out) throw StorageError("write failed for " + path.string());
    }
    m.sha256 = sha256_hex(body);
    return m;
}

std::vector<std::string> leakage_violations(std::span<const InstructionExample> examples,
                                            const std::set<std::string>& train_ids) {
    std::set<std::string> bad;
    for (const auto& ex : examples) {
        for (const auto& id : ex.provenance) {
            if (!train_ids.contains(id)) bad.insert(id);
        }
    }
    return {bad.begin(), bad.end()};
}

}  // namespace reviewrec::distill

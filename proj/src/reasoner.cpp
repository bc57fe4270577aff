#include "reviewrec/reasoner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>

#include <omp.h>

namespace reviewrec::reasoner {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t ifind(std::string_view hay, std::string_view needle, std::size_t from = 0) {
    if (needle.size() > hay.size()) return std::string_view::npos;
    for (std::size_t i = from; i + needle.size() <= hay.size(); ++i) {
        bool ok = true;
        for (std::size_t j = 0; j < needle.size() && ok; ++j) {
            ok = std::tolower(static_cast<unsigned char>(hay[i + j])) ==
                 std::tolower(static_cast<unsigned char>(needle[j]));
        }
        if (ok) return i;
    }
    return std::string_view::npos;
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

double log_add(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

std::string digit_list(const RatingScale& scale) {
    std::string out;
    for (int d = scale.digit_min(); d <= scale.digit_max(); ++d) {
        if (!out.empty()) out += ", ";
        out += std::to_string(d);
    }
    return out;
}

std::string format_average(double mean, const RatingScale& scale) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", mean + scale.token_offset);
    return buf;
}

std::vector<llm::Message> build_prediction_prompt(const PromptInputs& in, const RatingScale& scale,
                                                  const llm::TemplateRegistry& templates) {
    using llm::TemplateId;
    const llm::Bindings sys{{"digit min", std::to_string(scale.digit_min())},
                            {"digit max", std::to_string(scale.digit_max())},
                            {"digit list", digit_list(scale)}};
    const std::string description = trim(in.item_description).empty() ? std::string(kNoDescription)
                                                                       : in.item_description;
    const llm::Bindings user{{"user profile", in.user_profile},
                             {"item description", description},
                             {"item profile", in.item_profile},
                             {"user average", format_average(in.user_mean, scale)},
                             {"item average", format_average(in.item_mean, scale)}};
    return {{llm::Role::system, templates.render(TemplateId::prediction_system, sys)},
            {llm::Role::user, templates.render(TemplateId::prediction_user, user)}};
}

ParsedOutput parse_prediction_output(std::string_view text, const RatingScale& scale) {
    auto tag = ifind(text, kRatingTag);
    if (tag == std::string_view::npos) {
        throw ParseError("output has no \"" + std::string(kRatingTag) + "\" tag");
    }
    ParsedOutput out;
    auto head = text.substr(0, tag);
    auto r = ifind(head, kReasoningTag);
    if (r == std::string_view::npos) {
        out.reasoning = trim(head);
        if (!out.reasoning.empty()) out.warnings.push_back("no \"Reasoning:\" tag; using text before the rating");
    } else {
        out.reasoning = trim(head.substr(r + kReasoningTag.size()));
    }
    if (out.reasoning.empty()) out.warnings.push_back("empty reasoning");

    auto rest = text.substr(tag + kRatingTag.size());
    auto d = std::find_if(rest.begin(), rest.end(), is_digit);
    if (d == rest.end()) throw ParseError("no integer after \"" + std::string(kRatingTag) + "\"");
    auto start = static_cast<std::size_t>(d - rest.begin());
    auto end = start;
    while (end < rest.size() && is_digit(rest[end]) && end - start < 9) ++end;
    const bool negative = start > 0 && rest[start - 1] == '-';
    int digit = std::stoi(std::string(rest.substr(start, end - start)));
    if (negative) digit = -digit;
    if (!scale.digit_in_range(digit) || (end < rest.size() && is_digit(rest[end]))) {
        throw RangeError("rating " + std::string(negative ? "-" : "") + std::string(rest.substr(start, end - start)) +
                         " outside " + std::to_string(scale.digit_min()) + ".." + std::to_string(scale.digit_max()));
    }
    out.rating = scale.from_digit(digit);
    return out;
}

RatingDistribution distribution_from_scores(const std::map<int, double>& log_scores, const RatingScale& scale) {
    double top = -std::numeric_limits<double>::infinity();
    for (const auto& [rating, l] : log_scores) {
        if (scale.contains(rating) && std::isfinite(l)) top = std::max(top, l);
    }
    if (!std::isfinite(top)) throw DistributionError("no scored rating token on the scale");
    RatingDistribution dist;
    double z = 0.0, mass = 0.0;
    for (int r = scale.min; r <= scale.max; ++r) {
        auto it = log_scores.find(r);
        double w = 0.0;
        if (it != log_scores.end() && std::isfinite(it->second)) {
            w = std::exp(it->second - top);
            mass += std::exp(it->second);
        }
        dist.probabilities[r] = w;
        z += w;
    }
    for (auto& [r, p] : dist.probabilities) p /= z;
    dist.coverage_mass = std::min(1.0, mass);
    return dist;
}

std::optional<std::size_t> rating_token_position(std::span<const llm::TokenScore> scores) {
    std::string joined;
    std::vector<std::size_t> starts;
    for (const auto& s : scores) {
        starts.push_back(joined.size());
        joined += s.token;
    }
    auto tag = ifind(joined, kRatingTag);
    if (tag == std::string::npos) return std::nullopt;
    const auto tag_end = tag + kRatingTag.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto end = starts[i] + scores[i].token.size();
        if (end <= tag_end) continue;
        std::string_view tail = scores[i].token;
        if (starts[i] < tag_end) tail.remove_prefix(tag_end - starts[i]);
        auto t = trim(tail);
        if (!t.empty() && is_digit(t.front())) return i;
        if (t.find_first_of("0123456789") != std::string::npos) return std::nullopt;
    }
    return std::nullopt;
}

RatingDistribution rating_distribution(std::span<const llm::TokenScore> scores, const RatingScale& scale) {
    auto pos = rating_token_position(scores);
    if (!pos) throw DistributionError("rating token not found in scored output");
    const auto& at = scores[*pos];
    std::vector<llm::TokenAlternative> alts = at.alternatives;
    // the chosen token counts as listed when any alternative spells the same digit
    bool has_chosen =
        std::any_of(alts.begin(), alts.end(), [&](const auto& a) { return trim(a.token) == trim(at.token); });
    if (!has_chosen) alts.push_back({at.token, at.logprob});

    std::map<int, double> pooled;
    for (const auto& a : alts) {
        auto t = trim(a.token);
        if (t.size() != 1 || !is_digit(t[0])) continue;
        int digit = t[0] - '0';
        if (!scale.digit_in_range(digit)) continue;
        int rating = scale.from_digit(digit);
        auto [it, fresh] = pooled.try_emplace(rating, a.logprob);
        if (!fresh) it->second = log_add(it->second, a.logprob);
    }
    if (pooled.empty()) throw DistributionError("no digit of the scale among the rating-position alternatives");
    return distribution_from_scores(pooled, scale);
}

double expected_rating(const RatingDistribution& dist, const RatingScale& scale) {
    double e = 0.0;
    for (const auto& [r, p] : dist.probabilities) e += r * p;
    return std::clamp(e, static_cast<double>(scale.min), static_cast<double>(scale.max));
}

llm::CompletionRequest prediction_request(const PromptInputs& in, const RatingScale& scale,
                                          const llm::TemplateRegistry& templates, bool want_scores) {
    llm::CompletionRequest req;
    req.messages = build_prediction_prompt(in, scale, templates);
    req.want_token_scores = want_scores;
    req.template_id = std::string(llm::to_string(llm::TemplateId::prediction_user));
    return req;
}

Prediction predict_rating(const PredictionTask& task, llm::Gateway& gateway, const llm::TemplateRegistry& templates,
                          const RatingScale& scale) {
    const std::string who = "(" + task.user_id + ", " + task.item_id + ")";
    Prediction p;
    p.review_id = task.review_id;
    p.user_id = task.user_id;
    p.item_id = task.item_id;

    llm::CompletionResult res;
    bool scored = true;
    try {
        try {
            res = gateway.complete(prediction_request(task.inputs, scale, templates, true));
        } catch (const llm::CapabilityError&) {
            scored = false;
            res = gateway.complete(prediction_request(task.inputs, scale, templates, false));
        }
    } catch (const Error& e) {
        throw PredictionError("completion failed for " + who + ": " + e.what());
    }

    ParsedOutput parsed;
    try {
        parsed = parse_prediction_output(res.text, scale);
    } catch (const ParseError& e) {
        throw PredictionError("unparseable prediction for " + who + ": " + e.what());
    }
    p.reasoning = std::move(parsed.reasoning);
    p.parsed_rating = parsed.rating;
    p.warnings = std::move(parsed.warnings);

    if (scored && res.token_scores) {
        try {
            auto dist = rating_distribution(*res.token_scores, scale);
            p.expected_rating = expected_rating(dist, scale);
            p.coverage_mass = dist.coverage_mass;
            p.distribution = std::move(dist);
        } catch (const DistributionError& e) {
            p.warnings.push_back(e.what());
            scored = false;
        }
    } else {
        scored = false;
    }
    if (!scored) {
        p.fallback_used = true;
        p.expected_rating = p.parsed_rating;
        p.coverage_mass = 0.0;
    }
    return p;
}

std::vector<BatchOutcome> predict_batch(std::span<const PredictionTask> tasks, llm::Gateway& gateway,
                                        const llm::TemplateRegistry& templates, const RatingScale& scale) {
    std::vector<BatchOutcome> out(tasks.size());
    const auto n = static_cast<std::ptrdiff_t>(tasks.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, gateway.workers()))
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto& o = out[static_cast<std::size_t>(i)];
        try {
            o.prediction = predict_rating(tasks[static_cast<std::size_t>(i)], gateway, templates, scale);
        } catch (const std::exception& e) {
            o.error = e.what();
        }
    }
    return out;
}

json prediction_to_json(const Prediction& p) {
    json j{{"review_id", p.review_id},
           {"user_id", p.user_id},
           {"item_id", p.item_id},
           {"reasoning", p.reasoning},
           {"parsed_rating", p.parsed_rating},
           {"expected_rating", p.expected_rating},
           {"fallback_used", p.fallback_used},
           {"coverage_mass", p.coverage_mass}};
    if (p.distribution) {
        json d = json::object();
        for (const auto& [r, prob] : p.distribution->probabilities) d[std::to_string(r)] = prob;
        j["distribution"] = d;
    }
    return j;
}

Prediction prediction_from_json(const json& j) {
    Prediction p;
    p.review_id = j.value("review_id", std::string());
    p.user_id = j.at("user_id").get<std::string>();
    p.item_id = j.at("item_id").get<std::string>();
    p.reasoning = j.value("reasoning", std::string());
    p.parsed_rating = j.at("parsed_rating").get<int>();
    p.expected_rating = j.at("expected_rating").get<double>();
    p.fallback_used = j.value("fallback_used", false);
    p.coverage_mass = j.value("coverage_mass", 0.0);
    if (auto d = j.find("distribution"); d != j.end()) {
        RatingDistribution dist;
        for (const auto& [k, v] : d->items()) dist.probabilities[std::stoi(k)] = v.get<double>();
        dist.coverage_mass = p.coverage_mass;
        p.distribution = std::move(dist);
    }
    return p;
}

}  // namespace reviewrec::reasoner

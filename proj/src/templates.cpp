#include "reviewrec/templates.hpp"

#include <fstream>
#include <sstream>

#include "reviewrec/digest.hpp"
#include "reviewrec/error.hpp"

#ifndef REVIEWREC_TEMPLATE_DIR
#define REVIEWREC_TEMPLATE_DIR "assets/templates"
#endif

namespace reviewrec::llm {

std::string_view to_string(TemplateId id) {
    switch (id) {
        case TemplateId::preference_extraction: return "preference_extraction";
        case TemplateId::user_profile: return "user_profile";
        case TemplateId::item_profile: return "item_profile";
        case TemplateId::reasoning_generation: return "reasoning_generation";
        case TemplateId::prediction_system: return "prediction_system";
        case TemplateId::prediction_user: return "prediction_user";
        case TemplateId::prediction_target: return "prediction_target";
    }
    return "unknown";
}

std::optional<TemplateId> template_from_string(std::string_view name) {
    for (auto id : kAllTemplates) {
        if (to_string(id) == name) return id;
    }
    return std::nullopt;
}

const std::set<std::string>& declared_placeholders() {
    static const std::set<std::string> names{
        "review",         "preferences",  "user rating", "user profile",    "item description",
        "item profile",   "reasoning",    "rating",      "digit min",       "digit max",
        "digit list",     "user average", "item average", "recommend threshold",
    };
    return names;
}

namespace {

bool placeholder_like(std::string_view s) {
    if (s.empty() || s.front() == ' ' || s.back() == ' ') return false;
    for (char c : s) {
        if (!((c >= 'a' && c <= 'z') || c == ' ')) return false;
    }
    return true;
}

}  // namespace

std::vector<std::string> placeholders_in(std::string_view body) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = body.find('{', pos)) != std::string_view::npos) {
        auto close = body.find('}', pos + 1);
        if (close == std::string_view::npos) break;
        auto name = body.substr(pos + 1, close - pos - 1);
        if (placeholder_like(name)) {
            out.emplace_back(name);
            pos = close + 1;
        } else {
            ++pos;
        }
    }
    return out;
}

std::string render_body(std::string_view body, const Bindings& bindings) {
    std::string out;
    out.reserve(body.size() + 256);
    std::size_t pos = 0;
    while (pos < body.size()) {
        auto open = body.find('{', pos);
        if (open == std::string_view::npos) {
            out.append(body.substr(pos));
            break;
        }
        auto close = body.find('}', open + 1);
        if (close == std::string_view::npos) {
            out.append(body.substr(pos));
            break;
        }
        auto name = body.substr(open + 1, close - open - 1);
        if (!placeholder_like(name)) {
            out.append(body.substr(pos, open + 1 - pos));
            pos = open + 1;
            continue;
        }
        out.append(body.substr(pos, open - pos));
        auto it = bindings.find(std::string(name));
        if (it == bindings.end()) {
            throw TemplateError("missing binding for placeholder {" + std::string(name) + "}");
        }
        out.append(it->second);
        pos = close + 1;
    }
    return out;
}

TemplateRegistry TemplateRegistry::load(const std::filesystem::path& dir) {
    TemplateRegistry reg;
    for (auto id : kAllTemplates) {
        auto path = dir / (std::string(to_string(id)) + ".txt");
        std::ifstream in(path, std::ios::binary);
        if (!in) throw TemplateError("template asset missing: " + path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        std::string body = ss.str();
        for (const auto& name : placeholders_in(body)) {
            if (!declared_placeholders().contains(name)) {
                throw TemplateError("template " + std::string(to_string(id)) +
                                    " uses undeclared placeholder {" + name + "}");
            }
        }
        reg.checksums_[id] = sha256_hex(body);
        reg.bodies_[id] = std::move(body);
    }
    return reg;
}

std::filesystem::path TemplateRegistry::default_dir() { return REVIEWREC_TEMPLATE_DIR; }

TemplateRegistry TemplateRegistry::load_default() { return load(default_dir()); }

std::string TemplateRegistry::render(TemplateId id, const Bindings& bindings) const {
    try {
        return render_body(body(id), bindings);
    } catch (const TemplateError& e) {
        throw TemplateError(std::string(to_string(id)) + ": " + e.what());
    }
}

const std::string& TemplateRegistry::body(TemplateId id) const { return bodies_.at(id); }

const std::string& TemplateRegistry::checksum(TemplateId id) const { return checksums_.at(id); }

std::map<std::string, std::string> TemplateRegistry::checksums() const {
    std::map<std::string, std::string> out;
    for (const auto& [id, sum] : checksums_) out[std::string(to_string(id))] = sum;
    return out;
}

}  // namespace reviewrec::llm

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace reviewrec::llm {

enum class TemplateId {
    preference_extraction,
    user_profile,
    item_profile,
    reasoning_generation,
    prediction_system,
    prediction_user,
    prediction_target,
};

inline constexpr std::array<TemplateId, 7> kAllTemplates{
    TemplateId::preference_extraction, TemplateId::user_profile,      TemplateId::item_profile,
    TemplateId::reasoning_generation,  TemplateId::prediction_system, TemplateId::prediction_user,
    TemplateId::prediction_target,
};

std::string_view to_string(TemplateId id);
std::optional<TemplateId> template_from_string(std::string_view name);

/// Placeholder names a template body may reference, written as `{name}`.
const std::set<std::string>& declared_placeholders();

/// Every `{...}` span in `body` whose content looks like a placeholder name
/// (lower-case letters and spaces), in order of appearance.
std::vector<std::string> placeholders_in(std::string_view body);

using Bindings = std::map<std::string, std::string>;

/// Single-pass substitution: bound values are inserted verbatim and never
/// rescanned. Throws TemplateError naming the first unbound placeholder.
std::string render_body(std::string_view body, const Bindings& bindings);

/// Prompt bodies loaded from a directory of `<template_id>.txt` assets.
class TemplateRegistry {
public:
    /// Loads and checksums every template. Throws TemplateError when a file is
    /// missing or references an undeclared placeholder.
    static TemplateRegistry load(const std::filesystem::path& dir);

    /// The asset directory configured at build time.
    static TemplateRegistry load_default();
    static std::filesystem::path default_dir();

    std::string render(TemplateId id, const Bindings& bindings) const;
    const std::string& body(TemplateId id) const;
    const std::string& checksum(TemplateId id) const;
    /// template name -> sha256 of its body.
    std::map<std::string, std::string> checksums() const;

private:
    std::map<TemplateId, std::string> bodies_;
    std::map<TemplateId, std::string> checksums_;
};

}  // namespace reviewrec::llm

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace reviewrec {

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents. Throws StorageError if unreadable.
std::string sha256_file(const std::filesystem::path& path);

/// Digest of an unordered id set: ids are sorted and newline-joined first.
std::string digest_id_set(std::span<const std::string> ids);

}  // namespace reviewrec

#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace nfrecon {

/// Header-plus-payload container shared by every binary file in the repo.
///
/// Layout: the decimal byte length of the JSON header followed by '\n', the
/// JSON header itself, then the payload as little-endian IEEE-754 doubles.
/// The header always carries a four-character "magic" field and
/// "dtype": "f64le".
struct Blob {
  nlohmann::json header;
  std::vector<double> payload;
};

void write_blob(const std::filesystem::path& path, nlohmann::json header,
                std::span<const double> payload);

/// Reads a blob and checks its magic. Throws nfrecon::Error with code
/// "bad_magic" (message names the byte offset of the header) on mismatch and
/// "malformed_file" on truncation or parse failures.
Blob read_blob(const std::filesystem::path& path, std::string_view magic);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace nfrecon

#include "nfrecon/blob_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nfrecon/common.hpp"

namespace nfrecon {
namespace {

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return out;
  }
  return v;
}

}  // namespace

void write_blob(const std::filesystem::path& path, nlohmann::json header,
                std::span<const double> payload) {
  header["dtype"] = "f64le";
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot open " + path.string() + " for writing");
  out << text.size() << '\n' << text;
  std::vector<std::uint64_t> raw(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) {
    raw[i] = to_little_endian(std::bit_cast<std::uint64_t>(payload[i]));
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(std::uint64_t)));
  if (!out) throw Error("io_error", "write failed for " + path.string());
}

Blob read_blob(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path.string());

  std::string length_line;
  if (!std::getline(in, length_line) || length_line.empty() ||
      length_line.find_first_not_of("0123456789") != std::string::npos) {
    throw Error("malformed_file",
                path.string() + ": missing header length prefix at byte offset 0");
  }
  const std::size_t header_offset = length_line.size() + 1;
  const std::size_t header_len = std::stoull(length_line);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw Error("malformed_file", path.string() + ": truncated header at byte offset " +
                                      std::to_string(header_offset));
  }

  Blob blob;
  try {
    blob.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("malformed_file", path.string() + ": header JSON error at byte offset " +
                                      std::to_string(header_offset + e.byte) + ": " +
                                      e.what());
  }
  const std::string found = blob.header.value("magic", std::string{});
  if (found != magic) {
    throw Error("bad_magic", path.string() + ": magic mismatch at byte offset " +
                                 std::to_string(header_offset) + ": expected '" +
                                 std::string(magic) + "', found '" + found + "'");
  }
  if (blob.header.value("dtype", std::string{}) != "f64le") {
    throw Error("malformed_file", path.string() + ": unsupported dtype");
  }

  const auto payload_offset = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::end);
  const auto end = static_cast<std::size_t>(in.tellg());
  if ((end - payload_offset) % sizeof(double) != 0) {
    throw Error("malformed_file", path.string() + ": payload at byte offset " +
                                      std::to_string(payload_offset) +
                                      " is not a whole number of f64 values");
  }
  in.seekg(static_cast<std::streamoff>(payload_offset));
  std::vector<std::uint64_t> raw((end - payload_offset) / sizeof(double));
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(std::uint64_t)));
  blob.payload.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    blob.payload[i] = std::bit_cast<double>(to_little_endian(raw[i]));
  }
  return blob;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io_error", "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io_error", "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("malformed_file", path.string() + ": JSON error at byte offset " +
                                      std::to_string(e.byte) + ": " + e.what());
  }
}

}  // namespace nfrecon

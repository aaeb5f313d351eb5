#include "binary_io.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace headsplat::detail {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in slices.
  constexpr std::size_t kSlice = 1u << 30;
  for (std::size_t offset = 0; offset < bytes.size(); offset += kSlice) {
    const auto n = static_cast<uInt>(std::min(kSlice, bytes.size() - offset));
    crc = ::crc32(crc, bytes.data() + offset, n);
  }
  return static_cast<std::uint32_t>(crc);
}

void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                     std::span<const std::uint8_t> payload, bool with_crc) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  const std::string text = header.dump();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (with_crc) {
    const std::uint32_t crc = crc32(payload);
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& magic, bool with_crc) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string context = path.string();

  const auto newline = std::find(raw.begin(), raw.end(), std::uint8_t{'\n'});
  if (newline == raw.end()) throw FormatError(context + ": missing header line");
  Container c;
  try {
    c.header = nlohmann::json::parse(raw.begin(), newline);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": bad header: " + e.what());
  }
  if (!c.header.is_object() || c.header.value("magic", std::string{}) != magic) {
    throw FormatError(context + ": expected magic " + magic);
  }
  auto begin = newline + 1;
  auto end = raw.end();
  if (with_crc) {
    if (std::distance(begin, end) < 4) throw FormatError(context + ": missing CRC trailer");
    end -= 4;
    std::uint32_t stored;
    std::memcpy(&stored, &*end, sizeof(stored));
    c.payload.assign(begin, end);
    if (crc32(c.payload) != stored) throw FormatError(context + ": CRC mismatch");
  } else {
    c.payload.assign(begin, end);
  }
  return c;
}

std::size_t header_count(const nlohmann::json& header, const char* key, const std::string& context) {
  const auto it = header.find(key);
  if (it == header.end() || !it->is_number_integer() || it->get<long long>() < 0) {
    throw FormatError(context + ": header field '" + key + "' missing or invalid");
  }
  return it->get<std::size_t>();
}

}  // namespace headsplat::detail

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsplat/errors.hpp"

// Container layout shared by the .ght/.gha/.ghr/.f32 files: one line of
// compact JSON terminated by '\n', a little-endian binary payload, and (for
// the model files) a trailing little-endian CRC32 of the payload.
namespace headsplat::detail {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

// Round to float32 precision. The volatile store keeps GCC 11's SLP
// vectorizer from folding the double->float->double round trip at -O3.
inline double round_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class PayloadWriter {
 public:
  void f32(double v) { put(static_cast<float>(v)); }
  void i32(std::int32_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  template <typename T>
  void put(T v) {
    const auto offset = bytes_.size();
    bytes_.resize(offset + sizeof(T));
    std::memcpy(bytes_.data() + offset, &v, sizeof(T));
  }
  std::vector<std::uint8_t> bytes_;
};

class PayloadReader {
 public:
  PayloadReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  double f32() { return static_cast<double>(get<float>()); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw FormatError(context_ + ": trailing bytes in payload");
  }

 private:
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError(context_ + ": payload truncated");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

struct Container {
  nlohmann::json header;
  std::vector<std::uint8_t> payload;
};

void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                     std::span<const std::uint8_t> payload, bool with_crc);

// Reads a container and checks the magic and (optionally) the CRC trailer.
Container read_container(const std::filesystem::path& path, const std::string& magic, bool with_crc);

// Reads a non-negative integer count from a header field.
std::size_t header_count(const nlohmann::json& header, const char* key, const std::string& context);

}  // namespace headsplat::detail

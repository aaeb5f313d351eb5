#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace headsplat {

// Interleaved row-major image with double-precision channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c) { return data[index(x, y, c)]; }
  double at(int x, int y, int c) const { return data[index(x, y, c)]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height && channels == other.channels;
  }
};

// PNG I/O is 8-bit RGBA. `rgb` holds the composited color over black and
// `alpha` (optional, 1 channel) the coverage; absent alpha is written opaque.
// The 8-bit RGBA pixels encode_png writes, row-major.
std::vector<std::uint8_t> to_rgba8(const Image& rgb, const Image* alpha = nullptr);
std::vector<std::uint8_t> encode_png(const Image& rgb, const Image* alpha = nullptr);
void write_png(const std::filesystem::path& path, const Image& rgb, const Image* alpha = nullptr);

struct DecodedPng {
  Image rgb;
  Image alpha;
};
DecodedPng decode_png(std::span<const std::uint8_t> bytes);
DecodedPng read_png(const std::filesystem::path& path);

// Raw float dump: one line of JSON ({"magic":"F32","shape":[h,w,c]}) then
// little-endian float32 samples.
void write_f32(const std::filesystem::path& path, const Image& image);
Image read_f32(const std::filesystem::path& path);

}  // namespace headsplat

#include "headsplat/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <png.h>

#include "binary_io.hpp"

namespace headsplat {

namespace {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::vector<std::uint8_t> to_rgba8(const Image& rgb, const Image* alpha) {
  if (rgb.channels != 3) throw std::invalid_argument("PNG encoding expects a 3-channel image");
  if (alpha && (alpha->channels != 1 || alpha->width != rgb.width || alpha->height != rgb.height)) {
    throw std::invalid_argument("alpha image shape does not match rgb");
  }
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(rgb.width) * rgb.height * 4);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * rgb.width + x) * 4;
      for (int c = 0; c < 3; ++c) pixels[o + c] = quantize(rgb.at(x, y, c));
      pixels[o + 3] = alpha ? quantize(alpha->at(x, y, 0)) : 255;
    }
  }
  return pixels;
}

namespace {

png_image make_png_image(int width, int height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_RGBA;
  return image;
}

DecodedPng from_rgba8(const std::vector<std::uint8_t>& pixels, int width, int height) {
  DecodedPng out{Image(width, height, 3), Image(width, height, 1)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 4;
      for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = pixels[o + c] / 255.0;
      out.alpha.at(x, y, 0) = pixels[o + 3] / 255.0;
    }
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& rgb, const Image* alpha) {
  const auto pixels = to_rgba8(rgb, alpha);
  png_image image = make_png_image(rgb.width, rgb.height);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&image, bytes.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + image.message);
  }
  bytes.resize(size);
  return bytes;
}

void write_png(const std::filesystem::path& path, const Image& rgb, const Image* alpha) {
  const auto bytes = encode_png(rgb, alpha);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write PNG: " + path.string());
}

DecodedPng decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(std::string("PNG decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(std::string("PNG decode failed: ") + image.message);
  }
  return from_rgba8(pixels, static_cast<int>(image.width), static_cast<int>(image.height));
}

DecodedPng read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PNG: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_f32(const std::filesystem::path& path, const Image& image) {
  detail::PayloadWriter w;
  for (double v : image.data) w.f32(v);
  const nlohmann::json header = {{"magic", "F32"}, {"shape", {image.height, image.width, image.channels}}};
  detail::write_container(path, header, w.bytes(), false);
}

Image read_f32(const std::filesystem::path& path) {
  auto c = detail::read_container(path, "F32", false);
  const auto& shape = c.header.at("shape");
  if (!shape.is_array() || shape.size() != 3) throw FormatError(path.string() + ": bad shape");
  Image image(shape[1].get<int>(), shape[0].get<int>(), shape[2].get<int>());
  detail::PayloadReader r(c.payload, path.string());
  for (double& v : image.data) v = r.f32();
  r.expect_end();
  return image;
}

}  // namespace headsplat

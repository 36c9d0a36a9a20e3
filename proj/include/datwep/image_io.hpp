#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "datwep/errors.hpp"

namespace datwep::image_io {

/// 8-bit interleaved pixels, row-major.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image8&) const = default;
};

namespace detail {

inline Image8 read_png(const std::string& path, std::uint32_t format, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError("cannot read PNG " + path + ": " + img.message);
  }
  img.format = format;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path + ": " + msg);
  }
  return out;
}

}  // namespace detail

/// Any PNG converted to 8-bit RGB.
inline Image8 read_rgb(const std::string& path) { return detail::read_png(path, PNG_FORMAT_RGB, 3); }

/// Single-channel PNG as stored values. Colour files are rejected because conversion would alter codes.
inline Image8 read_gray(const std::string& path) {
  png_image probe;
  std::memset(&probe, 0, sizeof probe);
  probe.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&probe, path.c_str())) {
    throw FormatError("cannot read PNG " + path + ": " + probe.message);
  }
  const bool colour = (probe.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png_image_free(&probe);
  if (colour) throw FormatError("mask " + path + " must be a single-channel PNG");
  return detail::read_png(path, PNG_FORMAT_GRAY, 1);
}

inline void write_png(const std::string& path, const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw ValidationError("PNG writer supports 1 or 3 channels");
  if (im.pixels.size() != im.width * im.height * im.channels) throw ShapeError("PNG pixel buffer size mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr)) {
    throw FormatError("cannot write PNG " + path + ": " + img.message);
  }
}

/// Area-average resampling: each output pixel is the mean of the source area it covers,
/// with fractional weights on partially covered source pixels.
inline Image8 resize_area(const Image8& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  auto weights = [](std::size_t in, std::size_t out) {
    // per output index: list of (source index, weight)
    std::vector<std::vector<std::pair<std::size_t, double>>> w(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double a = static_cast<double>(o) * scale, b = static_cast<double>(o + 1) * scale;
      for (auto i = static_cast<std::size_t>(a); i < in && static_cast<double>(i) < b; ++i) {
        const double lo = std::max(a, static_cast<double>(i)), hi = std::min(b, static_cast<double>(i + 1));
        if (hi > lo) w[o].push_back({i, (hi - lo) / scale});
      }
    }
    return w;
  };
  const auto wx = weights(src.width, out_w), wy = weights(src.height, out_h);
  Image8 out{out_w, out_h, src.channels, std::vector<std::uint8_t>(out_w * out_h * src.channels)};
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < src.channels; ++c) {
        double s = 0.0;
        for (auto [sy, fy] : wy[y])
          for (auto [sx, fx] : wx[x]) s += fy * fx * src.at(sy, sx, c);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(s), 0L, 255L));
      }
  return out;
}

/// Nearest-neighbour resampling, sampling each output pixel's centre.
inline Image8 resize_nearest(const Image8& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  Image8 out{out_w, out_h, src.channels, std::vector<std::uint8_t>(out_w * out_h * src.channels)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(src.height - 1, (2 * y + 1) * src.height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(src.width - 1, (2 * x + 1) * src.width / (2 * out_w));
      for (std::size_t c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace datwep::image_io

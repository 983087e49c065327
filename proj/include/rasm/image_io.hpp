// SPDX-License-Identifier: Apache-2.0
//
// 8-bit image files: PNG (through libpng's simplified API) and binary
// PPM / PGM with maxval 255. Pixels load as [C x H x W] tensors in [0,1];
// saving clips to [0,1] and rounds half up to the nearest 1/255 level.
#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rasm/tensor.hpp"

namespace rasm {

namespace detail {

enum class ImageFormat { png, ppm, pgm };

inline std::vector<unsigned char> read_file(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw FileNotFoundError("no such file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline ImageFormat sniff_format(const std::vector<unsigned char>& bytes, const std::string& path) {
  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return ImageFormat::png;
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return ImageFormat::ppm;
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return ImageFormat::pgm;
  throw FormatError("unrecognized image signature in " + path);
}

inline unsigned char quantize(double v) {
  if (!(v > 0)) return 0;  // also maps NaN to 0
  if (v >= 1) return 255;
  return static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
}

struct RawImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;  // interleaved
};

inline RawImage decode_png(const std::vector<unsigned char>& bytes, std::size_t channels, const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw FormatError("malformed PNG " + path + ": " + img.message);
  }
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw UnsupportedFormatError("unsupported PNG bit depth (16-bit) in " + path);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  RawImage raw{img.width, img.height, channels, std::vector<unsigned char>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, raw.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("malformed PNG " + path + ": " + msg);
  }
  return raw;
}

inline RawImage decode_pnm(const std::vector<unsigned char>& bytes, ImageFormat fmt, const std::string& path) {
  std::size_t pos = 2;
  auto token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError("malformed PNM header in " + path);
    }
    if (!digits) throw FormatError("malformed PNM header in " + path);
    return v;
  };
  const long w = token(), h = token(), maxval = token();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("malformed PNM header in " + path);
  ++pos;
  if (w <= 0 || h <= 0) throw FormatError("PNM with empty size in " + path);
  if (maxval != 255) throw UnsupportedFormatError("unsupported PNM maxval " + std::to_string(maxval) + " in " + path);
  const std::size_t c = fmt == ImageFormat::ppm ? 3 : 1;
  const std::size_t need = std::size_t(w) * std::size_t(h) * c;
  if (bytes.size() - pos < need) throw FormatError("truncated PNM payload in " + path);
  return {std::size_t(w), std::size_t(h), c, std::vector<unsigned char>(bytes.begin() + pos, bytes.begin() + pos + need)};
}

}  // namespace detail

/// Loads an image as [channels x H x W] in [0,1]; channels is 1 or 3.
/// Grey files are replicated to RGB; colour files requested as one channel
/// are reduced to their channel mean (PNM) or libpng's luminance (PNG).
template <typename T>
Tensor<T> load_image(const std::string& path, std::size_t channels = 3) {
  if (channels != 1 && channels != 3) throw ContractError("load_image: channels must be 1 or 3");
  const auto bytes = detail::read_file(path);
  const auto fmt = detail::sniff_format(bytes, path);
  const auto raw = fmt == detail::ImageFormat::png ? detail::decode_png(bytes, channels, path)
                                                    : detail::decode_pnm(bytes, fmt, path);
  const std::size_t n = raw.width * raw.height;
  std::vector<T> out(channels * n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* px = &raw.pixels[i * raw.channels];
    for (std::size_t c = 0; c < channels; ++c) {
      double v;
      if (raw.channels == channels) {
        v = px[c];
      } else if (raw.channels == 1) {
        v = px[0];
      } else {
        v = std::round((double(px[0]) + px[1] + px[2]) / 3.0);
      }
      out[c * n + i] = T(v / 255.0);
    }
  }
  return Tensor<T>({channels, raw.height, raw.width}, std::move(out));
}

/// Writes [1 x H x W] or [3 x H x W] to .png, .ppm or .pgm (by extension).
template <typename T>
void save_image(const Tensor<T>& img, const std::string& path) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw DimensionError("save_image: expected [1xHxW] or [3xHxW], got " + shape_str(img.shape()));
  }
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2), n = H * W;
  std::vector<unsigned char> px(C * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c) px[i * C + c] = detail::quantize(double(img.data()[c * n + i]));

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".png") {
    png_image out{};
    out.version = PNG_IMAGE_VERSION;
    out.width = png_uint_32(W);
    out.height = png_uint_32(H);
    out.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, px.data(), 0, nullptr)) {
      throw IoError("cannot write PNG " + path + ": " + out.message);
    }
    return;
  }
  if (ext != ".ppm" && ext != ".pgm") throw UnsupportedFormatError("unsupported image extension for " + path);
  if ((ext == ".ppm") != (C == 3)) throw DimensionError("save_image: " + ext + " needs " + (C == 3 ? "1" : "3") + " channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << (C == 3 ? "P6\n" : "P5\n") << W << ' ' << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
  if (!f) throw IoError("cannot write " + path);
}

}  // namespace rasm

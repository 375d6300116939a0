#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vidcast/tensor.hpp"

namespace vidcast {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit interleaved image, row-major (y, x, channel).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Planar (C,H,W) tensor in [0,1].
inline Tensor image_to_tensor(const Image& img) {
  Tensor t({static_cast<std::size_t>(img.channels), static_cast<std::size_t>(img.height),
            static_cast<std::size_t>(img.width)});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] =
            img.at(x, y, c) / 255.0;
  return t;
}

// Accepts (C,H,W) or (1,C,H,W); values are clamped to [0,1] and rounded.
inline Image tensor_to_image(const Tensor& t) {
  const std::size_t off = t.rank() == 4 ? 1 : 0;
  if (t.rank() != 3 + off) throw ImageError("tensor_to_image: expected (C,H,W)");
  const int c = static_cast<int>(t.dim(off)), h = static_cast<int>(t.dim(off + 1)),
            w = static_cast<int>(t.dim(off + 2));
  Image img(w, h, c);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = std::clamp(t[(static_cast<std::size_t>(ch) * h + y) * w + x], 0.0, 1.0);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ImageError("write_png: only gray or RGB images are supported");
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&desc, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = desc.message;
    png_image_free(&desc);
    throw ImageError("cannot write " + path.string() + ": " + msg);
  }
}

// Reads any PNG, converting to the requested channel count (1 or 3).
inline Image read_png(const std::filesystem::path& path, int channels = 3) {
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&desc, path.string().c_str()))
    throw ImageError("cannot read " + path.string() + ": " + desc.message);
  desc.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image img(static_cast<int>(desc.width), static_cast<int>(desc.height), channels);
  if (!png_image_finish_read(&desc, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = desc.message;
    png_image_free(&desc);
    throw ImageError("cannot decode " + path.string() + ": " + msg);
  }
  return img;
}

}  // namespace vidcast

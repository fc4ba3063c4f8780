#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcyolo/tensor.hpp"

namespace tcyolo {

/// 8-bit RGB raster, row-major, 3 interleaved channels.
struct Image {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(Index w, Index h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(std::size_t(w * h * 3), fill) {}

  std::uint8_t& at(Index x, Index y, int c) { return pixels[std::size_t((y * width + x) * 3 + c)]; }
  std::uint8_t at(Index x, Index y, int c) const { return pixels[std::size_t((y * width + x) * 3 + c)]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary PPM (P6, maxval 255) or PNG, chosen by extension.
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& image);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& image);
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& image);

/// 8-bit grayscale PNG from a row-major width*height buffer.
void write_gray_png(const std::string& path, Index width, Index height, const std::vector<std::uint8_t>& gray);

/// Bilinear resize with half-pixel centers; same-size input is copied.
Image resize_bilinear(const Image& image, Index width, Index height);

/// 1 x 3 x H x W tensor with values in [0, 1].
template <typename Scalar>
Tensor<Scalar> image_to_tensor(const Image& image);

}  // namespace tcyolo

#include "tcyolo/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace tcyolo {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(a) == std::tolower(b); });
}

// Skips whitespace and '#' comments in a PPM header.
void skip_ppm_space(std::istream& in) {
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Image read_image(const std::string& path) {
  if (ends_with(path, ".ppm")) return read_ppm(path);
  if (ends_with(path, ".png")) return read_png(path);
  throw DataError("unsupported image format '" + path + "' (expected .ppm or .png)");
}

void write_image(const std::string& path, const Image& image) {
  if (ends_with(path, ".ppm")) return write_ppm(path, image);
  if (ends_with(path, ".png")) return write_png(path, image);
  throw DataError("unsupported image format '" + path + "' (expected .ppm or .png)");
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError(path + ": not a binary PPM (P6)");
  Index w = 0, h = 0, maxval = 0;
  skip_ppm_space(in);
  in >> w;
  skip_ppm_space(in);
  in >> h;
  skip_ppm_space(in);
  in >> maxval;
  if (!in || w < 1 || h < 1 || maxval != 255) throw DataError(path + ": bad PPM header");
  in.get();
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!in) throw DataError(path + ": truncated PPM data");
  return img;
}

void write_ppm(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), std::streamsize(image.pixels.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

Image read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError(path + ": " + (png.message[0] ? png.message : "cannot read PNG"));
  png.format = PNG_FORMAT_RGB;
  Image img(Index(png.width), Index(png.height));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DataError(path + ": " + msg);
  }
  return img;
}

static void write_png_format(const std::string& path, Index w, Index h, png_uint_32 format, const void* data) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = png_uint_32(w);
  png.height = png_uint_32(h);
  png.format = format;
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write image '" + path + "'");
  if (!png_image_write_to_stdio(&png, f.get(), 0, data, 0, nullptr))
    throw IoError(path + ": " + png.message);
}

void write_png(const std::string& path, const Image& image) {
  write_png_format(path, image.width, image.height, PNG_FORMAT_RGB, image.pixels.data());
}

void write_gray_png(const std::string& path, Index width, Index height, const std::vector<std::uint8_t>& gray) {
  if (Index(gray.size()) != width * height) throw DimensionError("gray image buffer size mismatch");
  write_png_format(path, width, height, PNG_FORMAT_GRAY, gray.data());
}

Image resize_bilinear(const Image& src, Index width, Index height) {
  if (width < 1 || height < 1) throw ConfigError("resize to non-positive size");
  if (width == src.width && height == src.height) return src;
  Image out(width, height);
  const double sx = double(src.width) / double(width), sy = double(src.height) / double(height);
  for (Index y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
    const Index y0 = Index(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - double(y0);
    for (Index x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
      const Index x0 = Index(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - double(x0);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - tx) * src.at(x0, y0, c) + tx * src.at(x1, y0, c);
        const double bottom = (1 - tx) * src.at(x0, y1, c) + tx * src.at(x1, y1, c);
        out.at(x, y, c) = std::uint8_t(std::lround((1 - ty) * top + ty * bottom));
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> image_to_tensor(const Image& image) {
  Tensor<Scalar> t(Shape{1, 3, image.height, image.width});
  for (int c = 0; c < 3; ++c)
    for (Index y = 0; y < image.height; ++y)
      for (Index x = 0; x < image.width; ++x) t.at(0, c, y, x) = Scalar(image.at(x, y, c)) / Scalar(255);
  return t;
}

template Tensor<float> image_to_tensor<float>(const Image&);
template Tensor<double> image_to_tensor<double>(const Image&);

}  // namespace tcyolo

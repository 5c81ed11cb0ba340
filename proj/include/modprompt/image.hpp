#pragma once

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

#include <png.h>

#include "modprompt/tensor.hpp"

namespace modprompt {

enum class Modality { rgb, pseudo_ir, pseudo_depth };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::pseudo_ir: return "pseudo_ir";
    case Modality::pseudo_depth: return "pseudo_depth";
  }
  throw std::invalid_argument("modality_name: bad tag");
}

inline Modality modality_from_name(const std::string& s) {
  if (s == "rgb") return Modality::rgb;
  if (s == "pseudo_ir") return Modality::pseudo_ir;
  if (s == "pseudo_depth") return Modality::pseudo_depth;
  throw std::invalid_argument("unknown modality: " + s);
}

// H x W x 3 pixels in [0,1].
struct Image {
  Tensor pixels;  // [H,W,3]
  Modality modality = Modality::rgb;

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }

  bool in_range() const { return pixels.min() >= 0.0 && pixels.max() <= 1.0; }
};

inline Image make_image(int h, int w, Modality m = Modality::rgb, double fill = 0.0) {
  Image img;
  img.pixels = Tensor({h, w, 3}, fill);
  img.modality = m;
  return img;
}

// 8-bit RGB PNG via libpng. Values are quantized with round(v*255), so a
// write/read round trip moves each channel by at most 1/255.
inline void write_png(const std::string& path, const Tensor& pixels) {
  if (pixels.shape.size() != 3 || pixels.dim(2) != 3)
    throw std::invalid_argument("write_png: expects [H,W,3]");
  int h = pixels.dim(0), w = pixels.dim(1);

  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::min(1.0, std::max(0.0, pixels.at3(y, x, c)));
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Tensor read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  int w = static_cast<int>(png_get_image_width(png, info));
  int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: expected 3 channels in " + path);
  }
  Tensor out({h, w, 3});
  std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at3(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

}  // namespace modprompt

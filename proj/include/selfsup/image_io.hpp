#pragma once

// Minimal image file IO: 8-bit PNG (RGB and grayscale) through libpng, and
// PFM for full-precision float maps. All loaders throw io_error with the
// offending path in the message.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "selfsup/tensor.hpp"

namespace selfsup {

struct ImageU8 {
  int width = 0, height = 0, channels = 0;  // interleaved rows, top-down
  std::vector<uint8_t> pixels;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png(const std::string& path, const ImageU8& img) {
  check(img.channels == 1 || img.channels == 3, "write_png supports 1 or 3 channels");
  check(img.width > 0 && img.height > 0, "write_png: empty image");
  check(int(img.pixels.size()) == img.width * img.height * img.channels,
        "write_png: pixel buffer size mismatch");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw io_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("libpng write failure: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + size_t(y) * img.width * img.channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline ImageU8 read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw io_error("cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("malformed PNG: " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.channels = int(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("unsupported channel count in " + path);
  }
  img.pixels.resize(size_t(img.width) * img.height * img.channels);
  for (int y = 0; y < img.height; ++y)
    png_read_row(png, img.pixels.data() + size_t(y) * img.width * img.channels, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// PFM, grayscale variant ("Pf"). Negative scale marks little-endian data;
// rows are stored bottom-up per the format. Values round-trip exactly at
// float32 precision.
inline void write_pfm(const std::string& path, const std::vector<float>& data, int width,
                      int height) {
  check(int(data.size()) == width * height, "write_pfm: buffer size mismatch");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw io_error("cannot open for writing: " + path);
  std::fprintf(f.get(), "Pf\n%d %d\n-1.0\n", width, height);
  for (int y = height - 1; y >= 0; --y)
    if (std::fwrite(data.data() + size_t(y) * width, sizeof(float), width, f.get()) !=
        size_t(width))
      throw io_error("short write: " + path);
}

inline std::vector<float> read_pfm(const std::string& path, int* width_out, int* height_out) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw io_error("cannot open: " + path);
  char magic[3] = {};
  int w = 0, h = 0;
  double scl = 0;
  if (std::fscanf(f.get(), "%2s %d %d %lf", magic, &w, &h, &scl) != 4 ||
      std::strcmp(magic, "Pf") != 0 || w <= 0 || h <= 0)
    throw io_error("malformed PFM header in " + path);
  if (scl >= 0) throw io_error("big-endian PFM not supported: " + path);
  std::fgetc(f.get());  // single whitespace byte terminating the header
  std::vector<float> data(size_t(w) * h);
  for (int y = h - 1; y >= 0; --y)
    if (std::fread(data.data() + size_t(y) * w, sizeof(float), w, f.get()) != size_t(w))
      throw io_error("truncated PFM data in " + path + " at row " + std::to_string(y));
  if (width_out) *width_out = w;
  if (height_out) *height_out = h;
  return data;
}

// [3,H,W] tensor in [0,1] <-> interleaved 8-bit RGB.
inline ImageU8 tensor_to_rgb8(const TensorPtr& t) {
  check(t->shape.size() == 3 && t->shape[0] == 3, "tensor_to_rgb8 expects [3,H,W]");
  ImageU8 img;
  img.height = t->shape[1];
  img.width = t->shape[2];
  img.channels = 3;
  img.pixels.resize(size_t(img.width) * img.height * 3);
  const int hw = img.width * img.height;
  for (int i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      double v = t->data[c * hw + i];
      v = v < 0 ? 0 : (v > 1 ? 1 : v);
      img.pixels[size_t(i) * 3 + c] = uint8_t(std::lround(v * 255.0));
    }
  return img;
}

inline TensorPtr rgb8_to_tensor(const ImageU8& img) {
  check(img.channels == 3, "rgb8_to_tensor expects RGB");
  auto t = make_tensor({3, img.height, img.width});
  const int hw = img.width * img.height;
  for (int i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) t->data[c * hw + i] = img.pixels[size_t(i) * 3 + c] / 255.0;
  return t;
}

}  // namespace selfsup

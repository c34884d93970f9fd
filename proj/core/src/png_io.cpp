// SPDX-License-Identifier: Apache-2.0
#include "maskinv/png_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

#include "maskinv/errors.hpp"

namespace maskinv {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr file(std::fopen(path.c_str(), mode));
  if (!file) throw LoadError("cannot open '" + path + "'");
  return file;
}

// Pixel buffers live in the context structs so that a longjmp out of libpng
// followed by a throw still releases them during unwinding.
struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;

  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                 nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw LoadError("png: allocation failed");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::vector<png_bytep> rows;

  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                  nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw LoadError("png: allocation failed");
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;
};

// channels: 1 for grayscale, 3 for RGB. Grayscale reads are strict (masks
// must be genuinely single-channel); RGB reads accept grayscale and palette
// input. Alpha is stripped, sub-8-bit gray is expanded, 16-bit depth is
// rejected to keep mask semantics exact.
std::vector<std::uint8_t> read_png(const std::string& path, int channels,
                                   int& width, int& height) {
  FilePtr file = open_file(path, "rb");
  PngReader ctx;
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw LoadError("'" + path + "' is not a readable PNG");
  }
  png_init_io(ctx.png, file.get());
  png_read_info(ctx.png, ctx.info);

  const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
  const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
  const int depth = png_get_bit_depth(ctx.png, ctx.info);
  const int color = png_get_color_type(ctx.png, ctx.info);
  if (depth == 16) {
    throw ArgumentError("'" + path + "': 16-bit PNG is not supported");
  }
  if (channels == 1 && color != PNG_COLOR_TYPE_GRAY &&
      color != PNG_COLOR_TYPE_GRAY_ALPHA) {
    throw ArgumentError("'" + path + "': expected a grayscale PNG");
  }
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
  if ((color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) &&
      depth < 8) {
    png_set_expand_gray_1_2_4_to_8(ctx.png);
  }
  if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(ctx.png);
  }
  png_set_strip_alpha(ctx.png);
  if (channels == 3) png_set_gray_to_rgb(ctx.png);
  png_read_update_info(ctx.png, ctx.info);
  if (png_get_channels(ctx.png, ctx.info) !=
      static_cast<png_byte>(channels)) {
    throw ArgumentError("'" + path + "': unexpected channel layout");
  }

  width = static_cast<int>(w);
  height = static_cast<int>(h);
  ctx.pixels.resize(static_cast<std::size_t>(width) *
                    static_cast<std::size_t>(height) *
                    static_cast<std::size_t>(channels));
  ctx.rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    ctx.rows[static_cast<std::size_t>(y)] =
        ctx.pixels.data() + static_cast<std::size_t>(y) *
                                static_cast<std::size_t>(width) *
                                static_cast<std::size_t>(channels);
  }
  png_read_image(ctx.png, ctx.rows.data());
  png_read_end(ctx.png, nullptr);
  return std::move(ctx.pixels);
}

void write_png(const std::string& path, const std::uint8_t* pixels, int width,
               int height, int channels) {
  FilePtr file = open_file(path, "wb");
  PngWriter ctx;
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw LoadError("png write to '" + path + "' failed");
  }
  png_init_io(ctx.png, file.get());
  png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  ctx.rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    ctx.rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        pixels + static_cast<std::size_t>(y) *
                     static_cast<std::size_t>(width) *
                     static_cast<std::size_t>(channels));
  }
  png_write_image(ctx.png, ctx.rows.data());
  png_write_end(ctx.png, nullptr);
}

}  // namespace

GrayImage read_png_gray(const std::string& path) {
  int width = 0, height = 0;
  auto pixels = read_png(path, 1, width, height);
  GrayImage image(width, height);
  image.data = std::move(pixels);
  return image;
}

RgbImage read_png_rgb(const std::string& path) {
  int width = 0, height = 0;
  auto pixels = read_png(path, 3, width, height);
  RgbImage image(width, height);
  image.data = std::move(pixels);
  return image;
}

void write_png_gray(const std::string& path, const GrayImage& image) {
  if (image.width <= 0 || image.height <= 0) {
    throw ArgumentError("write_png_gray: empty image");
  }
  write_png(path, image.data.data(), image.width, image.height, 1);
}

void write_png_rgb(const std::string& path, const RgbImage& image) {
  if (image.width <= 0 || image.height <= 0) {
    throw ArgumentError("write_png_rgb: empty image");
  }
  write_png(path, image.data.data(), image.width, image.height, 3);
}

}  // namespace maskinv

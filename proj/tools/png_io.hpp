#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/tiler.hpp"

namespace milbench::png {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void on_error(png_structp, png_const_charp msg) { throw ValidationError(std::string("png: ") + msg); }
inline void on_warning(png_structp, png_const_charp) {}

}  // namespace detail

/// Loads any PNG as 8-bit gray or RGB (alpha dropped, palette expanded).
inline Raster read(const std::filesystem::path& path) {
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ValidationError("cannot open '" + path.string() + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ValidationError("'" + path.string() + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::on_error, detail::on_warning);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  const std::size_t channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) throw ValidationError("'" + path.string() + "': unsupported channel layout");
  Raster img(w, h, channels);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = img.pixels.data() + y * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return img;
}

inline void write(const std::filesystem::path& path, const Raster& img) {
  if (img.channels != 1 && img.channels != 3) throw ValidationError("png: only gray or RGB rasters can be written");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ValidationError("cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::on_error, detail::on_warning);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  png_write_end(png, nullptr);
}

/// Any nonzero value in the first channel marks tissue.
inline Mask read_mask(const std::filesystem::path& path) {
  const Raster r = read(path);
  Mask m(r.width, r.height, 0);
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x) m.at(x, y) = r.at(x, y, 0) != 0 ? 1 : 0;
  return m;
}

inline void write_mask(const std::filesystem::path& path, const Mask& m) {
  Raster r(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.cells.size(); ++i) r.pixels[i] = m.cells[i] ? 255 : 0;
  write(path, r);
}

}  // namespace milbench::png

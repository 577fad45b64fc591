#pragma once

// Tissue masking and grid tiling of plain raster images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "milbench/error.hpp"

namespace milbench {

/// 8-bit interleaved raster, 1 (gray) or 3 (RGB) channels.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool empty() const { return width == 0 || height == 0; }
  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Binary tissue mask; cells are 0 (background) or 1 (tissue).
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  Mask(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), cells(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return cells[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return cells[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct TilingConfig {
  std::size_t tile_px = 224;
  double mpp_in = 0.5;
  double mpp_out = 0.5;
  double min_tissue = 0.60;
  std::size_t mask_downsample = 8;  // 20x / 8 = 2.5x

  void validate() const {
    if (tile_px == 0) throw ValidationError("tile_px must be positive");
    if (!(min_tissue >= 0.0 && min_tissue <= 1.0)) throw ValidationError("min_tissue must lie in [0, 1]");
    if (mask_downsample == 0) throw ValidationError("mask_downsample must be positive");
    if (!(mpp_in > 0.0) || !(mpp_out > 0.0)) throw ValidationError("mpp values must be positive");
    if (mpp_out < mpp_in) throw ValidationError("mpp_out < mpp_in would require upsampling");
  }
};

struct TileRecord {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  double tissue_fraction = 0.0;
  friend bool operator==(const TileRecord&, const TileRecord&) = default;
};

/// Provider of tissue masks at 1/downsample resolution.
using MaskProvider = std::function<Mask(const Raster&, std::size_t downsample)>;

constexpr std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Tissue evidence of a pixel: 255 - min channel. White background scores 0;
/// dark or saturated (stained) pixels score high.
inline std::uint8_t tissue_score(const Raster& img, std::size_t x, std::size_t y) {
  std::uint8_t lo = 255;
  for (std::size_t c = 0; c < img.channels; ++c) lo = std::min(lo, img.at(x, y, c));
  return static_cast<std::uint8_t>(255 - lo);
}

/// Otsu threshold of a 256-bin histogram: the t maximizing between-class
/// variance of {<= t} vs {> t}. Returns -1 when the histogram has a single
/// occupied bin.
inline int otsu_threshold(const std::array<std::uint64_t, 256>& hist) {
  std::uint64_t total = 0;
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += hist[i];
    sum_all += static_cast<double>(i) * static_cast<double>(hist[i]);
  }
  if (total == 0) return -1;
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](std::uint64_t h) { return h > 0; });
  if (occupied < 2) return -1;
  double best = -1.0;
  int best_t = -1;
  std::uint64_t w0 = 0;
  double sum0 = 0.0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += static_cast<double>(t) * static_cast<double>(hist[t]);
    if (w0 == 0 || w0 == total) continue;
    const double n0 = static_cast<double>(w0);
    const double n1 = static_cast<double>(total - w0);
    const double mu0 = sum0 / n0;
    const double mu1 = (sum_all - sum0) / n1;
    const double between = n0 * n1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

/// Default mask provider. The tissue score is block-averaged down to
/// ceil(w/ds) x ceil(h/ds) (edge blocks average the pixels they cover),
/// then split by a global Otsu threshold. Images without contrast yield an
/// all-background mask.
inline Mask tissue_mask_otsu(const Raster& img, std::size_t downsample = 8) {
  if (img.empty()) throw ValidationError("tissue mask: zero-area image");
  if (img.channels != 1 && img.channels != 3) throw ValidationError("tissue mask: expected 1 or 3 channels");
  if (downsample == 0) throw ValidationError("tissue mask: downsample must be positive");
  const std::size_t mw = ceil_div(img.width, downsample);
  const std::size_t mh = ceil_div(img.height, downsample);
  std::vector<std::uint64_t> sums(mw * mh, 0), counts(mw * mh, 0);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto cell = (y / downsample) * mw + x / downsample;
      sums[cell] += tissue_score(img, x, y);
      ++counts[cell];
    }
  std::vector<std::uint8_t> score(mw * mh);
  std::array<std::uint64_t, 256> hist{};
  for (std::size_t i = 0; i < score.size(); ++i) {
    score[i] = static_cast<std::uint8_t>((sums[i] * 2 + counts[i]) / (2 * counts[i]));  // rounded mean
    ++hist[score[i]];
  }
  Mask mask(mw, mh, 0);
  const int t = otsu_threshold(hist);
  if (t < 0) return mask;
  for (std::size_t i = 0; i < score.size(); ++i) mask.cells[i] = score[i] > t ? 1 : 0;
  return mask;
}

/// Grid tiles (anchored at the origin, partial edge tiles dropped) whose
/// tissue fraction reaches cfg.min_tissue, in row-major order. Each image
/// pixel (x, y) maps to mask cell (x / ds, y / ds); the fraction is the share
/// of the tile's pixels landing on tissue cells.
inline std::vector<TileRecord> enumerate_tiles(std::size_t width, std::size_t height, const Mask& mask,
                                               const TilingConfig& cfg) {
  cfg.validate();
  const std::size_t ds = cfg.mask_downsample;
  if (mask.width != ceil_div(width, ds) || mask.height != ceil_div(height, ds))
    throw ValidationError("mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                          ", expected " + std::to_string(ceil_div(width, ds)) + "x" +
                          std::to_string(ceil_div(height, ds)) + " for the image and downsample");
  const std::size_t tp = cfg.tile_px;
  const std::size_t cols = width / tp;
  const std::size_t rows = height / tp;
  const double area = static_cast<double>(tp) * static_cast<double>(tp);

  // overlap[k] = (cell index, number of tile pixels mapping to it) along one axis
  auto overlaps = [ds, tp](std::size_t start) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t p = start; p < start + tp;) {
      const std::size_t cell = p / ds;
      const std::size_t next = std::min((cell + 1) * ds, start + tp);
      out.emplace_back(cell, next - p);
      p = next;
    }
    return out;
  };

  std::vector<TileRecord> tiles;
  for (std::size_t ty = 0; ty < rows; ++ty) {
    const auto ys = overlaps(ty * tp);
    for (std::size_t tx = 0; tx < cols; ++tx) {
      const auto xs = overlaps(tx * tp);
      std::uint64_t tissue = 0;
      for (const auto& [my, ny] : ys)
        for (const auto& [mx, nx] : xs)
          if (mask.at(mx, my)) tissue += ny * nx;
      const double fraction = static_cast<double>(tissue) / area;
      if (fraction >= cfg.min_tissue)
        tiles.push_back({static_cast<std::uint32_t>(tx * tp), static_cast<std::uint32_t>(ty * tp), fraction});
    }
  }
  return tiles;
}

/// Area-averaging downsample by factor mpp_out / mpp_in (need not be an
/// integer). Output size is floor(size * mpp_in / mpp_out).
inline Raster resample_to_mpp(const Raster& img, double mpp_in, double mpp_out) {
  if (!(mpp_in > 0.0) || !(mpp_out > 0.0)) throw ValidationError("resample: mpp values must be positive");
  if (mpp_out < mpp_in) throw ValidationError("resample: upsampling is not supported (mpp_out < mpp_in)");
  const double f = mpp_out / mpp_in;
  if (f == 1.0) return img;
  const auto out_w = static_cast<std::size_t>(std::floor(static_cast<double>(img.width) / f + 1e-9));
  const auto out_h = static_cast<std::size_t>(std::floor(static_cast<double>(img.height) / f + 1e-9));
  Raster out(out_w, out_h, img.channels, 0);
  if (out_w == 0 || out_h == 0) return out;

  // fractional overlap of output pixel o with source pixels along one axis
  struct Weight {
    std::size_t src;
    double w;
  };
  auto axis_weights = [f](std::size_t n_out, std::size_t n_src) {
    std::vector<std::vector<Weight>> all(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double lo = static_cast<double>(o) * f;
      const double hi = lo + f;
      for (auto s = static_cast<std::size_t>(std::floor(lo)); s < n_src && static_cast<double>(s) < hi; ++s) {
        const double w = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
        if (w > 1e-12) all[o].push_back({s, w});
      }
    }
    return all;
  };
  const auto wx = axis_weights(out_w, img.width);
  const auto wy = axis_weights(out_h, img.height);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double acc = 0.0, wsum = 0.0;
        for (const auto& [sy, a] : wy[oy])
          for (const auto& [sx, b] : wx[ox]) {
            acc += a * b * img.at(sx, sy, c);
            wsum += a * b;
          }
        out.at(ox, oy, c) = static_cast<std::uint8_t>(std::clamp(std::lround(acc / wsum), 0L, 255L));
      }
  return out;
}

inline Raster crop(const Raster& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > img.width || y + h > img.height) throw ValidationError("crop outside image bounds");
  Raster out(w, h, img.channels);
  for (std::size_t r = 0; r < h; ++r) {
    const auto* src = &img.pixels[((y + r) * img.width + x) * img.channels];
    std::copy(src, src + w * img.channels, &out.pixels[r * w * img.channels]);
  }
  return out;
}

/// Reduces a full-resolution mask to the tiling resolution: a cell is
/// tissue when at least half of the pixels it covers are.
inline Mask downsample_mask(const Mask& full, std::size_t downsample) {
  const std::size_t mw = ceil_div(full.width, downsample);
  const std::size_t mh = ceil_div(full.height, downsample);
  std::vector<std::size_t> on(mw * mh, 0), all(mw * mh, 0);
  for (std::size_t y = 0; y < full.height; ++y)
    for (std::size_t x = 0; x < full.width; ++x) {
      const auto cell = (y / downsample) * mw + x / downsample;
      on[cell] += full.at(x, y) ? 1 : 0;
      ++all[cell];
    }
  Mask m(mw, mh, 0);
  for (std::size_t i = 0; i < m.cells.size(); ++i) m.cells[i] = 2 * on[i] >= all[i] ? 1 : 0;
  return m;
}

}  // namespace milbench

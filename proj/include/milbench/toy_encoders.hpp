#pragma once

// Stand-in tile encoders for end-to-end runs without a foundation model.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/rng.hpp"
#include "milbench/tiler.hpp"

namespace milbench {

/// Per-channel mean intensity in [0, 1]; gray tiles are replicated to 3 channels.
inline std::vector<float> encode_channel_means(const Raster& tile) {
  if (tile.empty()) throw ValidationError("encoder: empty tile");
  std::vector<double> sum(3, 0.0);
  for (std::size_t y = 0; y < tile.height; ++y)
    for (std::size_t x = 0; x < tile.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) sum[c] += tile.at(x, y, tile.channels == 1 ? 0 : c);
  const double n = static_cast<double>(tile.width * tile.height) * 255.0;
  return {static_cast<float>(sum[0] / n), static_cast<float>(sum[1] / n), static_cast<float>(sum[2] / n)};
}

/// Seeded Gaussian random projection of an 8x8 RGB thumbnail (block means,
/// centred to [-0.5, 0.5]) to `dim` outputs.
class RandomProjectionEncoder {
 public:
  static constexpr std::size_t kThumb = 8;
  static constexpr std::size_t kInputs = kThumb * kThumb * 3;

  RandomProjectionEncoder(std::size_t dim, std::uint64_t seed) : dim_(dim), weights_(dim * kInputs) {
    if (dim == 0) throw ValidationError("encoder: dim must be positive");
    rng::Stream stream(rng::combine(seed, rng::hash_string("randproj")));
    const double scale = 1.0 / std::sqrt(static_cast<double>(kInputs));
    for (auto& w : weights_) w = stream.normal() * scale;
  }

  std::size_t dim() const { return dim_; }

  std::vector<float> operator()(const Raster& tile) const {
    if (tile.width < kThumb || tile.height < kThumb) throw ValidationError("encoder: tile smaller than 8x8");
    std::vector<double> thumb(kInputs, 0.0), count(kThumb * kThumb, 0.0);
    for (std::size_t y = 0; y < tile.height; ++y)
      for (std::size_t x = 0; x < tile.width; ++x) {
        const std::size_t cell = (y * kThumb / tile.height) * kThumb + x * kThumb / tile.width;
        count[cell] += 1.0;
        for (std::size_t c = 0; c < 3; ++c) thumb[cell * 3 + c] += tile.at(x, y, tile.channels == 1 ? 0 : c);
      }
    for (std::size_t i = 0; i < kInputs; ++i) thumb[i] = thumb[i] / (count[i / 3] * 255.0) - 0.5;
    std::vector<float> out(dim_);
    for (std::size_t k = 0; k < dim_; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kInputs; ++i) acc += weights_[k * kInputs + i] * thumb[i];
      out[k] = static_cast<float>(acc);
    }
    return out;
  }

 private:
  std::size_t dim_;
  std::vector<double> weights_;
};

}  // namespace milbench

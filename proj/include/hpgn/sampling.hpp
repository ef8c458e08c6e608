#pragma once

// PK batch sampling, training-time augmentation and seeded stream derivation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "hpgn/data.hpp"
#include "hpgn/errors.hpp"

namespace hpgn {

// Stateless stream derivation: one independent generator per
// (seed, epoch, batch, slot), so resumed runs see the exact same draws.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                                  std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b + 0x51ed27ULL));
  h = splitmix64(h ^ (c + 0xc0ffeeULL));
  return std::mt19937_64(h);
}

namespace detail {

inline std::map<std::int64_t, std::vector<std::size_t>> group_by_label(std::span<const std::int64_t> labels) {
  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  return groups;
}

inline void draw_k(const std::vector<std::size_t>& pool, std::size_t k, std::mt19937_64& rng,
                   std::vector<std::size_t>& out) {
  if (pool.size() >= k) {
    std::vector<std::size_t> tmp = pool;
    std::shuffle(tmp.begin(), tmp.end(), rng);
    out.insert(out.end(), tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(k));
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < k; ++i) out.push_back(pool[pick(rng)]);
  }
}

}  // namespace detail

// P distinct identities with K indices each (drawn with replacement when an
// identity has fewer than K images), grouped by identity.
inline std::vector<std::size_t> pk_sample(std::span<const std::int64_t> labels, std::size_t P, std::size_t K,
                                          std::mt19937_64& rng) {
  if (P == 0 || K == 0) throw InvalidArgument("pk_sample: P and K must be positive");
  const auto groups = detail::group_by_label(labels);
  if (groups.size() < P)
    throw InvalidArgument("pk_sample: need " + std::to_string(P) + " identities, dataset has " +
                          std::to_string(groups.size()));
  std::vector<const std::vector<std::size_t>*> pools;
  for (const auto& [id, idx] : groups) pools.push_back(&idx);
  std::shuffle(pools.begin(), pools.end(), rng);
  std::vector<std::size_t> batch;
  batch.reserve(P * K);
  for (std::size_t p = 0; p < P; ++p) detail::draw_k(*pools[p], K, rng, batch);
  return batch;
}

// One epoch of PK batches: identities are shuffled and consumed P at a time
// so each appears in at most one batch; at least one batch is produced.
inline std::vector<std::vector<std::size_t>> pk_epoch(std::span<const std::int64_t> labels, std::size_t P,
                                                      std::size_t K, std::mt19937_64& rng) {
  if (P == 0 || K == 0) throw InvalidArgument("pk_epoch: P and K must be positive");
  const auto groups = detail::group_by_label(labels);
  if (groups.size() < P)
    throw InvalidArgument("pk_epoch: need " + std::to_string(P) + " identities, dataset has " +
                          std::to_string(groups.size()));
  std::vector<const std::vector<std::size_t>*> pools;
  for (const auto& [id, idx] : groups) pools.push_back(&idx);
  std::shuffle(pools.begin(), pools.end(), rng);
  const std::size_t batches = pools.size() / P;
  std::vector<std::vector<std::size_t>> out(batches);
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t p = 0; p < P; ++p) detail::draw_k(*pools[b * P + p], K, rng, out[b]);
  return out;
}

// Held in float so a checkpoint stores the exact values training used.
struct ChannelStats {
  std::array<float, 3> mean{0, 0, 0};
  std::array<float, 3> std{1, 1, 1};
};

// Per-channel mean and population standard deviation over all pixels.
inline ChannelStats compute_channel_stats(const std::vector<Image>& images) {
  ChannelStats s;
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  std::size_t count = 0;
  for (const auto& img : images) {
    require_rank(img.shape(), 3, "compute_channel_stats image");
    if (img.dim(0) != 3) throw ShapeError("compute_channel_stats: expected 3 channels");
    const std::size_t plane = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = img[c * plane + k];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += plane;
  }
  if (count == 0) throw InvalidArgument("compute_channel_stats: no pixels");
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = sum[c] / static_cast<double>(count);
    const double var = std::max(0.0, sq[c] / static_cast<double>(count) - mean * mean);
    s.mean[c] = static_cast<float>(mean);
    s.std[c] = var > 0 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
  return s;
}

struct AugmentConfig {
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;
  double erase_aspect_max = 3.33;
};

inline Image hflip(const Image& img) {
  Image out = img;
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

inline Image zscore(const Image& img, const ChannelStats& stats) {
  Image out = img;
  const std::size_t plane = img.dim(1) * img.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < plane; ++k)
      out[c * plane + k] = static_cast<float>((double{img[c * plane + k]} - stats.mean[c]) / stats.std[c]);
  return out;
}

// Erases one rectangle with the given fill; gives up after ten rejected draws,
// as rectangles that do not fit the image are redrawn.
inline void random_erase(Image& img, const AugmentConfig& cfg, const std::array<float, 3>& fill,
                         std::mt19937_64& rng) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::uniform_real_distribution<double> area_d(cfg.erase_area_min, cfg.erase_area_max);
  std::uniform_real_distribution<double> log_aspect_d(std::log(cfg.erase_aspect_min),
                                                      std::log(cfg.erase_aspect_max));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = area_d(rng) * static_cast<double>(h * w);
    const double aspect = std::exp(log_aspect_d(rng));
    const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, h - eh)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, w - ew)(rng);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = y0; y < y0 + eh; ++y)
        for (std::size_t x = x0; x < x0 + ew; ++x) img[(c * h + y) * w + x] = fill[c];
    return;
  }
}

// Flip, erase (fill = dataset channel means), then z-score normalization.
inline Image augment(const Image& img, std::mt19937_64& rng, const AugmentConfig& cfg,
                     const ChannelStats& stats) {
  require_rank(img.shape(), 3, "augment image");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image out = u(rng) < cfg.flip_prob ? hflip(img) : img;
  if (u(rng) < cfg.erase_prob) random_erase(out, cfg, stats.mean, rng);
  return zscore(out, stats);
}

}  // namespace hpgn

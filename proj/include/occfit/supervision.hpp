// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/geometry.hpp"

namespace occfit {

// Temporal supervision policy. `ratio` weights the candidate roles relative
// to the current frame: {current, earlier-window, later-window}.
struct SupervisionConfig {
  double p = 0.5;             // probability of trying a window frame at all
  double l1 = 1.0;            // ego-distance window, meters
  double l2 = 6.4;
  double ratio[3] = {1, 1, 1};
  int rays_per_step = 256;

  void validate() const {
    if (!(p >= 0.0 && p <= 1.0))
      throw ConfigError("supervision.p must be in [0, 1]");
    if (!(l1 >= 0.0 && l1 < l2))
      throw ConfigError("supervision window requires 0 <= l1 < l2");
    double total = 0;
    for (double r : ratio) {
      if (r < 0) throw ConfigError("supervision.ratio components must be >= 0");
      total += r;
    }
    if (total <= 0)
      throw ConfigError("supervision.ratio must have a positive component");
    if (rays_per_step < 1)
      throw ConfigError("supervision.rays_per_step must be >= 1");
  }
};

// Picks the frame whose views supervise frame t. With probability 1-p the
// current frame is kept. Otherwise every frame whose ego translation distance
// from t lies in [l1, l2] becomes a candidate, weighted by its role ratio
// (earlier or later than t; t itself only when l1 = 0). A non-empty
// `eligible` list (sorted ascending) restricts the candidates, so frames
// reserved for evaluation never supervise. No candidate mass means falling
// back to t.
inline size_t select_supervision_frame(size_t t, std::span<const Pose> poses,
                                       const SupervisionConfig& cfg,
                                       std::mt19937_64& rng,
                                       std::span<const size_t> eligible = {}) {
  cfg.validate();
  if (t >= poses.size())
    throw DomainError("select_supervision_frame: frame index out of range");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) >= cfg.p) return t;
  Vec3d here = poses[t].camera_center();
  std::vector<size_t> cand;
  std::vector<double> weight;
  for (size_t f = 0; f < poses.size(); ++f) {
    if (!eligible.empty() &&
        !std::binary_search(eligible.begin(), eligible.end(), f))
      continue;
    double d = norm(poses[f].camera_center() - here);
    if (d < cfg.l1 || d > cfg.l2) continue;
    double w = f == t ? cfg.ratio[0] : (f < t ? cfg.ratio[1] : cfg.ratio[2]);
    if (w <= 0) continue;
    cand.push_back(f);
    weight.push_back(w);
  }
  if (cand.empty()) return t;
  std::discrete_distribution<size_t> pick(weight.begin(), weight.end());
  return cand[pick(rng)];
}

// Draws n distinct pixels uniformly without replacement (partial
// Fisher-Yates), deterministic under a fixed engine state.
inline std::vector<Vec2d> sample_ray_batch(int width, int height, int n,
                                           std::mt19937_64& rng) {
  if (width < 1 || height < 1)
    throw DomainError("sample_ray_batch: empty image");
  size_t total = size_t(width) * size_t(height);
  if (n < 1 || size_t(n) > total)
    throw DomainError("sample_ray_batch: batch exceeds pixel count");
  std::vector<uint32_t> idx(total);
  for (size_t i = 0; i < total; ++i) idx[i] = uint32_t(i);
  std::vector<Vec2d> out;
  out.reserve(size_t(n));
  for (size_t i = 0; i < size_t(n); ++i) {
    std::uniform_int_distribution<size_t> pick(i, total - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(Vec2d{double(idx[i] % size_t(width)),
                        double(idx[i] / size_t(width))});
  }
  return out;
}

}  // namespace occfit

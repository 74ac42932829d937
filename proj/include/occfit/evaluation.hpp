// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/field.hpp"
#include "occfit/geometry.hpp"
#include "occfit/image.hpp"
#include "occfit/occgrid.hpp"

namespace occfit {

// Thresholds the field at zero over the voxel centers of `spec`. With a
// semantic head the label is the argmax class; otherwise occupied voxels get
// the single class 1.
template <class View>
OccGrid extract_occupancy(const View& view, const GridSpec& spec) {
  if (!view.box().contains(spec.box.min) || !view.box().contains(spec.box.max))
    throw DomainError("extract_occupancy: requested box exceeds field box");
  OccGrid grid;
  grid.spec = spec;
  int nc = view.sem_channels();
  grid.num_classes = nc > 0 ? nc : 1;
  grid.labels.assign(spec.cells(), 0);
  std::vector<double> logits(size_t(std::max(nc, 1)));
  for (int i = 0; i < spec.nx; ++i) {
    for (int j = 0; j < spec.ny; ++j) {
      for (int k = 0; k < spec.nz; ++k) {
        Vec3d c = spec.center(i, j, k);
        if (!(view.sdf_at(c) <= 0.0)) continue;
        uint8_t label = 1;
        if (nc > 0) {
          view.sem_at(c, logits.data());
          label = uint8_t(
              1 + (std::max_element(logits.begin(), logits.begin() + nc) -
                   logits.begin()));
        }
        grid.labels[spec.index(i, j, k)] = label;
      }
    }
  }
  return grid;
}

struct OccMetrics {
  double iou = 0;
  double precision = 0;
  double recall = 0;
  size_t tp = 0, fp = 0, fn = 0;
  bool degenerate = false;  // some denominator was empty and reported as 0
};

namespace detail {

inline void check_grids_match(const OccGrid& pred, const OccGrid& gt) {
  if (!(pred.spec == gt.spec))
    throw DomainError("occupancy metrics: grid specs differ");
  if (pred.labels.size() != pred.spec.cells() ||
      gt.labels.size() != gt.spec.cells())
    throw DomainError("occupancy metrics: label size mismatch");
  if (!gt.mask.empty() && gt.mask.size() != gt.spec.cells())
    throw DomainError("occupancy metrics: mask size mismatch");
}

}  // namespace detail

// Binary occupied-vs-free counts. The ground-truth visibility mask, when
// present and enabled, restricts every count on both grids.
inline OccMetrics occ_metrics(const OccGrid& pred, const OccGrid& gt,
                              bool use_mask = true) {
  detail::check_grids_match(pred, gt);
  OccMetrics m;
  for (size_t c = 0; c < gt.labels.size(); ++c) {
    if (use_mask && !gt.mask.empty() && !gt.mask[c]) continue;
    bool p = pred.occupied(c), g = gt.occupied(c);
    m.tp += p && g;
    m.fp += p && !g;
    m.fn += !p && g;
  }
  size_t u = m.tp + m.fp + m.fn;
  m.degenerate = u == 0 || m.tp + m.fp == 0 || m.tp + m.fn == 0;
  m.iou = u ? double(m.tp) / double(u) : 0.0;
  m.precision = m.tp + m.fp ? double(m.tp) / double(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? double(m.tp) / double(m.tp + m.fn) : 0.0;
  return m;
}

// Mean IoU over all `classes` semantic classes (free excluded). A class
// absent from both grids still divides the mean, contributing zero.
inline double miou(const OccGrid& pred, const OccGrid& gt, int classes,
                   bool use_mask = true) {
  detail::check_grids_match(pred, gt);
  if (classes < 1) throw DomainError("miou: class count must be >= 1");
  double total = 0;
  for (int cls = 1; cls <= classes; ++cls) {
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t c = 0; c < gt.labels.size(); ++c) {
      if (use_mask && !gt.mask.empty() && !gt.mask[c]) continue;
      bool p = pred.labels[c] == cls, g = gt.labels[c] == cls;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    size_t u = tp + fp + fn;
    total += u ? double(tp) / double(u) : 0.0;
  }
  return total / double(classes);
}

struct DepthMetrics {
  double abs_rel = 0;
  double sq_rel = 0;
  double rmse = 0;
  double rmse_log = 0;
  double d1 = 0, d2 = 0, d3 = 0;
  size_t valid_count = 0;
};

struct DepthRange {
  double lo = 0.1;
  double hi = 80.0;
};

namespace detail {

inline void check_depth_pair(const Image& pred, const Image& gt) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw DomainError("depth maps have different shapes");
  if (pred.channels != 1 || gt.channels != 1)
    throw DomainError("depth maps must be single channel");
}

inline bool depth_valid(float g, const DepthRange& r) {
  return std::isfinite(g) && g >= r.lo && g <= r.hi;
}

}  // namespace detail

inline DepthMetrics depth_metrics(const Image& pred, const Image& gt,
                                  const DepthRange& range = {}) {
  detail::check_depth_pair(pred, gt);
  DepthMetrics m;
  double abs_rel = 0, sq_rel = 0, se = 0, se_log = 0;
  size_t d1 = 0, d2 = 0, d3 = 0;
  for (size_t i = 0; i < gt.data.size(); ++i) {
    double g = gt.data[i];
    if (!detail::depth_valid(float(g), range)) continue;
    double p = pred.data[i];
    ++m.valid_count;
    abs_rel += std::abs(p - g) / g;
    sq_rel += (p - g) * (p - g) / g;
    se += (p - g) * (p - g);
    se_log += (std::log(p) - std::log(g)) * (std::log(p) - std::log(g));
    double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
  }
  if (m.valid_count == 0)
    throw DomainError("depth_metrics: no valid ground-truth pixels");
  double n = double(m.valid_count);
  m.abs_rel = abs_rel / n;
  m.sq_rel = sq_rel / n;
  m.rmse = std::sqrt(se / n);
  m.rmse_log = std::sqrt(se_log / n);
  m.d1 = double(d1) / n;
  m.d2 = double(d2) / n;
  m.d3 = double(d3) / n;
  return m;
}

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of empty set");
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2) return hi;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid) - 1,
                   v.begin() + std::ptrdiff_t(mid));
  return 0.5 * (v[mid - 1] + hi);
}

}  // namespace detail

// Rescales scale-ambiguous predictions by the ratio of medians over the
// pixels the ground truth validates.
inline Image median_scale(const Image& pred, const Image& gt,
                          const DepthRange& range = {}) {
  detail::check_depth_pair(pred, gt);
  std::vector<double> pv, gv;
  for (size_t i = 0; i < gt.data.size(); ++i) {
    if (!detail::depth_valid(gt.data[i], range)) continue;
    pv.push_back(pred.data[i]);
    gv.push_back(gt.data[i]);
  }
  if (pv.empty()) throw DomainError("median_scale: no valid pixels");
  double mp = detail::median_of(pv);
  if (mp == 0.0) throw NumericError("median_scale: predicted median is zero");
  double scale = detail::median_of(gv) / mp;
  Image out = pred;
  for (float& d : out.data) d = float(d * scale);
  return out;
}

// Depth evaluation runs at one-half input resolution: predictions render
// through halved intrinsics while the ground truth is subsampled with
// stride 2, so half-res pixel (i, j) sees the ray of full-res pixel (2i, 2j).
inline Intrinsics half_intrinsics(const Intrinsics& intr) {
  if (intr.width < 2 || intr.height < 2)
    throw DomainError("half_intrinsics: image too small");
  Intrinsics h = intr;
  h.fx = intr.fx / 2.0;
  h.fy = intr.fy / 2.0;
  h.cx = intr.cx / 2.0;
  h.cy = intr.cy / 2.0;
  h.width = intr.width / 2;
  h.height = intr.height / 2;
  return h;
}

inline Image stride2(const Image& img) {
  Image out;
  out.width = img.width / 2;
  out.height = img.height / 2;
  out.channels = img.channels;
  if (out.width < 1 || out.height < 1)
    throw DomainError("stride2: image too small");
  out.data.resize(size_t(out.width) * size_t(out.height) *
                  size_t(out.channels));
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < out.channels; ++c)
        out.at(x, y, c) = img.at(2 * x, 2 * y, c);
  return out;
}

}  // namespace occfit

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "occfit/autodiff.hpp"
#include "occfit/common.hpp"
#include "occfit/field.hpp"
#include "occfit/geometry.hpp"
#include "occfit/image.hpp"
#include "occfit/renderer.hpp"

namespace occfit {

// ---------------------------------------------------------------------------
// Scalar helpers shared by the value path (double) and the tape path (Var).

inline double constant_like(double, double c) { return c; }
template <class Real>
Var<Real> constant_like(const Var<Real>& ref, double c) {
  return {ref.tape, ref.tape->constant(Real(c))};
}

inline double clamp_coord(double u, double lo, double hi) {
  return std::min(std::max(u, lo), hi);
}
// Value-level clamp: beyond the bound the result is the constant bound, so the
// derivative is zero there, matching the clamp subgradient.
template <class Real>
Var<Real> clamp_coord(const Var<Real>& u, double lo, double hi) {
  double v = scalar_value(u);
  if (v < lo) return constant_like(u, lo);
  if (v > hi) return constant_like(u, hi);
  return u;
}

// ---------------------------------------------------------------------------
// Photometric dissimilarity between pixel neighborhoods.

// Mean absolute difference over three channels.
inline double photometric(const Vec3d& a, const Vec3d& b) {
  return (std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z)) /
         3.0;
}
template <class S>
S photometric_to(const Vec3<S>& a, const Vec3d& b) {
  using std::abs;
  return (abs(a.x - b.x) + abs(a.y - b.y) + abs(a.z - b.z)) / 3.0;
}

namespace detail {

// 3x3 patch statistics for the structural term. Offsets are clamped to the
// image so border pixels reuse their nearest neighbors.
template <class S>
S ssim_dissimilarity(const Image& target, const Vec2d& x, const Image& source,
                     const Vec2<S>& xs) {
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  constexpr int kN = 9;
  double tp[kN][3];
  S sp[kN][3];
  int n = 0;
  for (int dj = -1; dj <= 1; ++dj) {
    for (int di = -1; di <= 1; ++di) {
      double tu = clamp_coord(x.x + di, 0.0, target.width - 1.0);
      double tv = clamp_coord(x.y + dj, 0.0, target.height - 1.0);
      sample_bilinear(target, tu, tv, tp[n]);
      S su = clamp_coord(xs.x + double(di), 0.0, source.width - 1.0);
      S sv = clamp_coord(xs.y + double(dj), 0.0, source.height - 1.0);
      sample_bilinear(source, su, sv, sp[n]);
      ++n;
    }
  }
  S accum = constant_like(xs.x, 0.0);
  for (int c = 0; c < 3; ++c) {
    double mt = 0;
    for (int i = 0; i < kN; ++i) mt += tp[i][c];
    mt /= kN;
    S ms = sp[0][c];
    for (int i = 1; i < kN; ++i) ms = ms + sp[i][c];
    ms = ms / double(kN);
    double vt = 0;
    for (int i = 0; i < kN; ++i) vt += (tp[i][c] - mt) * (tp[i][c] - mt);
    vt /= kN;
    S vs = (sp[0][c] - ms) * (sp[0][c] - ms);
    S cov = (sp[0][c] - ms) * (tp[0][c] - mt);
    for (int i = 1; i < kN; ++i) {
      vs = vs + (sp[i][c] - ms) * (sp[i][c] - ms);
      cov = cov + (sp[i][c] - ms) * (tp[i][c] - mt);
    }
    vs = vs / double(kN);
    cov = cov / double(kN);
    S ssim = ((2.0 * mt) * ms + kC1) * (2.0 * cov + kC2) /
             ((mt * mt + ms * ms + kC1) * (vt + vs + kC2));
    accum = accum + (1.0 - ssim) / 2.0;
  }
  return accum / 3.0;
}

}  // namespace detail

// Dissimilarity between the target pixel x and the source location xs. Plain
// mean absolute difference by default; `ssim_mix` blends 0.85 of a 3x3
// structural term with 0.15 of the absolute difference.
template <class S>
S sampled_dissimilarity(const Image& target, const Vec2d& x,
                        const Image& source, const Vec2<S>& xs,
                        bool ssim_mix = false) {
  double tc[3];
  sample_bilinear(target, x.x, x.y, tc);
  S sc[3];
  sample_bilinear(source, xs.x, xs.y, sc);
  S l1 = photometric_to(Vec3<S>{sc[0], sc[1], sc[2]},
                        Vec3d{tc[0], tc[1], tc[2]});
  if (!ssim_mix) return l1;
  S ssim = detail::ssim_dissimilarity(target, x, source, xs);
  return 0.85 * ssim + 0.15 * l1;
}

// ---------------------------------------------------------------------------
// Reprojection loss at a single depth. The depth enters the warp, so the
// gradient flows through the backprojection and the bilinear sample weights.

template <class S>
struct Masked {
  S value{};
  bool valid = false;  // false when the warp leaves the source view
};

template <class S>
Masked<S> l_rpj(const Image& target_img, const Camera& target_cam,
                const Image& source_img, const Camera& source_cam,
                const Vec2d& x, const S& zdepth, bool ssim_mix = false) {
  Projection<S> pr = warp_pixel(target_cam, source_cam, x, zdepth);
  if (!pr.valid) return {};
  Masked<S> out;
  out.value =
      sampled_dissimilarity(target_img, x, source_img, pr.pixel, ssim_mix);
  out.valid = true;
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view photometric loss over depth proposals. Each rendering weight
// pairs with the dissimilarity at its attribution point and the residual
// transmittance pairs with the far point. The dissimilarities are captured as
// constants: the gradient flows only through the weights.

struct SourceRef {
  const Image* image = nullptr;
  const Camera* cam = nullptr;
};

struct MvsOptions {
  bool ssim_mix = false;
};

template <class S>
struct MvsOutcome {
  S loss{};
  bool valid = false;
  size_t kept = 0;   // proposals that landed inside the source view
  size_t total = 0;  // weight proposals plus the far proposal
};

template <class S>
MvsOutcome<S> l_mvs(const Image& target_img, const Vec2d& x,
                    const SourceRef& source, std::span<const S> weights,
                    const S& residual, std::span<const Vec3d> proposal_points,
                    const Vec3d& far_point, const MvsOptions& opt = {}) {
  if (weights.size() != proposal_points.size())
    throw DomainError("l_mvs: weight/proposal count mismatch");
  MvsOutcome<S> out;
  out.total = weights.size() + 1;
  std::vector<S> kept_weights;
  std::vector<double> dissim;
  kept_weights.reserve(out.total);
  dissim.reserve(out.total);
  for (size_t m = 0; m < proposal_points.size(); ++m) {
    Projection<double> pr = try_project(*source.cam, proposal_points[m]);
    if (!pr.valid) continue;
    kept_weights.push_back(weights[m]);
    dissim.push_back(sampled_dissimilarity(target_img, x, *source.image,
                                           pr.pixel, opt.ssim_mix));
  }
  Projection<double> far = try_project(*source.cam, far_point);
  if (far.valid) {
    kept_weights.push_back(residual);
    dissim.push_back(sampled_dissimilarity(target_img, x, *source.image,
                                           far.pixel, opt.ssim_mix));
  }
  out.kept = kept_weights.size();
  if (out.kept * 2 < out.total) return out;  // too few survivors, exclude ray
  std::vector<double> ones(out.kept, 1.0);
  std::span<const S> kw(kept_weights);
  S numer = weighted_sum(kw, std::span<const double>(dissim), 0.0);
  S denom = weighted_sum(kw, std::span<const double>(ones), 0.0);
  if (std::abs(scalar_value(denom)) < 1e-12) return out;  // all mass dropped
  out.loss = numer / denom;
  out.valid = true;
  return out;
}

// ---------------------------------------------------------------------------
// Temporal depth loss: per-source multi-view loss, minimum over sources, with
// a stationary-pixel gate. A gated pixel stays in the batch denominator but
// contributes exactly zero.

template <class S>
struct DepOutcome {
  S loss{};
  bool valid = false;   // pixel participates in the batch mean
  bool masked = false;  // participates with an exact zero contribution
};

namespace detail {

// Gate test shared by both depth-loss variants: a pixel is stationary when no
// source improves on the unwarped identity dissimilarity at the rendered
// depth. Sources whose rendered-depth warp leaves the view are skipped; if
// none remains the gate stays open.
inline bool automask_gate(const Image& target_img, const Camera& target_cam,
                          const Vec2d& x, std::span<const SourceRef> sources,
                          double rendered_zdepth, bool ssim_mix) {
  double min_identity = std::numeric_limits<double>::infinity();
  double min_warped = std::numeric_limits<double>::infinity();
  bool any_warped = false;
  for (const SourceRef& s : sources) {
    min_identity = std::min(
        min_identity,
        sampled_dissimilarity(target_img, x, *s.image, x, ssim_mix));
    Projection<double> pr =
        warp_pixel(target_cam, *s.cam, x, rendered_zdepth);
    if (!pr.valid) continue;
    any_warped = true;
    min_warped = std::min(
        min_warped,
        sampled_dissimilarity(target_img, x, *s.image, pr.pixel, ssim_mix));
  }
  return any_warped && min_identity <= min_warped;
}

}  // namespace detail

template <class S>
DepOutcome<S> l_dep(const Image& target_img, const Camera& target_cam,
                    const Vec2d& x, std::span<const SourceRef> sources,
                    std::span<const S> weights, const S& residual,
                    std::span<const Vec3d> proposal_points,
                    const Vec3d& far_point, double rendered_zdepth,
                    const MvsOptions& opt = {}) {
  if (sources.empty()) throw DomainError("l_dep: no source views");
  DepOutcome<S> out;
  bool have = false;
  S best{};
  for (const SourceRef& s : sources) {
    MvsOutcome<S> mv = l_mvs(target_img, x, s, weights, residual,
                             proposal_points, far_point, opt);
    if (!mv.valid) continue;
    best = have ? vmin(best, mv.loss) : mv.loss;
    have = true;
  }
  if (!have) return out;
  out.valid = true;
  out.masked = detail::automask_gate(target_img, target_cam, x, sources,
                                     rendered_zdepth, opt.ssim_mix);
  if (!out.masked) out.loss = best;
  return out;
}

// Ablation variant: single reprojection at the rendered depth instead of the
// proposal sweep. The gradient reaches the field only through the depth.
template <class S>
DepOutcome<S> l_dep_rpj(const Image& target_img, const Camera& target_cam,
                        const Vec2d& x, std::span<const SourceRef> sources,
                        const S& rendered_zdepth, const MvsOptions& opt = {}) {
  if (sources.empty()) throw DomainError("l_dep_rpj: no source views");
  DepOutcome<S> out;
  bool have = false;
  S best{};
  for (const SourceRef& s : sources) {
    Masked<S> r = l_rpj(target_img, target_cam, *s.image, *s.cam, x,
                        rendered_zdepth, opt.ssim_mix);
    if (!r.valid) continue;
    best = have ? vmin(best, r.value) : r.value;
    have = true;
  }
  if (!have) return out;
  out.valid = true;
  out.masked = detail::automask_gate(target_img, target_cam, x, sources,
                                     scalar_value(rendered_zdepth),
                                     opt.ssim_mix);
  if (!out.masked) out.loss = best;
  return out;
}

// ---------------------------------------------------------------------------
// Field regularizers. Each takes a view so the same code runs on plain values
// and on the tape.

// Mean |  |grad s| - 1 | over the given points.
template <class View>
auto l_eikonal(const View& view,
               std::span<const Vec3d> points) -> decltype(view.sharpness()) {
  using std::abs;
  using std::sqrt;
  if (points.empty()) throw DomainError("l_eikonal: empty point batch");
  using S = decltype(view.sharpness());
  S sum = constant_like(view.sharpness(), 0.0);
  for (const Vec3d& p : points) {
    auto g = view.gradient_at(p);
    S n = sqrt(g.x * g.x + g.y * g.y + g.z * g.z);
    sum = sum + abs(n - 1.0);
  }
  return sum / double(points.size());
}

// Mean elementwise 1-norm of the SDF Hessian, estimated by second central
// differences one voxel wide at voxel centers. Boundary voxels are skipped
// because their stencil would leave the grid.
template <class View>
auto l_hessian(const View& view,
               std::span<const size_t> cells) -> decltype(view.sharpness()) {
  using std::abs;
  const GridSpec& spec = view.grid();
  Vec3d v = spec.voxel_size();
  using S = decltype(view.sharpness());
  S sum = constant_like(view.sharpness(), 0.0);
  size_t n = 0;
  for (size_t cell : cells) {
    if (cell >= spec.cells()) throw DomainError("l_hessian: cell out of range");
    int k = int(cell % size_t(spec.nz));
    int j = int((cell / size_t(spec.nz)) % size_t(spec.ny));
    int i = int(cell / (size_t(spec.nz) * size_t(spec.ny)));
    if (i < 1 || i >= spec.nx - 1 || j < 1 || j >= spec.ny - 1 || k < 1 ||
        k >= spec.nz - 1)
      continue;  // stencil would cross the boundary
    Vec3d p = spec.center(i, j, k);
    std::array<Vec3d, 3> e = {Vec3d{v.x, 0, 0}, Vec3d{0, v.y, 0},
                              Vec3d{0, 0, v.z}};
    std::array<double, 3> step = {v.x, v.y, v.z};
    S s0 = view.sdf_at(p);
    S norm1 = constant_like(s0, 0.0);
    for (int a = 0; a < 3; ++a) {
      S sp = view.sdf_at(p + e[size_t(a)]);
      S sm = view.sdf_at(p - e[size_t(a)]);
      S haa = (sp - 2.0 * s0 + sm) / (step[size_t(a)] * step[size_t(a)]);
      norm1 = norm1 + abs(haa);
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        S spp = view.sdf_at(p + e[size_t(a)] + e[size_t(b)]);
        S spm = view.sdf_at(p + e[size_t(a)] - e[size_t(b)]);
        S smp = view.sdf_at(p - e[size_t(a)] + e[size_t(b)]);
        S smm = view.sdf_at(p - e[size_t(a)] - e[size_t(b)]);
        S hab = (spp - spm - smp + smm) /
                (4.0 * step[size_t(a)] * step[size_t(b)]);
        norm1 = norm1 + 2.0 * abs(hab);  // symmetric pair counted twice
      }
    }
    sum = sum + norm1;
    ++n;
  }
  if (n == 0) throw DomainError("l_hessian: no interior voxels in batch");
  return sum / double(n);
}

// Mean max(-s, 0): free space costs nothing, matter is taxed.
template <class View>
auto l_sparsity(const View& view,
                std::span<const Vec3d> points) -> decltype(view.sharpness()) {
  if (points.empty()) throw DomainError("l_sparsity: empty point batch");
  using S = decltype(view.sharpness());
  S sum = constant_like(view.sharpness(), 0.0);
  for (const Vec3d& p : points) sum = sum + relu(-view.sdf_at(p));
  return sum / double(points.size());
}

// ---------------------------------------------------------------------------
// Edge-aware smoothness on a rendered depth patch. Disparity (inverse depth)
// is normalized by its patch mean, then forward differences are damped by the
// image gradient.

template <class S>
S l_edge(std::span<const S> depth, const Image& rgb) {
  using std::abs;
  using std::exp;
  const int w = rgb.width, h = rgb.height;
  if (w < 2 || h < 2) throw DomainError("l_edge: patch must be at least 2x2");
  if (depth.size() != size_t(w) * size_t(h))
    throw DomainError("l_edge: depth patch size mismatch");
  std::vector<S> inv;
  inv.reserve(depth.size());
  for (const S& d : depth) {
    if (scalar_value(d) <= 0.0)
      throw DomainError("l_edge: depth must be positive");
    inv.push_back(1.0 / d);
  }
  S mean_inv = inv[0];
  for (size_t i = 1; i < inv.size(); ++i) mean_inv = mean_inv + inv[i];
  mean_inv = mean_inv / double(inv.size());
  auto lum = [&](int px, int py) {
    double s = 0;
    for (int c = 0; c < rgb.channels; ++c) s += rgb.at(px, py, c);
    return s / rgb.channels;
  };
  S sum = constant_like(depth[0], 0.0);
  size_t edges = 0;
  for (int y = 0; y < h; ++y) {
    for (int px = 0; px + 1 < w; ++px) {
      S dd = inv[size_t(y) * size_t(w) + size_t(px) + 1] / mean_inv -
             inv[size_t(y) * size_t(w) + size_t(px)] / mean_inv;
      sum = sum + abs(dd) * std::exp(-std::abs(lum(px + 1, y) - lum(px, y)));
      ++edges;
    }
  }
  for (int y = 0; y + 1 < h; ++y) {
    for (int px = 0; px < w; ++px) {
      S dd = inv[size_t(y + 1) * size_t(w) + size_t(px)] / mean_inv -
             inv[size_t(y) * size_t(w) + size_t(px)] / mean_inv;
      sum = sum + abs(dd) * std::exp(-std::abs(lum(px, y + 1) - lum(px, y)));
      ++edges;
    }
  }
  return sum / double(edges);
}

// ---------------------------------------------------------------------------
// Cross entropy on rendered class probabilities, clamped away from zero.

template <class S>
S l_semantic(std::span<const S> probs, int label) {
  using std::log;
  if (label < 0 || size_t(label) >= probs.size())
    throw DomainError("l_semantic: label out of range");
  S p = vmax(probs[size_t(label)], constant_like(probs[size_t(label)], 1e-8));
  return -log(p);
}

// ---------------------------------------------------------------------------
// Loss weighting and reporting.

enum class TaskProfile { kDepth, kNovelDepth, kOccupancy };

inline TaskProfile parse_task_profile(const std::string& s) {
  if (s == "depth") return TaskProfile::kDepth;
  if (s == "novel-depth") return TaskProfile::kNovelDepth;
  if (s == "occupancy") return TaskProfile::kOccupancy;
  throw ConfigError("unknown task profile: " + s);
}

inline const char* task_profile_name(TaskProfile p) {
  switch (p) {
    case TaskProfile::kDepth: return "depth";
    case TaskProfile::kNovelDepth: return "novel-depth";
    default: return "occupancy";
  }
}

struct LossWeights {
  double lambda_rgb = 0.1;
  double lambda_eik = 0.1;
  double lambda_hessian = 0.1;
  double lambda_sparsity = 0.001;
  double lambda_edge = 0.01;
  double lambda_semantic = 0.1;
  bool use_dep = true;
  bool use_rgb = false;
  bool use_eik = true;
  bool use_hessian = false;
  bool use_sparsity = false;
  bool use_edge = false;
  bool use_semantic = false;
  bool rpj_only = false;  // ablation: reprojection at the rendered depth
  bool ssim_mix = false;  // 0.85 structural + 0.15 absolute dissimilarity

  static LossWeights for_profile(TaskProfile p) {
    LossWeights w;
    switch (p) {
      case TaskProfile::kDepth:
        w.use_edge = true;
        break;
      case TaskProfile::kNovelDepth:
        w.use_rgb = true;
        break;
      case TaskProfile::kOccupancy:
        w.use_rgb = true;
        w.use_hessian = true;
        w.use_sparsity = true;
        break;
    }
    return w;
  }
};

struct TermStat {
  double sum = 0;
  size_t count = 0;
  double mean() const { return count ? sum / double(count) : 0.0; }
};

struct LossReport {
  TermStat dep, rgb, eik, hessian, sparsity, edge, semantic;
  double total = 0;
  double valid_ray_fraction = 1.0;
};

// Applies the weights to the per-term means and checks for NaN, naming the
// offending term.
inline double combine_total(LossReport& r, const LossWeights& w) {
  struct Item {
    const char* name;
    bool on;
    double mean;
    double lambda;
  };
  const Item items[] = {
      {"dep", w.use_dep, r.dep.mean(), 1.0},
      {"rgb", w.use_rgb, r.rgb.mean(), w.lambda_rgb},
      {"eikonal", w.use_eik, r.eik.mean(), w.lambda_eik},
      {"hessian", w.use_hessian, r.hessian.mean(), w.lambda_hessian},
      {"sparsity", w.use_sparsity, r.sparsity.mean(), w.lambda_sparsity},
      {"edge", w.use_edge, r.edge.mean(), w.lambda_edge},
      {"semantic", w.use_semantic, r.semantic.mean(), w.lambda_semantic},
  };
  double total = 0;
  for (const Item& it : items) {
    if (!it.on) continue;
    if (std::isnan(it.mean))
      throw NumericError(std::string("loss term ") + it.name + " is NaN");
    total += it.lambda * it.mean;
  }
  r.total = total;
  return total;
}

}  // namespace occfit

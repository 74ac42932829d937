// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "occfit/autodiff.hpp"
#include "occfit/common.hpp"
#include "occfit/field.hpp"
#include "occfit/geometry.hpp"

namespace occfit {

// Cell-centered sample depths: t_i = t_near + (i + 0.5) * (t_far - t_near) / m.
inline std::vector<double> sample_ray_points(double t_near, double t_far, int m) {
  if (m < 2) throw DomainError("need at least 2 samples per ray");
  if (!(t_far > t_near) || t_near < 0)
    throw DomainError("sample_ray_points: bad depth range");
  std::vector<double> d(static_cast<size_t>(m));
  double step = (t_far - t_near) / m;
  for (int i = 0; i < m; ++i) d[size_t(i)] = t_near + (i + 0.5) * step;
  return d;
}

// Discrete opacity between consecutive SDF samples:
//   alpha_i = max((phi(a*s_i) - phi(a*s_{i+1})) / phi(a*s_i), 0)
// with phi the logistic sigmoid and a the (learnable) sharpness. A fully
// saturated phi of 0 denotes an already opaque segment and contributes
// alpha = 0 without gradient rather than dividing by zero.
// Below this the segment is already opaque to ~1e-12 transmittance; emitting
// alpha = 0 there avoids dividing by a vanishing phi.
constexpr double kPhiFloor = 1e-12;

template <class S>
std::vector<S> alphas_from_sdf(std::span<const S> sdf, const S& sharpness) {
  if (sdf.size() < 2) throw DomainError("alphas_from_sdf needs >= 2 samples");
  std::vector<S> alphas;
  alphas.reserve(sdf.size() - 1);
  std::vector<S> phi;
  phi.reserve(sdf.size());
  for (const S& s : sdf) phi.push_back(sigmoid(sharpness * s));
  for (size_t i = 0; i + 1 < sdf.size(); ++i) {
    if (scalar_value(phi[i]) <= kPhiFloor) {
      alphas.push_back(phi[i] - phi[i]);  // exact zero of matching type
      continue;
    }
    alphas.push_back(relu((phi[i] - phi[i + 1]) / phi[i]));
  }
  return alphas;
}

template <class S>
struct WeightChain {
  std::vector<S> weights;  // one per opacity
  S residual;              // remaining transmittance, equals 1 - sum(weights)
};

template <class S>
WeightChain<S> weights_from_alphas(std::span<const S> alphas) {
  if (alphas.empty()) throw DomainError("weights_from_alphas: empty input");
  WeightChain<S> out;
  out.weights.reserve(alphas.size());
  out.weights.push_back(alphas[0]);
  S t = 1.0 - alphas[0];
  for (size_t i = 1; i < alphas.size(); ++i) {
    S w = t * alphas[i];
    out.weights.push_back(w);
    t = t - w;  // transmittance update keeps residual = 1 - sum(w) exact
  }
  out.residual = t;
  return out;
}

// Fused reductions; the tape variants emit a single node.
inline double weighted_sum(std::span<const double> xs,
                           std::span<const double> coefs, double bias) {
  double s = bias;
  for (size_t i = 0; i < xs.size(); ++i) s += coefs[i] * xs[i];
  return s;
}
template <class Real>
Var<Real> weighted_sum(std::span<const Var<Real>> xs,
                       std::span<const double> coefs, double bias) {
  if (xs.empty()) throw DomainError("weighted_sum: empty input");
  thread_local std::vector<NodeId> ids;
  thread_local std::vector<Real> cs;
  ids.clear();
  cs.clear();
  for (size_t i = 0; i < xs.size(); ++i) {
    ids.push_back(xs[i].id);
    cs.push_back(Real(coefs[i]));
  }
  Tape<Real>* tape = xs[0].tape;
  return {tape, tape->lincomb(ids, cs, Real(bias))};
}

inline double vdot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
template <class Real>
Var<Real> vdot(std::span<const Var<Real>> a, std::span<const Var<Real>> b) {
  if (a.empty()) throw DomainError("vdot: empty input");
  thread_local std::vector<NodeId> xs, ys;
  xs.clear();
  ys.clear();
  for (size_t i = 0; i < a.size(); ++i) {
    xs.push_back(a[i].id);
    ys.push_back(b[i].id);
  }
  Tape<Real>* tape = a[0].tape;
  return {tape, tape->dot(xs, ys)};
}

// Max-shifted softmax; the shift is a forward-time constant, which leaves the
// value and the gradient exact because softmax is shift invariant.
template <class S>
void softmax(std::span<const S> logits, S* out) {
  using std::exp;
  double m = scalar_value(logits[0]);
  for (const S& l : logits) m = std::max(m, scalar_value(l));
  for (size_t i = 0; i < logits.size(); ++i) out[i] = exp(logits[i] - m);
  S total = out[0];
  for (size_t i = 1; i < logits.size(); ++i) total = total + out[i];
  for (size_t i = 0; i < logits.size(); ++i) out[i] = out[i] / total;
}
inline void softmax(std::span<const double> logits, double* out) {
  double m = logits[0];
  for (double l : logits) m = std::max(m, l);
  double total = 0;
  for (size_t i = 0; i < logits.size(); ++i) total += (out[i] = std::exp(logits[i] - m));
  for (size_t i = 0; i < logits.size(); ++i) out[i] /= total;
}

struct RenderWant {
  bool color = true;
  bool semantics = false;
};

// Everything one ray pass produces. Opacity lives between consecutive SDF
// samples, so the mass of weight i is attributed to the interval midpoint;
// that keeps the rendered depth of a sharp surface within half a sample
// spacing of the crossing. The residual transmittance pairs with the
// learnable background color and the far depth.
template <class S>
struct RayRender {
  double t_near = 0, t_far = 0;
  std::vector<double> sample_depths;  // m sdf sample depths
  std::vector<Vec3d> sample_points;
  std::vector<S> sdf;                 // m values
  std::vector<S> alphas;              // m-1
  std::vector<S> weights;             // m-1
  S residual;
  std::vector<double> attr_depths;    // m-1 interval midpoints
  std::vector<Vec3d> attr_points;
  Vec3d far_point;
  S depth;                            // expected depth along the ray
  Vec3<S> color;
  std::vector<S> sem_probs;

  void reset() {
    sample_depths.clear();
    sample_points.clear();
    sdf.clear();
    alphas.clear();
    weights.clear();
    attr_depths.clear();
    attr_points.clear();
    sem_probs.clear();
  }
};

template <class View>
void render_ray(const View& view, const Ray& ray, int m,
                const typename View::S& sharpness, const RenderWant& want,
                RayRender<typename View::S>& out) {
  using S = typename View::S;
  RaySpan span = ray_aabb(ray, view.box());
  if (!span.hit) throw DomainError("render_ray: ray misses the field box");
  out.reset();
  out.t_near = span.t_near;
  out.t_far = span.t_far;
  out.sample_depths = sample_ray_points(span.t_near, span.t_far, m);
  for (double d : out.sample_depths) {
    out.sample_points.push_back(ray.origin + ray.dir * d);
    out.sdf.push_back(view.sdf_at(out.sample_points.back()));
  }
  out.alphas = alphas_from_sdf<S>(out.sdf, sharpness);
  WeightChain<S> chain = weights_from_alphas<S>(out.alphas);
  out.weights = std::move(chain.weights);
  out.residual = chain.residual;

  for (size_t i = 0; i + 1 < out.sample_depths.size(); ++i) {
    double mid = 0.5 * (out.sample_depths[i] + out.sample_depths[i + 1]);
    out.attr_depths.push_back(mid);
    out.attr_points.push_back(ray.origin + ray.dir * mid);
  }
  out.far_point = ray.origin + ray.dir * span.t_far;

  // depth = sum w_i * mid_i + residual * t_far, fused with the residual term
  {
    std::vector<S> vals(out.weights.begin(), out.weights.end());
    vals.push_back(out.residual);
    std::vector<double> cs(out.attr_depths.begin(), out.attr_depths.end());
    cs.push_back(span.t_far);
    out.depth = weighted_sum(std::span<const S>(vals), std::span<const double>(cs), 0.0);
  }

  if (want.color) {
    std::array<std::vector<S>, 3> ch;
    for (auto& v : ch) v.reserve(out.attr_points.size());
    for (const Vec3d& p : out.attr_points) {
      Vec3<S> col = view.color_at(p);
      for (int c = 0; c < 3; ++c) ch[size_t(c)].push_back(col[c]);
    }
    Vec3<S> bgc = view.background();
    for (int c = 0; c < 3; ++c)
      out.color[c] =
          vdot(std::span<const S>(out.weights), std::span<const S>(ch[size_t(c)])) +
          out.residual * bgc[c];
  }

  if (want.semantics && view.sem_channels() > 0) {
    int nc = view.sem_channels();
    std::vector<S> logits(static_cast<size_t>(nc));
    std::vector<S> probs(static_cast<size_t>(nc));
    std::vector<std::vector<S>> per_class;
    per_class.resize(size_t(nc));
    for (const Vec3d& p : out.attr_points) {
      view.sem_at(p, logits.data());
      softmax<S>(std::span<const S>(logits), probs.data());
      for (int c = 0; c < nc; ++c) per_class[size_t(c)].push_back(probs[size_t(c)]);
    }
    // residual mass spreads uniformly; renormalize against float drift
    out.sem_probs.resize(size_t(nc));
    for (int c = 0; c < nc; ++c)
      out.sem_probs[size_t(c)] =
          vdot(std::span<const S>(out.weights), std::span<const S>(per_class[size_t(c)])) +
          out.residual * (1.0 / nc);
    S norm = out.sem_probs[0];
    for (int c = 1; c < nc; ++c) norm = norm + out.sem_probs[size_t(c)];
    for (int c = 0; c < nc; ++c)
      out.sem_probs[size_t(c)] = out.sem_probs[size_t(c)] / norm;
  }
}

}  // namespace occfit

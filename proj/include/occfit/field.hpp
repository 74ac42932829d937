// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <variant>
#include <vector>

#include "occfit/autodiff.hpp"
#include "occfit/common.hpp"
#include "occfit/math.hpp"

namespace occfit {

// Voxel lattice over an axis-aligned box. Values live at voxel centers;
// interpolation runs on the center lattice and out-of-box points clamp to it
// (border values extend).
struct GridSpec {
  Aabb box;
  int nx = 0, ny = 0, nz = 0;

  GridSpec() = default;
  GridSpec(const Aabb& b, int x, int y, int z) : box(b), nx(x), ny(y), nz(z) {
    if (nx < 2 || ny < 2 || nz < 2)
      throw DomainError("grid needs at least 2 voxels per axis");
    Vec3d e = box.extent();
    if (e.x <= 0 || e.y <= 0 || e.z <= 0)
      throw DomainError("grid box must have positive extent");
  }

  size_t cells() const { return size_t(nx) * size_t(ny) * size_t(nz); }
  Vec3d voxel_size() const {
    Vec3d e = box.extent();
    return {e.x / nx, e.y / ny, e.z / nz};
  }
  double mean_voxel_size() const {
    Vec3d v = voxel_size();
    return (v.x + v.y + v.z) / 3.0;
  }
  size_t index(int i, int j, int k) const {
    return (size_t(i) * ny + size_t(j)) * nz + size_t(k);
  }
  Vec3d center(int i, int j, int k) const {
    Vec3d v = voxel_size();
    return {box.min.x + (i + 0.5) * v.x, box.min.y + (j + 0.5) * v.y,
            box.min.z + (k + 0.5) * v.z};
  }

  bool operator==(const GridSpec& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz &&
           box.min.x == o.box.min.x && box.min.y == o.box.min.y &&
           box.min.z == o.box.min.z && box.max.x == o.box.max.x &&
           box.max.y == o.box.max.y && box.max.z == o.box.max.z;
  }
};

namespace detail {

// Cell and weights for trilinear interpolation around point p. A point
// exactly on an interior lattice plane belongs to the cell on its positive
// side; lattice-boundary planes use the last interior cell.
struct TriCell {
  int i0[3];
  double frac[3];
};

inline TriCell locate(const GridSpec& spec, const Vec3d& p) {
  Vec3d v = spec.voxel_size();
  double l[3] = {(p.x - spec.box.min.x) / v.x - 0.5,
                 (p.y - spec.box.min.y) / v.y - 0.5,
                 (p.z - spec.box.min.z) / v.z - 0.5};
  int n[3] = {spec.nx, spec.ny, spec.nz};
  TriCell c;
  for (int a = 0; a < 3; ++a) {
    double la = l[a];
    if (la < 0) la = 0;
    if (la > n[a] - 1) la = n[a] - 1;
    int i = int(la);
    if (i > n[a] - 2) i = n[a] - 2;
    c.i0[a] = i;
    c.frac[a] = la - i;
  }
  return c;
}

inline void corner_weights(const TriCell& c, double w[8]) {
  double fx = c.frac[0], fy = c.frac[1], fz = c.frac[2];
  for (int b = 0; b < 8; ++b) {
    double wx = (b & 4) ? fx : 1.0 - fx;
    double wy = (b & 2) ? fy : 1.0 - fy;
    double wz = (b & 1) ? fz : 1.0 - fz;
    w[b] = wx * wy * wz;
  }
}

inline void corner_cells(const GridSpec& spec, const TriCell& c, size_t idx[8]) {
  for (int b = 0; b < 8; ++b)
    idx[b] = spec.index(c.i0[0] + ((b >> 2) & 1), c.i0[1] + ((b >> 1) & 1),
                        c.i0[2] + (b & 1));
}

// Spatial derivative of the trilinear weights, per axis, divided by the
// voxel size so the result is a world-space gradient.
inline void corner_grad_weights(const GridSpec& spec, const TriCell& c,
                                double gw[3][8]) {
  Vec3d v = spec.voxel_size();
  double f[3] = {c.frac[0], c.frac[1], c.frac[2]};
  double vs[3] = {v.x, v.y, v.z};
  for (int b = 0; b < 8; ++b) {
    double w[3], d[3];
    for (int a = 0; a < 3; ++a) {
      int bit = (b >> (2 - a)) & 1;
      w[a] = bit ? f[a] : 1.0 - f[a];
      d[a] = bit ? 1.0 : -1.0;
    }
    gw[0][b] = d[0] * w[1] * w[2] / vs[0];
    gw[1][b] = w[0] * d[1] * w[2] / vs[1];
    gw[2][b] = w[0] * w[1] * d[2] / vs[2];
  }
}

}  // namespace detail

inline bool occupancy_of(double sdf) { return sdf <= 0.0; }

// Dense voxel field: one SDF channel, three color channels, optional semantic
// logit channels, a log-sharpness scalar and a learnable background color,
// all in one flat parameter vector (channel-planar) so the optimizer and the
// checkpoint writer can treat it as a single block.
template <class Real>
struct SdfField {
  GridSpec spec;
  int sem_channels = 0;
  std::vector<Real> params;

  size_t cells() const { return spec.cells(); }
  size_t sdf_off() const { return 0; }
  size_t color_off() const { return cells(); }
  size_t sem_off() const { return cells() * 4; }
  size_t rho_off() const { return cells() * (4 + size_t(sem_channels)); }
  size_t bg_off() const { return rho_off() + 1; }
  size_t param_count() const { return bg_off() + 3; }

  Real& sdf(int i, int j, int k) { return params[sdf_off() + spec.index(i, j, k)]; }
  Real sdf(int i, int j, int k) const { return params[sdf_off() + spec.index(i, j, k)]; }
  Real& color(int c, size_t cell) { return params[color_off() + size_t(c) * cells() + cell]; }
  Real& sem(int c, size_t cell) { return params[sem_off() + size_t(c) * cells() + cell]; }
  Real& rho() { return params[rho_off()]; }
  Real rho() const { return params[rho_off()]; }
  Real& bg(int c) { return params[bg_off() + size_t(c)]; }
  Real bg(int c) const { return params[bg_off() + size_t(c)]; }

  // A constant start is a dead start for volume rendering, so the SDF begins
  // as the (noisy) height above a virtual ground plane at the box floor,
  // clamped to +-1 m. Colors start mid-grey, semantics flat, and the
  // sharpness starts at one voxel.
  static SdfField init(const GridSpec& spec, int sem_channels, uint64_t seed,
                       double noise_sigma = 0.01) {
    SdfField f;
    f.spec = spec;
    f.sem_channels = sem_channels;
    f.params.assign(f.param_count(), Real(0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (int i = 0; i < spec.nx; ++i)
      for (int j = 0; j < spec.ny; ++j)
        for (int k = 0; k < spec.nz; ++k) {
          double h = spec.center(i, j, k).z - spec.box.min.z;
          if (h > 1.0) h = 1.0;
          if (h < -1.0) h = -1.0;
          f.sdf(i, j, k) = Real(h + noise(rng));
        }
    for (size_t i = f.color_off(); i < f.sem_off(); ++i) f.params[i] = Real(0.5);
    f.rho() = Real(std::log(1.0 / spec.mean_voxel_size()));
    for (int c = 0; c < 3; ++c) f.bg(c) = Real(0.5);
    return f;
  }
};

// Tri-plane alternative: three feature planes (bilinear per plane, summed)
// feeding a two-layer decoder that emits [sdf, r, g, b, semantics...].
template <class Real>
struct TpvField {
  GridSpec spec;
  int features = 8;
  int hidden = 16;
  int sem_channels = 0;
  std::vector<Real> params;

  int out_dim() const { return 4 + sem_channels; }
  size_t xy_off() const { return 0; }
  size_t xz_off() const { return size_t(spec.nx) * spec.ny * features; }
  size_t yz_off() const { return xz_off() + size_t(spec.nx) * spec.nz * features; }
  size_t w1_off() const { return yz_off() + size_t(spec.ny) * spec.nz * features; }
  size_t b1_off() const { return w1_off() + size_t(hidden) * features; }
  size_t w2_off() const { return b1_off() + size_t(hidden); }
  size_t b2_off() const { return w2_off() + size_t(out_dim()) * hidden; }
  size_t rho_off() const { return b2_off() + size_t(out_dim()); }
  size_t bg_off() const { return rho_off() + 1; }
  size_t param_count() const { return bg_off() + 3; }

  Real rho() const { return params[rho_off()]; }
  Real bg(int c) const { return params[bg_off() + size_t(c)]; }

  // Mirrors the grid init: feature 0 of the two z-bearing planes carries half
  // the clamped height prior each, the first decoder output passes summed
  // feature 0 through a relu pair, and the remaining weights start as small
  // noise. This gives the tri-plane provider the same live start.
  static TpvField init(const GridSpec& spec, int features, int hidden,
                       int sem_channels, uint64_t seed,
                       double noise_sigma = 0.01) {
    if (features < 1 || hidden < 2)
      throw DomainError("tpv needs >= 1 feature and >= 2 hidden units");
    TpvField f;
    f.spec = spec;
    f.features = features;
    f.hidden = hidden;
    f.sem_channels = sem_channels;
    f.params.assign(f.param_count(), Real(0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (size_t i = 0; i < f.w1_off(); ++i) f.params[i] = Real(noise(rng));
    // decoder weights get a tenth of the plane noise; this keeps every hidden
    // unit off the relu kink so gradients flow from the first step
    for (size_t i = f.w1_off(); i < f.b2_off(); ++i)
      f.params[i] = Real(noise(rng) * 0.1);
    Vec3d v = spec.voxel_size();
    auto height = [&](int k) {
      double h = spec.box.min.z + (k + 0.5) * v.z - spec.box.min.z;
      return 0.5 * std::min(1.0, std::max(-1.0, h));
    };
    for (int i = 0; i < spec.nx; ++i)
      for (int k = 0; k < spec.nz; ++k)
        f.params[f.xz_off() + (size_t(i) * spec.nz + k) * features] = Real(height(k));
    for (int j = 0; j < spec.ny; ++j)
      for (int k = 0; k < spec.nz; ++k)
        f.params[f.yz_off() + (size_t(j) * spec.nz + k) * features] = Real(height(k));
    // hidden 0 = relu(f0), hidden 1 = relu(-f0), sdf out = h0 - h1 = f0
    f.params[f.w1_off() + 0] = Real(1);
    f.params[f.w1_off() + size_t(features)] = Real(-1);
    f.params[f.w2_off() + 0] = Real(1);
    f.params[f.w2_off() + 1] = Real(-1);
    f.params[f.b2_off() + 1] = Real(0.5);  // colors start near mid-grey
    f.params[f.b2_off() + 2] = Real(0.5);
    f.params[f.b2_off() + 3] = Real(0.5);
    f.params[f.rho_off()] = Real(std::log(1.0 / spec.mean_voxel_size()));
    for (int c = 0; c < 3; ++c) f.params[f.bg_off() + size_t(c)] = Real(0.5);
    return f;
  }
};

// ---------------------------------------------------------------------------
// Field views: the renderer and losses are written against a view concept
//   S sdf_at(p), Vec3<S> color_at(p), void sem_at(p, S*),
//   Vec3<S> gradient_at(p), S sharpness(), Vec3<S> background()
// where S is double for plain evaluation and Var<Real> when building a tape.
// ---------------------------------------------------------------------------

template <class Real>
struct GridPlainView {
  using S = double;
  const SdfField<Real>* f;

  explicit GridPlainView(const SdfField<Real>& field) : f(&field) {}

  const GridSpec& grid() const { return f->spec; }
  const Aabb& box() const { return f->spec.box; }
  int sem_channels() const { return f->sem_channels; }

  double gather(size_t off, const Vec3d& p) const {
    detail::TriCell c = detail::locate(f->spec, p);
    double w[8];
    size_t idx[8];
    detail::corner_weights(c, w);
    detail::corner_cells(f->spec, c, idx);
    double s = 0;
    for (int b = 0; b < 8; ++b) s += w[b] * double(f->params[off + idx[b]]);
    return s;
  }

  double sdf_at(const Vec3d& p) const { return gather(f->sdf_off(), p); }
  Vec3<double> color_at(const Vec3d& p) const {
    size_t n = f->cells();
    return {gather(f->color_off(), p), gather(f->color_off() + n, p),
            gather(f->color_off() + 2 * n, p)};
  }
  void sem_at(const Vec3d& p, double* out) const {
    size_t n = f->cells();
    for (int c = 0; c < f->sem_channels; ++c)
      out[c] = gather(f->sem_off() + size_t(c) * n, p);
  }
  Vec3<double> gradient_at(const Vec3d& p) const {
    detail::TriCell c = detail::locate(f->spec, p);
    double gw[3][8];
    size_t idx[8];
    detail::corner_grad_weights(f->spec, c, gw);
    detail::corner_cells(f->spec, c, idx);
    Vec3<double> g{0, 0, 0};
    for (int b = 0; b < 8; ++b) {
      double s = double(f->params[f->sdf_off() + idx[b]]);
      g.x += gw[0][b] * s;
      g.y += gw[1][b] * s;
      g.z += gw[2][b] * s;
    }
    return g;
  }
  double sharpness() const { return std::exp(double(f->rho())); }
  Vec3<double> background() const {
    return {double(f->bg(0)), double(f->bg(1)), double(f->bg(2))};
  }
};

// Tape view: parameter i of the field is leaf node `base + i` on the tape.
template <class Real>
struct GridTapeView {
  using S = Var<Real>;
  const SdfField<Real>* f;
  Tape<Real>* tape;
  NodeId base;

  GridTapeView(const SdfField<Real>& field, Tape<Real>& t, NodeId base_id = 0)
      : f(&field), tape(&t), base(base_id) {}

  const GridSpec& grid() const { return f->spec; }
  const Aabb& box() const { return f->spec.box; }
  int sem_channels() const { return f->sem_channels; }

  S gather(size_t off, const Vec3d& p) const {
    detail::TriCell c = detail::locate(f->spec, p);
    double w[8];
    size_t idx[8];
    detail::corner_weights(c, w);
    detail::corner_cells(f->spec, c, idx);
    std::array<NodeId, 8> ids;
    std::array<Real, 8> cs;
    for (int b = 0; b < 8; ++b) {
      ids[size_t(b)] = base + NodeId(off + idx[b]);
      cs[size_t(b)] = Real(w[b]);
    }
    return {tape, tape->lincomb(ids, cs)};
  }

  S sdf_at(const Vec3d& p) const { return gather(f->sdf_off(), p); }
  Vec3<S> color_at(const Vec3d& p) const {
    size_t n = f->cells();
    return {gather(f->color_off(), p), gather(f->color_off() + n, p),
            gather(f->color_off() + 2 * n, p)};
  }
  void sem_at(const Vec3d& p, S* out) const {
    size_t n = f->cells();
    for (int c = 0; c < f->sem_channels; ++c)
      out[c] = gather(f->sem_off() + size_t(c) * n, p);
  }
  Vec3<S> gradient_at(const Vec3d& p) const {
    detail::TriCell c = detail::locate(f->spec, p);
    double gw[3][8];
    size_t idx[8];
    detail::corner_grad_weights(f->spec, c, gw);
    detail::corner_cells(f->spec, c, idx);
    std::array<NodeId, 8> ids;
    std::array<Real, 8> cs;
    for (int b = 0; b < 8; ++b) ids[size_t(b)] = base + NodeId(f->sdf_off() + idx[b]);
    Vec3<S> g;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 8; ++b) cs[size_t(b)] = Real(gw[a][b]);
      g[a] = S{tape, tape->lincomb(ids, cs)};
    }
    return g;
  }
  S sharpness() const { return occfit::exp(S{tape, base + NodeId(f->rho_off())}); }
  Vec3<S> background() const {
    return {S{tape, base + NodeId(f->bg_off())},
            S{tape, base + NodeId(f->bg_off() + 1)},
            S{tape, base + NodeId(f->bg_off() + 2)}};
  }
};

namespace detail {

// Bilinear gather on one tri-plane, generic over the parameter access.
template <class S, class Fetch>
void tpv_plane_features(const GridSpec& spec, int axis_u, int axis_v,
                        int features, const Vec3d& p, const Fetch& fetch,
                        size_t plane_off, S* accum) {
  Vec3d v = spec.voxel_size();
  double pc[3] = {p.x, p.y, p.z};
  double vs[3] = {v.x, v.y, v.z};
  double mn[3] = {spec.box.min.x, spec.box.min.y, spec.box.min.z};
  int n[3] = {spec.nx, spec.ny, spec.nz};
  double lu = (pc[axis_u] - mn[axis_u]) / vs[axis_u] - 0.5;
  double lv = (pc[axis_v] - mn[axis_v]) / vs[axis_v] - 0.5;
  lu = std::min(std::max(lu, 0.0), double(n[axis_u] - 1));
  lv = std::min(std::max(lv, 0.0), double(n[axis_v] - 1));
  int u0 = std::min(int(lu), n[axis_u] - 2);
  int v0 = std::min(int(lv), n[axis_v] - 2);
  double fu = lu - u0, fv = lv - v0;
  double w[4] = {(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv};
  int du[4] = {0, 0, 1, 1};
  int dv[4] = {0, 1, 0, 1};
  for (int q = 0; q < 4; ++q) {
    size_t cell = (size_t(u0 + du[q]) * size_t(n[axis_v]) + size_t(v0 + dv[q])) *
                  size_t(features);
    for (int c = 0; c < features; ++c)
      accum[c] = accum[c] + w[q] * fetch(plane_off + cell + size_t(c));
  }
}

}  // namespace detail

template <class Real>
struct TpvPlainView {
  using S = double;
  const TpvField<Real>* f;

  explicit TpvPlainView(const TpvField<Real>& field) : f(&field) {}

  const GridSpec& grid() const { return f->spec; }
  const Aabb& box() const { return f->spec.box; }
  int sem_channels() const { return f->sem_channels; }

  void decode(const Vec3d& p, std::vector<double>& out) const {
    auto fetch = [&](size_t i) { return double(f->params[i]); };
    std::vector<double> feat(size_t(f->features), 0.0);
    detail::tpv_plane_features(f->spec, 0, 1, f->features, p, fetch, f->xy_off(), feat.data());
    detail::tpv_plane_features(f->spec, 0, 2, f->features, p, fetch, f->xz_off(), feat.data());
    detail::tpv_plane_features(f->spec, 1, 2, f->features, p, fetch, f->yz_off(), feat.data());
    std::vector<double> h(size_t(f->hidden));
    for (int i = 0; i < f->hidden; ++i) {
      double s = double(f->params[f->b1_off() + size_t(i)]);
      for (int c = 0; c < f->features; ++c)
        s += double(f->params[f->w1_off() + size_t(i) * f->features + size_t(c)]) * feat[size_t(c)];
      h[size_t(i)] = s > 0 ? s : 0;
    }
    out.assign(size_t(f->out_dim()), 0.0);
    for (int o = 0; o < f->out_dim(); ++o) {
      double s = double(f->params[f->b2_off() + size_t(o)]);
      for (int i = 0; i < f->hidden; ++i)
        s += double(f->params[f->w2_off() + size_t(o) * f->hidden + size_t(i)]) * h[size_t(i)];
      out[size_t(o)] = s;
    }
  }

  double sdf_at(const Vec3d& p) const {
    std::vector<double> out;
    decode(p, out);
    return out[0];
  }
  Vec3<double> color_at(const Vec3d& p) const {
    std::vector<double> out;
    decode(p, out);
    return {out[1], out[2], out[3]};
  }
  void sem_at(const Vec3d& p, double* sem) const {
    std::vector<double> out;
    decode(p, out);
    for (int c = 0; c < f->sem_channels; ++c) sem[c] = out[4 + size_t(c)];
  }
  // central differences; the decoder makes an analytic form unrewarding
  Vec3<double> gradient_at(const Vec3d& p) const {
    double h = 1e-4 * f->spec.mean_voxel_size();
    Vec3<double> g;
    for (int a = 0; a < 3; ++a) {
      Vec3d pp = p, pm = p;
      pp[a] += h;
      pm[a] -= h;
      g[a] = (sdf_at(pp) - sdf_at(pm)) / (2 * h);
    }
    return g;
  }
  double sharpness() const { return std::exp(double(f->rho())); }
  Vec3<double> background() const {
    return {double(f->bg(0)), double(f->bg(1)), double(f->bg(2))};
  }
};

template <class Real>
struct TpvTapeView {
  using S = Var<Real>;
  const TpvField<Real>* f;
  Tape<Real>* tape;
  NodeId base;

  TpvTapeView(const TpvField<Real>& field, Tape<Real>& t, NodeId base_id = 0)
      : f(&field), tape(&t), base(base_id) {}

  const GridSpec& grid() const { return f->spec; }
  const Aabb& box() const { return f->spec.box; }
  int sem_channels() const { return f->sem_channels; }

  void decode(const Vec3d& p, std::vector<S>& out) const {
    auto fetch = [&](size_t i) { return S{tape, base + NodeId(i)}; };
    S zero{tape, tape->constant(Real(0))};
    std::vector<S> feat(size_t(f->features), zero);
    detail::tpv_plane_features(f->spec, 0, 1, f->features, p, fetch, f->xy_off(), feat.data());
    detail::tpv_plane_features(f->spec, 0, 2, f->features, p, fetch, f->xz_off(), feat.data());
    detail::tpv_plane_features(f->spec, 1, 2, f->features, p, fetch, f->yz_off(), feat.data());
    std::vector<NodeId> feat_ids(feat.size());
    for (size_t i = 0; i < feat.size(); ++i) feat_ids[i] = feat[i].id;
    std::vector<NodeId> row(size_t(f->features));
    std::vector<NodeId> h_ids(size_t(f->hidden));
    for (int i = 0; i < f->hidden; ++i) {
      for (int c = 0; c < f->features; ++c)
        row[size_t(c)] = base + NodeId(f->w1_off() + size_t(i) * f->features + size_t(c));
      NodeId d = tape->dot(row, feat_ids);
      NodeId s = tape->add(d, base + NodeId(f->b1_off() + size_t(i)));
      h_ids[size_t(i)] = tape->relu(s);
    }
    std::vector<NodeId> row2(size_t(f->hidden));
    out.clear();
    for (int o = 0; o < f->out_dim(); ++o) {
      for (int i = 0; i < f->hidden; ++i)
        row2[size_t(i)] = base + NodeId(f->w2_off() + size_t(o) * f->hidden + size_t(i));
      NodeId d = tape->dot(row2, h_ids);
      out.push_back(S{tape, tape->add(d, base + NodeId(f->b2_off() + size_t(o)))});
    }
  }

  S sdf_at(const Vec3d& p) const {
    std::vector<S> out;
    decode(p, out);
    return out[0];
  }
  Vec3<S> color_at(const Vec3d& p) const {
    std::vector<S> out;
    decode(p, out);
    return {out[1], out[2], out[3]};
  }
  void sem_at(const Vec3d& p, S* sem) const {
    std::vector<S> out;
    decode(p, out);
    for (int c = 0; c < f->sem_channels; ++c) sem[c] = out[4 + size_t(c)];
  }
  Vec3<S> gradient_at(const Vec3d& p) const {
    double h = 1e-4 * f->spec.mean_voxel_size();
    Vec3<S> g;
    for (int a = 0; a < 3; ++a) {
      Vec3d pp = p, pm = p;
      pp[a] += h;
      pm[a] -= h;
      g[a] = (sdf_at(pp) - sdf_at(pm)) / (2 * h);
    }
    return g;
  }
  S sharpness() const { return occfit::exp(S{tape, base + NodeId(f->rho_off())}); }
  Vec3<S> background() const {
    return {S{tape, base + NodeId(f->bg_off())},
            S{tape, base + NodeId(f->bg_off() + 1)},
            S{tape, base + NodeId(f->bg_off() + 2)}};
  }
};

// ---------------------------------------------------------------------------
// Checkpoint container ("SOCF"): magic, version, provider tag, grid spec,
// then the flat f32 parameter vector in layout order.
// ---------------------------------------------------------------------------

template <class Real>
using AnyField = std::variant<SdfField<Real>, TpvField<Real>>;

namespace detail {

template <class T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_raw(std::istream& in, size_t& off) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (size_t(in.gcount()) != sizeof(T))
    throw ParseError("truncated checkpoint", off);
  off += sizeof(T);
  return v;
}

inline void write_spec(std::ostream& out, const GridSpec& spec) {
  write_raw(out, spec.box.min.x);
  write_raw(out, spec.box.min.y);
  write_raw(out, spec.box.min.z);
  write_raw(out, spec.box.max.x);
  write_raw(out, spec.box.max.y);
  write_raw(out, spec.box.max.z);
  write_raw(out, uint32_t(spec.nx));
  write_raw(out, uint32_t(spec.ny));
  write_raw(out, uint32_t(spec.nz));
}

inline GridSpec read_spec(std::istream& in, size_t& off) {
  Aabb box;
  box.min.x = read_raw<double>(in, off);
  box.min.y = read_raw<double>(in, off);
  box.min.z = read_raw<double>(in, off);
  box.max.x = read_raw<double>(in, off);
  box.max.y = read_raw<double>(in, off);
  box.max.z = read_raw<double>(in, off);
  uint32_t nx = read_raw<uint32_t>(in, off);
  uint32_t ny = read_raw<uint32_t>(in, off);
  uint32_t nz = read_raw<uint32_t>(in, off);
  return GridSpec(box, int(nx), int(ny), int(nz));
}

template <class Real>
void write_params_f32(std::ostream& out, const std::vector<Real>& params) {
  for (Real v : params) write_raw(out, float(v));
}

template <class Real>
void read_params_f32(std::istream& in, size_t& off, std::vector<Real>& params,
                     size_t count) {
  params.resize(count);
  for (size_t i = 0; i < count; ++i) params[i] = Real(read_raw<float>(in, off));
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

template <class Real>
void save_field(const std::filesystem::path& path, const AnyField<Real>& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out.write("SOCF", 4);
  detail::write_raw(out, kCheckpointVersion);
  if (const auto* g = std::get_if<SdfField<Real>>(&field)) {
    detail::write_raw(out, uint32_t(0));
    detail::write_spec(out, g->spec);
    detail::write_raw(out, uint32_t(g->sem_channels));
    detail::write_params_f32(out, g->params);
  } else {
    const auto& t = std::get<TpvField<Real>>(field);
    detail::write_raw(out, uint32_t(1));
    detail::write_spec(out, t.spec);
    detail::write_raw(out, uint32_t(t.sem_channels));
    detail::write_raw(out, uint32_t(t.features));
    detail::write_raw(out, uint32_t(t.hidden));
    detail::write_params_f32(out, t.params);
  }
  if (!out) throw ConfigError("short write: " + path.string());
}

template <class Real>
AnyField<Real> load_field(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open for reading: " + path.string());
  char magic[4];
  in.read(magic, 4);
  size_t off = 4;
  if (in.gcount() != 4 || std::memcmp(magic, "SOCF", 4) != 0)
    throw ParseError("bad checkpoint magic", 0);
  uint32_t version = detail::read_raw<uint32_t>(in, off);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version", off);
  uint32_t provider = detail::read_raw<uint32_t>(in, off);
  GridSpec spec = detail::read_spec(in, off);
  uint32_t sem = detail::read_raw<uint32_t>(in, off);
  if (provider == 0) {
    SdfField<Real> f;
    f.spec = spec;
    f.sem_channels = int(sem);
    detail::read_params_f32(in, off, f.params, f.param_count());
    return f;
  }
  if (provider != 1) throw ParseError("unknown field provider tag", off);
  TpvField<Real> f;
  f.spec = spec;
  f.sem_channels = int(sem);
  f.features = int(detail::read_raw<uint32_t>(in, off));
  f.hidden = int(detail::read_raw<uint32_t>(in, off));
  detail::read_params_f32(in, off, f.params, f.param_count());
  return f;
}

}  // namespace occfit

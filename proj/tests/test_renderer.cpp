// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "occfit/renderer.hpp"

namespace occfit {
namespace {

// Fills the sdf channel from a function sampled at voxel centers.
template <class F>
SdfField<double> field_from(const GridSpec& spec, int sem, F&& sdf_fn) {
  SdfField<double> f = SdfField<double>::init(spec, sem, 1, 0.0);
  for (int i = 0; i < spec.nx; ++i)
    for (int j = 0; j < spec.ny; ++j)
      for (int k = 0; k < spec.nz; ++k) f.sdf(i, j, k) = sdf_fn(spec.center(i, j, k));
  return f;
}

TEST(Sampling, PointsAreCellCentered) {
  auto d = sample_ray_points(1.0, 3.0, 4);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_DOUBLE_EQ(d[0], 1.25);
  EXPECT_DOUBLE_EQ(d[1], 1.75);
  EXPECT_DOUBLE_EQ(d[2], 2.25);
  EXPECT_DOUBLE_EQ(d[3], 2.75);
  EXPECT_THROW(sample_ray_points(1.0, 3.0, 1), DomainError);
  EXPECT_THROW(sample_ray_points(3.0, 1.0, 4), DomainError);
}

TEST(Alphas, MatchDirectFormula) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double a = 7.3;
  std::vector<double> sdf(16);
  for (double& s : sdf) s = u(rng);
  auto alphas = alphas_from_sdf<double>(sdf, a);
  ASSERT_EQ(alphas.size(), sdf.size() - 1);
  for (size_t i = 0; i + 1 < sdf.size(); ++i) {
    double pi = 1.0 / (1.0 + std::exp(-a * sdf[i]));
    double pj = 1.0 / (1.0 + std::exp(-a * sdf[i + 1]));
    double expect = std::max((pi - pj) / pi, 0.0);
    EXPECT_NEAR(alphas[i], expect, 1e-12);
  }
}

TEST(Alphas, IncreasingSdfGivesZeroOpacity) {
  std::vector<double> sdf{-0.5, 0.0, 0.5, 1.0};
  auto alphas = alphas_from_sdf<double>(sdf, 4.0);
  for (double al : alphas) EXPECT_DOUBLE_EQ(al, 0.0);
}

TEST(Alphas, SaturatedSegmentsEmitExactZero) {
  // deep inside matter phi underflows; those segments must not divide by it
  std::vector<double> sdf{-5.0, -6.0, -7.0};
  auto alphas = alphas_from_sdf<double>(sdf, 1000.0);
  for (double al : alphas) EXPECT_DOUBLE_EQ(al, 0.0);
}

TEST(Weights, MatchTransmittanceProductOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> alphas(12);
  for (double& a : alphas) a = u(rng) * 0.9;
  auto chain = weights_from_alphas<double>(alphas);
  double t = 1.0, sum = 0.0;
  for (size_t i = 0; i < alphas.size(); ++i) {
    EXPECT_NEAR(chain.weights[i], t * alphas[i], 1e-12);
    t *= 1.0 - alphas[i];
    sum += chain.weights[i];
  }
  EXPECT_NEAR(chain.residual, t, 1e-12);
  EXPECT_NEAR(sum + chain.residual, 1.0, 1e-12);
}

TEST(Render, EmptyFieldReturnsBackgroundAndFarDepth) {
  GridSpec spec(Aabb{{0, 0, 0}, {8, 8, 8}}, 8, 8, 8);
  SdfField<double> f = field_from(spec, 0, [](const Vec3d&) { return 2.0; });
  f.bg(0) = 0.1;
  f.bg(1) = 0.2;
  f.bg(2) = 0.3;
  GridPlainView<double> view(f);
  Ray ray{{-1, 4, 4}, {1, 0, 0}};
  RayRender<double> out;
  render_ray(view, ray, 32, view.sharpness(), RenderWant{true, false}, out);
  EXPECT_DOUBLE_EQ(out.depth, out.t_far);
  EXPECT_DOUBLE_EQ(out.color.x, 0.1);
  EXPECT_DOUBLE_EQ(out.color.y, 0.2);
  EXPECT_DOUBLE_EQ(out.color.z, 0.3);
  EXPECT_DOUBLE_EQ(out.residual, 1.0);
}

TEST(Render, SharpWallDepthWithinHalfSpacing) {
  GridSpec spec(Aabb{{0, 0, 0}, {10, 10, 10}}, 16, 16, 16);
  const double wall_x = 5.3;  // matter fills x > wall_x
  SdfField<double> f =
      field_from(spec, 0, [&](const Vec3d& p) { return wall_x - p.x; });
  GridPlainView<double> view(f);
  double sharp = 100.0 / spec.voxel_size().x;
  Ray ray{{0.5, 5.0, 5.0}, {1, 0, 0}};
  RayRender<double> out;
  render_ray(view, ray, 64, sharp, RenderWant{false, false}, out);
  double spacing = (out.t_far - out.t_near) / 64;
  double crossing = wall_x - 0.5;
  EXPECT_LT(std::fabs(out.depth - crossing), 0.5 * spacing);
  EXPECT_LT(out.residual, 1e-6);
}

TEST(Render, ObliqueWallStillLocalizes) {
  GridSpec spec(Aabb{{0, 0, 0}, {10, 10, 10}}, 20, 20, 20);
  const double wall_x = 6.1;
  SdfField<double> f =
      field_from(spec, 0, [&](const Vec3d& p) { return wall_x - p.x; });
  GridPlainView<double> view(f);
  double sharp = 100.0 / spec.voxel_size().x;
  Vec3d dir = normalized(Vec3d{1.0, 0.35, 0.1});
  Ray ray{{0.5, 2.0, 4.0}, dir};
  RayRender<double> out;
  render_ray(view, ray, 96, sharp, RenderWant{false, false}, out);
  double spacing = (out.t_far - out.t_near) / 96;
  double crossing = (wall_x - ray.origin.x) / dir.x;
  EXPECT_LT(std::fabs(out.depth - crossing), 0.5 * spacing);
}

TEST(Render, WeightsRecoverColorOfHitSurface) {
  GridSpec spec(Aabb{{0, 0, 0}, {10, 10, 10}}, 16, 16, 16);
  SdfField<double> f =
      field_from(spec, 0, [](const Vec3d& p) { return 5.0 - p.x; });
  for (size_t cell = 0; cell < f.cells(); ++cell) {
    f.color(0, cell) = 0.8;
    f.color(1, cell) = 0.3;
    f.color(2, cell) = 0.1;
  }
  GridPlainView<double> view(f);
  Ray ray{{0.5, 5.0, 5.0}, {1, 0, 0}};
  RayRender<double> out;
  render_ray(view, ray, 64, 100.0 / spec.voxel_size().x, RenderWant{true, false},
             out);
  EXPECT_NEAR(out.color.x, 0.8, 1e-6);
  EXPECT_NEAR(out.color.y, 0.3, 1e-6);
  EXPECT_NEAR(out.color.z, 0.1, 1e-6);
}

TEST(Render, MissingTheBoxThrows) {
  GridSpec spec(Aabb{{0, 0, 0}, {1, 1, 1}}, 2, 2, 2);
  SdfField<double> f = field_from(spec, 0, [](const Vec3d&) { return 1.0; });
  GridPlainView<double> view(f);
  Ray ray{{5, 5, 5}, {1, 0, 0}};
  RayRender<double> out;
  EXPECT_THROW(render_ray(view, ray, 8, 1.0, RenderWant{}, out), DomainError);
}

TEST(Render, SemanticsBlendPerPointSoftmaxAndSumToOne) {
  GridSpec spec(Aabb{{0, 0, 0}, {10, 10, 10}}, 8, 8, 8);
  SdfField<double> f =
      field_from(spec, 3, [](const Vec3d& p) { return 4.0 - p.x; });
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (size_t cell = 0; cell < f.cells(); ++cell)
    for (int c = 0; c < 3; ++c) f.sem(c, cell) = u(rng);
  GridPlainView<double> view(f);
  Ray ray{{0.5, 5.0, 5.0}, {1, 0, 0}};
  RayRender<double> out;
  render_ray(view, ray, 32, 4.0, RenderWant{false, true}, out);
  ASSERT_EQ(out.sem_probs.size(), 3u);
  double sum = out.sem_probs[0] + out.sem_probs[1] + out.sem_probs[2];
  EXPECT_NEAR(sum, 1.0, 1e-12);
  // independent blend: per-midpoint softmax weighted by the tested weights
  double expect[3] = {0, 0, 0};
  for (size_t i = 0; i < out.attr_points.size(); ++i) {
    double logits[3], probs[3];
    view.sem_at(out.attr_points[i], logits);
    softmax(std::span<const double>(logits, 3), probs);
    for (int c = 0; c < 3; ++c) expect[c] += out.weights[i] * probs[c];
  }
  double total = 0;
  for (int c = 0; c < 3; ++c) total += (expect[c] += out.residual / 3.0);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(out.sem_probs[size_t(c)], expect[c] / total, 1e-12);
}

TEST(Render, TapeForwardMatchesPlainEvaluation) {
  GridSpec spec(Aabb{{0, 0, 0}, {6, 6, 6}}, 6, 6, 6);
  SdfField<double> f = field_from(spec, 2, [](const Vec3d& p) {
    return 0.7 * (p.x - 3.0) + 0.1 * std::sin(p.y);
  });
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (size_t i = f.color_off(); i < f.rho_off(); ++i) f.params[i] = u(rng);
  GridPlainView<double> plain(f);

  Tape<double> tape;
  for (double v : f.params) tape.leaf(v);
  GridTapeView<double> taped(f, tape, 0);

  Ray ray{{0.2, 3.3, 2.9}, normalized(Vec3d{1.0, 0.1, 0.05})};
  RayRender<double> pout;
  render_ray(plain, ray, 24, plain.sharpness(), RenderWant{true, true}, pout);
  RayRender<Var<double>> tout;
  render_ray(taped, ray, 24, taped.sharpness(), RenderWant{true, true}, tout);

  EXPECT_NEAR(tout.depth.value(), pout.depth, 1e-13);
  EXPECT_NEAR(tout.residual.value(), pout.residual, 1e-13);
  EXPECT_NEAR(tout.color.x.value(), pout.color.x, 1e-13);
  EXPECT_NEAR(tout.color.y.value(), pout.color.y, 1e-13);
  EXPECT_NEAR(tout.color.z.value(), pout.color.z, 1e-13);
  for (int c = 0; c < 2; ++c)
    EXPECT_NEAR(tout.sem_probs[size_t(c)].value(), pout.sem_probs[size_t(c)], 1e-13);
}

TEST(Render, DepthGradientMatchesFiniteDifferences) {
  GridSpec spec(Aabb{{0, 0, 0}, {4, 4, 4}}, 4, 4, 4);
  SdfField<double> f = field_from(spec, 0, [](const Vec3d& p) {
    return 0.6 * (2.0 - p.x) + 0.05 * p.z;
  });
  Ray ray{{0.2, 2.0, 2.0}, normalized(Vec3d{1.0, 0.05, -0.02})};

  Tape<double> tape;
  for (double v : f.params) tape.leaf(v);
  GridTapeView<double> taped(f, tape, 0);
  RayRender<Var<double>> out;
  render_ray(taped, ray, 16, taped.sharpness(), RenderWant{false, false}, out);
  auto adj = tape.backward(out.depth.id);

  std::mt19937_64 rng(17);
  std::uniform_int_distribution<size_t> pick(0, f.cells() - 1);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 25; ++trial) {
    size_t pi = pick(rng);
    if (std::fabs(adj[pi]) < 1e-9) continue;  // most voxels are off the ray
    ++checked;
    double eps = 1e-6;
    SdfField<double> fp = f, fm = f;
    fp.params[pi] += eps;
    fm.params[pi] -= eps;
    RayRender<double> rp, rm;
    render_ray(GridPlainView<double>(fp), ray, 16, GridPlainView<double>(fp).sharpness(),
               RenderWant{false, false}, rp);
    render_ray(GridPlainView<double>(fm), ray, 16, GridPlainView<double>(fm).sharpness(),
               RenderWant{false, false}, rm);
    double fd = (rp.depth - rm.depth) / (2 * eps);
    double denom = std::max({std::fabs(fd), std::fabs(adj[pi]), 1.0});
    EXPECT_LT(std::fabs(adj[pi] - fd) / denom, 1e-5) << "param " << pi;
  }
  EXPECT_GT(checked, 5);
}

TEST(Render, SharpnessGradientFlowsThroughAlphas) {
  GridSpec spec(Aabb{{0, 0, 0}, {4, 4, 4}}, 4, 4, 4);
  SdfField<double> f = field_from(spec, 0, [](const Vec3d& p) {
    return 0.5 * (2.0 - p.x);
  });
  Ray ray{{0.2, 2.0, 2.0}, {1, 0, 0}};
  Tape<double> tape;
  for (double v : f.params) tape.leaf(v);
  GridTapeView<double> taped(f, tape, 0);
  RayRender<Var<double>> out;
  render_ray(taped, ray, 16, taped.sharpness(), RenderWant{false, false}, out);
  auto adj = tape.backward(out.depth.id);
  double base = out.depth.value();

  double eps = 1e-6;
  SdfField<double> fp = f, fm = f;
  fp.rho() += eps;
  fm.rho() -= eps;
  RayRender<double> rp, rm;
  render_ray(GridPlainView<double>(fp), ray, 16, GridPlainView<double>(fp).sharpness(),
             RenderWant{false, false}, rp);
  render_ray(GridPlainView<double>(fm), ray, 16, GridPlainView<double>(fm).sharpness(),
             RenderWant{false, false}, rm);
  double fd = (rp.depth - rm.depth) / (2 * eps);
  EXPECT_NE(base, 0.0);
  EXPECT_NEAR(adj[f.rho_off()], fd, 1e-5 * std::max(1.0, std::fabs(fd)));
}

}  // namespace
}  // namespace occfit

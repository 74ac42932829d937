// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <variant>
#include <vector>

#include "occfit/autodiff.hpp"
#include "occfit/common.hpp"
#include "occfit/config.hpp"
#include "occfit/field.hpp"
#include "occfit/geometry.hpp"
#include "occfit/image.hpp"
#include "occfit/losses.hpp"
#include "occfit/optimizer.hpp"
#include "occfit/renderer.hpp"
#include "occfit/scenes.hpp"
#include "occfit/supervision.hpp"

namespace occfit {

// ---------------------------------------------------------------------------
// Run configuration. Every key carries its default here; unknown keys fail in
// Config::finish().

struct RunConfig {
  TaskProfile profile = TaskProfile::kOccupancy;
  std::filesystem::path dataset;
  std::filesystem::path out = "out";
  std::string provider = "grid";  // grid | tpv
  int grid_n[3] = {32, 32, 32};
  int tpv_features = 8;
  int tpv_hidden = 16;
  int samples_m = 96;  // SDF samples per ray
  LossWeights weights;
  SupervisionConfig sup;
  AdamWConfig optim;
  int epochs = 10;
  int steps_per_epoch = 200;
  size_t max_steps = 0;  // early stop for resume tests; 0 = full horizon
  uint64_t seed = 1;
  int threads = 1;
  int reg_samples = 4096;  // voxel-center draws per step for grid regularizers
  int edge_patch = 8;
  std::vector<size_t> holdout;  // frames excluded from supervision
  bool resume = false;
  bool semantics = true;  // attach a semantic head when the dataset has labels
  double init_noise = 0.01;

  size_t total_steps() const {
    return size_t(epochs) * size_t(steps_per_epoch);
  }
};

inline RunConfig parse_run_config(const Config& c) {
  RunConfig r;
  r.profile = parse_task_profile(c.get_string("task", "occupancy"));
  r.weights = LossWeights::for_profile(r.profile);
  r.dataset = c.get_string("dataset", "");
  if (r.dataset.empty()) throw ConfigError("config key 'dataset' is required");
  r.out = c.get_string("out", "out");
  r.provider = c.get_string("provider", "grid");
  if (r.provider != "grid" && r.provider != "tpv")
    throw ConfigError("provider must be 'grid' or 'tpv'");
  r.grid_n[0] = int(c.get_int("grid.nx", 32));
  r.grid_n[1] = int(c.get_int("grid.ny", 32));
  r.grid_n[2] = int(c.get_int("grid.nz", 32));
  r.tpv_features = int(c.get_int("tpv.features", 8));
  r.tpv_hidden = int(c.get_int("tpv.hidden", 16));
  r.samples_m = int(c.get_int("render.m", 96));
  if (r.samples_m < 2) throw ConfigError("render.m must be >= 2");
  r.weights.lambda_rgb = c.get_double("loss.rgb", r.weights.lambda_rgb);
  r.weights.lambda_eik = c.get_double("loss.eikonal", r.weights.lambda_eik);
  r.weights.lambda_hessian =
      c.get_double("loss.hessian", r.weights.lambda_hessian);
  r.weights.lambda_sparsity =
      c.get_double("loss.sparsity", r.weights.lambda_sparsity);
  r.weights.lambda_edge = c.get_double("loss.edge", r.weights.lambda_edge);
  r.weights.lambda_semantic =
      c.get_double("loss.semantic", r.weights.lambda_semantic);
  r.weights.rpj_only = c.get_bool("loss.rpj_only", false);
  r.weights.ssim_mix = c.get_bool("loss.ssim_mix", false);
  r.sup.p = c.get_double("supervision.p", 0.5);
  r.sup.l1 = c.get_double("supervision.l1_m", 1.0);
  r.sup.l2 = c.get_double("supervision.l2_m", -1.0);  // -1: half box extent
  auto ratio = c.get_list("supervision.ratio", {1, 1, 1});
  if (ratio.size() != 3)
    throw ConfigError("supervision.ratio expects three weights");
  for (int i = 0; i < 3; ++i) r.sup.ratio[i] = ratio[size_t(i)];
  r.sup.rays_per_step = int(c.get_int("supervision.rays_per_step", 256));
  r.optim.lr0 = c.get_double("optim.lr0", 1e-4);
  r.optim.weight_decay = c.get_double("optim.weight_decay", 0.01);
  r.epochs = int(c.get_int("optim.epochs", 10));
  r.steps_per_epoch = int(c.get_int("optim.steps_per_epoch", 200));
  if (r.epochs < 1 || r.steps_per_epoch < 1)
    throw ConfigError("optim.epochs and optim.steps_per_epoch must be >= 1");
  r.max_steps = size_t(c.get_int("optim.max_steps", 0));
  r.seed = uint64_t(c.get_int("seed", 1));
  r.threads = int(c.get_int("threads", 1));
  if (r.threads < 1) throw ConfigError("threads must be >= 1");
  r.reg_samples = int(c.get_int("reg.samples", 4096));
  r.edge_patch = int(c.get_int("edge.patch", 8));
  if (r.edge_patch < 2) throw ConfigError("edge.patch must be >= 2");
  for (double v : c.get_list("holdout", {}))
    r.holdout.push_back(size_t(v));
  r.resume = c.get_bool("resume", false);
  r.semantics = c.get_bool("semantics", true);
  r.init_noise = c.get_double("init.noise", 0.01);
  return r;
}

// ---------------------------------------------------------------------------
// Preloaded training context.

struct LoadedFrame {
  Camera cam;
  Image image;
  LabelMap labels;
  bool has_labels = false;
};

struct FitContext {
  RunConfig cfg;
  Dataset ds;
  std::vector<LoadedFrame> frames;
  std::vector<Pose> poses;
  std::vector<size_t> train;  // supervision-eligible frame indices
  GridSpec grid;
  int sem_channels = 0;

  bool held_out(size_t frame) const {
    return std::find(cfg.holdout.begin(), cfg.holdout.end(), frame) !=
           cfg.holdout.end();
  }
};

inline FitContext make_fit_context(RunConfig cfg) {
  FitContext ctx;
  ctx.ds = load_dataset(cfg.dataset);
  ctx.frames.reserve(ctx.ds.frames.size());
  bool all_labels = true;
  for (const FrameRecord& fr : ctx.ds.frames) {
    LoadedFrame lf;
    lf.cam = fr.cam;
    lf.image = ctx.ds.load_image(fr);
    if (!fr.labels.empty()) {
      lf.labels = ctx.ds.load_labels(fr);
      lf.has_labels = true;
    } else {
      all_labels = false;
    }
    ctx.poses.push_back(fr.cam.pose);
    ctx.frames.push_back(std::move(lf));
  }
  for (size_t f = 0; f < ctx.frames.size(); ++f) {
    bool hold = std::find(cfg.holdout.begin(), cfg.holdout.end(), f) !=
                cfg.holdout.end();
    if (!hold) ctx.train.push_back(f);
  }
  if (ctx.train.empty())
    throw ConfigError("holdout list leaves no training frames");
  ctx.grid = GridSpec(ctx.ds.bounds, cfg.grid_n[0], cfg.grid_n[1],
                      cfg.grid_n[2]);
  ctx.sem_channels =
      cfg.semantics && all_labels && ctx.ds.num_classes > 0
          ? ctx.ds.num_classes
          : 0;
  cfg.weights.use_semantic = ctx.sem_channels > 0;
  if (cfg.sup.l2 <= 0) cfg.sup.l2 = 0.5 * ctx.ds.bounds.extent().x;
  cfg.sup.validate();
  ctx.cfg = std::move(cfg);
  return ctx;
}

template <class Real>
AnyField<Real> make_field(const FitContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  if (cfg.provider == "grid")
    return SdfField<Real>::init(ctx.grid, ctx.sem_channels, cfg.seed,
                                Real(cfg.init_noise));
  return TpvField<Real>::init(ctx.grid, cfg.tpv_features, cfg.tpv_hidden,
                              ctx.sem_channels, cfg.seed,
                              Real(cfg.init_noise));
}

// ---------------------------------------------------------------------------
// Per-step sampling plan. Every random draw happens here, on the coordinator,
// in a frozen order, so sharding cannot perturb the stream.

struct StepPlan {
  size_t target = 0;
  std::vector<size_t> sources;  // adjacent non-held-out frames
  std::vector<Vec2d> pixels;
  std::vector<RaySpan> spans;
  size_t hit_count = 0;
  std::vector<Vec3d> eik_points;
  std::vector<size_t> hess_cells;
  std::vector<size_t> sparse_cells;
  int edge_x0 = -1, edge_y0 = -1;
};

namespace detail {

inline bool term_on(bool use, double lambda) { return use && lambda != 0.0; }

}  // namespace detail

inline StepPlan make_step_plan(const FitContext& ctx, size_t step,
                               std::mt19937_64& rng) {
  const RunConfig& cfg = ctx.cfg;
  const LossWeights& w = cfg.weights;
  StepPlan plan;
  size_t t = ctx.train[step % ctx.train.size()];
  plan.target = select_supervision_frame(
      t, ctx.poses, cfg.sup, rng, std::span<const size_t>(ctx.train));
  for (long d : {-1L, 1L}) {
    long s = long(plan.target) + d;
    if (s < 0 || size_t(s) >= ctx.frames.size()) continue;
    if (ctx.held_out(size_t(s))) continue;
    plan.sources.push_back(size_t(s));
  }
  const Camera& cam = ctx.frames[plan.target].cam;
  plan.pixels = sample_ray_batch(cam.intr.width, cam.intr.height,
                                 cfg.sup.rays_per_step, rng);
  plan.spans.reserve(plan.pixels.size());
  for (const Vec2d& px : plan.pixels) {
    RaySpan span = ray_aabb(pixel_to_ray(cam, px), ctx.grid.box);
    plan.hit_count += span.hit;
    plan.spans.push_back(span);
  }
  if (detail::term_on(w.use_eik, w.lambda_eik)) {
    size_t n = plan.hit_count * size_t(cfg.samples_m);
    std::uniform_real_distribution<double> ux(ctx.grid.box.min.x,
                                              ctx.grid.box.max.x);
    std::uniform_real_distribution<double> uy(ctx.grid.box.min.y,
                                              ctx.grid.box.max.y);
    std::uniform_real_distribution<double> uz(ctx.grid.box.min.z,
                                              ctx.grid.box.max.z);
    plan.eik_points.reserve(n);
    for (size_t i = 0; i < n; ++i)
      plan.eik_points.push_back({ux(rng), uy(rng), uz(rng)});
  }
  std::uniform_int_distribution<size_t> cell(0, ctx.grid.cells() - 1);
  if (detail::term_on(w.use_hessian, w.lambda_hessian)) {
    plan.hess_cells.reserve(size_t(cfg.reg_samples));
    for (int i = 0; i < cfg.reg_samples; ++i) plan.hess_cells.push_back(cell(rng));
  }
  if (detail::term_on(w.use_sparsity, w.lambda_sparsity)) {
    plan.sparse_cells.reserve(size_t(cfg.reg_samples));
    for (int i = 0; i < cfg.reg_samples; ++i)
      plan.sparse_cells.push_back(cell(rng));
  }
  if (detail::term_on(w.use_edge, w.lambda_edge)) {
    int p = cfg.edge_patch;
    if (cam.intr.width < p || cam.intr.height < p)
      throw ConfigError("edge.patch exceeds image size");
    std::uniform_int_distribution<int> ex(0, cam.intr.width - p);
    std::uniform_int_distribution<int> ey(0, cam.intr.height - p);
    plan.edge_x0 = ex(rng);
    plan.edge_y0 = ey(rng);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Loss-graph construction for one contiguous shard of a step.

template <class S>
struct ShardSums {
  std::optional<S> dep, rgb, eik, hess, sparse, edge, sem;
  size_t dep_n = 0, rgb_n = 0, eik_n = 0, hess_n = 0, sparse_n = 0,
         edge_n = 0, sem_n = 0;
  size_t rays = 0, rays_valid = 0;
};

struct ShardSlice {
  size_t px_begin = 0, px_end = 0;
  size_t eik_begin = 0, eik_end = 0;
  size_t hess_begin = 0, hess_end = 0;
  size_t sparse_begin = 0, sparse_end = 0;
  bool edge = false;
};

inline std::vector<ShardSlice> make_slices(const StepPlan& plan, int shards,
                                           int m) {
  std::vector<ShardSlice> out;
  out.resize(size_t(shards));
  size_t np = plan.pixels.size();
  size_t hits_before = 0;
  auto split = [&](size_t total, int s) {
    return std::pair<size_t, size_t>{total * size_t(s) / size_t(shards),
                                     total * size_t(s + 1) / size_t(shards)};
  };
  for (int s = 0; s < shards; ++s) {
    ShardSlice& sl = out[size_t(s)];
    std::tie(sl.px_begin, sl.px_end) = split(np, s);
    size_t hits = 0;
    for (size_t i = sl.px_begin; i < sl.px_end; ++i)
      hits += plan.spans[i].hit;
    // uniform eikonal points pair one-to-one with this shard's ray samples
    sl.eik_begin = hits_before * size_t(m);
    sl.eik_end = (hits_before + hits) * size_t(m);
    hits_before += hits;
    std::tie(sl.hess_begin, sl.hess_end) = split(plan.hess_cells.size(), s);
    std::tie(sl.sparse_begin, sl.sparse_end) =
        split(plan.sparse_cells.size(), s);
    sl.edge = s == 0;
  }
  return out;
}

namespace detail {

template <class S>
void acc_term(std::optional<S>& sum, size_t& n, const S& v) {
  sum = sum ? *sum + v : v;
  ++n;
}

inline void decode_cell(const GridSpec& spec, size_t cell, int& i, int& j,
                        int& k) {
  k = int(cell % size_t(spec.nz));
  j = int((cell / size_t(spec.nz)) % size_t(spec.ny));
  i = int(cell / (size_t(spec.nz) * size_t(spec.ny)));
}

inline bool interior_cell(const GridSpec& spec, size_t cell) {
  int i, j, k;
  decode_cell(spec, cell, i, j, k);
  return i >= 1 && i < spec.nx - 1 && j >= 1 && j < spec.ny - 1 && k >= 1 &&
         k < spec.nz - 1;
}

}  // namespace detail

template <class View>
ShardSums<typename View::S> shard_losses(const View& view,
                                         const FitContext& ctx,
                                         const StepPlan& plan,
                                         const ShardSlice& sl) {
  using S = typename View::S;
  const RunConfig& cfg = ctx.cfg;
  const LossWeights& w = cfg.weights;
  ShardSums<S> out;
  const LoadedFrame& target = ctx.frames[plan.target];
  S sharpness = view.sharpness();
  bool sem_on = detail::term_on(w.use_semantic, w.lambda_semantic) &&
                ctx.sem_channels > 0 && target.has_labels;
  bool rgb_on = detail::term_on(w.use_rgb, w.lambda_rgb);
  RenderWant want{rgb_on, sem_on};
  MvsOptions mopt{w.ssim_mix};
  std::array<SourceRef, 2> srcs{};
  size_t nsrc = 0;
  for (size_t s : plan.sources)
    srcs[nsrc++] = {&ctx.frames[s].image, &ctx.frames[s].cam};
  std::span<const SourceRef> sources(srcs.data(), nsrc);
  RayRender<S> rr;
  std::vector<Vec3d> eik_pts;
  for (size_t i = sl.px_begin; i < sl.px_end; ++i) {
    ++out.rays;
    if (!plan.spans[i].hit) continue;
    const Vec2d& px = plan.pixels[i];
    Ray ray = pixel_to_ray(target.cam, px);
    render_ray(view, ray, cfg.samples_m, sharpness, want, rr);
    int ix = int(px.x), iy = int(px.y);
    if (rgb_on) {
      Vec3d tc{target.image.at(ix, iy, 0), target.image.at(ix, iy, 1),
               target.image.at(ix, iy, 2)};
      detail::acc_term(out.rgb, out.rgb_n, photometric_to(rr.color, tc));
    }
    if (sem_on) {
      int lab = target.labels.at(ix, iy);
      if (lab > 0 && lab <= ctx.sem_channels)
        detail::acc_term(out.sem, out.sem_n,
                         l_semantic(std::span<const S>(rr.sem_probs), lab - 1));
    }
    if (w.use_dep && nsrc > 0) {
      double ac = pixel_axis_cos(target.cam.intr, px);
      DepOutcome<S> dep;
      if (w.rpj_only) {
        dep = l_dep_rpj(target.image, target.cam, px, sources, rr.depth * ac,
                        mopt);
      } else {
        dep = l_dep(target.image, target.cam, px, sources,
                    std::span<const S>(rr.weights), rr.residual,
                    std::span<const Vec3d>(rr.attr_points), rr.far_point,
                    scalar_value(rr.depth) * ac, mopt);
      }
      if (dep.valid) {
        ++out.rays_valid;
        ++out.dep_n;  // masked pixels count with an exact zero contribution
        if (!dep.masked) out.dep = out.dep ? *out.dep + dep.loss : dep.loss;
      }
    }
    if (detail::term_on(w.use_eik, w.lambda_eik))
      eik_pts.insert(eik_pts.end(), rr.sample_points.begin(),
                     rr.sample_points.end());
  }
  if (detail::term_on(w.use_eik, w.lambda_eik)) {
    eik_pts.insert(eik_pts.end(), plan.eik_points.begin() + long(sl.eik_begin),
                   plan.eik_points.begin() + long(sl.eik_end));
    if (!eik_pts.empty()) {
      out.eik = l_eikonal(view, std::span<const Vec3d>(eik_pts)) *
                double(eik_pts.size());
      out.eik_n = eik_pts.size();
    }
  }
  if (detail::term_on(w.use_hessian, w.lambda_hessian)) {
    std::span<const size_t> cells(plan.hess_cells.data() + sl.hess_begin,
                                  sl.hess_end - sl.hess_begin);
    size_t interior = 0;
    for (size_t c : cells) interior += detail::interior_cell(ctx.grid, c);
    if (interior > 0) {
      out.hess = l_hessian(view, cells) * double(interior);
      out.hess_n = interior;
    }
  }
  if (detail::term_on(w.use_sparsity, w.lambda_sparsity) &&
      sl.sparse_end > sl.sparse_begin) {
    std::vector<Vec3d> pts;
    pts.reserve(sl.sparse_end - sl.sparse_begin);
    for (size_t c = sl.sparse_begin; c < sl.sparse_end; ++c) {
      int i, j, k;
      detail::decode_cell(ctx.grid, plan.sparse_cells[c], i, j, k);
      pts.push_back(ctx.grid.center(i, j, k));
    }
    out.sparse =
        l_sparsity(view, std::span<const Vec3d>(pts)) * double(pts.size());
    out.sparse_n = pts.size();
  }
  if (sl.edge && detail::term_on(w.use_edge, w.lambda_edge) &&
      plan.edge_x0 >= 0) {
    int p = cfg.edge_patch;
    std::vector<S> depths;
    depths.reserve(size_t(p) * size_t(p));
    Image patch;
    patch.width = p;
    patch.height = p;
    patch.channels = 3;
    patch.data.resize(size_t(p) * size_t(p) * 3);
    bool all_hit = true;
    for (int y = 0; y < p && all_hit; ++y) {
      for (int x = 0; x < p && all_hit; ++x) {
        Vec2d epx{double(plan.edge_x0 + x), double(plan.edge_y0 + y)};
        Ray ray = pixel_to_ray(target.cam, epx);
        if (!ray_aabb(ray, ctx.grid.box).hit) {
          all_hit = false;
          break;
        }
        render_ray(view, ray, cfg.samples_m, sharpness, RenderWant{false, false},
                   rr);
        // smooth the z-depth map, matching what evaluation renders
        depths.push_back(rr.depth * pixel_axis_cos(target.cam.intr, epx));
        for (int c = 0; c < 3; ++c)
          patch.at(x, y, c) =
              target.image.at(plan.edge_x0 + x, plan.edge_y0 + y, c);
      }
    }
    if (all_hit) {
      out.edge = l_edge(std::span<const S>(depths), patch);
      out.edge_n = 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counts merged across shards; the per-shard total node weights each term sum
// by lambda / global count, so summing shard adjoints in a fixed order yields
// the exact gradient of the global weighted mean.

struct TermCounts {
  size_t dep = 0, rgb = 0, eik = 0, hess = 0, sparse = 0, edge = 0, sem = 0;
  size_t rays = 0, rays_valid = 0;
};

template <class S>
TermCounts merge_counts(const std::vector<ShardSums<S>>& sums) {
  TermCounts c;
  for (const ShardSums<S>& s : sums) {
    c.dep += s.dep_n;
    c.rgb += s.rgb_n;
    c.eik += s.eik_n;
    c.hess += s.hess_n;
    c.sparse += s.sparse_n;
    c.edge += s.edge_n;
    c.sem += s.sem_n;
    c.rays += s.rays;
    c.rays_valid += s.rays_valid;
  }
  return c;
}

template <class S>
LossReport fold_report(const std::vector<ShardSums<S>>& sums,
                       const TermCounts& c) {
  LossReport r;
  auto fold = [](TermStat& t, const std::optional<S>& v) {
    if (v) t.sum += scalar_value(*v);
  };
  for (const ShardSums<S>& s : sums) {
    fold(r.dep, s.dep);
    fold(r.rgb, s.rgb);
    fold(r.eik, s.eik);
    fold(r.hessian, s.hess);
    fold(r.sparsity, s.sparse);
    fold(r.edge, s.edge);
    fold(r.semantic, s.sem);
  }
  r.dep.count = c.dep;
  r.rgb.count = c.rgb;
  r.eik.count = c.eik;
  r.hessian.count = c.hess;
  r.sparsity.count = c.sparse;
  r.edge.count = c.edge;
  r.semantic.count = c.sem;
  r.valid_ray_fraction = c.rays ? double(c.rays_valid) / double(c.rays) : 0.0;
  return r;
}

// Coefficients for the per-shard total node: lambda over the global count.
template <class Real>
std::optional<Var<Real>> shard_total_node(Tape<Real>& tape,
                                          const ShardSums<Var<Real>>& s,
                                          const TermCounts& c,
                                          const LossWeights& w) {
  std::vector<NodeId> ids;
  std::vector<Real> coefs;
  auto put = [&](const std::optional<Var<Real>>& sum, size_t count,
                 double lambda) {
    if (!sum || count == 0 || lambda == 0.0) return;
    ids.push_back(sum->id);
    coefs.push_back(Real(lambda / double(count)));
  };
  put(s.dep, c.dep, w.use_dep ? 1.0 : 0.0);
  put(s.rgb, c.rgb, w.use_rgb ? w.lambda_rgb : 0.0);
  put(s.eik, c.eik, w.use_eik ? w.lambda_eik : 0.0);
  put(s.hess, c.hess, w.use_hessian ? w.lambda_hessian : 0.0);
  put(s.sparse, c.sparse, w.use_sparsity ? w.lambda_sparsity : 0.0);
  put(s.edge, c.edge, w.use_edge ? w.lambda_edge : 0.0);
  put(s.sem, c.sem, w.use_semantic ? w.lambda_semantic : 0.0);
  if (ids.empty()) return std::nullopt;
  return Var<Real>{&tape, tape.lincomb(ids, coefs, Real(0))};
}

// ---------------------------------------------------------------------------
// Step engine: persistent per-shard tapes, deterministic shard merge.

template <class Real, class FieldT, class TapeViewT>
class StepEngine {
 public:
  StepEngine(const FitContext& ctx, const FieldT& field, int shards)
      : ctx_(&ctx), field_(&field) {
    tapes_.reserve(size_t(shards));
    for (int s = 0; s < shards; ++s) {
      auto t = std::make_unique<Tape<Real>>();
      for (Real p : field.params) t->leaf(p);
      tapes_.push_back(std::move(t));
    }
  }

  // Builds the step's loss graph, fills the report, and accumulates the total
  // gradient (as doubles) when `grads` is non-null.
  LossReport run(const StepPlan& plan, std::vector<double>* grads) {
    size_t shards = tapes_.size();
    size_t pcount = field_->param_count();
    std::vector<ShardSlice> slices =
        make_slices(plan, int(shards), ctx_->cfg.samples_m);
    std::vector<ShardSums<Var<Real>>> sums(shards);
    auto run_shard = [&](size_t s) {
      Tape<Real>& tape = *tapes_[s];
      tape.rewind(pcount);
      for (size_t i = 0; i < pcount; ++i)
        tape.set_leaf(NodeId(i), field_->params[i]);
      TapeViewT view(*field_, tape, 0);
      sums[s] = shard_losses(view, *ctx_, plan, slices[s]);
    };
    if (shards == 1) {
      run_shard(0);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errs(shards);
      for (size_t s = 0; s < shards; ++s) {
        pool.emplace_back([&, s] {
          try {
            run_shard(s);
          } catch (...) {
            errs[s] = std::current_exception();
          }
        });
      }
      for (std::thread& t : pool) t.join();
      for (std::exception_ptr& e : errs)
        if (e) std::rethrow_exception(e);
    }
    TermCounts counts = merge_counts(sums);
    LossReport report = fold_report(sums, counts);
    combine_total(report, ctx_->cfg.weights);  // NaN check before backward
    if (grads) {
      grads->assign(pcount, 0.0);
      for (size_t s = 0; s < shards; ++s) {
        std::optional<Var<Real>> total = shard_total_node(
            *tapes_[s], sums[s], counts, ctx_->cfg.weights);
        if (!total) continue;
        const std::vector<Real>& adj = tapes_[s]->backward(total->id);
        for (size_t i = 0; i < pcount; ++i) (*grads)[i] += double(adj[i]);
      }
    }
    return report;
  }

 private:
  const FitContext* ctx_;
  const FieldT* field_;
  std::vector<std::unique_ptr<Tape<Real>>> tapes_;
};

// ---------------------------------------------------------------------------
// CSV reporting. Values print with max precision so determinism checks can
// compare files byte for byte.

inline std::vector<std::string> csv_term_names(const LossWeights& w) {
  std::vector<std::string> names;
  if (w.use_dep) names.push_back("dep");
  if (w.use_rgb) names.push_back("rgb");
  if (w.use_eik) names.push_back("eikonal");
  if (w.use_hessian) names.push_back("hessian");
  if (w.use_sparsity) names.push_back("sparsity");
  if (w.use_edge) names.push_back("edge");
  if (w.use_semantic) names.push_back("semantic");
  return names;
}

inline std::string csv_header(const LossWeights& w) {
  std::string line = "iteration";
  for (const std::string& n : csv_term_names(w)) line += "," + n;
  line += ",total,lr,valid_ray_fraction\n";
  return line;
}

inline std::string csv_row(size_t iteration, const LossReport& r,
                           const LossWeights& w, double lr) {
  char buf[64];
  std::string line = std::to_string(iteration);
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    line += buf;
  };
  if (w.use_dep) put(r.dep.mean());
  if (w.use_rgb) put(r.rgb.mean());
  if (w.use_eik) put(r.eik.mean());
  if (w.use_hessian) put(r.hessian.mean());
  if (w.use_sparsity) put(r.sparsity.mean());
  if (w.use_edge) put(r.edge.mean());
  if (w.use_semantic) put(r.semantic.mean());
  put(r.total);
  put(lr);
  put(r.valid_ray_fraction);
  line += "\n";
  return line;
}

// ---------------------------------------------------------------------------
// Checkpoint sidecar: optimizer accumulators, full-precision parameters, the
// CSV written so far, and the RNG stream, so a resumed run replays the exact
// trajectory of an uninterrupted one.

inline void save_sidecar(const std::filesystem::path& path, const AdamW& opt,
                         const std::vector<double>& params,
                         const std::string& csv, const std::mt19937_64& rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  opt.save(out);
  uint64_t n = params.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(params.data()),
            std::streamsize(n * sizeof(double)));
  uint64_t csv_size = csv.size();
  out.write(reinterpret_cast<const char*>(&csv_size), sizeof csv_size);
  out.write(csv.data(), std::streamsize(csv.size()));
  std::ostringstream rs;
  rs << rng;
  std::string rtext = rs.str();
  uint64_t rsize = rtext.size();
  out.write(reinterpret_cast<const char*>(&rsize), sizeof rsize);
  out.write(rtext.data(), std::streamsize(rtext.size()));
  if (!out) throw ConfigError("short write: " + path.string());
}

inline void load_sidecar(const std::filesystem::path& path, AdamW& opt,
                         std::vector<double>& params, std::string& csv,
                         std::mt19937_64& rng) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open for reading: " + path.string());
  opt.load(in);
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n != params.size())
    throw StructuralError("sidecar parameter count does not match the field");
  in.read(reinterpret_cast<char*>(params.data()),
          std::streamsize(n * sizeof(double)));
  uint64_t csv_size = 0;
  in.read(reinterpret_cast<char*>(&csv_size), sizeof csv_size);
  if (!in) throw ParseError("truncated sidecar", 0);
  csv.resize(csv_size);
  in.read(csv.data(), std::streamsize(csv_size));
  uint64_t rsize = 0;
  in.read(reinterpret_cast<char*>(&rsize), sizeof rsize);
  if (!in) throw ParseError("truncated sidecar", 0);
  std::string rtext(rsize, '\0');
  in.read(rtext.data(), std::streamsize(rsize));
  if (!in) throw ParseError("truncated sidecar", 0);
  std::istringstream rs(rtext);
  rs >> rng;
  if (!rs) throw ParseError("bad RNG state in sidecar", 0);
}

// ---------------------------------------------------------------------------
// The fitting loop.

struct FitResult {
  std::filesystem::path checkpoint;
  std::filesystem::path csv;
  LossReport last;
  size_t steps = 0;
};

template <class FieldT, class TapeViewT>
FitResult fit_loop(FitContext& ctx, FieldT& field) {
  namespace fs = std::filesystem;
  const RunConfig& cfg = ctx.cfg;
  fs::create_directories(cfg.out);
  fs::path ckpt_path = cfg.out / "checkpoint.socf";
  fs::path sidecar_path = cfg.out / "checkpoint.opt";
  fs::path csv_path = cfg.out / "loss.csv";
  AdamWConfig oc = cfg.optim;
  oc.total_steps = cfg.total_steps();
  AdamW opt(oc, param_blocks(field), field.param_count());
  std::mt19937_64 rng(cfg.seed);
  std::string csv = csv_header(cfg.weights);
  if (cfg.resume && fs::exists(sidecar_path)) {
    load_sidecar(sidecar_path, opt, field.params, csv, rng);
  }
  size_t start = opt.step_count();
  {
    std::ofstream cf(csv_path, std::ios::binary | std::ios::trunc);
    cf << csv;
    if (!cf) throw ConfigError("cannot write " + csv_path.string());
  }
  StepEngine<double, FieldT, TapeViewT> engine(ctx, field, cfg.threads);
  std::vector<double> grads;
  FitResult result;
  result.checkpoint = ckpt_path;
  result.csv = csv_path;
  size_t stop = cfg.total_steps();
  if (cfg.max_steps > 0) stop = std::min(stop, cfg.max_steps);
  for (size_t step = start; step < stop; ++step) {
    StepPlan plan = make_step_plan(ctx, step, rng);
    LossReport report = engine.run(plan, &grads);
    double lr = opt.learning_rate();
    opt.step(std::span<double>(field.params), std::span<const double>(grads));
    std::string row = csv_row(step, report, cfg.weights, lr);
    csv += row;
    {
      std::ofstream cf(csv_path, std::ios::binary | std::ios::app);
      cf << row;
    }
    result.last = report;
    ++result.steps;
    if ((step + 1) % size_t(cfg.steps_per_epoch) == 0) {
      save_field(ckpt_path, AnyField<double>(field));
      save_sidecar(sidecar_path, opt, field.params, csv, rng);
    }
  }
  return result;
}

inline FitResult fit_scene(const RunConfig& cfg_in) {
  FitContext ctx = make_fit_context(cfg_in);
  AnyField<double> field = make_field<double>(ctx);
  if (auto* g = std::get_if<SdfField<double>>(&field))
    return fit_loop<SdfField<double>, GridTapeView<double>>(ctx, *g);
  return fit_loop<TpvField<double>, TpvTapeView<double>>(
      ctx, std::get<TpvField<double>>(field));
}

// ---------------------------------------------------------------------------
// Whole-image rendering helpers used by evaluation and novel-view synthesis.

template <class View>
Image render_depth_image(const View& view, const Camera& cam, int m) {
  Image out;
  out.width = cam.intr.width;
  out.height = cam.intr.height;
  out.channels = 1;
  out.data.assign(size_t(out.width) * size_t(out.height),
                  float(kFarSentinel));
  auto sharpness = view.sharpness();
  RayRender<typename View::S> rr;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      Vec2d px{double(x), double(y)};
      Ray ray = pixel_to_ray(cam, px);
      if (!ray_aabb(ray, view.box()).hit) continue;
      render_ray(view, ray, m, sharpness, RenderWant{false, false}, rr);
      // rendered distance along the ray converts to camera z-depth
      out.at(x, y, 0) =
          float(scalar_value(rr.depth) * pixel_axis_cos(cam.intr, px));
    }
  }
  return out;
}

template <class View>
Image render_color_image(const View& view, const Camera& cam, int m) {
  Image out;
  out.width = cam.intr.width;
  out.height = cam.intr.height;
  out.channels = 3;
  out.data.assign(size_t(out.width) * size_t(out.height) * 3, 0.f);
  auto sharpness = view.sharpness();
  auto bg = view.background();
  RayRender<typename View::S> rr;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      Vec2d px{double(x), double(y)};
      Ray ray = pixel_to_ray(cam, px);
      if (!ray_aabb(ray, view.box()).hit) {
        for (int c = 0; c < 3; ++c)
          out.at(x, y, c) = float(clamp01(scalar_value(bg[c])));
        continue;
      }
      render_ray(view, ray, m, sharpness, RenderWant{true, false}, rr);
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = float(clamp01(scalar_value(rr.color[c])));
    }
  }
  return out;
}

// Applies fn to a plain (value-level) view over whichever field the variant
// holds.
template <class Real, class Fn>
auto with_plain_view(const AnyField<Real>& field, Fn&& fn) {
  if (const auto* g = std::get_if<SdfField<Real>>(&field))
    return fn(GridPlainView<Real>(*g));
  return fn(TpvPlainView<Real>(std::get<TpvField<Real>>(field)));
}

// ---------------------------------------------------------------------------
// Gradient check: one step's loss graph against central finite differences
// over every parameter, reporting the worst relative error among gradients of
// meaningful magnitude.

struct GradcheckResult {
  double max_rel_err = 0;
  double value = 0;
  size_t touched = 0;
  size_t params = 0;
  double seconds = 0;
};

template <class Real>
GradcheckResult gradcheck_run(const RunConfig& cfg_in, double fd_step,
                              double touch_floor) {
  auto t0 = std::chrono::steady_clock::now();
  FitContext ctx = make_fit_context(cfg_in);
  AnyField<Real> field = make_field<Real>(ctx);
  std::mt19937_64 rng(ctx.cfg.seed);
  StepPlan plan = make_step_plan(ctx, 0, rng);
  GradcheckResult res;
  auto run = [&](auto& f, auto tape_view_tag, auto plain_view_tag) {
    using FieldT = std::decay_t<decltype(f)>;
    using TapeViewT = typename decltype(tape_view_tag)::type;
    using PlainViewT = typename decltype(plain_view_tag)::type;
    size_t pcount = f.param_count();
    ShardSlice full;
    full.px_end = plan.pixels.size();
    full.eik_end = plan.eik_points.size();
    full.hess_end = plan.hess_cells.size();
    full.sparse_end = plan.sparse_cells.size();
    full.edge = true;
    // tape gradient
    Tape<Real> tape;
    for (Real p : f.params) tape.leaf(p);
    TapeViewT tview(f, tape, 0);
    std::vector<ShardSums<Var<Real>>> sums(1);
    sums[0] = shard_losses(tview, ctx, plan, full);
    TermCounts counts = merge_counts(sums);
    LossReport report = fold_report(sums, counts);
    res.value = combine_total(report, ctx.cfg.weights);
    std::vector<double> g_tape(pcount, 0.0);
    std::optional<Var<Real>> total =
        shard_total_node(tape, sums[0], counts, ctx.cfg.weights);
    if (total) {
      const std::vector<Real>& adj = tape.backward(total->id);
      for (size_t i = 0; i < pcount; ++i) g_tape[i] = double(adj[i]);
    }
    // finite differences on a mutable copy through the plain view
    FieldT copy = f;
    PlainViewT pview(copy);
    auto value_at = [&]() {
      std::vector<ShardSums<double>> vs(1);
      vs[0] = shard_losses(pview, ctx, plan, full);
      TermCounts vc = merge_counts(vs);
      LossReport vr = fold_report(vs, vc);
      return combine_total(vr, ctx.cfg.weights);
    };
    res.params = pcount;
    for (size_t i = 0; i < pcount; ++i) {
      Real saved = copy.params[i];
      copy.params[i] = Real(double(saved) + fd_step);
      double up = value_at();
      copy.params[i] = Real(double(saved) - fd_step);
      double down = value_at();
      copy.params[i] = saved;
      double g_fd = (up - down) / (2.0 * fd_step);
      double mag = std::max(std::abs(g_tape[i]), std::abs(g_fd));
      if (mag < touch_floor) continue;
      ++res.touched;
      double rel = std::abs(g_tape[i] - g_fd) / mag;
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  };
  if (auto* g = std::get_if<SdfField<Real>>(&field)) {
    run(*g, std::type_identity<GridTapeView<Real>>{},
        std::type_identity<GridPlainView<Real>>{});
  } else {
    run(std::get<TpvField<Real>>(field), std::type_identity<TpvTapeView<Real>>{},
        std::type_identity<TpvPlainView<Real>>{});
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count();
  return res;
}

}  // namespace occfit

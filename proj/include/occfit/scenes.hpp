// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "occfit/common.hpp"
#include "occfit/geometry.hpp"
#include "occfit/image.hpp"
#include "occfit/math.hpp"
#include "occfit/occgrid.hpp"

namespace occfit {

enum class PrimKind { kSphere, kBox, kPlane };

struct Primitive {
  PrimKind kind = PrimKind::kSphere;
  Vec3d center{0, 0, 0};   // sphere/box
  double radius = 1;       // sphere
  Vec3d half{1, 1, 1};     // box half extents
  Vec3d normal{0, 0, 1};   // plane, unit
  double offset = 0;       // plane: dot(normal, p) = offset
  Vec3d albedo{0.6, 0.6, 0.6};
};

inline double primitive_sdf(const Primitive& prim, const Vec3d& p) {
  switch (prim.kind) {
    case PrimKind::kSphere:
      return norm(p - prim.center) - prim.radius;
    case PrimKind::kBox: {
      Vec3d d = p - prim.center;
      Vec3d q{std::fabs(d.x) - prim.half.x, std::fabs(d.y) - prim.half.y,
              std::fabs(d.z) - prim.half.z};
      Vec3d qp{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
      return norm(qp) + std::min(std::max(q.x, std::max(q.y, q.z)), 0.0);
    }
    case PrimKind::kPlane:
      return dot(prim.normal, p) - prim.offset;
  }
  throw DomainError("unknown primitive kind");
}

// Procedural scene: union of exact SDF primitives inside a volume box, lit by
// one fixed directional light, albedo modulated by a world-space pattern so
// surfaces carry photoconsistent texture.
struct AnalyticScene {
  Aabb box;
  std::vector<Primitive> primitives;
  double texture_freq = 1.5;        // base pattern frequency per meter
  Vec3d light{0.32, 0.24, 0.92};    // normalized in shade()
  double ambient = 0.35;
  Vec3d background{0.72, 0.78, 0.86};
};

inline double analytic_sdf(const AnalyticScene& scene, const Vec3d& p) {
  if (scene.primitives.empty()) throw DomainError("scene has no primitives");
  double s = primitive_sdf(scene.primitives[0], p);
  for (size_t i = 1; i < scene.primitives.size(); ++i)
    s = std::min(s, primitive_sdf(scene.primitives[i], p));
  return s;
}

inline int nearest_primitive(const AnalyticScene& scene, const Vec3d& p) {
  int best = 0;
  double s = primitive_sdf(scene.primitives[0], p);
  for (size_t i = 1; i < scene.primitives.size(); ++i) {
    double si = primitive_sdf(scene.primitives[i], p);
    if (si < s) {
      s = si;
      best = int(i);
    }
  }
  return best;
}

inline Vec3d primitive_normal(const Primitive& prim, const Vec3d& p) {
  switch (prim.kind) {
    case PrimKind::kSphere:
      return normalized(p - prim.center);
    case PrimKind::kPlane:
      return prim.normal;
    case PrimKind::kBox: {
      const double h = 1e-6;
      Vec3d g;
      for (int a = 0; a < 3; ++a) {
        Vec3d pp = p, pm = p;
        pp[a] += h;
        pm[a] -= h;
        g[a] = primitive_sdf(prim, pp) - primitive_sdf(prim, pm);
      }
      return normalized(g);
    }
  }
  throw DomainError("unknown primitive kind");
}

// Smallest t >= t_min where the ray hits the primitive, if any.
inline std::optional<double> primitive_hit(const Primitive& prim, const Ray& ray,
                                           double t_min) {
  switch (prim.kind) {
    case PrimKind::kSphere: {
      Vec3d oc = ray.origin - prim.center;
      double b = dot(oc, ray.dir);
      double c = dot(oc, oc) - prim.radius * prim.radius;
      double disc = b * b - c;
      if (disc < 0) return std::nullopt;
      double s = std::sqrt(disc);
      double t = -b - s;
      if (t < t_min) t = -b + s;
      if (t < t_min) return std::nullopt;
      return t;
    }
    case PrimKind::kPlane: {
      double denom = dot(prim.normal, ray.dir);
      if (std::fabs(denom) < 1e-12) return std::nullopt;
      double t = (prim.offset - dot(prim.normal, ray.origin)) / denom;
      if (t < t_min) return std::nullopt;
      return t;
    }
    case PrimKind::kBox: {
      double t0 = -std::numeric_limits<double>::infinity();
      double t1 = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        double o = ray.origin[a] - prim.center[a], d = ray.dir[a];
        double h = prim.half[a];
        if (std::fabs(d) < 1e-12) {
          if (o < -h || o > h) return std::nullopt;
          continue;
        }
        double ta = (-h - o) / d, tb = (h - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return std::nullopt;
      }
      double t = t0 >= t_min ? t0 : t1;
      if (t < t_min || t0 > t1) return std::nullopt;
      return t;
    }
  }
  throw DomainError("unknown primitive kind");
}

struct SceneHit {
  bool hit = false;
  double t = 0;
  int prim = -1;
  Vec3d point{0, 0, 0};
};

inline SceneHit scene_hit(const AnalyticScene& scene, const Ray& ray,
                          double t_min = kNearClip) {
  SceneHit best;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    auto t = primitive_hit(scene.primitives[i], ray, t_min);
    if (t && (!best.hit || *t < best.t)) {
      best.hit = true;
      best.t = *t;
      best.prim = int(i);
    }
  }
  if (best.hit) best.point = ray.origin + ray.dir * best.t;
  return best;
}

// Deterministic world-space texture: three sinusoidal octaves along skewed
// directions, so brightness has a nonzero gradient almost everywhere and
// carries energy from metre-scale structure (a wide matching basin for
// photometric alignment) down to ~decimetre detail (sharp localization).
// The per-primitive phase keeps adjacent surfaces from sharing one lattice.
inline double texture_factor(const Vec3d& p, double freq, int prim_index) {
  double phase = 0.37 * prim_index;
  double u1 = p.x + 0.57 * p.y + 0.33 * p.z;
  double u2 = -0.41 * p.x + p.y + 0.29 * p.z;
  double u3 = 0.23 * p.x - 0.35 * p.y + p.z;
  constexpr double kTau = 6.283185307179586;
  double s = 0.18 * std::sin(kTau * 0.45 * freq * u1 + 2.1 * phase) +
             0.10 * std::sin(kTau * 1.80 * freq * u2 + 4.3 * phase + 0.7) +
             0.06 * std::sin(kTau * 6.00 * freq * u3 + 6.9 * phase + 1.9);
  return 0.66 + s;  // stays within [0.32, 1.0]
}

inline Vec3d shade(const AnalyticScene& scene, const SceneHit& hit) {
  const Primitive& prim = scene.primitives[size_t(hit.prim)];
  Vec3d n = primitive_normal(prim, hit.point);
  Vec3d l = normalized(scene.light);
  double diff = std::max(0.0, dot(n, l));
  double tex = texture_factor(hit.point, scene.texture_freq, hit.prim);
  double gain = scene.ambient + (1.0 - scene.ambient) * diff;
  return {clamp01(prim.albedo.x * tex * gain), clamp01(prim.albedo.y * tex * gain),
          clamp01(prim.albedo.z * tex * gain)};
}

struct OracleFrame {
  Image color;   // 3 channels
  Image depth;   // 1 channel, camera z-depth, misses carry kFarSentinel
  LabelMap labels;
};

// Exact intersection render: nearest hit per pixel, Lambertian shading,
// camera-frame z stored as depth.
inline OracleFrame oracle_render(const AnalyticScene& scene, const Camera& cam) {
  OracleFrame fr;
  fr.color = Image(cam.intr.width, cam.intr.height, 3);
  fr.depth = Image(cam.intr.width, cam.intr.height, 1);
  fr.labels = LabelMap(cam.intr.width, cam.intr.height);
  for (int y = 0; y < cam.intr.height; ++y)
    for (int x = 0; x < cam.intr.width; ++x) {
      Ray ray = pixel_to_ray(cam, {double(x), double(y)});
      SceneHit hit = scene_hit(scene, ray);
      if (hit.hit) {
        Vec3d c = shade(scene, hit);
        fr.color.at(x, y, 0) = float(c.x);
        fr.color.at(x, y, 1) = float(c.y);
        fr.color.at(x, y, 2) = float(c.z);
        fr.depth.at(x, y, 0) = float(cam.pose.to_camera(hit.point).z);
        fr.labels.at(x, y) = uint8_t(hit.prim + 1);
      } else {
        fr.color.at(x, y, 0) = float(scene.background.x);
        fr.color.at(x, y, 1) = float(scene.background.y);
        fr.color.at(x, y, 2) = float(scene.background.z);
        fr.depth.at(x, y, 0) = float(kFarSentinel);
        fr.labels.at(x, y) = 0;
      }
    }
  return fr;
}

enum class TrajKind { kStraight, kArc };

struct TrajectorySpec {
  TrajKind kind = TrajKind::kStraight;
  int frames = 20;
  double spacing = 0.4;        // exact ego distance between frames, meters
  Vec3d start{0, 0, 1.5};
  Vec3d forward{1, 0, 0};      // initial heading, also the view direction
  double arc_radius = 20.0;    // arc only
  double pitch_deg = 0.0;      // camera tilt below the horizon
};

// Camera centers spaced exactly `spacing` apart; straight lines keep the
// heading, arcs follow the tangent of a circle in the horizontal plane.
inline std::vector<Pose> generate_trajectory(const TrajectorySpec& spec) {
  if (spec.frames < 1) throw DomainError("trajectory needs >= 1 frame");
  if (spec.spacing <= 0) throw DomainError("trajectory spacing must be > 0");
  std::vector<Pose> poses;
  poses.reserve(size_t(spec.frames));
  auto pitch = [&](const Vec3d& fwd) {
    double a = spec.pitch_deg * kPi / 180.0;
    Vec3d f = normalized(fwd);
    // rotate downward about the horizontal left axis
    return Vec3d{f.x * std::cos(a), f.y * std::cos(a), f.z - std::sin(a)};
  };
  if (spec.kind == TrajKind::kStraight) {
    Vec3d dir = normalized(spec.forward);
    for (int i = 0; i < spec.frames; ++i)
      poses.push_back(look_pose(spec.start + dir * (spec.spacing * i), pitch(dir)));
    return poses;
  }
  double r = spec.arc_radius;
  if (r <= spec.spacing / 2)
    throw DomainError("arc radius too small for the requested spacing");
  double dtheta = 2.0 * std::asin(spec.spacing / (2.0 * r));
  Vec3d f0 = normalized(Vec3d{spec.forward.x, spec.forward.y, 0});
  Vec3d left{-f0.y, f0.x, 0};
  Vec3d center = spec.start + left * r;
  double theta0 = std::atan2(spec.start.y - center.y, spec.start.x - center.x);
  for (int i = 0; i < spec.frames; ++i) {
    double th = theta0 + dtheta * i;
    Vec3d pos{center.x + r * std::cos(th), center.y + r * std::sin(th),
              spec.start.z};
    Vec3d fwd{-std::sin(th), std::cos(th), 0};
    poses.push_back(look_pose(pos, pitch(fwd)));
  }
  return poses;
}

// Default procedural scene: a 12.8 m cube with a textured ground slab, two
// spheres and a box, observed by a straight 20-frame pass.
inline AnalyticScene desk_scene() {
  AnalyticScene scene;
  scene.box = Aabb{{0, -6.4, 0}, {12.8, 6.4, 12.8}};
  Primitive ground;
  ground.kind = PrimKind::kBox;
  ground.center = {6.4, 0, 0.4};
  ground.half = {6.4, 6.4, 0.4};  // top face at z = 0.8
  ground.albedo = {0.55, 0.5, 0.45};
  Primitive s1;
  s1.kind = PrimKind::kSphere;
  s1.center = {5.2, -1.6, 1.9};
  s1.radius = 1.1;
  s1.albedo = {0.75, 0.25, 0.2};
  Primitive s2;
  s2.kind = PrimKind::kSphere;
  s2.center = {7.6, 2.1, 1.7};
  s2.radius = 0.9;
  s2.albedo = {0.2, 0.45, 0.8};
  Primitive b1;
  b1.kind = PrimKind::kBox;
  b1.center = {9.4, -2.4, 1.7};
  b1.half = {0.9, 0.9, 0.9};
  b1.albedo = {0.85, 0.75, 0.25};
  scene.primitives = {ground, s1, s2, b1};
  return scene;
}

inline TrajectorySpec desk_trajectory() {
  TrajectorySpec t;
  t.kind = TrajKind::kStraight;
  t.frames = 20;
  t.spacing = 0.4;
  t.start = {0.6, 0.4, 2.6};
  t.forward = {1, 0, 0};
  t.pitch_deg = 12.0;
  return t;
}

inline Intrinsics desk_intrinsics() {
  Intrinsics k;
  k.width = 128;
  k.height = 128;
  k.fx = 110;
  k.fy = 110;
  k.cx = 63.5;
  k.cy = 63.5;
  return k;
}

// Ground-truth occupancy at voxel centers; labels are primitive index + 1.
inline OccGrid make_gt_occupancy(const AnalyticScene& scene, const GridSpec& spec) {
  OccGrid grid;
  grid.spec = spec;
  grid.num_classes = int(scene.primitives.size());
  grid.labels.assign(spec.cells(), 0);
  for (int i = 0; i < spec.nx; ++i)
    for (int j = 0; j < spec.ny; ++j)
      for (int k = 0; k < spec.nz; ++k) {
        Vec3d c = spec.center(i, j, k);
        if (analytic_sdf(scene, c) <= 0.0)
          grid.labels[spec.index(i, j, k)] = uint8_t(nearest_primitive(scene, c) + 1);
      }
  return grid;
}

// Camera-visibility mask: a voxel counts as observed when some camera sees
// its center directly, i.e. the center projects into the image and is no
// farther than the first surface along that ray (plus half a voxel diagonal).
inline std::vector<uint8_t> visibility_mask(const AnalyticScene& scene,
                                            const GridSpec& spec,
                                            const std::vector<Camera>& cameras) {
  std::vector<uint8_t> mask(spec.cells(), 0);
  Vec3d v = spec.voxel_size();
  double tol = 0.5 * std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  for (int i = 0; i < spec.nx; ++i)
    for (int j = 0; j < spec.ny; ++j)
      for (int k = 0; k < spec.nz; ++k) {
        Vec3d c = spec.center(i, j, k);
        for (const Camera& cam : cameras) {
          Projection<double> proj = try_project(cam, c);
          if (!proj.valid) continue;
          Vec3d cc = cam.pose.camera_center();
          double dist = norm(c - cc);
          if (dist < kNearClip) continue;
          Ray ray{cc, (c - cc) * (1.0 / dist)};
          SceneHit hit = scene_hit(scene, ray);
          if (!hit.hit || dist <= hit.t + tol) {
            mask[spec.index(i, j, k)] = 1;
            break;
          }
        }
      }
  return mask;
}

// ---------------------------------------------------------------------------
// Dataset on disk: manifest.txt + cameras.txt + ppm/pfm/pgm frames.
// ---------------------------------------------------------------------------

struct FrameRecord {
  int id = 0;
  double timestamp = 0;
  std::string image, depth, labels;  // paths relative to the dataset root
  Camera cam;
};

struct Dataset {
  std::filesystem::path root;
  Aabb bounds;
  int num_classes = 0;
  std::vector<FrameRecord> frames;

  const FrameRecord& frame_by_id(int id) const {
    for (const auto& f : frames)
      if (f.id == id) return f;
    throw ConfigError("dataset has no frame id " + std::to_string(id));
  }
  Image load_image(const FrameRecord& f) const { return read_ppm(root / f.image); }
  Image load_depth(const FrameRecord& f) const {
    if (f.depth.empty()) throw ConfigError("frame has no depth map");
    return read_pfm(root / f.depth);
  }
  LabelMap load_labels(const FrameRecord& f) const {
    if (f.labels.empty()) throw ConfigError("frame has no label map");
    return read_pgm(root / f.labels);
  }
};

inline void write_cameras_txt(const std::filesystem::path& path,
                              const std::vector<FrameRecord>& frames) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out << "# frame_id fx fy cx cy  r00 r01 r02 tx  r10 r11 r12 ty  r20 r21 r22 tz\n";
  out.precision(17);
  for (const auto& f : frames) {
    out << f.id << " " << f.cam.intr.fx << " " << f.cam.intr.fy << " "
        << f.cam.intr.cx << " " << f.cam.intr.cy;
    const Mat3& r = f.cam.pose.rotation;
    const Vec3d& t = f.cam.pose.translation;
    for (int row = 0; row < 3; ++row) {
      out << " " << r(row, 0) << " " << r(row, 1) << " " << r(row, 2) << " "
          << t[row];
    }
    out << "\n";
  }
}

// cameras.txt carries no image size, so the loader passes it in from the
// manifest-referenced images.
inline void read_cameras_txt(const std::filesystem::path& path,
                             std::vector<FrameRecord>& frames, int width,
                             int height) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open for reading: " + path.string());
  std::string line;
  size_t offset = 0;
  std::vector<bool> seen(frames.size(), false);
  while (std::getline(in, line)) {
    size_t line_off = offset;
    offset += line.size() + 1;
    std::string body = line.substr(0, line.find('#'));
    std::istringstream ss(body);
    int id;
    if (!(ss >> id)) continue;  // blank or comment line
    double fx, fy, cx, cy, m[12];
    if (!(ss >> fx >> fy >> cx >> cy))
      throw ParseError("camera row missing intrinsics", line_off);
    for (int i = 0; i < 12; ++i)
      if (!(ss >> m[i])) throw ParseError("camera row missing pose entries", line_off);
    for (auto& f : frames) {
      if (f.id != id) continue;
      f.cam.intr = Intrinsics{fx, fy, cx, cy, width, height};
      Mat3 r;
      Vec3d t{m[3], m[7], m[11]};
      for (int row = 0; row < 3; ++row)
        for (int col = 0; col < 3; ++col) r(row, col) = m[row * 4 + col];
      f.cam.pose = Pose(r, t);  // validates orthonormality
      seen[size_t(&f - frames.data())] = true;
    }
  }
  for (size_t i = 0; i < frames.size(); ++i)
    if (!seen[i])
      throw ConfigError("cameras.txt misses frame id " +
                        std::to_string(frames[i].id));
}

inline void write_manifest(const std::filesystem::path& path, const Dataset& ds,
                           const std::string& cameras_rel) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out.precision(17);
  out << "bounds " << ds.bounds.min.x << " " << ds.bounds.min.y << " "
      << ds.bounds.min.z << " " << ds.bounds.max.x << " " << ds.bounds.max.y
      << " " << ds.bounds.max.z << "\n";
  out << "classes " << ds.num_classes << "\n";
  out << "cameras " << cameras_rel << "\n";
  for (const auto& f : ds.frames) {
    out << "frame " << f.id << " " << f.timestamp << " " << f.image;
    if (!f.depth.empty()) out << " " << f.depth;
    if (!f.labels.empty()) out << " " << f.labels;
    out << "\n";
  }
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open for reading: " + manifest_path.string());
  Dataset ds;
  ds.root = manifest_path.parent_path();
  std::string cameras_rel;
  std::string line;
  size_t offset = 0;
  bool have_bounds = false;
  while (std::getline(in, line)) {
    size_t line_off = offset;
    offset += line.size() + 1;
    std::string body = line.substr(0, line.find('#'));
    std::istringstream ss(body);
    std::string key;
    if (!(ss >> key)) continue;
    if (key == "bounds") {
      if (!(ss >> ds.bounds.min.x >> ds.bounds.min.y >> ds.bounds.min.z >>
            ds.bounds.max.x >> ds.bounds.max.y >> ds.bounds.max.z))
        throw ParseError("manifest bounds needs 6 numbers", line_off);
      have_bounds = true;
    } else if (key == "classes") {
      if (!(ss >> ds.num_classes))
        throw ParseError("manifest classes needs a count", line_off);
    } else if (key == "cameras") {
      if (!(ss >> cameras_rel))
        throw ParseError("manifest cameras needs a path", line_off);
    } else if (key == "frame") {
      FrameRecord f;
      if (!(ss >> f.id >> f.timestamp >> f.image))
        throw ParseError("manifest frame needs id, timestamp, image", line_off);
      ss >> f.depth >> f.labels;  // optional columns
      ds.frames.push_back(std::move(f));
    } else {
      throw ParseError("unknown manifest key '" + key + "'", line_off);
    }
  }
  if (!have_bounds) throw ConfigError("manifest has no bounds line");
  if (cameras_rel.empty()) throw ConfigError("manifest has no cameras line");
  if (ds.frames.empty()) throw ConfigError("manifest lists no frames");
  for (size_t i = 1; i < ds.frames.size(); ++i)
    if (!(ds.frames[i].timestamp > ds.frames[i - 1].timestamp))
      throw ConfigError("manifest timestamps must strictly increase");
  // all referenced files must exist up front
  auto must_exist = [&](const std::string& rel) {
    if (!rel.empty() && !std::filesystem::exists(ds.root / rel))
      throw ConfigError("dataset file missing: " + rel);
  };
  must_exist(cameras_rel);
  for (const auto& f : ds.frames) {
    must_exist(f.image);
    must_exist(f.depth);
    must_exist(f.labels);
  }
  Image first = read_ppm(ds.root / ds.frames[0].image);
  read_cameras_txt(ds.root / cameras_rel, ds.frames, first.width, first.height);
  return ds;
}

// Renders and writes the full dataset for a scene; returns the loaded view.
inline Dataset write_scene_dataset(const std::filesystem::path& dir,
                                   const AnalyticScene& scene,
                                   const Intrinsics& intr,
                                   const std::vector<Pose>& poses,
                                   const GridSpec& occ_spec,
                                   double timestep = 0.1) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "depth");
  fs::create_directories(dir / "labels");
  Dataset ds;
  ds.root = dir;
  ds.bounds = scene.box;
  ds.num_classes = int(scene.primitives.size());
  std::vector<Camera> cams;
  for (size_t i = 0; i < poses.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%03zu", i);
    FrameRecord f;
    f.id = int(i);
    f.timestamp = double(i) * timestep;
    f.image = std::string("images/") + name + ".ppm";
    f.depth = std::string("depth/") + name + ".pfm";
    f.labels = std::string("labels/") + name + ".pgm";
    f.cam = Camera{intr, poses[i]};
    cams.push_back(f.cam);
    OracleFrame fr = oracle_render(scene, f.cam);
    write_ppm(dir / f.image, fr.color);
    write_pfm(dir / f.depth, fr.depth);
    write_pgm(dir / f.labels, fr.labels);
    ds.frames.push_back(std::move(f));
  }
  write_cameras_txt(dir / "cameras.txt", ds.frames);
  write_manifest(dir / "manifest.txt", ds, "cameras.txt");
  OccGrid gt = make_gt_occupancy(scene, occ_spec);
  gt.mask = visibility_mask(scene, occ_spec, cams);
  write_socg(dir / "gt_occupancy.socg", gt);
  return load_dataset(dir / "manifest.txt");
}

}  // namespace occfit

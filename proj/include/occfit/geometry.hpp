// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "occfit/common.hpp"
#include "occfit/image.hpp"
#include "occfit/math.hpp"

namespace occfit {

// Camera frame: x right, y down, z forward (optical axis). Pixel centers sit
// at integer coordinates; the valid continuous pixel domain is
// [0, width-1] x [0, height-1].
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  bool pixel_in_bounds(double u, double v) const {
    return u >= 0.0 && u <= width - 1.0 && v >= 0.0 && v <= height - 1.0;
  }
};

// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
  Mat3 rotation;
  Vec3d translation{0, 0, 0};

  Pose() = default;
  Pose(const Mat3& r, const Vec3d& t, bool validate = true)
      : rotation(r), translation(t) {
    if (validate) check_orthonormal();
  }

  void check_orthonormal() const {
    Mat3 g = rotation * rotation.transposed();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double want = i == j ? 1.0 : 0.0;
        if (std::fabs(g(i, j) - want) > 1e-6)
          throw DomainError("pose rotation is not orthonormal");
      }
    double det =
        rotation(0, 0) * (rotation(1, 1) * rotation(2, 2) - rotation(1, 2) * rotation(2, 1)) -
        rotation(0, 1) * (rotation(1, 0) * rotation(2, 2) - rotation(1, 2) * rotation(2, 0)) +
        rotation(0, 2) * (rotation(1, 0) * rotation(2, 1) - rotation(1, 1) * rotation(2, 0));
    if (det < 0) throw DomainError("pose rotation is reflected");
  }

  Vec3d camera_center() const {
    return rotation.transposed() * (translation * -1.0);
  }
  Vec3d to_camera(const Vec3d& p_world) const {
    return rotation * p_world + translation;
  }
  Vec3d to_world(const Vec3d& p_cam) const {
    return rotation.transposed() * (p_cam - translation);
  }
};

struct Camera {
  Intrinsics intr;
  Pose pose;
};

struct Ray {
  Vec3d origin{0, 0, 0};
  Vec3d dir{0, 0, 1};  // unit length
};

// Camera pose from a world position and viewing direction; world +z is up.
inline Pose look_pose(const Vec3d& position, const Vec3d& forward,
                      const Vec3d& up = {0, 0, 1}) {
  Vec3d zc = normalized(forward);
  Vec3d xc = cross(zc, up);
  double n = norm(xc);
  if (n < 1e-9) throw DomainError("look direction parallel to up axis");
  xc = xc * (1.0 / n);
  Vec3d yc = cross(zc, xc);
  Mat3 r = Mat3::from_rows(xc, yc, zc);
  return Pose(r, (r * position) * -1.0);
}

inline Ray pixel_to_ray(const Camera& cam, const Vec2d& px) {
  if (!cam.intr.pixel_in_bounds(px.x, px.y))
    throw DomainError("pixel_to_ray: pixel outside image bounds");
  Vec3d dir_cam{(px.x - cam.intr.cx) / cam.intr.fx,
                (px.y - cam.intr.cy) / cam.intr.fy, 1.0};
  return Ray{cam.pose.camera_center(),
             normalized(cam.pose.rotation.transposed() * dir_cam)};
}

// Cosine between the pixel's viewing ray and the optical axis; converts
// distance along the ray into camera z-depth.
inline double pixel_axis_cos(const Intrinsics& intr, const Vec2d& px) {
  double a = (px.x - intr.cx) / intr.fx;
  double b = (px.y - intr.cy) / intr.fy;
  return 1.0 / std::sqrt(1.0 + a * a + b * b);
}

// World point of the target pixel at camera z-depth z. Templated so depth may
// be a tape expression.
template <class T>
Vec3<T> backproject(const Camera& cam, const Vec2d& px, const T& z) {
  Vec3<T> p_cam{z * ((px.x - cam.intr.cx) / cam.intr.fx),
                z * ((px.y - cam.intr.cy) / cam.intr.fy), z};
  // to_world with templated components
  Vec3d c = cam.pose.camera_center();
  Vec3<T> r = rotate(cam.pose.rotation.transposed(), p_cam);
  return {r.x + c.x, r.y + c.y, r.z + c.z};
}

template <class T>
struct Projection {
  Vec2<T> pixel;
  bool valid = false;  // in front of the near clip AND inside image bounds
};

// No-throw projection used in warping loops; valid==false when the point is
// behind the near clip or lands outside the image.
template <class T>
Projection<T> try_project(const Camera& cam, const Vec3<T>& p_world) {
  Vec3<T> pc = rotate(cam.pose.rotation, p_world);
  Projection<T> out;
  double z = scalar_value(pc.z) + cam.pose.translation.z;
  if (z <= kNearClip) return out;
  Vec3<T> p{pc.x + cam.pose.translation.x, pc.y + cam.pose.translation.y,
            pc.z + cam.pose.translation.z};
  out.pixel.x = cam.intr.cx + cam.intr.fx * (p.x / p.z);
  out.pixel.y = cam.intr.cy + cam.intr.fy * (p.y / p.z);
  out.valid = cam.intr.pixel_in_bounds(scalar_value(out.pixel.x),
                                       scalar_value(out.pixel.y));
  return out;
}

template <class T>
Vec2<T> project_point(const Camera& cam, const Vec3<T>& p_world) {
  Vec3<T> pc = rotate(cam.pose.rotation, p_world);
  double z = scalar_value(pc.z) + cam.pose.translation.z;
  if (z <= kNearClip)
    throw BehindCameraError("project_point: point behind near clip");
  Vec3<T> p{pc.x + cam.pose.translation.x, pc.y + cam.pose.translation.y,
            pc.z + cam.pose.translation.z};
  return {cam.intr.cx + cam.intr.fx * (p.x / p.z),
          cam.intr.cy + cam.intr.fy * (p.y / p.z)};
}

// Reprojects target pixel px at target camera z-depth z into the source view.
template <class T>
Projection<T> warp_pixel(const Camera& target, const Camera& source,
                         const Vec2d& px, const T& z) {
  if (!target.intr.pixel_in_bounds(px.x, px.y))
    throw DomainError("warp_pixel: pixel outside target bounds");
  if (scalar_value(z) <= 0.0) return {};
  return try_project(source, backproject(target, px, z));
}

struct RaySpan {
  bool hit = false;
  double t_near = 0, t_far = 0;
};

// Slab intersection against an axis-aligned box; entry is clamped to the near
// clip, and an origin inside the box enters at the near clip.
inline RaySpan ray_aabb(const Ray& ray, const Aabb& box) {
  double t0 = kNearClip, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    double o = ray.origin[a], d = ray.dir[a];
    double lo = box.min[a], hi = box.max[a];
    if (std::fabs(d) < 1e-12) {
      if (o < lo || o > hi) return {};
      continue;
    }
    double ta = (lo - o) / d, tb = (hi - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return {};
  }
  return {true, t0, t1};
}

// Pose offsets for novel-view rendering: translation is applied to the camera
// center in world coordinates, yaw spins the camera about the world up axis.
inline Pose offset_pose(const Pose& pose, double dx, double dy, double yaw_deg) {
  Vec3d center = pose.camera_center() + Vec3d{dx, dy, 0.0};
  Mat3 r_cw = Mat3::rotation_z(yaw_deg * kPi / 180.0) * pose.rotation.transposed();
  Mat3 r_wc = r_cw.transposed();
  return Pose(r_wc, (r_wc * center) * -1.0);
}

}  // namespace occfit

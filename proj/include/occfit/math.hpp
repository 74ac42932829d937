// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>

#include "occfit/common.hpp"

namespace occfit {

constexpr double kPi = 3.14159265358979323846;

// Small fixed-size vectors templated on the scalar so the same geometry code
// runs on plain doubles and on tape expressions.

template <class T>
struct Vec2 {
  T x{}, y{};
};

template <class T>
struct Vec3 {
  T x{}, y{}, z{};

  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

using Vec2d = Vec2<double>;
using Vec3d = Vec3<double>;

template <class T>
inline Vec3<T> operator+(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.x + b.x, a.y + b.y, a.z + b.z};
}
template <class T>
inline Vec3<T> operator-(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.x - b.x, a.y - b.y, a.z - b.z};
}
template <class T, class S>
inline auto operator*(const Vec3<T>& v, S s) -> Vec3<decltype(v.x * s)> {
  return {v.x * s, v.y * s, v.z * s};
}
template <class T, class S>
inline auto operator*(S s, const Vec3<T>& v) -> Vec3<decltype(v.x * s)> {
  return v * s;
}
template <class T>
inline Vec3<T> operator/(const Vec3<T>& v, T s) {
  return {v.x / s, v.y / s, v.z / s};
}
template <class T>
inline T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
template <class T>
inline Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
template <class T>
inline T norm(const Vec3<T>& v) {
  using std::sqrt;
  return sqrt(dot(v, v));
}
template <class T>
inline Vec3<T> normalized(const Vec3<T>& v) {
  T n = norm(v);
  return {v.x / n, v.y / n, v.z / n};
}

// Row-major 3x3, used for camera rotations only (never differentiated).
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double operator()(int r, int c) const { return m[size_t(r) * 3 + size_t(c)]; }
  double& operator()(int r, int c) { return m[size_t(r) * 3 + size_t(c)]; }

  Vec3d row(int r) const { return {(*this)(r, 0), (*this)(r, 1), (*this)(r, 2)}; }

  Mat3 transposed() const {
    Mat3 t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
    return t;
  }

  static Mat3 from_rows(const Vec3d& r0, const Vec3d& r1, const Vec3d& r2) {
    Mat3 a;
    a.m = {r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z};
    return a;
  }

  static Mat3 rotation_z(double radians) {
    double c = std::cos(radians), s = std::sin(radians);
    Mat3 a;
    a.m = {c, -s, 0, s, c, 0, 0, 0, 1};
    return a;
  }
};

inline Vec3d operator*(const Mat3& a, const Vec3d& v) {
  return {dot(a.row(0), v), dot(a.row(1), v), dot(a.row(2), v)};
}

// Rotation applied to a vector whose components may live on a tape; the
// matrix entries stay plain doubles.
template <class T>
inline Vec3<T> rotate(const Mat3& a, const Vec3<T>& v) {
  return {v.x * a(0, 0) + v.y * a(0, 1) + v.z * a(0, 2),
          v.x * a(1, 0) + v.y * a(1, 1) + v.z * a(1, 2),
          v.x * a(2, 0) + v.y * a(2, 1) + v.z * a(2, 2)};
}

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  return r;
}

struct Aabb {
  Vec3d min{0, 0, 0};
  Vec3d max{0, 0, 0};

  bool contains(const Vec3d& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
           p.z >= min.z && p.z <= max.z;
  }
  Vec3d extent() const { return max - min; }
};

}  // namespace occfit

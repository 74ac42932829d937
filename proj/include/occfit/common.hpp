// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace occfit {

// Error taxonomy. The CLI maps ConfigError (and subclasses) to exit code 2
// and NumericError to exit code 3; everything else is a programming error.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: malformed config/dataset files, unknown keys, missing files.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Parse failure with a byte offset into the offending file/stream.
struct ParseError : ConfigError {
  ParseError(const std::string& msg, size_t byte_offset)
      : ConfigError(msg + " (byte " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  size_t offset;
};

// Argument outside an operation's documented domain (pixel out of bounds,
// point on an excluded face, mismatched grid shapes, ...).
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Structural misuse of a container (unknown node id, id from another tape).
struct StructuralError : Error {
  explicit StructuralError(const std::string& msg) : Error(msg) {}
};

// Non-finite value where a finite one is required (NaN loss/gradient).
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Point behind the camera or inside the near clip during projection.
struct BehindCameraError : DomainError {
  explicit BehindCameraError(const std::string& msg) : DomainError(msg) {}
};

constexpr double kNearClip = 0.1;       // meters, projection near plane
constexpr double kFarSentinel = 1000.0; // depth written for ray misses

template <class T>
inline T clamp01(T v) {
  return v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
}

// Plain-double twins of the tape operations, so numeric code templated on the
// scalar type can run off-tape.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double vmin(double a, double b) { return a <= b ? a : b; }
inline double vmax(double a, double b) { return a >= b ? a : b; }

inline bool almost_equal(double a, double b, double tol) {
  return std::fabs(a - b) <= tol;
}

}  // namespace occfit

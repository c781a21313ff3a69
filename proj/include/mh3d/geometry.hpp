#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mh3d/error.hpp"

namespace mh3d {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    require(n > 0, "Vec3: cannot normalize zero vector");
    return *this / n;
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// row-major 3x3
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double at(int r, int c) const { return m[r * 3 + c]; }
  double& at(int r, int c) { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 transposed() const {
    Mat3 t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t.at(r, c) = at(c, r);
    return t;
  }
  static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
    Mat3 r;
    r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
    return r;
  }
  Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

struct Aabb {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  Vec3 extent() const { return hi - lo; }
};

// Pinhole camera. rotation maps camera axes to world (columns are the camera
// x/y/z axes); translation is the camera center. Camera frame: x right,
// y down, z forward. Pixel (u,v) rays pass through (u+0.5, v+0.5).
struct Pose {
  Mat3 rotation;
  Vec3 translation;
  double focal = 64.0;
  double cx = 32.0, cy = 32.0;
  int width = 64, height = 64;

  Vec3 forward() const { return rotation.col(2); }

  // pixel-plane coords -> unit world direction
  Vec3 pixel_direction(double u, double v) const {
    const Vec3 d_cam{(u - cx) / focal, (v - cy) / focal, 1.0};
    return (rotation * d_cam).normalized();
  }

  // world point -> pixel-plane coords + depth along the optical axis
  struct Projection {
    double u, v, depth;
  };
  Projection project(const Vec3& world) const {
    const Vec3 pc = rotation.transposed() * (world - translation);
    return {focal * pc.x / pc.z + cx, focal * pc.y / pc.z + cy, pc.z};
  }

  Vec3 unproject(double u, double v, double depth) const {
    const Vec3 d_cam{(u - cx) / focal * depth, (v - cy) / focal * depth, depth};
    return rotation * d_cam + translation;
  }

  void validate() const {
    const Mat3 rt = rotation.transposed();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += rt.at(r, k) * rotation.at(k, c);
        const double expect = r == c ? 1.0 : 0.0;
        require(std::fabs(acc - expect) < 1e-9, "Pose: rotation is not orthonormal");
      }
    require(std::fabs(rotation.det() - 1.0) < 1e-9, "Pose: rotation determinant must be +1");
    require(focal > 0 && width > 0 && height > 0, "Pose: invalid intrinsics");
  }
};

struct RayBatch {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;     // unit norm
  std::vector<int64_t> pixel_ids;   // v * width + u for image batches

  int64_t size() const { return static_cast<int64_t>(origins.size()); }
};

// One ray per requested pixel, through the pixel center. Pixels are
// (u, v) integer coordinates.
RayBatch generate_rays(const Pose& pose, const std::vector<std::pair<int, int>>& pixels);

// Every pixel of the pose's image, row-major.
RayBatch generate_all_rays(const Pose& pose);

// look-at pose: camera at eye, optical axis through target, world up +z
Pose look_at(const Vec3& eye, const Vec3& target, double focal, int width, int height);

}  // namespace mh3d

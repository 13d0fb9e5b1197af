#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "vla3d/nn/tensor.hpp"

namespace vla3d::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

class geometry_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kDepthEps = 0.01;

/// Pinhole camera with world-to-camera extrinsics: X_c = R p + t.
/// Pixel coordinates are (x = column, y = row); pixel centers sit at integers.
struct CameraView {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  int width = 0;
  int height = 0;
  int view_id = 0;

  /// Throws geometry_error unless R is a rotation and K a valid intrinsic matrix.
  void validate() const;
  Vec3 center() const { return -R.transpose() * t; }
  /// World-frame direction of the ray through pixel (x, y), unit length.
  Vec3 ray_direction(double x, double y) const;

  friend bool operator==(const CameraView&, const CameraView&) = default;
};

/// Camera at `eye` looking at `target` with world +z as up; the image
/// y axis points down.
CameraView look_at(const Vec3& eye, const Vec3& target, double focal, int width, int height, int view_id);

/// Rigidly moves a camera together with the world: p' = Q p + s.
CameraView transform_camera(const CameraView& cam, const Mat3& Q, const Vec3& s);

struct Projection {
  Vec2 u;      // normalized, clamped to [0,1]^2
  Vec2 pixel;  // unclamped pixel coordinates
  double z_c;  // raw camera-frame depth
};

Projection project(const Vec3& p, const CameraView& cam, double eps = kDepthEps);

/// World point seen at pixel (x, y) with camera-frame depth `depth`.
Vec3 unproject(double x, double y, double depth, const CameraView& cam);

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> depth;        // row-major, meters
  std::vector<std::uint8_t> valid;  // 1 where depth is usable

  DepthMap() = default;
  DepthMap(int w, int h) : width(w), height(h), depth(std::size_t(w) * h, 0.0), valid(std::size_t(w) * h, 0) {}
  double at(int row, int col) const { return depth[std::size_t(row) * width + col]; }
  bool is_valid(int row, int col) const { return valid[std::size_t(row) * width + col] != 0; }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;
};

/// Pixel coordinate of the center of feature cell `i` at the given stride.
inline int cell_center(int i, int stride) { return i * stride + stride / 2; }

/// One world coordinate per stride x stride cell, sampled at the cell-center
/// pixel; result is [(H/stride)*(W/stride), 3] in row-major cell order.
/// Invalid center depths borrow the depth of the nearest valid pixel.
nn::Tensor unproject_grid(const DepthMap& depth, const CameraView& cam, int stride);

}  // namespace vla3d::geom

#include "vla3d/geometry/camera.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vla3d::geom {

void CameraView::validate() const {
  if (width < 2 || height < 2) throw geometry_error("camera image must be at least 2x2");
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho <= 1e-9) || std::abs(R.determinant() - 1.0) > 1e-9) {
    throw geometry_error("camera " + std::to_string(view_id) + ": R is not a rotation");
  }
  if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(2, 2) != 1.0 || !(K(0, 0) > 0.0) || !(K(1, 1) > 0.0)) {
    throw geometry_error("camera " + std::to_string(view_id) + ": K must be upper-triangular with positive focals");
  }
  if (!t.allFinite() || !K.allFinite()) throw geometry_error("camera has non-finite entries");
}

Vec3 CameraView::ray_direction(double x, double y) const {
  const Vec3 d = K.triangularView<Eigen::Upper>().solve(Vec3(x, y, 1.0));
  return (R.transpose() * d).normalized();
}

CameraView look_at(const Vec3& eye, const Vec3& target, double focal, int width, int height, int view_id) {
  const Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) throw geometry_error("look_at: view direction parallel to up axis");
  right.normalize();
  const Vec3 down = fwd.cross(right);
  CameraView cam;
  cam.R.row(0) = right.transpose();
  cam.R.row(1) = down.transpose();
  cam.R.row(2) = fwd.transpose();
  cam.t = -cam.R * eye;
  cam.K << focal, 0.0, 0.5 * (width - 1), 0.0, focal, 0.5 * (height - 1), 0.0, 0.0, 1.0;
  cam.width = width;
  cam.height = height;
  cam.view_id = view_id;
  return cam;
}

CameraView transform_camera(const CameraView& cam, const Mat3& Q, const Vec3& s) {
  CameraView out = cam;
  out.R = cam.R * Q.transpose();
  out.t = cam.t - out.R * s;
  return out;
}

Projection project(const Vec3& p, const CameraView& cam, double eps) {
  const Vec3 xc = cam.R * p + cam.t;
  const Vec3 h = cam.K * xc;
  const double z = std::max(xc.z(), eps);
  Projection out;
  out.z_c = xc.z();
  out.pixel = Vec2(h.x() / z, h.y() / z);
  out.u = Vec2(std::clamp(out.pixel.x() / (cam.width - 1), 0.0, 1.0),
               std::clamp(out.pixel.y() / (cam.height - 1), 0.0, 1.0));
  return out;
}

Vec3 unproject(double x, double y, double depth, const CameraView& cam) {
  if (!(depth > 0.0) || !std::isfinite(depth)) throw geometry_error("unproject: depth must be positive and finite");
  const Vec3 ray = cam.K.triangularView<Eigen::Upper>().solve(Vec3(x, y, 1.0));
  return cam.R.transpose() * (depth * ray - cam.t);
}

nn::Tensor unproject_grid(const DepthMap& depth, const CameraView& cam, int stride) {
  if (stride < 1 || depth.width % stride != 0 || depth.height % stride != 0) {
    throw geometry_error("unproject_grid: stride " + std::to_string(stride) + " does not divide " +
                         std::to_string(depth.width) + "x" + std::to_string(depth.height));
  }
  const int gh = depth.height / stride, gw = depth.width / stride;
  nn::Tensor out({std::size_t(gh) * gw, 3});
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const int r = cell_center(i, stride), c = cell_center(j, stride);
      double d = 0.0;
      if (depth.is_valid(r, c)) {
        d = depth.at(r, c);
      } else {
        long best = std::numeric_limits<long>::max();
        for (int rr = 0; rr < depth.height; ++rr)
          for (int cc = 0; cc < depth.width; ++cc) {
            if (!depth.is_valid(rr, cc)) continue;
            const long dist = long(rr - r) * (rr - r) + long(cc - c) * (cc - c);
            if (dist < best) {
              best = dist;
              d = depth.at(rr, cc);
            }
          }
        if (best == std::numeric_limits<long>::max()) throw geometry_error("unproject_grid: depth map has no valid pixel");
      }
      const Vec3 p = unproject(c, r, d, cam);
      const std::size_t row = std::size_t(i) * gw + j;
      for (int k = 0; k < 3; ++k) out.at(row, k) = p[k];
    }
  }
  return out;
}

}  // namespace vla3d::geom

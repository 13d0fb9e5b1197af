#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include "vla3d/geometry/camera.hpp"
#include "vla3d/nn/rng.hpp"

using namespace vla3d;
using namespace vla3d::geom;

namespace {

CameraView identity_camera() {
  CameraView cam;
  cam.K << 100, 0, 50, 0, 100, 50, 0, 0, 1;
  cam.width = cam.height = 101;
  return cam;
}

Mat3 random_rotation(nn::Rng& rng) {
  const Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

CameraView random_camera(nn::Rng& rng) {
  const double a = rng.uniform(0, 6.28), el = rng.uniform(0.5, 1.0), d = rng.uniform(0.8, 1.5);
  const Vec3 eye(d * std::cos(el) * std::cos(a), d * std::cos(el) * std::sin(a), d * std::sin(el));
  return look_at(eye, Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.1), rng.uniform(40, 80), 64, 48, 0);
}

}  // namespace

TEST(Project, PrincipalPointAndHandArithmetic) {
  const auto cam = identity_camera();
  auto p = project(Vec3(0, 0, 1), cam);
  EXPECT_DOUBLE_EQ(p.u.x(), 0.5);
  EXPECT_DOUBLE_EQ(p.u.y(), 0.5);
  EXPECT_DOUBLE_EQ(p.z_c, 1.0);
  EXPECT_DOUBLE_EQ(project(Vec3(0.25, 0, 1), cam).u.x(), 0.75);
}

TEST(Project, DepthClampAtCameraCenter) {
  const auto cam = identity_camera();
  auto p = project(Vec3(0, 0, 0), cam);
  EXPECT_DOUBLE_EQ(p.z_c, 0.0);
  EXPECT_TRUE(p.u.allFinite());
  EXPECT_GE(p.u.minCoeff(), 0.0);
  EXPECT_LE(p.u.maxCoeff(), 1.0);
  // Slightly off-axis point at zero depth is blown up by 1/eps and clamped.
  auto q = project(Vec3(0.001, -0.001, 0), cam);
  EXPECT_DOUBLE_EQ(q.pixel.x(), 100 * 0.001 / 0.01);
  EXPECT_DOUBLE_EQ(q.u.x(), 0.1);
  EXPECT_DOUBLE_EQ(q.u.y(), 0.0);
}

TEST(Project, NormalizedAlwaysInUnitSquare) {
  nn::Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const auto cam = random_camera(rng);
    const Vec3 p(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    const auto pr = project(p, cam);
    ASSERT_GE(pr.u.minCoeff(), 0.0);
    ASSERT_LE(pr.u.maxCoeff(), 1.0);
  }
}

TEST(Unproject, PrincipalRay) {
  Vec3 p = unproject(50, 50, 2.0, identity_camera());
  EXPECT_NEAR((p - Vec3(0, 0, 2)).norm(), 0.0, 1e-15);
  EXPECT_THROW(unproject(1, 1, 0.0, identity_camera()), geometry_error);
  EXPECT_THROW(unproject(1, 1, -1.0, identity_camera()), geometry_error);
}

TEST(Unproject, RoundTripThousandPoints) {
  nn::Rng rng(1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto cam = random_camera(rng);
    Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 1));
    const auto pr = project(p, cam);
    if (pr.z_c <= 0.1) {
      --i;
      continue;
    }
    worst = std::max(worst, (unproject(pr.pixel.x(), pr.pixel.y(), pr.z_c, cam) - p).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Camera, RigidMotionLeavesProjectionsUnchanged) {
  nn::Rng rng(8);
  double worst = 0;
  for (int i = 0; i < 500; ++i) {
    const auto cam = random_camera(rng);
    const Mat3 Q = random_rotation(rng);
    const Vec3 s(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const auto moved = transform_camera(cam, Q, s);
    moved.validate();
    const Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 1));
    worst = std::max(worst, (project(Q * p + s, moved).u - project(p, cam).u).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Camera, ValidateRejectsBadMatrices) {
  auto cam = identity_camera();
  cam.validate();
  auto bad = cam;
  bad.R(0, 0) = -1;  // reflection
  EXPECT_THROW(bad.validate(), geometry_error);
  bad = cam;
  bad.K(0, 0) = 0;
  EXPECT_THROW(bad.validate(), geometry_error);
  bad = cam;
  bad.K(1, 0) = 0.5;
  EXPECT_THROW(bad.validate(), geometry_error);
}

TEST(UnprojectGrid, FlatPlaneHasConstantDepth) {
  CameraView cam;
  cam.K << 8, 0, 3.5, 0, 8, 3.5, 0, 0, 1;
  cam.width = cam.height = 8;
  DepthMap d(8, 8);
  std::fill(d.depth.begin(), d.depth.end(), 1.0);
  std::fill(d.valid.begin(), d.valid.end(), 1);
  auto g = unproject_grid(d, cam, 2);
  ASSERT_EQ(g.rows(), 16u);
  for (std::size_t i = 0; i < g.rows(); ++i) EXPECT_DOUBLE_EQ(g.at(i, 2), 1.0);
}

TEST(UnprojectGrid, StrideOneAndTwoMatchPerPixel) {
  nn::Rng rng(2);
  const auto cam = random_camera(rng);
  DepthMap d(cam.width, cam.height);
  for (std::size_t i = 0; i < d.depth.size(); ++i) {
    d.depth[i] = rng.uniform(0.5, 2.0);
    d.valid[i] = 1;
  }
  auto g1 = unproject_grid(d, cam, 1);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      const Vec3 p = unproject(c, r, d.at(r, c), cam);
      for (int k = 0; k < 3; ++k) ASSERT_EQ(g1.at(std::size_t(r) * cam.width + c, k), p[k]);
    }
  auto g2 = unproject_grid(d, cam, 2);
  ASSERT_EQ(g2.rows(), std::size_t(cam.width / 2 * cam.height / 2));
  for (int i = 0; i < cam.height / 2; ++i)
    for (int j = 0; j < cam.width / 2; ++j) {
      const int r = 2 * i + 1, c = 2 * j + 1;
      const Vec3 p = unproject(c, r, d.at(r, c), cam);
      for (int k = 0; k < 3; ++k) ASSERT_EQ(g2.at(std::size_t(i) * (cam.width / 2) + j, k), p[k]);
    }
}

TEST(UnprojectGrid, HolesBorrowNearestDepthAndBadStride) {
  CameraView cam;
  cam.K << 8, 0, 3.5, 0, 8, 3.5, 0, 0, 1;
  cam.width = cam.height = 8;
  DepthMap d(8, 8);
  d.depth[0] = 3.0;  // only pixel (0,0) valid
  d.valid[0] = 1;
  auto g = unproject_grid(d, cam, 4);
  for (std::size_t i = 0; i < g.rows(); ++i) EXPECT_NEAR(g.at(i, 2), 3.0, 1e-12);
  EXPECT_THROW(unproject_grid(d, cam, 3), geometry_error);
  DepthMap empty(8, 8);
  EXPECT_THROW(unproject_grid(empty, cam, 2), geometry_error);
}

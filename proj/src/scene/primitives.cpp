#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "vla3d/nn/rng.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::scene {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Slab interval along one axis; false when the ray misses.
bool slab(double q, double d, double half, double& t0, double& t1) {
  if (std::abs(d) < 1e-15) {
    if (std::abs(q) > half) return false;
    t0 = -kInf;
    t1 = kInf;
    return true;
  }
  double a = (-half - q) / d, b = (half - q) / d;
  if (a > b) std::swap(a, b);
  t0 = a;
  t1 = b;
  return true;
}

std::optional<Interval> local_intersect(const PrimitiveObject& obj, const Vec3& q, const Vec3& d) {
  const Vec3 half = 0.5 * obj.size;
  Interval out;
  switch (obj.kind) {
    case PrimitiveKind::sphere: {
      const double r = half.x();
      const double b = q.dot(d), c = q.squaredNorm() - r * r;
      const double disc = b * b - c;
      if (disc <= 0.0) return std::nullopt;
      const double s = std::sqrt(disc);
      out.t0 = -b - s;
      out.t1 = -b + s;
      out.normal = (q + out.t0 * d) / r;
      break;
    }
    case PrimitiveKind::box: {
      double lo = -kInf, hi = kInf;
      int axis = 0;
      for (int k = 0; k < 3; ++k) {
        double a, b;
        if (!slab(q[k], d[k], half[k], a, b)) return std::nullopt;
        if (a > lo) {
          lo = a;
          axis = k;
        }
        hi = std::min(hi, b);
      }
      if (lo >= hi) return std::nullopt;
      out.t0 = lo;
      out.t1 = hi;
      out.normal = Vec3::Zero();
      out.normal[axis] = d[axis] > 0 ? -1.0 : 1.0;
      break;
    }
    case PrimitiveKind::cylinder: {
      const double r = half.x();
      double z0, z1;
      if (!slab(q.z(), d.z(), half.z(), z0, z1)) return std::nullopt;
      const double a = d.x() * d.x() + d.y() * d.y();
      const double b = q.x() * d.x() + q.y() * d.y();
      const double c = q.x() * q.x() + q.y() * q.y() - r * r;
      double r0 = -kInf, r1 = kInf;
      if (a < 1e-15) {
        if (c > 0.0) return std::nullopt;
      } else {
        const double disc = b * b - a * c;
        if (disc <= 0.0) return std::nullopt;
        const double s = std::sqrt(disc);
        r0 = (-b - s) / a;
        r1 = (-b + s) / a;
      }
      out.t0 = std::max(z0, r0);
      out.t1 = std::min(z1, r1);
      if (out.t0 >= out.t1) return std::nullopt;
      if (r0 >= z0) {
        const Vec3 p = q + out.t0 * d;
        out.normal = Vec3(p.x(), p.y(), 0.0) / r;
      } else {
        out.normal = Vec3(0.0, 0.0, d.z() > 0 ? -1.0 : 1.0);
      }
      break;
    }
  }
  if (out.t1 <= 0.0) return std::nullopt;
  return out;
}

}  // namespace

const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::sphere: return "sphere";
    case PrimitiveKind::box: return "box";
    case PrimitiveKind::cylinder: return "cylinder";
  }
  return "?";
}

PrimitiveKind parse_kind(const std::string& s) {
  if (s == "sphere") return PrimitiveKind::sphere;
  if (s == "box") return PrimitiveKind::box;
  if (s == "cylinder") return PrimitiveKind::cylinder;
  throw std::invalid_argument("unknown primitive kind '" + s + "'");
}

Mat3 PrimitiveObject::rotation() const { return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(); }

std::optional<Interval> intersect(const PrimitiveObject& obj, const Vec3& origin, const Vec3& dir) {
  const Mat3 R = obj.rotation();
  auto hit = local_intersect(obj, R.transpose() * (origin - obj.center), R.transpose() * dir);
  if (hit) hit->normal = R * hit->normal;
  return hit;
}

RayHit cast_ray(const std::vector<PrimitiveObject>& objects, const Vec3& origin, const Vec3& dir) {
  RayHit best;
  double best_t = kInf;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    auto hit = intersect(objects[i], origin, dir);
    if (hit && hit->t0 > 1e-9 && hit->t0 < best_t) {
      best_t = hit->t0;
      best.object = static_cast<int>(i);
      best.normal = hit->normal;
    }
  }
  if (dir.z() < 0.0 && origin.z() > 0.0) {
    const double t = -origin.z() / dir.z();
    if (t < best_t) {
      best_t = t;
      best.object = -1;
      best.normal = Vec3::UnitZ();
    }
  }
  if (best.object != -2) {
    best.t = best_t;
    best.point = origin + best_t * dir;
  }
  return best;
}

nn::Tensor dense_surface(const PrimitiveObject& obj, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("dense_surface: n must be >= 1");
  nn::Rng rng(seed, 0x5eed5u);
  const Vec3 s = obj.size;
  const Mat3 R = obj.rotation();
  nn::Tensor out({std::size_t(n), 3});
  for (int i = 0; i < n; ++i) {
    Vec3 q;
    switch (obj.kind) {
      case PrimitiveKind::sphere: {
        Vec3 g(rng.normal(), rng.normal(), rng.normal());
        while (g.norm() < 1e-12) g = Vec3(rng.normal(), rng.normal(), rng.normal());
        q = 0.5 * s.x() * g.normalized();
        break;
      }
      case PrimitiveKind::box: {
        const double ax = s.y() * s.z(), ay = s.x() * s.z(), az = s.x() * s.y();
        const double pick = rng.uniform() * (ax + ay + az);
        const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
        for (int k = 0; k < 3; ++k) q[k] = rng.uniform(-0.5, 0.5) * s[k];
        q[axis] = (rng.uniform() < 0.5 ? -0.5 : 0.5) * s[axis];
        break;
      }
      case PrimitiveKind::cylinder: {
        const double r = 0.5 * s.x(), h = s.z();
        const double side = 2.0 * std::numbers::pi * r * h, cap = std::numbers::pi * r * r;
        const double pick = rng.uniform() * (side + 2.0 * cap);
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        if (pick < side) {
          q = Vec3(r * std::cos(phi), r * std::sin(phi), rng.uniform(-0.5, 0.5) * h);
        } else {
          const double rho = r * std::sqrt(rng.uniform());
          q = Vec3(rho * std::cos(phi), rho * std::sin(phi), (pick < side + cap ? -0.5 : 0.5) * h);
        }
        break;
      }
    }
    const Vec3 p = R * q + obj.center;
    for (int k = 0; k < 3; ++k) out.at(i, k) = p[k];
  }
  return out;
}

}  // namespace vla3d::scene

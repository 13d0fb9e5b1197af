#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vla3d/nn/rng.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::scene {
namespace {

const Vec3 kLight = Vec3(1.0, 1.0, 2.0).normalized();
constexpr double kDepthScale = 0.5;
constexpr double kFocal = 55.42562584220407;  // 60 degree field of view at 64 px
const Vec3 kLookTarget(0.0, 0.0, 0.08);

Vec3 view_centroid(const PrimitiveObject& obj, const ViewData& view, const std::vector<std::uint8_t>& mask) {
  // Centroid of the object volume swept by the mask's pixel rays: integrate
  // t^2 dt dOmega along each chord, weighting pixels by their solid angle.
  const auto& cam = view.camera;
  const Vec3 origin = cam.center();
  const Vec3 fwd = cam.R.row(2).transpose();
  Vec3 num = Vec3::Zero();
  double den = 0.0;
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      if (!mask[std::size_t(r) * cam.width + c]) continue;
      const Vec3 d = cam.ray_direction(c, r);
      const auto hit = intersect(obj, origin, d);
      if (!hit) continue;
      const double t0 = std::max(hit->t0, 0.0), t1 = hit->t1;
      const double cos_t = d.dot(fwd);
      const double w = cos_t * cos_t * cos_t;
      num += w * (std::pow(t1, 4) - std::pow(t0, 4)) / 4.0 * d;
      den += w * (std::pow(t1, 3) - std::pow(t0, 3)) / 3.0;
    }
  if (den <= 0.0) return Vec3::Zero();
  return origin + num / den;
}

double bounding_radius(const PrimitiveObject& o) {
  if (o.kind == PrimitiveKind::box) return 0.5 * std::hypot(o.size.x(), o.size.y());
  return 0.5 * o.size.x();
}

PrimitiveObject sample_object(nn::Rng& rng, PrimitiveKind kind, double scale) {
  PrimitiveObject o;
  o.kind = kind;
  o.class_id = static_cast<int>(kind);
  switch (kind) {
    case PrimitiveKind::sphere: {
      const double d = scale * rng.uniform(0.20, 0.30);
      o.size = Vec3(d, d, d);
      break;
    }
    case PrimitiveKind::box:
      o.size = scale * Vec3(rng.uniform(0.16, 0.26), rng.uniform(0.16, 0.26), rng.uniform(0.12, 0.24));
      o.yaw = rng.uniform(0.0, std::numbers::pi);
      break;
    case PrimitiveKind::cylinder: {
      const double d = scale * rng.uniform(0.16, 0.24);
      o.size = Vec3(d, d, scale * rng.uniform(0.14, 0.26));
      break;
    }
  }
  return o;
}

}  // namespace

void SceneSpec::validate() const {
  if (num_objects < 0 || num_objects > kMaxObjects) {
    throw std::invalid_argument("num_objects must be in [0, " + std::to_string(kMaxObjects) + "], got " +
                                std::to_string(num_objects));
  }
  if (num_views < 2 || num_views > 4) {
    throw std::invalid_argument("num_views must be 2, 3 or 4, got " + std::to_string(num_views));
  }
  if (!(workspace_half > 0.0)) throw std::invalid_argument("workspace_half must be positive");
  if (!(camera_arc >= 0.0)) throw std::invalid_argument("camera_arc must be nonnegative");
  if (!(feature_noise >= 0.0)) throw std::invalid_argument("feature_noise must be nonnegative");
}

bool InstanceTruth::any_valid() const { return std::any_of(valid.begin(), valid.end(), [](auto v) { return v != 0; }); }

ViewData render_view(const std::vector<PrimitiveObject>& objects, const geom::CameraView& cam, double feature_noise,
                     std::uint64_t noise_seed) {
  cam.validate();
  ViewData v;
  v.camera = cam;
  v.depth = geom::DepthMap(cam.width, cam.height);
  const std::size_t npix = std::size_t(cam.width) * cam.height;
  v.features = nn::Tensor({npix, std::size_t(kFeatureChannels)});
  v.labels.assign(npix, -2);
  const Vec3 origin = cam.center();
  nn::Rng noise(noise_seed, 0x4015e);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      const std::size_t px = std::size_t(r) * cam.width + c;
      const RayHit hit = cast_ray(objects, origin, cam.ray_direction(c, r));
      double* f = v.features.data().data() + px * kFeatureChannels;
      f[chan::constant] = 1.0;
      v.labels[px] = hit.object;
      if (hit.object != -2) {
        const double z = (cam.R * hit.point + cam.t).z();
        v.depth.depth[px] = z;
        v.depth.valid[px] = 1;
        for (int k = 0; k < 3; ++k) f[chan::normal + k] = hit.normal[k];
        f[chan::depth] = kDepthScale * z;
        f[chan::shading] = std::max(0.0, hit.normal.dot(kLight));
        if (hit.object == -1) {
          f[chan::background] = 1.0;
        } else {
          f[chan::instance + hit.object] = 1.0;
          f[chan::cls + objects[hit.object].class_id] = 1.0;
        }
      }
      if (feature_noise > 0.0)
        for (int k = 0; k < kFeatureChannels; ++k) f[k] += feature_noise * noise.normal();
    }
  return v;
}

std::vector<std::uint8_t> full_mask(const ViewData& view, int obj) {
  std::vector<std::uint8_t> m(view.labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = view.labels[i] == obj;
  return m;
}

std::vector<std::uint8_t> quarter_mask(const ViewData& view, int obj) {
  const int w = view.camera.width / kMaskScale, h = view.camera.height / kMaskScale;
  std::vector<std::uint8_t> m(std::size_t(w) * h);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int r = i * kMaskScale + kMaskScale / 2, c = j * kMaskScale + kMaskScale / 2;
      m[std::size_t(i) * w + j] = view.labels[std::size_t(r) * view.camera.width + c] == obj;
    }
  return m;
}

std::optional<Box2D> mask_box(const std::vector<std::uint8_t>& mask, int width, int height) {
  int r0 = height, r1 = -1, c0 = width, c1 = -1;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      if (mask[std::size_t(r) * width + c]) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return std::nullopt;
  return Box2D{double(c0) / width, double(r0) / height, double(c1 + 1) / width, double(r1 + 1) / height};
}

Scene assemble_scene(std::uint64_t seed, const SceneSpec& spec, std::vector<PrimitiveObject> objects,
                     const std::vector<geom::CameraView>& cameras, const Vec3& p_ee) {
  if (objects.size() > std::size_t(kMaxObjects)) throw std::invalid_argument("too many objects");
  Scene s;
  s.seed = seed;
  s.spec = spec;
  s.objects = std::move(objects);
  const nn::Rng root(seed);
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    const std::uint64_t noise_seed = root.derive("noise").derive(v).next_u64();
    s.views.push_back(render_view(s.objects, cameras[v], spec.feature_noise, noise_seed));
  }
  s.truth.p_ee = p_ee;
  const std::size_t V = s.views.size();
  for (std::size_t k = 0; k < s.objects.size(); ++k) {
    const auto& obj = s.objects[k];
    InstanceTruth it;
    it.instance_id = obj.instance_id;
    it.class_id = obj.class_id;
    Vec3 sum_valid = Vec3::Zero(), sum_any = Vec3::Zero();
    int n_valid = 0, n_any = 0;
    for (std::size_t v = 0; v < V; ++v) {
      const auto& view = s.views[v];
      const auto mask = full_mask(view, int(k));
      const auto q = quarter_mask(view, int(k));
      const int npix = int(std::count(mask.begin(), mask.end(), 1));
      const int nq = int(std::count(q.begin(), q.end(), 1));
      it.mask_pixels.push_back(npix);
      it.quarter_pixels.push_back(nq);
      it.valid.push_back(nq >= kValidViewPixels);
      it.boxes.push_back(mask_box(mask, view.camera.width, view.camera.height).value_or(Box2D{}));
      const Vec3 c = npix > 0 ? view_centroid(obj, view, mask) : Vec3::Zero();
      it.view_centroids.push_back(c);
      if (npix > 0) {
        sum_any += c;
        ++n_any;
      }
      if (it.valid.back()) {
        sum_valid += c;
        ++n_valid;
      }
    }
    it.centroid = n_valid ? Vec3(sum_valid / n_valid) : (n_any ? Vec3(sum_any / n_any) : obj.center);
    it.surface = dense_surface(obj, kSurfaceSamples, root.derive("surface").derive(k).next_u64());
    s.truth.instances.push_back(std::move(it));
  }
  return s;
}

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  const nn::Rng root(seed);
  const double ws = spec.workspace_half / 0.5;  // only the placement region scales

  nn::Rng orng = root.derive("objects");
  const double scale = spec.num_objects <= 3 ? 1.0 : (spec.num_objects == 4 ? 0.8 : 0.65);
  const double place = 0.28 * ws;
  std::vector<PrimitiveObject> objects;
  for (int i = 0; i < spec.num_objects; ++i) {
    const PrimitiveKind kind = spec.only_kind ? *spec.only_kind : static_cast<PrimitiveKind>(orng.index(kNumClasses));
    PrimitiveObject o = sample_object(orng, kind, scale);
    o.instance_id = i;
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      o.center = Vec3(orng.uniform(-place, place), orng.uniform(-place, place), 0.5 * o.size.z());
      placed = std::all_of(objects.begin(), objects.end(), [&](const PrimitiveObject& q) {
        return (q.center - o.center).head<2>().norm() >= bounding_radius(q) + bounding_radius(o) + 0.02;
      });
    }
    if (!placed) {
      throw placement_error("could not place object " + std::to_string(i) + " of " + std::to_string(spec.num_objects) +
                            " without overlap (seed " + std::to_string(seed) + ")");
    }
    objects.push_back(o);
  }

  nn::Rng crng = root.derive("cameras");
  const double az0 = crng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool full_circle = spec.camera_arc >= 2.0 * std::numbers::pi - 1e-9;
  std::vector<geom::CameraView> cams;
  for (int v = 0; v < spec.num_views; ++v) {
    double az = full_circle ? az0 + 2.0 * std::numbers::pi * v / spec.num_views
                            : az0 + spec.camera_arc * (double(v) / (spec.num_views - 1) - 0.5);
    az += crng.uniform(-0.1, 0.1);
    const double el = crng.uniform(40.0, 50.0) * std::numbers::pi / 180.0;
    const double dist = crng.uniform(0.85, 0.95);
    const Vec3 target = kLookTarget;
    const Vec3 eye = target + dist * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    cams.push_back(geom::look_at(eye, target, kFocal, kImageSize, kImageSize, v));
  }

  nn::Rng erng = root.derive("end_effector");
  const Vec3 p_ee(erng.uniform(-0.3, 0.3) * ws, erng.uniform(-0.3, 0.3) * ws, erng.uniform(0.45, 0.6));
  return assemble_scene(seed, spec, std::move(objects), cams, p_ee);
}

}  // namespace vla3d::scene

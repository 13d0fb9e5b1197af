#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vla3d/geometry/camera.hpp"
#include "vla3d/nn/tensor.hpp"

namespace vla3d::scene {

using geom::Mat3;
using geom::Vec3;

class placement_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PrimitiveKind { sphere = 0, box = 1, cylinder = 2 };
const char* kind_name(PrimitiveKind k);
PrimitiveKind parse_kind(const std::string& s);

inline constexpr int kMaxObjects = 6;
inline constexpr int kNumClasses = 3;
inline constexpr int kFeatureChannels = 16;
inline constexpr int kImageSize = 64;
inline constexpr int kMaskScale = 4;  // truth masks live at 1/4 resolution
inline constexpr int kValidViewPixels = 8;
inline constexpr int kSurfaceSamples = 1024;

// Feature channel layout.
namespace chan {
inline constexpr int normal = 0;  // 3 channels, world frame
inline constexpr int depth = 3;
inline constexpr int background = 4;
inline constexpr int instance = 5;  // kMaxObjects channels
inline constexpr int cls = instance + kMaxObjects;  // kNumClasses channels
inline constexpr int shading = cls + kNumClasses;
inline constexpr int constant = shading + 1;
static_assert(constant + 1 == kFeatureChannels);
}  // namespace chan

/// Solid resting on the table. `size` holds full extents along the local
/// axes (a sphere uses its diameter); the local z axis is vertical.
struct PrimitiveObject {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Vec3 center = Vec3::Zero();
  double yaw = 0.0;
  Vec3 size = Vec3::Ones();
  int instance_id = 0;
  int class_id = 0;

  Mat3 rotation() const;
  friend bool operator==(const PrimitiveObject&, const PrimitiveObject&) = default;
};

struct SceneSpec {
  int num_objects = 2;
  int num_views = 2;
  double workspace_half = 0.5;  // workspace is [-h,h]^2 x [0, 2h]
  /// Azimuth range covered by the cameras; a full circle spaces them evenly.
  double camera_arc = 2.0 * 3.14159265358979323846;
  std::optional<PrimitiveKind> only_kind;
  /// Std of i.i.d. Gaussian noise added to every feature channel.
  double feature_noise = 0.0;

  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Box2D {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  friend bool operator==(const Box2D&, const Box2D&) = default;
};

struct ViewData {
  geom::CameraView camera;
  geom::DepthMap depth;
  nn::Tensor features;      // [H*W, C], row-major pixels
  std::vector<int> labels;  // per pixel: object index, -1 table, -2 nothing hit

  friend bool operator==(const ViewData&, const ViewData&) = default;
};

struct InstanceTruth {
  int instance_id = 0;
  int class_id = 0;
  std::vector<Box2D> boxes;            // per view; zeros when the mask is empty
  std::vector<int> mask_pixels;        // per view, full resolution
  std::vector<int> quarter_pixels;     // per view, at mask resolution
  std::vector<std::uint8_t> valid;     // per view: quarter_pixels >= threshold
  std::vector<Vec3> view_centroids;    // per view; zero when the mask is empty
  Vec3 centroid = Vec3::Zero();        // mean over valid views
  nn::Tensor surface;                  // [kSurfaceSamples, 3]

  bool any_valid() const;
  friend bool operator==(const InstanceTruth&, const InstanceTruth&) = default;
};

struct SceneTruth {
  std::vector<InstanceTruth> instances;
  Vec3 p_ee = Vec3::Zero();
  friend bool operator==(const SceneTruth&, const SceneTruth&) = default;
};

struct Scene {
  std::uint64_t seed = 0;
  SceneSpec spec;
  std::vector<PrimitiveObject> objects;
  std::vector<ViewData> views;
  SceneTruth truth;

  int width() const { return views.empty() ? 0 : views[0].camera.width; }
  int height() const { return views.empty() ? 0 : views[0].camera.height; }
  friend bool operator==(const Scene&, const Scene&) = default;
};

// Ray casting.

/// Entry/exit distances of a ray with a primitive, with the entry normal.
struct Interval {
  double t0 = 0, t1 = 0;
  Vec3 normal = Vec3::Zero();
};
std::optional<Interval> intersect(const PrimitiveObject& obj, const Vec3& origin, const Vec3& dir);

struct RayHit {
  int object = -2;  // object index, -1 for the table plane, -2 for a miss
  double t = 0;
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
};
RayHit cast_ray(const std::vector<PrimitiveObject>& objects, const Vec3& origin, const Vec3& dir);

/// Renders depth, labels and features for one camera.
ViewData render_view(const std::vector<PrimitiveObject>& objects, const geom::CameraView& cam, double feature_noise,
                     std::uint64_t noise_seed);

/// Area-uniform samples on the primitive surface, in world coordinates.
nn::Tensor dense_surface(const PrimitiveObject& obj, int n, std::uint64_t seed);

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

/// Builds a scene from explicit objects and cameras (truth is recomputed).
Scene assemble_scene(std::uint64_t seed, const SceneSpec& spec, std::vector<PrimitiveObject> objects,
                     const std::vector<geom::CameraView>& cameras, const Vec3& p_ee);

// Truth helpers.

/// Binary mask of object `obj` in view `v` at full resolution (row-major H*W).
std::vector<std::uint8_t> full_mask(const ViewData& view, int obj);
/// Mask at 1/kMaskScale resolution, sampled at pixel kMaskScale*i + kMaskScale/2.
std::vector<std::uint8_t> quarter_mask(const ViewData& view, int obj);
/// Tight box of a nonempty mask, normalized with pixel edges: [min/W, (max+1)/W].
std::optional<Box2D> mask_box(const std::vector<std::uint8_t>& mask, int width, int height);

// Persistence.

inline constexpr int kSceneFormatVersion = 1;

/// Writes `<path>` (JSON) and `<path>.tensors` (tensor records).
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

// Exports.
/// ASCII PLY; `intensity`, when given, adds one scalar property per point.
void write_ply(const std::filesystem::path& path, const nn::Tensor& points, const std::vector<double>* intensity = nullptr);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, int width, int height);

struct BinaryImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> mask;  // 1 where the pixel is nonzero
};
/// Reads a binary P5 PGM as written by write_pgm.
BinaryImage read_pgm(const std::filesystem::path& path);

}  // namespace vla3d::scene

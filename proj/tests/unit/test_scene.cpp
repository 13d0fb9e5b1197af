#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "vla3d/nn/checkpoint.hpp"
#include "vla3d/scene/scene.hpp"

using namespace vla3d;
using namespace vla3d::scene;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vla3d_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(GenerateScene, SingleSphereCentroidMatchesCenter) {
  SceneSpec spec;
  spec.num_objects = 1;
  spec.only_kind = PrimitiveKind::sphere;
  const Scene s = generate_scene(0, spec);
  ASSERT_EQ(s.truth.instances.size(), 1u);
  const auto& it = s.truth.instances[0];
  for (int v = 0; v < 2; ++v) {
    EXPECT_GT(it.mask_pixels[v], 0);
    EXPECT_LT((it.view_centroids[v] - s.objects[0].center).norm(), 0.01);
  }
  EXPECT_LT((it.centroid - s.objects[0].center).norm(), 0.01);
}

TEST(GenerateScene, EmptySceneIsValid) {
  SceneSpec spec;
  spec.num_objects = 0;
  const Scene s = generate_scene(3, spec);
  EXPECT_TRUE(s.truth.instances.empty());
  ASSERT_EQ(s.views.size(), 2u);
  for (const auto& v : s.views) {
    for (auto l : v.labels) EXPECT_EQ(l, -1);
    for (auto ok : v.depth.valid) EXPECT_EQ(ok, 1);
  }
}

TEST(GenerateScene, DeterministicPerSeed) {
  SceneSpec spec;
  spec.num_objects = 4;
  spec.num_views = 3;
  EXPECT_TRUE(generate_scene(17, spec) == generate_scene(17, spec));
  EXPECT_FALSE(generate_scene(17, spec) == generate_scene(18, spec));
}

TEST(GenerateScene, SpecValidationAndOvercrowding) {
  SceneSpec spec;
  spec.num_objects = 7;
  EXPECT_THROW(generate_scene(0, spec), std::invalid_argument);
  spec.num_objects = 2;
  spec.num_views = 5;
  EXPECT_THROW(generate_scene(0, spec), std::invalid_argument);
  spec.num_views = 2;
  spec.num_objects = 4;
  spec.workspace_half = 0.05;
  EXPECT_THROW(generate_scene(0, spec), placement_error);
}

TEST(GenerateScene, ObjectsDoNotInterpenetrate) {
  SceneSpec spec;
  spec.num_objects = 6;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(seed, spec);
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const auto& o = s.objects[a];
      EXPECT_NEAR(o.center.z(), 0.5 * o.size.z(), 1e-15);
      EXPECT_LE(o.center.head<2>().cwiseAbs().maxCoeff(), 0.5);
      for (std::size_t b = a + 1; b < s.objects.size(); ++b) {
        const auto& q = s.objects[b];
        const double ra = 0.5 * o.size.head<2>().norm(), rb = 0.5 * q.size.head<2>().norm();
        EXPECT_GT((o.center - q.center).head<2>().norm(), std::min(ra, 0.5 * o.size.x()) + std::min(rb, 0.5 * q.size.x()));
      }
    }
  }
}

TEST(SceneTruth, MaskBoxConsistencyAndVisibilityFlags) {
  SceneSpec spec;
  spec.num_objects = 3;
  spec.num_views = 3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = generate_scene(seed, spec);
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto& it = s.truth.instances[k];
      for (std::size_t v = 0; v < s.views.size(); ++v) {
        const auto m = full_mask(s.views[v], int(k));
        const auto box = mask_box(m, s.width(), s.height());
        ASSERT_EQ(box.has_value(), it.mask_pixels[v] > 0);
        if (box) {
          EXPECT_EQ(*box, it.boxes[v]);
          EXPECT_LT(box->x1, box->x2);
          EXPECT_LT(box->y1, box->y2);
        }
        const auto q = quarter_mask(s.views[v], int(k));
        const int nq = int(std::count(q.begin(), q.end(), 1));
        EXPECT_EQ(nq, it.quarter_pixels[v]);
        EXPECT_EQ(it.valid[v] != 0, nq >= kValidViewPixels);
      }
      EXPECT_TRUE(it.centroid.allFinite());
    }
  }
}

TEST(SceneTruth, MaskBoxUsesPixelEdges) {
  std::vector<std::uint8_t> m(16, 0);
  m[1 * 4 + 2] = 1;  // single pixel at row 1, col 2
  const auto b = mask_box(m, 4, 4).value();
  EXPECT_EQ(b, (Box2D{0.5, 0.25, 0.75, 0.5}));
  EXPECT_FALSE(mask_box(std::vector<std::uint8_t>(16, 0), 4, 4).has_value());
}

TEST(SceneTruth, CrossViewCentroidsAgree) {
  SceneSpec spec;
  spec.num_objects = 2;
  double worst = 0;
  int compared = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Scene s = generate_scene(seed, spec);
    for (const auto& it : s.truth.instances) {
      if (!it.valid[0] || !it.valid[1]) continue;
      worst = std::max(worst, (it.view_centroids[0] - it.view_centroids[1]).norm());
      ++compared;
    }
  }
  EXPECT_GT(compared, 20);
  EXPECT_LE(worst, 0.02);
}

TEST(RayCast, BoxAndCylinderHitDistances) {
  PrimitiveObject box{PrimitiveKind::box, Vec3(0, 0, 0.5), 0.0, Vec3(1, 1, 1), 0, 1};
  auto h = intersect(box, Vec3(-3, 0.2, 0.6), Vec3(1, 0, 0));
  ASSERT_TRUE(h);
  EXPECT_DOUBLE_EQ(h->t0, 2.5);
  EXPECT_DOUBLE_EQ(h->t1, 3.5);
  EXPECT_EQ(h->normal, Vec3(-1, 0, 0));
  PrimitiveObject cyl{PrimitiveKind::cylinder, Vec3(0, 0, 0.5), 0.0, Vec3(1, 1, 1), 1, 2};
  auto top = intersect(cyl, Vec3(0.1, 0.1, 3), Vec3(0, 0, -1));
  ASSERT_TRUE(top);
  EXPECT_DOUBLE_EQ(top->t0, 2.0);
  EXPECT_EQ(top->normal, Vec3(0, 0, 1));
  auto side = intersect(cyl, Vec3(-2, 0, 0.5), Vec3(1, 0, 0));
  ASSERT_TRUE(side);
  EXPECT_DOUBLE_EQ(side->t0, 1.5);
  EXPECT_FALSE(intersect(cyl, Vec3(-2, 0, 1.5), Vec3(1, 0, 0)));
  // Table is hit when the ray misses every object.
  auto t = cast_ray({box}, Vec3(3, 3, 1), Vec3(0, 0, -1));
  EXPECT_EQ(t.object, -1);
  EXPECT_DOUBLE_EQ(t.point.z(), 0.0);
}

TEST(DenseSurface, SphereSamplesOnSurface) {
  PrimitiveObject s{PrimitiveKind::sphere, Vec3::Zero(), 0.0, Vec3(1, 1, 1), 0, 0};
  const auto p = dense_surface(s, 5000, 1);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    EXPECT_NEAR(Vec3(p.at(i, 0), p.at(i, 1), p.at(i, 2)).norm(), 0.5, 1e-12);
  }
  EXPECT_THROW(dense_surface(s, 0, 1), std::invalid_argument);
}

TEST(DenseSurface, BoxSamplesLieOnFaces) {
  PrimitiveObject b{PrimitiveKind::box, Vec3::Zero(), 0.0, Vec3(1, 1, 1), 0, 1};
  const auto p = dense_surface(b, 5000, 2);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    int on_face = 0;
    for (int k = 0; k < 3; ++k) on_face += std::abs(std::abs(p.at(i, k)) - 0.5) < 1e-15;
    EXPECT_GE(on_face, 1);
  }
}

TEST(DenseSurface, BoxFaceAreaDensityUniform) {
  PrimitiveObject b{PrimitiveKind::box, Vec3::Zero(), 0.0, Vec3(1, 2, 3), 0, 1};
  const int n = 100000;
  const auto p = dense_surface(b, n, 3);
  std::array<int, 6> counts{};
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      if (std::abs(p.at(i, k)) == 0.5 * b.size[k]) counts[2 * k + (p.at(i, k) > 0)]++;
  const std::array<double, 3> area{2 * 3, 1 * 3, 1 * 2};
  const double expect_density = n / (2 * (area[0] + area[1] + area[2]));
  for (int f = 0; f < 6; ++f) EXPECT_NEAR(counts[f] / area[f / 2] / expect_density, 1.0, 0.05) << f;
}

TEST(DenseSurface, CylinderSamplesOnSurface) {
  PrimitiveObject c{PrimitiveKind::cylinder, Vec3(1, 2, 0.3), 0.7, Vec3(0.4, 0.4, 0.6), 0, 2};
  const auto p = dense_surface(c, 3000, 4);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const double rho = std::hypot(p.at(i, 0) - 1, p.at(i, 1) - 2), z = p.at(i, 2) - 0.3;
    const bool side = std::abs(rho - 0.2) < 1e-12 && std::abs(z) <= 0.3 + 1e-12;
    const bool cap = std::abs(std::abs(z) - 0.3) < 1e-12 && rho <= 0.2 + 1e-12;
    EXPECT_TRUE(side || cap);
  }
}

TEST(SceneIo, RoundTripBitIdentical) {
  const auto dir = temp_dir("scene_io");
  SceneSpec spec;
  spec.num_objects = 3;
  spec.num_views = 3;
  spec.feature_noise = 0.1;
  spec.only_kind = PrimitiveKind::box;
  const Scene s = generate_scene(5, spec);
  save_scene(s, dir / "s.json");
  EXPECT_TRUE(load_scene(dir / "s.json") == s);
  fs::remove_all(dir);
}

TEST(SceneIo, CorruptionErrors) {
  const auto dir = temp_dir("scene_bad");
  const Scene s = generate_scene(1, SceneSpec{});
  save_scene(s, dir / "s.json");

  // Truncated sidecar reports the offset.
  const auto side = sidecar_path(dir / "s.json");
  const auto full = fs::file_size(side);
  fs::resize_file(side, full - 5);
  try {
    load_scene(dir / "s.json");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(e.offset(), format_error::npos);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }

  // Truncated JSON reports the offset.
  save_scene(s, dir / "s.json");
  std::string text;
  {
    std::ifstream f(dir / "s.json");
    text.assign(std::istreambuf_iterator<char>(f), {});
  }
  {
    std::ofstream f(dir / "s.json", std::ios::trunc);
    f << text.substr(0, text.size() / 2);
  }
  try {
    load_scene(dir / "s.json");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(e.offset(), format_error::npos);
  }

  // Version 99 is refused explicitly.
  const auto pos = text.find("\"version\": 1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 12, "\"version\": 99");
  {
    std::ofstream f(dir / "s.json", std::ios::trunc);
    f << text;
  }
  save_scene(s, dir / "keep.json");  // restores a valid sidecar under another name
  fs::copy_file(sidecar_path(dir / "keep.json"), side, fs::copy_options::overwrite_existing);
  try {
    load_scene(dir / "s.json");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported scene format version 99"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Exports, PlyAndPgmHeaders) {
  const auto dir = temp_dir("exports");
  write_ply(dir / "p.ply", nn::Tensor({2, 3}, {0, 1, 2, 3, 4, 5}));
  std::ifstream ply(dir / "p.ply");
  std::string line;
  std::getline(ply, line);
  EXPECT_EQ(line, "ply");
  std::getline(ply, line);
  EXPECT_EQ(line, "format ascii 1.0");
  std::getline(ply, line);
  EXPECT_EQ(line, "element vertex 2");
  write_pgm(dir / "m.pgm", {0, 1, 1, 0}, 2, 2);
  EXPECT_EQ(fs::file_size(dir / "m.pgm"), std::string("P5\n2 2\n255\n").size() + 4);
  EXPECT_THROW(write_pgm(dir / "x.pgm", {0, 1}, 2, 2), shape_error);
  fs::remove_all(dir);
}

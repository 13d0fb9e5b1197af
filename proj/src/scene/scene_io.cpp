#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"
#include "vla3d/nn/checkpoint.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::scene {
namespace {

using nlohmann::json;

json vec(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw format_error("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}
json mat(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}
Mat3 mat3(const json& j) {
  if (!j.is_array() || j.size() != 9) throw format_error("expected a row-major 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j[r * 3 + c].get<double>();
  return m;
}

const nn::Tensor& record(const std::map<std::string, nn::Tensor>& recs, const std::string& name, const nn::Shape& shape) {
  auto it = recs.find(name);
  if (it == recs.end()) throw format_error("scene tensors missing record '" + name + "'");
  if (it->second.shape() != shape) {
    throw format_error("scene tensor '" + name + "' has shape " + nn::shape_str(it->second.shape()) + ", expected " +
                       nn::shape_str(shape));
  }
  return it->second;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".tensors";
  return p;
}

void save_scene(const Scene& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json j;
  j["format"] = "vla3d-scene";
  j["version"] = kSceneFormatVersion;
  j["seed"] = s.seed;
  j["spec"] = {{"num_objects", s.spec.num_objects},
               {"num_views", s.spec.num_views},
               {"workspace_half", s.spec.workspace_half},
               {"camera_arc", s.spec.camera_arc},
               {"only_kind", s.spec.only_kind ? json(kind_name(*s.spec.only_kind)) : json(nullptr)},
               {"feature_noise", s.spec.feature_noise}};
  j["cameras"] = json::array();
  for (const auto& v : s.views) {
    const auto& c = v.camera;
    j["cameras"].push_back(
        {{"view_id", c.view_id}, {"width", c.width}, {"height", c.height}, {"K", mat(c.K)}, {"R", mat(c.R)}, {"t", vec(c.t)}});
  }
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    j["objects"].push_back({{"kind", kind_name(o.kind)},
                            {"center", vec(o.center)},
                            {"yaw", o.yaw},
                            {"size", vec(o.size)},
                            {"instance_id", o.instance_id},
                            {"class_id", o.class_id}});
  }
  j["p_ee"] = vec(s.truth.p_ee);
  j["instances"] = json::array();
  for (const auto& it : s.truth.instances) {
    json boxes = json::array(), cents = json::array();
    for (const auto& b : it.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    for (const auto& c : it.view_centroids) cents.push_back(vec(c));
    j["instances"].push_back({{"instance_id", it.instance_id},
                              {"class_id", it.class_id},
                              {"boxes", boxes},
                              {"mask_pixels", it.mask_pixels},
                              {"quarter_pixels", it.quarter_pixels},
                              {"valid", it.valid},
                              {"view_centroids", cents},
                              {"centroid", vec(it.centroid)}});
  }
  j["tensors"] = sidecar_path(path).filename().string();

  nn::TensorRecords recs;
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    const auto& view = s.views[v];
    const nn::Shape hw{std::size_t(view.depth.height), std::size_t(view.depth.width)};
    const std::string p = "view" + std::to_string(v) + ".";
    recs.emplace_back(p + "depth", nn::Tensor(hw, view.depth.depth));
    recs.emplace_back(p + "valid", nn::Tensor(hw, std::vector<double>(view.depth.valid.begin(), view.depth.valid.end())));
    recs.emplace_back(p + "labels", nn::Tensor(hw, std::vector<double>(view.labels.begin(), view.labels.end())));
    recs.emplace_back(p + "features", view.features);
  }
  for (std::size_t k = 0; k < s.truth.instances.size(); ++k) {
    recs.emplace_back("inst" + std::to_string(k) + ".surface", s.truth.instances[k].surface);
  }
  nn::write_tensor_file(sidecar_path(path), recs);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << j.dump(1) << '\n';
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scene '" + path.string() + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw format_error("malformed scene file '" + path.string() + "': " + e.what(), e.byte);
  }
  try {
    if (j.value("format", "") != "vla3d-scene") throw format_error("not a vla3d scene file");
    const int version = j.at("version").get<int>();
    if (version != kSceneFormatVersion) throw format_error("unsupported scene format version " + std::to_string(version));
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& sp = j.at("spec");
    s.spec.num_objects = sp.at("num_objects").get<int>();
    s.spec.num_views = sp.at("num_views").get<int>();
    s.spec.workspace_half = sp.at("workspace_half").get<double>();
    s.spec.camera_arc = sp.at("camera_arc").get<double>();
    if (!sp.at("only_kind").is_null()) s.spec.only_kind = parse_kind(sp.at("only_kind").get<std::string>());
    s.spec.feature_noise = sp.at("feature_noise").get<double>();

    std::map<std::string, nn::Tensor> recs;
    for (auto& [name, t] : nn::read_tensor_file(path.parent_path() / j.at("tensors").get<std::string>())) {
      recs.emplace(name, std::move(t));
    }
    const auto& cams = j.at("cameras");
    for (std::size_t v = 0; v < cams.size(); ++v) {
      ViewData view;
      auto& c = view.camera;
      c.view_id = cams[v].at("view_id").get<int>();
      c.width = cams[v].at("width").get<int>();
      c.height = cams[v].at("height").get<int>();
      c.K = mat3(cams[v].at("K"));
      c.R = mat3(cams[v].at("R"));
      c.t = vec3(cams[v].at("t"));
      c.validate();
      const nn::Shape hw{std::size_t(c.height), std::size_t(c.width)};
      const std::string p = "view" + std::to_string(v) + ".";
      view.depth = geom::DepthMap(c.width, c.height);
      view.depth.depth = record(recs, p + "depth", hw).storage();
      const auto& valid = record(recs, p + "valid", hw).storage();
      view.depth.valid.assign(valid.begin(), valid.end());
      const auto& labels = record(recs, p + "labels", hw).storage();
      view.labels.assign(labels.begin(), labels.end());
      view.features = record(recs, p + "features", {hw[0] * hw[1], std::size_t(kFeatureChannels)});
      s.views.push_back(std::move(view));
    }
    for (const auto& o : j.at("objects")) {
      PrimitiveObject obj;
      obj.kind = parse_kind(o.at("kind").get<std::string>());
      obj.center = vec3(o.at("center"));
      obj.yaw = o.at("yaw").get<double>();
      obj.size = vec3(o.at("size"));
      obj.instance_id = o.at("instance_id").get<int>();
      obj.class_id = o.at("class_id").get<int>();
      s.objects.push_back(obj);
    }
    s.truth.p_ee = vec3(j.at("p_ee"));
    const auto& insts = j.at("instances");
    for (std::size_t k = 0; k < insts.size(); ++k) {
      const auto& ij = insts[k];
      InstanceTruth it;
      it.instance_id = ij.at("instance_id").get<int>();
      it.class_id = ij.at("class_id").get<int>();
      for (const auto& b : ij.at("boxes")) {
        it.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
      }
      it.mask_pixels = ij.at("mask_pixels").get<std::vector<int>>();
      it.quarter_pixels = ij.at("quarter_pixels").get<std::vector<int>>();
      it.valid = ij.at("valid").get<std::vector<std::uint8_t>>();
      for (const auto& c : ij.at("view_centroids")) it.view_centroids.push_back(vec3(c));
      it.centroid = vec3(ij.at("centroid"));
      it.surface = record(recs, "inst" + std::to_string(k) + ".surface", {std::size_t(kSurfaceSamples), 3});
      s.truth.instances.push_back(std::move(it));
    }
    return s;
  } catch (const json::exception& e) {
    throw format_error("invalid scene file '" + path.string() + "': " + e.what());
  }
}

void write_ply(const std::filesystem::path& path, const nn::Tensor& points, const std::vector<double>* intensity) {
  if (points.rank() != 2 || points.cols() != 3) throw shape_error("write_ply expects [n, 3] points");
  const bool with_i = intensity != nullptr;
  if (with_i && intensity->size() != points.rows()) throw shape_error("write_ply: one intensity per point");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << "ply\nformat ascii 1.0\nelement vertex " << points.rows()
    << "\nproperty double x\nproperty double y\nproperty double z\n";
  if (with_i) f << "property double intensity\n";
  f << "end_header\n" << std::setprecision(17);
  for (std::size_t i = 0; i < points.rows(); ++i) {
    f << points.at(i, 0) << ' ' << points.at(i, 1) << ' ' << points.at(i, 2);
    if (with_i) f << ' ' << (*intensity)[i];
    f << '\n';
  }
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, int width, int height) {
  if (mask.size() != std::size_t(width) * height) throw shape_error("write_pgm: mask size does not match dimensions");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << "P5\n" << width << ' ' << height << "\n255\n";
  for (auto m : mask) f.put(m ? char(255) : char(0));
}

BinaryImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string magic;
  int maxval = 0;
  BinaryImage img;
  f >> magic >> img.width >> img.height >> maxval;
  if (!f || magic != "P5" || img.width <= 0 || img.height <= 0 || maxval != 255) {
    throw format_error("'" + path.string() + "' is not an 8-bit binary PGM");
  }
  f.get();
  const auto header = std::size_t(f.tellg());
  std::vector<char> raw(std::size_t(img.width) * img.height);
  f.read(raw.data(), std::streamsize(raw.size()));
  if (f.gcount() != std::streamsize(raw.size())) throw format_error("truncated PGM pixel data", header + f.gcount());
  img.mask.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) img.mask[i] = raw[i] != 0;
  return img;
}

}  // namespace vla3d::scene

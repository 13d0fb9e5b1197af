#include "vla3d/app/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace vla3d::app {

namespace {

static_assert(scene::kImageSize % 32 == 0, "image size must be divisible by 32");

[[noreturn]] void fail(const std::string& key, const std::string& what) { throw config_error(key + ": " + what); }

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

void require_object(const json& j, const std::string& key) {
  if (!j.is_object()) fail(key.empty() ? "config" : key, "expected an object");
}

void reject_unknown(const json& j, const std::string& prefix, const std::set<std::string>& known) {
  for (const auto& [k, _] : j.items())
    if (!known.contains(k)) throw config_error("unknown key '" + join(prefix, k) + "'");
}

long long read_int(const json& v, const std::string& key) {
  if (!v.is_number_integer()) fail(key, "expected an integer, got " + v.dump());
  return v.get<long long>();
}

int read_int32(const json& v, const std::string& key) {
  const long long x = read_int(v, key);
  if (x < -(1LL << 31) || x >= (1LL << 31)) fail(key, "out of range");
  return int(x);
}

double read_double(const json& v, const std::string& key) {
  if (!v.is_number()) fail(key, "expected a number, got " + v.dump());
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(key, "must be finite");
  return x;
}

const char* schedule_name(model::LrSchedule s) {
  return s == model::LrSchedule::constant ? "constant" : "warmup_cosine";
}

json stage_json(const model::TrainConfig& t) {
  return {{"steps", t.steps},   {"lr", t.lr},       {"batch", t.batch},
          {"warmup", t.warmup}, {"final_lr", t.final_lr}, {"clip", t.clip},
          {"weight_decay", t.weight_decay}, {"schedule", schedule_name(t.schedule)}};
}

void read_stage(const json& j, const std::string& p, model::TrainConfig& t) {
  require_object(j, p);
  reject_unknown(j, p, {"steps", "lr", "batch", "warmup", "final_lr", "clip", "weight_decay", "schedule"});
  for (const auto& [k, v] : j.items()) {
    const std::string key = join(p, k);
    if (k == "steps") t.steps = read_int32(v, key);
    else if (k == "lr") t.lr = read_double(v, key);
    else if (k == "batch") t.batch = read_int32(v, key);
    else if (k == "warmup") t.warmup = read_int32(v, key);
    else if (k == "final_lr") t.final_lr = read_double(v, key);
    else if (k == "clip") t.clip = read_double(v, key);
    else if (k == "weight_decay") t.weight_decay = read_double(v, key);
    else if (k == "schedule") {
      if (v == "constant") t.schedule = model::LrSchedule::constant;
      else if (v == "warmup_cosine") t.schedule = model::LrSchedule::warmup_cosine;
      else fail(key, "expected \"constant\" or \"warmup_cosine\", got " + v.dump());
    }
  }
}

void read_scene(const json& j, scene::SceneSpec& s) {
  require_object(j, "scene");
  reject_unknown(j, "scene", {"num_objects", "num_views", "workspace_half", "camera_arc", "only_kind", "feature_noise"});
  for (const auto& [k, v] : j.items()) {
    const std::string key = "scene." + k;
    if (k == "num_objects") s.num_objects = read_int32(v, key);
    else if (k == "num_views") s.num_views = read_int32(v, key);
    else if (k == "workspace_half") s.workspace_half = read_double(v, key);
    else if (k == "camera_arc") s.camera_arc = read_double(v, key);
    else if (k == "feature_noise") s.feature_noise = read_double(v, key);
    else if (k == "only_kind") {
      if (v.is_null()) {
        s.only_kind.reset();
      } else {
        if (!v.is_string()) fail(key, "expected null or a primitive name");
        try {
          s.only_kind = scene::parse_kind(v.get<std::string>());
        } catch (const std::exception&) {
          fail(key, "expected \"sphere\", \"box\" or \"cylinder\", got " + v.dump());
        }
      }
    }
  }
}

void read_lambda(const json& j, model::ModelConfig& m) {
  require_object(j, "model.lambda");
  reject_unknown(j, "model.lambda", {"cls", "box", "giou", "mask", "dice", "3d", "recon", "cos", "var"});
  for (const auto& [k, v] : j.items()) {
    const double x = read_double(v, "model.lambda." + k);
    if (k == "cls") m.loss.cls = m.match.cls = x;
    else if (k == "box") m.loss.box = m.match.l1 = x;
    else if (k == "giou") m.loss.giou = m.match.giou = x;
    else if (k == "mask") m.loss.mask = x;
    else if (k == "dice") m.loss.dice = x;
    else if (k == "3d") m.loss.l3d = m.match.l3d = x;
    else if (k == "recon") m.distill.recon = x;
    else if (k == "cos") m.distill.cos = x;
    else if (k == "var") m.distill.var = x;
  }
}

void read_model(const json& j, model::ModelConfig& m) {
  require_object(j, "model");
  reject_unknown(j, "model",
                 {"dim", "heads", "fusion_layers", "ffn_ratio", "probes", "probe_grid", "decoder_layers", "alpha", "keys",
                  "tau_init", "ee_freqs", "neighbors", "route_tau", "threshold", "mask_ratio", "ema_momentum",
                  "predictor_blocks", "lambda"});
  for (const auto& [k, v] : j.items()) {
    const std::string key = "model." + k;
    if (k == "dim") m.fusion.dim = m.instance.dim = m.ssl.dim = m.geo.dim = read_int32(v, key);
    else if (k == "heads") m.fusion.heads = m.instance.heads = m.ssl.heads = read_int32(v, key);
    else if (k == "fusion_layers") m.fusion.layers = read_int32(v, key);
    else if (k == "ffn_ratio") m.fusion.ffn_ratio = m.ssl.ffn_ratio = read_int32(v, key);
    else if (k == "probes") m.instance.num_probes = read_int32(v, key);
    else if (k == "probe_grid") {
      if (!v.is_array() || v.size() != 3) fail(key, "expected [x, y, z] cell counts");
      m.instance.grid_x = read_int32(v[0], key + "[0]");
      m.instance.grid_y = read_int32(v[1], key + "[1]");
      m.instance.grid_z = read_int32(v[2], key + "[2]");
    } else if (k == "decoder_layers") m.instance.layers = read_int32(v, key);
    else if (k == "alpha") m.instance.alpha = read_double(v, key);
    else if (k == "keys") m.instance.keys = read_int32(v, key);
    else if (k == "tau_init") m.instance.tau_init = read_double(v, key);
    else if (k == "ee_freqs") m.geo.freqs = read_int32(v, key);
    else if (k == "neighbors") m.geo.neighbors = read_int32(v, key);
    else if (k == "route_tau") m.geo.tau = read_double(v, key);
    else if (k == "threshold") m.geo.threshold = read_double(v, key);
    else if (k == "mask_ratio") m.mask_ratio = read_double(v, key);
    else if (k == "ema_momentum") m.ema_momentum = read_double(v, key);
    else if (k == "predictor_blocks") m.ssl.blocks = read_int32(v, key);
    else if (k == "lambda") read_lambda(v, m);
  }
  if (m.fusion.heads > 0 && m.fusion.dim % m.fusion.heads == 0) {
    m.fusion.rope.head_dim = m.ssl.rope.head_dim = m.fusion.dim / m.fusion.heads;
  }
}

}  // namespace

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) fail(key, what);
  };
  auto got = [](auto v) { return ", got " + json(v).dump(); };
  check(scenes >= 1, "scenes", "must be >= 1" + got(scenes));

  const auto& s = scene;
  check(s.num_objects >= 0 && s.num_objects <= scene::kMaxObjects, "scene.num_objects",
        "must be in [0, " + std::to_string(scene::kMaxObjects) + "]" + got(s.num_objects));
  check(s.num_views >= 2 && s.num_views <= model.ssl.max_views, "scene.num_views",
        "must be in [2, " + std::to_string(model.ssl.max_views) + "]" + got(s.num_views));
  check(s.workspace_half > 0.0, "scene.workspace_half", "must be positive" + got(s.workspace_half));
  check(s.camera_arc >= 0.0 && s.camera_arc <= 2.0 * std::numbers::pi, "scene.camera_arc",
        "must be in [0, 2 pi]" + got(s.camera_arc));
  check(s.feature_noise >= 0.0, "scene.feature_noise", "must be nonnegative" + got(s.feature_noise));

  const auto& m = model;
  const int dim = m.fusion.dim, heads = m.fusion.heads;
  check(dim > 0, "model.dim", "must be positive" + got(dim));
  check(heads > 0, "model.heads", "must be positive" + got(heads));
  check(dim % heads == 0, "model.heads", "must divide model.dim (" + std::to_string(dim) + ")" + got(heads));
  check((dim / heads) % 6 == 0, "model.heads",
        "head_dim = dim / heads = " + std::to_string(dim / heads) + " must be divisible by 6");
  check(m.fusion.layers >= 1, "model.fusion_layers", "must be >= 1" + got(m.fusion.layers));
  check(m.fusion.ffn_ratio >= 1, "model.ffn_ratio", "must be >= 1" + got(m.fusion.ffn_ratio));
  const auto& in = m.instance;
  check(in.grid_x >= 1 && in.grid_y >= 1 && in.grid_z >= 1, "model.probe_grid", "cell counts must be >= 1");
  check(in.num_probes >= 1 && in.num_probes <= in.grid_x * in.grid_y * in.grid_z, "model.probes",
        "must be in [1, " + std::to_string(in.grid_x * in.grid_y * in.grid_z) + "] (probe_grid cells)" +
            got(in.num_probes));
  check(in.layers >= 1, "model.decoder_layers", "must be >= 1" + got(in.layers));
  check(in.alpha > 0.0, "model.alpha", "must be positive" + got(in.alpha));
  check(in.keys >= 1, "model.keys", "must be >= 1" + got(in.keys));
  check(in.tau_init > 0.0, "model.tau_init", "must be positive" + got(in.tau_init));
  check(m.geo.freqs >= 1, "model.ee_freqs", "must be >= 1" + got(m.geo.freqs));
  check(m.geo.neighbors >= 1, "model.neighbors", "must be >= 1" + got(m.geo.neighbors));
  check(m.geo.tau > 0.0, "model.route_tau", "must be positive" + got(m.geo.tau));
  check(m.geo.threshold >= 0.0 && m.geo.threshold <= 1.0, "model.threshold", "must be in [0, 1]" + got(m.geo.threshold));
  check(m.mask_ratio > 0.0 && m.mask_ratio < 1.0, "model.mask_ratio", "must be in (0, 1)" + got(m.mask_ratio));
  check(m.ema_momentum >= 0.0 && m.ema_momentum <= 1.0, "model.ema_momentum",
        "must be in [0, 1]" + got(m.ema_momentum));
  check(m.ssl.blocks >= 1, "model.predictor_blocks", "must be >= 1" + got(m.ssl.blocks));
  const std::pair<const char*, double> lambdas[] = {
      {"cls", m.loss.cls},     {"box", m.loss.box},   {"giou", m.loss.giou}, {"mask", m.loss.mask}, {"dice", m.loss.dice},
      {"3d", m.loss.l3d},      {"recon", m.distill.recon}, {"cos", m.distill.cos}, {"var", m.distill.var}};
  for (const auto& [k, v] : lambdas) check(v >= 0.0, std::string("model.lambda.") + k, "must be nonnegative" + got(v));

  for (const auto& [name, t] : {std::pair{"stage1", &stage1}, std::pair{"stage2", &stage2}}) {
    const std::string p = name;
    check(t->steps >= 0, p + ".steps", "must be >= 0" + got(t->steps));
    check(t->lr > 0.0, p + ".lr", "must be positive" + got(t->lr));
    check(t->batch >= 1, p + ".batch", "must be >= 1" + got(t->batch));
    check(t->warmup >= 0, p + ".warmup", "must be >= 0" + got(t->warmup));
    check(t->final_lr >= 0.0 && t->final_lr <= t->lr, p + ".final_lr", "must be in [0, lr]" + got(t->final_lr));
    check(t->clip >= 0.0, p + ".clip", "must be >= 0" + got(t->clip));
    check(t->weight_decay >= 0.0, p + ".weight_decay", "must be >= 0" + got(t->weight_decay));
  }

  // Anything the explicit checks above did not anticipate.
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    fail("scene", e.what());
  }
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    fail("model", e.what());
  }
}

json RunConfig::to_json() const {
  const auto& m = model;
  json j;
  j["seed"] = seed;
  j["scenes"] = scenes;
  j["scene"] = {{"num_objects", scene.num_objects},
                {"num_views", scene.num_views},
                {"workspace_half", scene.workspace_half},
                {"camera_arc", scene.camera_arc},
                {"only_kind", scene.only_kind ? json(scene::kind_name(*scene.only_kind)) : json(nullptr)},
                {"feature_noise", scene.feature_noise}};
  j["model"] = {{"dim", m.fusion.dim},
                {"heads", m.fusion.heads},
                {"fusion_layers", m.fusion.layers},
                {"ffn_ratio", m.fusion.ffn_ratio},
                {"probes", m.instance.num_probes},
                {"probe_grid", {m.instance.grid_x, m.instance.grid_y, m.instance.grid_z}},
                {"decoder_layers", m.instance.layers},
                {"alpha", m.instance.alpha},
                {"keys", m.instance.keys},
                {"tau_init", m.instance.tau_init},
                {"ee_freqs", m.geo.freqs},
                {"neighbors", m.geo.neighbors},
                {"route_tau", m.geo.tau},
                {"threshold", m.geo.threshold},
                {"mask_ratio", m.mask_ratio},
                {"ema_momentum", m.ema_momentum},
                {"predictor_blocks", m.ssl.blocks},
                {"lambda",
                 {{"cls", m.loss.cls},
                  {"box", m.loss.box},
                  {"giou", m.loss.giou},
                  {"mask", m.loss.mask},
                  {"dice", m.loss.dice},
                  {"3d", m.loss.l3d},
                  {"recon", m.distill.recon},
                  {"cos", m.distill.cos},
                  {"var", m.distill.var}}}};
  j["stage1"] = stage_json(stage1);
  j["stage2"] = stage_json(stage2);
  return j;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "full") {
    c.stage1 = c.stage2 = model::TrainConfig::full_scale();
    return c;
  }
  throw config_error("preset: unknown preset '" + name + "' (expected \"desk\" or \"full\")");
}

RunConfig config_from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  require_object(j, "");
  reject_unknown(j, "", {"seed", "scenes", "scene", "model", "stage1", "stage2"});
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        fail("seed", "expected a nonnegative integer, got " + v.dump());
      }
      c.seed = v.get<std::uint64_t>();
    } else if (k == "scenes") {
      c.scenes = read_int32(v, "scenes");
    } else if (k == "scene") {
      read_scene(v, c.scene);
    } else if (k == "model") {
      read_model(v, c.model);
    } else if (k == "stage1") {
      read_stage(v, "stage1", c.stage1);
    } else if (k == "stage2") {
      read_stage(v, "stage2", c.stage2);
    }
  }
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw config_error("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw config_error("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw config_error("unknown key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig resolve_config(const std::string& preset_name, const std::filesystem::path* file,
                         const std::vector<std::string>& overrides) {
  const RunConfig base = preset(preset_name);
  json j = base.to_json();
  if (file) j.merge_patch(read_json_file(*file));
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = config_from_json(j, base);
  c.validate();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw config_error(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace vla3d::app

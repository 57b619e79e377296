#pragma once

// Scene files: strict, versioned JSON. Unknown keys are errors and every path
// is resolved relative to the directory holding the scene file.

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include "v2s/dynamics.hpp"
#include "v2s/geometry.hpp"
#include "v2s/identify.hpp"
#include "v2s/kinematics.hpp"

namespace v2s {

using Json = nlohmann::json;

namespace detail {

/// Typed access to one JSON object that remembers which keys were read, so
/// leftovers can be reported as unknown.
class JsonObject {
 public:
  JsonObject(const Json& j, std::string where) : j_(&j), where_(std::move(where)) {
    require(j.is_object(), where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_->at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = raw(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InputError(where_ + "." + key + ": wrong type");
    }
  }

  template <class T>
  T required(const std::string& key) {
    require(has(key), where_ + ": missing key '" + key + "'");
    T out{};
    get(key, out);
    return out;
  }

  void get_vec3(const std::string& key, Vec3& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    require(v.is_array() && v.size() == 3, where_ + "." + key + ": expected [x, y, z]");
    for (int k = 0; k < 3; ++k) {
      require(v[k].is_number(), where_ + "." + key + ": expected numbers");
      out[k] = v[k].get<double>();
    }
  }

  JsonObject child(const std::string& key) { return JsonObject(raw(key), where_ + "." + key); }

  const std::string& where() const { return where_; }

  void finish() const {
    for (const auto& [key, value] : j_->items())
      if (!seen_.count(key)) throw InputError(where_ + ": unknown key '" + key + "'");
  }

 private:
  const Json* j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open file: " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path + ": invalid JSON: " + e.what());
  }
}

inline void write_json_file(const Json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write file: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw InputError("failed writing file: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cubature files

inline void save_cubature(const CubatureSet& c, const std::string& path) {
  Json j;
  j["version"] = 1;
  j["indices"] = c.indices;
  j["weights"] = std::vector<double>(c.weights.data(), c.weights.data() + c.weights.size());
  detail::write_json_file(j, path);
}

inline CubatureSet load_cubature(const std::string& path) {
  const Json j = detail::read_json_file(path);
  detail::JsonObject o(j, path);
  detail::require(o.required<int>("version") == 1, path + ": unsupported cubature version");
  CubatureSet c;
  c.indices = o.required<std::vector<long>>("indices");
  const auto w = o.required<std::vector<double>>("weights");
  o.finish();
  c.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<long>(w.size()));
  return c;
}

// ---------------------------------------------------------------------------
// Scene

struct Scene {
  std::string path;
  std::filesystem::path directory;
  SceneConfig config;
  PointSet points;        // canonical frame, masses assigned
  Similarity to_input;    // canonical -> input frame
  std::optional<std::string> gaussians;
  std::optional<std::string> lbs_model;
  std::optional<std::string> jacobian_model;
  std::optional<std::string> cubature_file;
  LbsTrainConfig lbs_training;
  JacobianTrainConfig jacobian_training;
  FitConfig fit;
  double fit_E0 = 1e5;
  double fit_nu0 = 0.3;

  /// Re-derives every algorithmic sub-seed from a new master seed. Point
  /// sampling keeps the scene's own seed so the object does not change.
  void reseed(std::uint64_t master) {
    config.seed = master;
    lbs_training.seed = detail::derive_seed(master, "train-lbs");
    jacobian_training.seed = detail::derive_seed(master, "train-jacobian");
    fit.seed = detail::derive_seed(master, "fit");
  }

  std::uint64_t cubature_seed() const { return detail::derive_seed(config.seed, "cubature"); }

  std::string resolve(const std::string& p) const {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q.string() : (directory / q).lexically_normal().string();
  }
};

namespace detail {

inline material::Params parse_material(JsonObject o) {
  material::Params m;
  std::string model = material::to_string(m.model);
  o.get("model", model);
  m.model = material::model_from_string(model);
  o.get("E", m.E);
  o.get("nu", m.nu);
  o.get("density", m.density);
  o.get("tau_y", m.tau_y);
  o.get("theta_f", m.theta_f);
  o.finish();
  m.sanitize();
  return m;
}

inline Boundary parse_boundary(JsonObject o) {
  const auto type = o.required<std::string>("type");
  Boundary out;
  if (type == "floor" || type == "moving_floor") {
    Floor f;
    o.get_vec3("normal", f.normal);
    o.get("height", f.height);
    if (type == "moving_floor") f.velocity = o.required<double>("velocity");
    o.get("stiffness", f.stiffness);
    out = f;
  } else if (type == "sphere") {
    Sphere s;
    o.get_vec3("center", s.center);
    s.radius = o.required<double>("radius");
    o.get("stiffness", s.stiffness);
    out = s;
  } else {
    throw InputError(o.where() + ": unknown boundary type '" + type + "'");
  }
  o.finish();
  validate_boundary(out);
  return out;
}

inline void parse_lbs_training(JsonObject o, LbsTrainConfig& c) {
  o.get("iterations", c.iterations);
  o.get("batch", c.batch);
  o.get("learning_rate", c.learning_rate);
  o.get("sigma_max", c.sigma_max);
  o.get("ortho_weight", c.ortho_weight);
  o.get("j_floor", c.j_floor);
  o.get("hidden_width", c.arch.hidden_width);
  o.get("linear_layers", c.arch.linear_layers);
  o.get("rigid_handle", c.rigid_handle);
  o.finish();
  require(c.iterations >= 0 && c.batch >= 1 && c.learning_rate > 0.0 && c.sigma_max >= 0.0,
          "training.lbs: invalid settings");
}

inline void parse_jacobian_training(JsonObject o, JacobianTrainConfig& c) {
  o.get("iterations", c.iterations);
  o.get("batch", c.batch);
  o.get("z_per_point", c.z_per_point);
  o.get("learning_rate", c.learning_rate);
  o.get("final_learning_rate", c.final_learning_rate);
  o.get("sigma", c.sigma);
  o.get("fd_step", c.fd_step);
  o.get("holdout", c.holdout);
  o.get("encoding_width", c.arch.encoding_width);
  o.get("max_octave", c.arch.max_octave);
  o.get("block_widths", c.arch.block_widths);
  std::string loss = c.loss == JacobianLoss::L1 ? "l1" : "l2";
  o.get("loss", loss);
  require(loss == "l1" || loss == "l2", "training.jacobian.loss must be \"l1\" or \"l2\"");
  c.loss = loss == "l1" ? JacobianLoss::L1 : JacobianLoss::L2;
  o.finish();
  require(c.iterations >= 0 && c.batch >= 1 && c.z_per_point >= 1 && c.learning_rate > 0.0 && c.fd_step > 0.0,
          "training.jacobian: invalid settings");
}

inline void parse_fit(JsonObject o, Scene& s) {
  FitConfig& c = s.fit;
  o.get("iterations", c.iterations);
  o.get("window", c.window);
  o.get("observed_frames", c.observed_frames);
  o.get("lr_lbs", c.lr_lbs);
  o.get("lr_jacobian", c.lr_jac);
  o.get("lr_E", c.lr_E);
  o.get("lr_nu", c.lr_nu);
  o.get("final_lr_fraction", c.final_lr_fraction);
  std::string est = to_string(c.estimator);
  o.get("estimator", est);
  c.estimator = estimator_from_string(est);
  o.get("finetune_networks", c.finetune_networks);
  o.get("step_log10_E", c.step_log10_E);
  o.get("step_nu", c.step_nu);
  o.get("step_network", c.step_network);
  o.get("divergence_tol", c.divergence_tol);
  o.get("divergence_refresh", c.divergence_refresh);
  o.get("E0", s.fit_E0);
  o.get("nu0", s.fit_nu0);
  o.finish();
  c.validate();
}

inline void parse_newton(JsonObject o, NewtonSettings& n) {
  o.get("max_iterations", n.max_iterations);
  o.get("tolerance", n.tolerance);
  o.get("armijo", n.armijo);
  o.get("shrink", n.shrink);
  o.get("min_step", n.min_step);
  o.finish();
  require(n.max_iterations >= 1 && n.tolerance > 0.0 && n.shrink > 0.0 && n.shrink < 1.0 && n.min_step > 0.0,
          "newton: invalid settings");
}

inline Eigen::Matrix3Xd scene_positions(JsonObject o, const Scene& s) {
  Eigen::Matrix3Xd pos;
  if (o.has("path")) {
    pos = load_points(s.resolve(o.required<std::string>("path")));
  } else {
    const auto shape = o.required<std::string>("primitive");
    const auto count = o.required<long>("count");
    std::uint64_t seed = derive_seed(s.config.seed, "points");
    o.get("seed", seed);
    pos = sample_primitive(shape, count, seed);
  }
  o.finish();
  return pos;
}

}  // namespace detail

inline Scene parse_scene(const Json& j, const std::string& path) {
  Scene s;
  s.path = path;
  s.directory = std::filesystem::absolute(std::filesystem::path(path)).parent_path();
  detail::JsonObject o(j, path);
  detail::require(o.has("version"), path + ": missing key 'version'");
  detail::require(o.required<int>("version") == 1, path + ": unsupported scene version");

  SceneConfig& c = s.config;
  o.get("seed", c.seed);
  if (o.has("material")) c.material = detail::parse_material(o.child("material"));
  o.get("handles", c.handles);
  o.get("cubature", c.cubature);
  o.get("dt", c.dt);
  o.get("substeps", c.substeps);
  o.get("frames", c.frames);
  o.get_vec3("gravity", c.gravity);
  o.get_vec3("initial_velocity", c.initial_velocity);
  if (o.has("boundaries")) {
    const Json& list = o.raw("boundaries");
    detail::require(list.is_array(), path + ".boundaries: expected an array");
    for (std::size_t i = 0; i < list.size(); ++i)
      c.boundaries.push_back(
          detail::parse_boundary(detail::JsonObject(list[i], path + ".boundaries[" + std::to_string(i) + "]")));
  }
  if (o.has("newton")) detail::parse_newton(o.child("newton"), c.newton);
  c.validate();

  detail::require(o.has("points"), path + ": missing key 'points'");
  Eigen::Matrix3Xd pos = detail::scene_positions(o.child("points"), s);
  double total_volume = 0.0;
  o.get("total_volume", total_volume);
  if (total_volume <= 0.0) total_volume = default_total_volume(pos);
  auto [canonical, transform] = normalize_to_canonical(PointSet::from_positions(std::move(pos), total_volume));
  s.points = assign_masses(canonical, c.material.density);
  s.points.validate();
  s.to_input = transform;
  detail::require(c.cubature <= s.points.size(), path + ": more cubature points than points");

  if (o.has("gaussians")) s.gaussians = s.resolve(o.required<std::string>("gaussians"));
  if (o.has("models")) {
    auto m = o.child("models");
    if (m.has("lbs")) s.lbs_model = s.resolve(m.required<std::string>("lbs"));
    if (m.has("jacobian")) s.jacobian_model = s.resolve(m.required<std::string>("jacobian"));
    if (m.has("cubature")) s.cubature_file = s.resolve(m.required<std::string>("cubature"));
    m.finish();
  }

  s.lbs_training.handles = c.handles;
  s.reseed(c.seed);
  if (o.has("training")) {
    auto t = o.child("training");
    if (t.has("lbs")) detail::parse_lbs_training(t.child("lbs"), s.lbs_training);
    if (t.has("jacobian")) detail::parse_jacobian_training(t.child("jacobian"), s.jacobian_training);
    t.finish();
  }
  if (o.has("fit")) detail::parse_fit(o.child("fit"), s);
  o.finish();
  return s;
}

inline Scene load_scene(const std::string& path) { return parse_scene(detail::read_json_file(path), path); }

}  // namespace v2s

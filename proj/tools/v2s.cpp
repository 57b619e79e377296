// Command-line driver. Exit codes: 0 success, 1 input error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "v2s/v2s.hpp"

namespace {

using v2s::InputError;
using v2s::Json;

struct Common {
  std::string scene;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("scene", c.scene, "scene JSON file")->required();
  cmd->add_option("--seed", c.seed, "master seed (overrides the scene)");
}

v2s::Scene open_scene(const Common& c) {
  if (!std::filesystem::exists(c.scene)) throw InputError("scene file not found: " + c.scene);
  v2s::Scene s = v2s::load_scene(c.scene);
  if (c.seed) s.reseed(*c.seed);
  return s;
}

std::string pick_path(const std::string& flag, const std::optional<std::string>& from_scene, const char* what) {
  if (!flag.empty()) return flag;
  if (from_scene) return *from_scene;
  throw InputError(std::string("no ") + what + " given (pass a flag or set it under \"models\" in the scene)");
}

v2s::LbsModel open_lbs(const v2s::Scene& s, const std::string& flag) {
  const auto path = pick_path(flag, s.lbs_model, "LBS model");
  if (!std::filesystem::exists(path)) throw InputError("LBS model not found: " + path);
  auto lbs = v2s::LbsModel::load(path);
  if (lbs.handle_count() != s.config.handles)
    throw InputError(path + ": model has " + std::to_string(lbs.handle_count()) + " handles, scene expects " +
                     std::to_string(s.config.handles));
  return lbs;
}

v2s::CubatureSet scene_cubature(const v2s::Scene& s, const std::string& flag) {
  v2s::CubatureSet c;
  if (!flag.empty() || s.cubature_file) {
    c = v2s::load_cubature(flag.empty() ? *s.cubature_file : flag);
  } else {
    c = v2s::farthest_point_sample(s.points, s.config.cubature, s.cubature_seed());
  }
  c.validate(s.points);
  return c;
}

struct ModelFlags {
  std::string lbs, jacobian, cubature;
  bool exact = false;

  void add(CLI::App* cmd, bool with_jacobian = true) {
    cmd->add_option("--lbs", lbs, "LBS model file");
    cmd->add_option("--cubature", cubature, "cubature file");
    if (with_jacobian) {
      cmd->add_option("--jacobian", jacobian, "neural Jacobian model file");
      cmd->add_flag("--exact-jacobian", exact, "recompute Jacobians from the LBS model");
    }
  }
};

v2s::ModelBundle open_models(const v2s::Scene& s, const ModelFlags& f) {
  v2s::ModelBundle b;
  b.points = s.points;
  b.lbs = open_lbs(s, f.lbs);
  b.cubature = scene_cubature(s, f.cubature);
  const std::string jac = !f.jacobian.empty() ? f.jacobian : s.jacobian_model.value_or("");
  if (!f.exact && !jac.empty()) {
    if (!std::filesystem::exists(jac)) throw InputError("Jacobian model not found: " + jac);
    b.jacobian = v2s::JacobianModel::load(jac);
    if (b.jacobian->handle_count() != b.lbs.handle_count())
      throw InputError(jac + ": Jacobian model handle count does not match the LBS model");
    b.mode = v2s::JacobianMode::Neural;
  }
  return b;
}

v2s::Trajectory open_trajectory(const std::string& path) {
  if (!std::filesystem::exists(path)) throw InputError("trajectory not found: " + path);
  return v2s::load_trajectory(path);
}

Json load_fit_json(const std::string& path) {
  Json j = v2s::detail::read_json_file(path);
  if (!j.is_object() || j.value("version", 0) != 1 || !j.contains("E") || !j.contains("nu") ||
      !j["E"].is_number() || !j["nu"].is_number())
    throw InputError(path + ": not a fit result");
  return j;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

int cmd_train_lbs(const Common& c, const std::string& out, std::optional<int> iterations, bool quiet) {
  auto s = open_scene(c);
  auto cfg = s.lbs_training;
  if (iterations) cfg.iterations = *iterations;
  if (!quiet)
    cfg.progress = [&](int it, double loss) {
      if (it % 500 == 0) std::fprintf(stderr, "train-lbs iter %d loss %.6e\n", it, loss);
    };
  const auto t0 = std::chrono::steady_clock::now();
  auto result = v2s::train_lbs_datafree(s.points, s.config.material, cfg);
  result.model.save(out);
  if (!(v2s::LbsModel::load(out) == result.model)) throw v2s::Error("model file failed its round-trip check: " + out);
  std::printf("initial_loss %.9e\nfinal_loss %.9e\nwall_seconds %.3f\n", result.initial_loss, result.final_loss,
              seconds_since(t0));
  return 0;
}

int cmd_train_jacobian(const Common& c, const ModelFlags& mf, const std::string& out, std::optional<int> iterations,
                       bool quiet) {
  auto s = open_scene(c);
  const auto lbs = open_lbs(s, mf.lbs);
  auto cfg = s.jacobian_training;
  if (iterations) cfg.iterations = *iterations;
  if (!quiet)
    cfg.progress = [&](int it, double loss) {
      if (it % 500 == 0) std::fprintf(stderr, "train-jacobian iter %d loss %.6e\n", it, loss);
    };
  const auto t0 = std::chrono::steady_clock::now();
  auto result = v2s::train_neural_jacobian(lbs, s.points, cfg);
  result.model.save(out);
  if (!(v2s::JacobianModel::load(out) == result.model))
    throw v2s::Error("model file failed its round-trip check: " + out);
  std::printf("initial_holdout_mse %.9e\nholdout_mse %.9e\nwall_seconds %.3f\n", result.initial_holdout_mse,
              result.holdout_mse, seconds_since(t0));
  return 0;
}

int cmd_sample_cubature(const Common& c, std::optional<int> count, const std::string& out) {
  auto s = open_scene(c);
  const long k = count ? *count : s.config.cubature;
  const auto cub = v2s::farthest_point_sample(s.points, k, s.cubature_seed());
  v2s::save_cubature(cub, out);
  std::printf("cubature_points %ld\n", cub.size());
  return 0;
}

int cmd_simulate(const Common& c, const ModelFlags& mf, const std::string& out, std::optional<int> frames,
                 const std::string& csv) {
  auto s = open_scene(c);
  const auto models = open_models(s, mf);
  const auto t0 = std::chrono::steady_clock::now();
  const auto sys = models.build(s.config);
  const double setup = seconds_since(t0);
  const long n_frames = frames ? *frames : s.config.frames;
  v2s::detail::require(n_frames >= 1, "--frames must be at least 1");
  const auto result = v2s::simulate(sys, s.config, v2s::initial_state(sys, s.config), n_frames);
  v2s::save_trajectory(result.trajectory, out);
  if (!csv.empty()) v2s::export_trajectory_csv(result.trajectory, csv);
  std::printf("jacobian_mode %s\nsetup_seconds %.6f\n", v2s::to_string(sys.mode), setup);
  double total = 0.0;
  long newton = 0;
  for (const auto& f : result.stats) {
    std::printf("frame %ld newton_iterations %d converged %d wall_seconds %.6f\n", f.frame, f.newton_iterations,
                f.converged ? 1 : 0, f.wall_seconds);
    total += f.wall_seconds;
    newton += f.newton_iterations;
  }
  std::printf("total_newton_iterations %ld\ntotal_wall_seconds %.6f\n", newton, total);
  return 0;
}

int cmd_fit(const Common& c, const ModelFlags& mf, const std::string& observed_path, std::optional<int> frames,
            std::optional<int> iterations, std::optional<double> E0, std::optional<double> nu0, bool report_time,
            const std::string& out, bool quiet) {
  auto s = open_scene(c);
  auto models = open_models(s, mf);
  const auto observed = open_trajectory(observed_path);
  auto cfg = s.fit;
  if (frames) cfg.observed_frames = *frames;
  if (iterations) cfg.iterations = *iterations;
  if (!quiet)
    cfg.progress = [&](int it, double loss, double E, double nu) {
      if (it % 20 == 0) std::fprintf(stderr, "fit iter %d loss %.6e E %.6e nu %.5f\n", it, loss, E, nu);
    };
  if (observed.point_count() != s.points.size())
    throw InputError("observed trajectory has " + std::to_string(observed.point_count()) + " points, scene has " +
                     std::to_string(s.points.size()));
  const auto r = v2s::fit_parameters(s.config, models, observed, cfg, E0.value_or(s.fit_E0), nu0.value_or(s.fit_nu0));

  Json j;
  j["version"] = 1;
  j["E"] = r.E;
  j["nu"] = r.nu;
  j["log10_E"] = r.log10_E();
  j["iterations"] = r.iterations;
  j["observed_frames"] = cfg.observed_frames;
  j["window"] = cfg.window;
  j["estimator"] = v2s::to_string(r.estimator);
  j["jacobian_mode"] = v2s::to_string(models.mode);
  j["seed"] = s.config.seed;
  j["loss_history"] = r.loss_history;
  j["E_history"] = r.E_history;
  j["nu_history"] = r.nu_history;
  j["window_starts"] = r.window_starts;
  j["divergence_frames"] = r.divergence_frames;
  j["wall_seconds"] = report_time ? Json(r.wall_seconds) : Json(nullptr);
  if (r.lbs) {
    const std::string p = out + ".lbs.bin";
    r.lbs->save(p);
    j["lbs_model"] = std::filesystem::path(p).filename().string();
  }
  if (r.jacobian) {
    const std::string p = out + ".jacobian.bin";
    r.jacobian->save(p);
    j["jacobian_model"] = std::filesystem::path(p).filename().string();
  }
  v2s::detail::write_json_file(j, out);
  std::printf("E %.9e\nnu %.9f\nfinal_loss %.9e\n", r.E, r.nu, r.loss_history.empty() ? 0.0 : r.loss_history.back());
  if (report_time) std::printf("wall_seconds %.3f\n", r.wall_seconds);
  return 0;
}

int cmd_predict(const Common& c, ModelFlags mf, const std::string& fit_path, const std::string& observed_path,
                int horizon, std::optional<int> from, const std::string& out) {
  auto s = open_scene(c);
  const Json fit = load_fit_json(fit_path);
  const auto fit_dir = std::filesystem::absolute(fit_path).parent_path();
  if (mf.lbs.empty() && fit.contains("lbs_model")) mf.lbs = (fit_dir / fit["lbs_model"].get<std::string>()).string();
  if (mf.jacobian.empty() && fit.contains("jacobian_model"))
    mf.jacobian = (fit_dir / fit["jacobian_model"].get<std::string>()).string();
  const auto models = open_models(s, mf);
  const auto observed = open_trajectory(observed_path);
  if (observed.point_count() != s.points.size())
    throw InputError("observed trajectory point count does not match the scene");
  const long start = from ? *from : fit.value("observed_frames", s.fit.observed_frames) - 1;
  if (start < 0 || start >= observed.frame_count())
    throw InputError("restart frame " + std::to_string(start) + " is outside the observed trajectory");
  const auto scene = v2s::with_material(s.config, std::log10(fit["E"].get<double>()), fit["nu"].get<double>());
  const auto sys = models.build(scene);
  const auto pred = v2s::predict_future(sys, scene, observed, start, horizon);
  v2s::save_trajectory(pred, out);
  std::printf("restart_frame %ld\npredicted_frames %ld\n", start, pred.frame_count());
  return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& ref_path, std::optional<int> ref_start,
             const std::string& fit_path, std::optional<double> true_E, std::optional<double> true_nu) {
  const auto pred = open_trajectory(pred_path);
  auto ref = open_trajectory(ref_path);
  if (ref_start) {
    if (*ref_start < 0 || *ref_start + pred.frame_count() > ref.frame_count())
      throw InputError("reference has too few frames for --ref-start " + std::to_string(*ref_start));
    ref = ref.slice(*ref_start, pred.frame_count());
  }
  v2s::Metrics m;
  if (!fit_path.empty()) {
    if (!true_E || !true_nu) throw InputError("--fit needs --true-E and --true-nu");
    const Json fit = load_fit_json(fit_path);
    m = v2s::evaluate(pred, ref, fit["E"].get<double>(), *true_E, fit["nu"].get<double>(), *true_nu);
  } else {
    m = v2s::evaluate(pred, ref);
  }
  const double diag = ref.frame_count() ? v2s::bounding_box(ref.frames.front()).diagonal() : 0.0;
  Json j;
  j["frames"] = pred.frame_count();
  j["points"] = pred.point_count();
  j["mean_point_error"] = m.mean_point_error;
  j["max_point_error"] = m.max_point_error;
  j["relative_mean_error"] = diag > 0.0 ? m.mean_point_error / diag : 0.0;
  j["per_frame"] = m.per_frame;
  if (m.log10_E_mae) j["log10_E_mae"] = *m.log10_E_mae;
  if (m.nu_mae) j["nu_mae"] = *m.nu_mae;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_export_gaussians(const Common& c, const ModelFlags& mf, const std::string& traj_path,
                         const std::string& gaussians_flag, const std::string& out_dir, const std::string& stem) {
  auto s = open_scene(c);
  const auto models = open_models(s, mf);
  const std::string gpath = pick_path(gaussians_flag, s.gaussians, "Gaussian file");
  if (!std::filesystem::exists(gpath)) throw InputError("Gaussian file not found: " + gpath);
  const auto gaussians = v2s::to_canonical(v2s::load_gaussians(gpath), s.to_input);
  const auto traj = open_trajectory(traj_path);
  if (traj.point_count() != s.points.size()) throw InputError("trajectory point count does not match the scene");
  const auto sys = models.build(s.config);
  std::filesystem::create_directories(out_dir);
  std::vector<v2s::GaussianSet> frames;
  frames.reserve(traj.frame_count());
  for (long f = 0; f < traj.frame_count(); ++f) {
    const Eigen::VectorXd z = sys.project_displacements(traj.frames[f] - sys.rest);
    const auto moved = v2s::to_gaussian_set(v2s::advect(gaussians, models.lbs, z), gaussians);
    frames.push_back(v2s::to_input_frame(moved, s.to_input));
  }
  const auto paths = v2s::export_gaussian_frames(frames, out_dir, stem);
  std::printf("gaussians %ld\nframes_written %zu\n", gaussians.size(), paths.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reduced-order neural simulation, identification and Gaussian export"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  ModelFlags mf;
  std::string out, csv, observed, fit_path, traj, gaussians, stem = "frame", ref;
  std::optional<int> iterations, frames, count, from, ref_start;
  std::optional<double> E0, nu0, true_E, true_nu;
  int horizon = 8;
  bool report_time = false, quiet = false;
  std::string pred;
  std::function<int()> run;

  auto* train_lbs = app.add_subcommand("train-lbs", "data-free training of the skinning-weight network");
  add_common(train_lbs, common);
  train_lbs->add_option("-o,--out", out, "output model file")->required();
  train_lbs->add_option("--iterations", iterations, "override the scene's iteration count");
  train_lbs->add_flag("-q,--quiet", quiet, "no progress output");
  train_lbs->callback([&] { run = [&] { return cmd_train_lbs(common, out, iterations, quiet); }; });

  auto* train_jac = app.add_subcommand("train-jacobian", "fit the neural Jacobian to an LBS model");
  add_common(train_jac, common);
  train_jac->add_option("--lbs", mf.lbs, "LBS model file");
  train_jac->add_option("-o,--out", out, "output model file")->required();
  train_jac->add_option("--iterations", iterations, "override the scene's iteration count");
  train_jac->add_flag("-q,--quiet", quiet, "no progress output");
  train_jac->callback([&] { run = [&] { return cmd_train_jacobian(common, mf, out, iterations, quiet); }; });

  auto* cub = app.add_subcommand("sample-cubature", "farthest-point sampling of cubature points");
  add_common(cub, common);
  cub->add_option("-k,--count", count, "number of cubature points (default: scene)");
  cub->add_option("-o,--out", out, "output cubature file")->required();
  cub->callback([&] { run = [&] { return cmd_sample_cubature(common, count, out); }; });

  auto* sim = app.add_subcommand("simulate", "run the reduced simulation");
  add_common(sim, common);
  mf.add(sim);
  sim->add_option("--frames", frames, "output frames including the rest frame (default: scene)");
  sim->add_option("-o,--out", out, "output trajectory file")->required();
  sim->add_option("--csv", csv, "also write the trajectory as CSV");
  sim->callback([&] { run = [&] { return cmd_simulate(common, mf, out, frames, csv); }; });

  auto* fit = app.add_subcommand("fit", "identify E and nu from an observed trajectory");
  add_common(fit, common);
  mf.add(fit);
  fit->add_option("--observed", observed, "observed trajectory")->required();
  fit->add_option("--frames", frames, "observed frames to use (default 16)");
  fit->add_option("--iterations", iterations, "optimizer iterations (default: scene)");
  fit->add_option("--E0", E0, "initial Young's modulus");
  fit->add_option("--nu0", nu0, "initial Poisson ratio");
  fit->add_flag("--report-time", report_time, "record wall time in the result (breaks bitwise determinism)");
  fit->add_option("-o,--out", out, "output fit JSON")->required();
  fit->add_flag("-q,--quiet", quiet, "no progress output");
  fit->callback([&] {
    run = [&] {
      return cmd_fit(common, mf, observed, frames, iterations, E0, nu0, report_time, out, quiet);
    };
  });

  auto* predict = app.add_subcommand("predict", "simulate future frames with fitted parameters");
  add_common(predict, common);
  mf.add(predict);
  predict->add_option("--fit", fit_path, "fit result JSON")->required();
  predict->add_option("--observed", observed, "observed trajectory")->required();
  predict->add_option("--horizon", horizon, "frames to predict")->check(CLI::NonNegativeNumber);
  predict->add_option("--from", from, "restart frame (default: last observed frame)");
  predict->add_option("-o,--out", out, "output trajectory")->required();
  predict->callback([&] { run = [&] { return cmd_predict(common, mf, fit_path, observed, horizon, from, out); }; });

  auto* eval = app.add_subcommand("eval", "compare two trajectories, print metrics as JSON");
  eval->add_option("prediction", pred, "predicted trajectory")->required();
  eval->add_option("reference", ref, "reference trajectory")->required();
  eval->add_option("--ref-start", ref_start, "first reference frame to compare against");
  eval->add_option("--fit", fit_path, "fit JSON, for parameter errors");
  eval->add_option("--true-E", true_E, "ground-truth Young's modulus");
  eval->add_option("--true-nu", true_nu, "ground-truth Poisson ratio");
  eval->add_option("--seed", common.seed, "accepted for uniformity; eval is not randomized");
  eval->callback([&] { run = [&] { return cmd_eval(pred, ref, ref_start, fit_path, true_E, true_nu); }; });

  auto* exp = app.add_subcommand("export-gaussians", "write deformed Gaussians per trajectory frame");
  add_common(exp, common);
  mf.add(exp, false);
  exp->add_option("--trajectory", traj, "trajectory to follow")->required();
  exp->add_option("--gaussians", gaussians, "Gaussian PLY in the input frame (default: scene)");
  exp->add_option("-o,--out", out, "output directory")->required();
  exp->add_option("--stem", stem, "file name stem");
  exp->callback([&] { run = [&] { return cmd_export_gaussians(common, mf, traj, gaussians, out, stem); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return run();
  } catch (const v2s::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const v2s::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

#pragma once

// Material identification from observed point trajectories: windowed loss,
// divergence frame, derivative-free gradient estimates, the (log10 E, nu)
// optimizer with optional SPSA fine-tuning of the networks, future-state
// prediction, and point-space metrics.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "v2s/detail/error.hpp"
#include "v2s/detail/parallel.hpp"
#include "v2s/detail/random.hpp"
#include "v2s/dynamics.hpp"
#include "v2s/kinematics.hpp"
#include "v2s/neuralnet.hpp"

namespace v2s {

// ---------------------------------------------------------------------------
// Losses on trajectories

/// Mean over frames s+1..s+window and all points of |pred - obs|^2. Frames are
/// absolute indices; pred frame t is read at t - pred_offset.
inline double trajectory_loss(const Trajectory& pred, const Trajectory& obs, long s, long window, long pred_offset = 0) {
  detail::require(window >= 1 && s >= 0, "window must be positive and start non-negative");
  detail::require(pred.point_count() == obs.point_count(), "trajectories have different point counts");
  const long last = s + window;
  if (last >= obs.frame_count() || last - pred_offset >= pred.frame_count() || s + 1 - pred_offset < 0)
    throw InputError("loss window [" + std::to_string(s + 1) + ", " + std::to_string(last) +
                     "] exceeds the trajectories");
  double sum = 0.0;
  for (long t = s + 1; t <= last; ++t) sum += (pred.frames[t - pred_offset] - obs.frames[t]).squaredNorm();
  return sum / static_cast<double>(window * obs.point_count());
}

/// Mean Euclidean point error of one frame pair.
inline double mean_point_error(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
  detail::require(a.cols() == b.cols() && a.cols() > 0, "frames have different point counts");
  return (a - b).colwise().norm().mean();
}

/// First frame whose mean point error exceeds tol; the last frame if none does.
inline long first_divergence_frame(const Trajectory& pred, const Trajectory& obs, double tol) {
  const long frames = std::min(pred.frame_count(), obs.frame_count());
  detail::require(frames > 0, "divergence needs non-empty trajectories");
  for (long f = 0; f < frames; ++f)
    if (mean_point_error(pred.frames[f], obs.frames[f]) > tol) return f;
  return frames - 1;
}

// ---------------------------------------------------------------------------
// Gradient estimation

enum class Estimator { FiniteDifference, Spsa };

inline const char* to_string(Estimator e) { return e == Estimator::FiniteDifference ? "finite_difference" : "spsa"; }

inline Estimator estimator_from_string(const std::string& s) {
  if (s == "finite_difference" || s == "fd") return Estimator::FiniteDifference;
  if (s == "spsa") return Estimator::Spsa;
  throw InputError("unknown gradient estimator '" + s + "'");
}

using LossFunction = std::function<double(const Eigen::VectorXd&)>;

/// Central differences (2p probes) or SPSA (2 probes with a Rademacher
/// direction scaled per coordinate by `steps`). Probes run in parallel, so
/// loss must be safe to call concurrently.
inline Eigen::VectorXd estimate_gradient(const LossFunction& loss, const Eigen::VectorXd& params, Estimator estimator,
                                         std::uint64_t seed, const Eigen::VectorXd& steps) {
  const long p = params.size();
  detail::require(steps.size() == p && (steps.array() > 0.0).all(), "gradient steps must be positive, one per parameter");
  std::vector<Eigen::VectorXd> probes;
  Eigen::VectorXd delta;
  if (estimator == Estimator::FiniteDifference) {
    for (long i = 0; i < p; ++i) {
      Eigen::VectorXd plus = params, minus = params;
      plus[i] += steps[i];
      minus[i] -= steps[i];
      probes.push_back(plus);
      probes.push_back(minus);
    }
  } else {
    detail::Rng rng(seed);
    delta.resize(p);
    for (long i = 0; i < p; ++i) delta[i] = rng.rademacher();
    probes.push_back(params + steps.cwiseProduct(delta));
    probes.push_back(params - steps.cwiseProduct(delta));
  }
  std::vector<double> values(probes.size());
  detail::parallel_for(probes.size(), [&](std::size_t i) { values[i] = loss(probes[i]); }, 1);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i])) throw NumericalError("non-finite loss at gradient probe " + std::to_string(i));
  Eigen::VectorXd g(p);
  if (estimator == Estimator::FiniteDifference) {
    for (long i = 0; i < p; ++i) g[i] = (values[2 * i] - values[2 * i + 1]) / (2.0 * steps[i]);
  } else {
    const double diff = values[0] - values[1];
    for (long i = 0; i < p; ++i) g[i] = diff / (2.0 * steps[i] * delta[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Models needed to simulate a scene

struct ModelBundle {
  PointSet points;
  CubatureSet cubature;
  LbsModel lbs;
  std::optional<JacobianModel> jacobian;
  JacobianMode mode = JacobianMode::Exact;

  ReducedSystem build(const SceneConfig& scene) const {
    return build_reduced_system(points, lbs, cubature, scene.gravity, mode, jacobian ? &*jacobian : nullptr);
  }
};

/// Read-only view of the observed frames [0, limit) that records every frame
/// touched, so tests can check which observations the optimizer consumed.
class ObservationView {
 public:
  ObservationView(const Trajectory& traj, long limit) : traj_(&traj), limit_(limit) {
    detail::require(limit >= 1 && limit <= traj.frame_count(), "observation limit outside the trajectory");
  }

  const Eigen::Matrix3Xd& frame(long f) const {
    if (f < 0 || f >= limit_) throw InputError("observation frame " + std::to_string(f) + " outside [0, " +
                                               std::to_string(limit_ - 1) + "]");
    if (recording_) {
      std::lock_guard lock(*mutex_);
      accessed_.insert(f);
    }
    return traj_->frames[f];
  }

  long frames() const { return limit_; }
  double dt() const { return traj_->dt; }
  long point_count() const { return traj_->point_count(); }

  void set_recording(bool on) const { recording_ = on; }
  const std::set<long>& accessed() const { return accessed_; }
  void clear() const { accessed_.clear(); }

 private:
  const Trajectory* traj_;
  long limit_;
  mutable bool recording_ = true;
  mutable std::set<long> accessed_;
  std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
};

/// Restart state at observed frame s (see reconstruct_state).
inline SimState reconstruct_state(const ReducedSystem& sys, const SceneConfig& scene, const ObservationView& obs,
                                  long s) {
  SimState st = SimState::rest(sys);
  st.z = sys.project_displacements(obs.frame(s) - sys.rest);
  if (s == 0) {
    st.z_dot = sys.project_uniform(scene.initial_velocity);
  } else {
    st.z_dot = (st.z - sys.project_displacements(obs.frame(s - 1) - sys.rest)) / obs.dt();
  }
  st.time = static_cast<double>(s) * obs.dt();
  st.frame = s;
  return st;
}

inline SceneConfig with_material(SceneConfig scene, double log10_E, double nu) {
  scene.material.E = std::pow(10.0, log10_E);
  scene.material.nu = nu;
  return scene;
}

/// Windowed loss: restart at s, simulate `window` frames, compare with
/// observed frames s+1..s+window.
inline double window_loss(const ReducedSystem& sys, const SceneConfig& scene, const ObservationView& obs, long s,
                          long window) {
  SimState state = reconstruct_state(sys, scene, obs, s);
  double sum = 0.0;
  for (long f = 1; f <= window; ++f) {
    for (int k = 0; k < scene.substeps; ++k) state = step(state, sys, scene);
    ++state.frame;
    sum += (sys.positions(state.z) - obs.frame(s + f)).squaredNorm();
  }
  return sum / static_cast<double>(window * obs.point_count());
}

// ---------------------------------------------------------------------------
// Fitting

struct FitConfig {
  int iterations = 400;
  int window = 4;
  int observed_frames = 16;
  double lr_lbs = 5e-7;
  double lr_jac = 5e-7;
  double lr_E = 5e-3;   // on log10 E
  double lr_nu = 1e-3;
  // Cosine decay of the (E, nu) rates down to this fraction at the last
  // iteration. 1 keeps them constant.
  double final_lr_fraction = 1.0;
  Estimator estimator = Estimator::FiniteDifference;
  bool finetune_networks = false;
  double step_log10_E = 1e-2;
  double step_nu = 5e-3;
  double step_network = 1e-3;
  double divergence_tol = 1e-4;
  int divergence_refresh = 20;
  double log10_E_min = 4.0, log10_E_max = 6.0;
  double nu_min = 0.2, nu_max = 0.49;
  int max_consecutive_failures = 10;
  std::uint64_t seed = 0;
  std::function<void(int, double, double, double)> progress;  // (iteration, loss, E, nu)

  void validate() const {
    detail::require(iterations >= 0, "iterations must be non-negative");
    detail::require(window >= 1, "window must be at least 1");
    detail::require(observed_frames >= window + 1, "observed frames must exceed the window");
    detail::require(lr_lbs > 0 && lr_jac > 0 && lr_E > 0 && lr_nu > 0, "learning rates must be positive");
    detail::require(final_lr_fraction > 0 && final_lr_fraction <= 1, "final_lr_fraction must lie in (0, 1]");
    detail::require(step_log10_E > 0 && step_nu > 0 && step_network > 0, "probe steps must be positive");
  }
};

struct FitResult {
  double E = 0.0;
  double nu = 0.0;
  std::vector<double> loss_history;
  std::vector<double> E_history;
  std::vector<double> nu_history;
  std::vector<long> window_starts;
  std::vector<long> divergence_frames;
  int iterations = 0;
  double wall_seconds = 0.0;
  Estimator estimator = Estimator::FiniteDifference;
  std::optional<LbsModel> lbs;                 // fine-tuned models, when enabled
  std::optional<JacobianModel> jacobian;

  double log10_E() const { return std::log10(E); }
};

namespace detail {

/// Adam with one learning rate per coordinate.
inline void adam_step_scaled(nn::AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                             const Eigen::VectorXd& rates) {
  Eigen::VectorXd moved = params;
  state.learning_rate = 1.0;
  nn::adam_step(state, moved, grad);
  params += rates.cwiseProduct(moved - params);
}

}  // namespace detail

inline FitResult fit_parameters(const SceneConfig& scene, const ModelBundle& models, const Trajectory& observed,
                                const FitConfig& config, double E0, double nu0,
                                const ObservationView* external_view = nullptr) {
  config.validate();
  scene.validate();
  detail::require(observed.frame_count() >= config.observed_frames, "observed trajectory has fewer frames than requested");
  detail::require(observed.point_count() == models.points.size(), "observed trajectory point count mismatch");
  detail::require(E0 > 0.0 && std::isfinite(E0) && nu0 >= 0.0 && nu0 < 0.5, "invalid initial material parameters");
  const auto t0 = std::chrono::steady_clock::now();

  const ObservationView local_view(observed, config.observed_frames);
  const ObservationView& obs = external_view ? *external_view : local_view;
  const long T = config.observed_frames - 1;
  const long window = config.window;

  ModelBundle current = models;
  ReducedSystem sys = current.build(scene);
  const bool tune_jac = config.finetune_networks && current.mode == JacobianMode::Neural && current.jacobian;

  Eigen::VectorXd p(2);
  p << std::clamp(std::log10(E0), config.log10_E_min, config.log10_E_max),
      std::clamp(nu0, config.nu_min, config.nu_max);
  const Eigen::VectorXd steps = Eigen::Vector2d(config.step_log10_E, config.step_nu);
  const Eigen::VectorXd rates = Eigen::Vector2d(config.lr_E, config.lr_nu);
  nn::AdamState adam = nn::AdamState::for_size(2, 1.0);
  nn::AdamState adam_lbs = nn::AdamState::for_size(current.lbs.net().parameter_count(), config.lr_lbs);
  nn::AdamState adam_jac =
      nn::AdamState::for_size(tune_jac ? current.jacobian->net().parameter_count() : 0, config.lr_jac);

  FitResult result;
  result.estimator = config.estimator;
  double penalty = 1.0;  // replaced by a multiple of the first finite loss
  bool have_penalty = false;
  int consecutive_failures = 0;

  auto safe_window_loss = [&](const ReducedSystem& s, const Eigen::VectorXd& q, long start) {
    try {
      const double v = window_loss(s, with_material(scene, q[0], q[1]), obs, start, window);
      return std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN();
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  // s': first frame where a full replay from frame 0 departs from the observation.
  auto divergence = [&]() -> long {
    obs.set_recording(false);
    long sp = 1;
    try {
      const SceneConfig sc = with_material(scene, p[0], p[1]);
      SimState st = reconstruct_state(sys, sc, obs, 0);
      Trajectory pred, ref;
      pred.dt = ref.dt = obs.dt();
      pred.frames.push_back(sys.positions(st.z));
      ref.frames.push_back(obs.frame(0));
      for (long f = 1; f <= T; ++f) {
        for (int k = 0; k < sc.substeps; ++k) st = step(st, sys, sc);
        pred.frames.push_back(sys.positions(st.z));
        ref.frames.push_back(obs.frame(f));
      }
      sp = first_divergence_frame(pred, ref, config.divergence_tol);
    } catch (const NumericalError&) {
      sp = 1;
    }
    obs.set_recording(true);
    return sp;
  };

  detail::Rng rng(detail::derive_seed(config.seed, "fit-windows"));
  long s_prime = 1;
  for (int it = 0; it < config.iterations; ++it) {
    if (it % std::max(1, config.divergence_refresh) == 0) s_prime = divergence();
    const long hi = T - window;
    const long lo = std::clamp<long>(s_prime, 0, hi);
    const long s = lo + static_cast<long>(rng.index(static_cast<std::uint64_t>(hi - lo + 1)));
    result.window_starts.push_back(s);
    result.divergence_frames.push_back(s_prime);

    double base = safe_window_loss(sys, p, s);
    auto probe = [&](const Eigen::VectorXd& q) {
      Eigen::VectorXd qc = q;
      qc[1] = std::clamp(qc[1], 0.0, material::kMaxPoisson);
      const double v = safe_window_loss(sys, qc, s);
      return std::isfinite(v) ? v : penalty;
    };
    Eigen::VectorXd g;
    g = estimate_gradient(probe, p, config.estimator, detail::derive_seed(config.seed, "fit-probe", it), steps);
    if (!std::isfinite(base)) {
      if (++consecutive_failures >= config.max_consecutive_failures)
        throw NumericalError("simulation failed at " + std::to_string(consecutive_failures) +
                             " consecutive fit iterations (E = " + std::to_string(std::pow(10.0, p[0])) +
                             ", nu = " + std::to_string(p[1]) + ")");
      base = penalty;
    } else {
      consecutive_failures = 0;
      if (!have_penalty) {
        penalty = std::max(1e3 * base, 1e-6);
        have_penalty = true;
      }
    }
    const double progress = config.iterations > 1 ? static_cast<double>(it) / (config.iterations - 1) : 1.0;
    const double decay = config.final_lr_fraction +
                         (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    detail::adam_step_scaled(adam, p, g, decay * rates);
    p[0] = std::clamp(p[0], config.log10_E_min, config.log10_E_max);
    p[1] = std::clamp(p[1], config.nu_min, config.nu_max);

    if (config.finetune_networks) {
      // SPSA on the network parameters: two window simulations per network.
      auto tune = [&](bool jac, std::uint64_t tag) {
        nn::Mlp& net = jac ? current.jacobian->net() : current.lbs.net();
        const Eigen::VectorXd theta = net.parameters();
        auto loss_at = [&](const Eigen::VectorXd& th) {
          ModelBundle trial = current;
          (jac ? trial.jacobian->net() : trial.lbs.net()).parameters() = th;
          try {
            const ReducedSystem ts = trial.build(scene);
            const double v = safe_window_loss(ts, p, s);
            return std::isfinite(v) ? v : penalty;
          } catch (const NumericalError&) {
            return penalty;
          }
        };
        const Eigen::VectorXd gs =
            estimate_gradient(loss_at, theta, Estimator::Spsa, tag,
                              Eigen::VectorXd::Constant(theta.size(), config.step_network));
        nn::adam_step(jac ? adam_jac : adam_lbs, net.parameters(), gs);
      };
      tune(false, detail::derive_seed(config.seed, "fit-spsa-lbs", it));
      if (tune_jac) tune(true, detail::derive_seed(config.seed, "fit-spsa-jac", it));
      sys = current.build(scene);
    }

    result.loss_history.push_back(base);
    result.E_history.push_back(std::pow(10.0, p[0]));
    result.nu_history.push_back(p[1]);
    if (config.progress) config.progress(it, base, std::pow(10.0, p[0]), p[1]);
  }
  result.iterations = config.iterations;
  result.E = std::pow(10.0, p[0]);
  result.nu = p[1];
  if (config.finetune_networks) {
    result.lbs = current.lbs;
    if (tune_jac) result.jacobian = current.jacobian;
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Running minimum of a loss history.
inline std::vector<double> running_minimum(const std::vector<double>& history) {
  std::vector<double> out(history.size());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < history.size(); ++i) out[i] = best = std::min(best, history[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction and metrics

/// Restarts from observed frame `state_at` and simulates `horizon` further
/// frames; the result holds frames state_at+1 .. state_at+horizon.
inline Trajectory predict_future(const ReducedSystem& sys, const SceneConfig& scene, const Trajectory& observed,
                                 long state_at, long horizon) {
  detail::require(horizon >= 0, "horizon must be non-negative");
  const ObservationView obs(observed, observed.frame_count());
  Trajectory out;
  out.dt = observed.dt;
  if (horizon == 0) return out;
  SimState state = reconstruct_state(sys, scene, obs, state_at);
  for (long f = 1; f <= horizon; ++f) {
    for (int k = 0; k < scene.substeps; ++k) state = step(state, sys, scene);
    ++state.frame;
    out.frames.push_back(sys.positions(state.z));
  }
  return out;
}

struct Metrics {
  double mean_point_error = 0.0;
  double max_point_error = 0.0;
  std::vector<double> per_frame;  // mean point error per frame
  std::optional<double> log10_E_mae;
  std::optional<double> nu_mae;
};

inline Metrics evaluate(const Trajectory& pred, const Trajectory& ref) {
  if (pred.frame_count() != ref.frame_count() || pred.point_count() != ref.point_count())
    throw InputError("cannot compare trajectories of shape " + std::to_string(pred.frame_count()) + "x" +
                     std::to_string(pred.point_count()) + " and " + std::to_string(ref.frame_count()) + "x" +
                     std::to_string(ref.point_count()));
  Metrics m;
  double sum = 0.0;
  long count = 0;
  for (long f = 0; f < pred.frame_count(); ++f) {
    const Eigen::VectorXd err = (pred.frames[f] - ref.frames[f]).colwise().norm().transpose();
    m.per_frame.push_back(err.size() ? err.mean() : 0.0);
    sum += err.sum();
    count += err.size();
    if (err.size()) m.max_point_error = std::max(m.max_point_error, err.maxCoeff());
  }
  m.mean_point_error = count ? sum / static_cast<double>(count) : 0.0;
  return m;
}

inline Metrics evaluate(const Trajectory& pred, const Trajectory& ref, double E_hat, double E_true, double nu_hat,
                        double nu_true) {
  detail::require(E_hat > 0.0 && E_true > 0.0, "Young's moduli must be positive");
  Metrics m = evaluate(pred, ref);
  m.log10_E_mae = std::abs(std::log10(E_hat) - std::log10(E_true));
  m.nu_mae = std::abs(nu_hat - nu_true);
  return m;
}

}  // namespace v2s

#pragma once

// Reduced implicit-Euler elastodynamics: mass matrix and gravity terms built
// from the skinning basis, penalty barriers, the incremental potential with
// its gradient and projected Hessian, projected Newton with Armijo
// backtracking, plastic state updates, trajectories and their file format.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "v2s/detail/binary_io.hpp"
#include "v2s/detail/error.hpp"
#include "v2s/detail/format.hpp"
#include "v2s/detail/parallel.hpp"
#include "v2s/geometry.hpp"
#include "v2s/kinematics.hpp"
#include "v2s/materials.hpp"

namespace v2s {

// ---------------------------------------------------------------------------
// Boundaries

/// Half-space penalty: stiffness * max(0, h_f(t) - n.x)^2 with
/// h_f(t) = height + velocity * t. velocity != 0 gives a moving floor.
struct Floor {
  Vec3 normal = Vec3::UnitY();
  double height = 0.0;
  double velocity = 0.0;
  double stiffness = 1e5;

  double level(double time) const { return height + velocity * time; }
};

/// Solid ball obstacle: stiffness * max(0, radius - |x - center|)^2.
struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  double stiffness = 1e5;
};

using Boundary = std::variant<Floor, Sphere>;

inline void validate_boundary(const Boundary& b) {
  if (const auto* f = std::get_if<Floor>(&b)) {
    detail::require(std::abs(f->normal.norm() - 1.0) < 1e-9, "floor normal must be a unit vector");
    detail::require(f->stiffness > 0.0 && std::isfinite(f->height) && std::isfinite(f->velocity),
                    "floor needs finite height/velocity and positive stiffness");
  } else {
    const auto& s = std::get<Sphere>(b);
    detail::require(s.radius > 0.0 && s.stiffness > 0.0 && s.center.allFinite(),
                    "sphere needs a finite center and positive radius/stiffness");
  }
}

/// Barrier energy, per-point gradient (3 x n) and, per active contact, a
/// rank-one projected Hessian sqrt-factor: H_i = f f^T.
struct BarrierEval {
  double energy = 0.0;
  Eigen::Matrix3Xd gradient;
  std::vector<std::pair<long, Vec3>> hessian_factors;
};

inline BarrierEval barrier_energy(const Eigen::Matrix3Xd& x, const std::vector<Boundary>& boundaries, double time = 0.0,
                                  bool with_hessian = false) {
  BarrierEval out;
  out.gradient = Eigen::Matrix3Xd::Zero(3, x.cols());
  for (const auto& b : boundaries) {
    validate_boundary(b);
    if (const auto* f = std::get_if<Floor>(&b)) {
      const double level = f->level(time);
      for (long i = 0; i < x.cols(); ++i) {
        const double gap = level - f->normal.dot(x.col(i));
        if (gap <= 0.0) continue;
        out.energy += f->stiffness * gap * gap;
        out.gradient.col(i) -= 2.0 * f->stiffness * gap * f->normal;
        if (with_hessian) out.hessian_factors.emplace_back(i, std::sqrt(2.0 * f->stiffness) * f->normal);
      }
    } else {
      const auto& s = std::get<Sphere>(b);
      for (long i = 0; i < x.cols(); ++i) {
        const Vec3 d = x.col(i) - s.center;
        const double dist = d.norm();
        const double gap = s.radius - dist;
        if (gap <= 0.0) continue;
        // At the exact center the push direction is undefined; pick +y.
        const Vec3 n = dist > 0.0 ? Vec3(d / dist) : Vec3::UnitY();
        out.energy += s.stiffness * gap * gap;
        out.gradient.col(i) -= 2.0 * s.stiffness * gap * n;
        // Tangential curvature is negative inside the ball and is clamped away.
        if (with_hessian) out.hessian_factors.emplace_back(i, std::sqrt(2.0 * s.stiffness) * n);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene

struct NewtonSettings {
  int max_iterations = 16;
  double tolerance = 1e-5;   // relative to max(1, initial gradient norm)
  double armijo = 1e-4;
  double shrink = 0.5;
  double min_step = 1e-8;
};

struct SceneConfig {
  material::Params material;
  int handles = 10;
  int cubature = 500;
  double dt = 1.0 / 24.0;  // output frame interval
  int substeps = 4;
  int frames = 24;
  Vec3 gravity{0.0, -9.8, 0.0};
  std::vector<Boundary> boundaries;
  Vec3 initial_velocity = Vec3::Zero();
  std::uint64_t seed = 0;
  NewtonSettings newton;

  double step_size() const { return dt / substeps; }

  void validate() const {
    material.validate();
    detail::require(handles >= 1, "scene needs at least one handle");
    detail::require(cubature >= 1, "scene needs at least one cubature point");
    detail::require(dt > 0.0 && std::isfinite(dt), "dt must be positive");
    detail::require(substeps >= 1, "substeps must be at least 1");
    detail::require(frames >= 1, "frames must be at least 1");
    detail::require(gravity.allFinite() && initial_velocity.allFinite(), "gravity/initial velocity must be finite");
    for (const auto& b : boundaries) validate_boundary(b);
  }
};

// ---------------------------------------------------------------------------
// Reduced system

enum class JacobianMode { Exact, Neural };

inline const char* to_string(JacobianMode m) { return m == JacobianMode::Exact ? "exact" : "neural"; }

/// Everything the solver needs that does not depend on z. Rows of the point
/// basis Q hold q_i[4j + c] = w_j(X_i) [X_i; 1]_c, so u_i = B_i z with
/// (B_i z)_r = sum_{j,c} q_i[4j+c] z[12j + 4r + c].
struct ReducedSystem {
  int handles = 0;
  Eigen::Matrix3Xd rest;
  Eigen::VectorXd masses;
  Eigen::MatrixXd basis;          // n x 4m
  Eigen::MatrixXd mass4;          // 4m x 4m, Q^T diag(m) Q
  Eigen::LDLT<Eigen::MatrixXd> mass4_factor;
  Eigen::MatrixXd mass;           // 12m x 12m
  Eigen::VectorXd mass_moment;    // 4m, Q^T m
  Eigen::VectorXd gravity_linear; // 12m, -sum_i m_i B_i^T g
  CubatureSet cubature;
  std::vector<Eigen::MatrixXd> jacobians;  // per cubature point, 9 x 12m
  JacobianMode mode = JacobianMode::Exact;

  long dofs() const { return 12L * handles; }
  long point_count() const { return rest.cols(); }

  /// B_i as a dense 3 x 12m matrix.
  Eigen::MatrixXd point_rows(long i) const {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(3, dofs());
    for (int j = 0; j < handles; ++j)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) B(r, 12 * j + 4 * r + c) = basis(i, 4 * j + c);
    return B;
  }

  /// z gathered as a 4m x 3 matrix: Zr(4j + c, r) = z[12j + 4r + c].
  Eigen::MatrixXd gather(const Eigen::VectorXd& z) const {
    Eigen::MatrixXd Zr(4 * handles, 3);
    for (int j = 0; j < handles; ++j)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) Zr(4 * j + c, r) = z[12 * j + 4 * r + c];
    return Zr;
  }

  Eigen::VectorXd scatter(const Eigen::MatrixXd& Zr) const {
    Eigen::VectorXd z(dofs());
    for (int j = 0; j < handles; ++j)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) z[12 * j + 4 * r + c] = Zr(4 * j + c, r);
    return z;
  }

  Eigen::Matrix3Xd displacements(const Eigen::VectorXd& z) const { return (basis * gather(z)).transpose(); }
  Eigen::Matrix3Xd positions(const Eigen::VectorXd& z) const { return rest + displacements(z); }

  /// Mass-weighted least-squares coordinates for per-point displacements u.
  Eigen::VectorXd project_displacements(const Eigen::Matrix3Xd& u) const {
    detail::require(u.cols() == point_count(), "displacement field has the wrong point count");
    const Eigen::MatrixXd rhs = basis.transpose() * (masses.asDiagonal() * u.transpose());
    return scatter(mass4_factor.solve(rhs));
  }

  /// Coordinates of a uniform vector field v (exact when a rigid handle exists).
  Eigen::VectorXd project_uniform(const Vec3& v) const {
    const Eigen::MatrixXd rhs = mass_moment * v.transpose();
    return scatter(mass4_factor.solve(rhs));
  }
};

/// Recomputes the per-cubature Jacobians in the requested mode.
inline void rebuild_jacobians(ReducedSystem& sys, const Eigen::Matrix3Xd& rest, const LbsModel& lbs,
                              JacobianMode mode, const JacobianModel* neural) {
  Eigen::Matrix3Xd Xc(3, sys.cubature.size());
  for (long c = 0; c < sys.cubature.size(); ++c) Xc.col(c) = rest.col(sys.cubature.indices[c]);
  if (mode == JacobianMode::Exact) {
    sys.jacobians = exact_jacobians(lbs, Xc, Derivative::Reverse);
  } else {
    if (!neural || !neural->valid()) throw InputError("neural Jacobian mode needs a trained Jacobian model");
    if (neural->handle_count() != sys.handles)
      throw InputError("Jacobian model handle count does not match the LBS model");
    sys.jacobians = neural_jacobians(*neural, Xc);
  }
  sys.mode = mode;
}

inline ReducedSystem build_reduced_system(const PointSet& points, const LbsModel& lbs, const CubatureSet& cubature,
                                          const Vec3& gravity, JacobianMode mode,
                                          const JacobianModel* neural = nullptr) {
  if (!lbs.valid()) throw InputError("reduced system needs a trained LBS model");
  points.validate();
  cubature.validate(points);
  ReducedSystem sys;
  const int m = lbs.handle_count();
  const long n = points.size();
  sys.handles = m;
  sys.rest = points.positions;
  sys.masses = points.masses;
  sys.cubature = cubature;

  const Eigen::MatrixXd w = evaluate_weights(lbs, points.positions, Derivative::None).w;
  sys.basis.resize(n, 4 * m);
  for (long i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      for (int c = 0; c < 3; ++c) sys.basis(i, 4 * j + c) = w(j, i) * points.positions(c, i);
      sys.basis(i, 4 * j + 3) = w(j, i);
    }
  sys.mass4 = sys.basis.transpose() * points.masses.asDiagonal() * sys.basis;
  sys.mass4 = 0.5 * (sys.mass4 + sys.mass4.transpose());
  sys.mass4_factor.compute(sys.mass4);
  sys.mass = Eigen::MatrixXd::Zero(12 * m, 12 * m);
  for (int j = 0; j < m; ++j)
    for (int jj = 0; jj < m; ++jj)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
          for (int cc = 0; cc < 4; ++cc)
            sys.mass(12 * j + 4 * r + c, 12 * jj + 4 * r + cc) = sys.mass4(4 * j + c, 4 * jj + cc);
  sys.mass_moment = sys.basis.transpose() * points.masses;
  sys.gravity_linear = -sys.scatter(sys.mass_moment * gravity.transpose());
  rebuild_jacobians(sys, points.positions, lbs, mode, neural);
  return sys;
}

// ---------------------------------------------------------------------------
// State and incremental potential

struct SimState {
  Eigen::VectorXd z;
  Eigen::VectorXd z_dot;
  std::vector<Mat3> plastic_F;  // per cubature point
  double time = 0.0;
  long frame = 0;

  static SimState rest(const ReducedSystem& sys) {
    SimState s;
    s.z = Eigen::VectorXd::Zero(sys.dofs());
    s.z_dot = Eigen::VectorXd::Zero(sys.dofs());
    s.plastic_F.assign(sys.cubature.size(), Mat3::Identity());
    return s;
  }

  void validate(const ReducedSystem& sys) const {
    detail::require(z.size() == sys.dofs() && z_dot.size() == sys.dofs(), "state size does not match the system");
    detail::require(static_cast<long>(plastic_F.size()) == sys.cubature.size(), "plastic state size mismatch");
    detail::require(z.allFinite() && z_dot.allFinite(), "state contains non-finite values");
  }
};

/// Fixed data of one implicit-Euler step: minimize
/// 1/2 (z - z~)^T M (z - z~) + h^2 [sum_c V_c Psi(F_c(z) Fp_c^-1) + g_lin.z + E_barrier(z)].
struct StepProblem {
  const ReducedSystem* sys;
  const SceneConfig* scene;
  Eigen::VectorXd z_start;
  Eigen::VectorXd z_tilde;
  std::vector<Mat3> plastic_inverse;
  double h;
  double time;  // end-of-step time, used by moving floors

  static StepProblem make(const SimState& state, const ReducedSystem& sys, const SceneConfig& scene) {
    state.validate(sys);
    StepProblem p{&sys, &scene, state.z, {}, {}, scene.step_size(), state.time + scene.step_size()};
    p.z_tilde = state.z + p.h * state.z_dot;
    p.plastic_inverse.reserve(state.plastic_F.size());
    for (const Mat3& Fp : state.plastic_F) {
      if (!(Fp.determinant() > 0.0)) throw NumericalError("plastic deformation gradient has non-positive determinant");
      p.plastic_inverse.push_back(Fp.inverse());
    }
    return p;
  }
};

struct PotentialEval {
  double energy = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;  // lower triangle authoritative
  long inverted = -1;       // cubature index of an inverted element, -1 if none
};

namespace detail {

inline constexpr long kCubatureChunk = 64;

/// d vec(F Q) / d vec(F) for row-major vec: K[3a+b, 3a+k] = Q(k, b).
inline material::Mat9 right_multiply_operator(const Mat3& Q) {
  material::Mat9 K = material::Mat9::Zero();
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int k = 0; k < 3; ++k) K(3 * a + b, 3 * a + k) = Q(k, b);
  return K;
}

/// Square-root factor S with S^T S = H for a symmetric PSD 9x9 matrix.
inline material::Mat9 psd_factor(const material::Mat9& H) {
  Eigen::LLT<material::Mat9> llt(H);
  if (llt.info() == Eigen::Success) return llt.matrixU();
  Eigen::SelfAdjointEigenSolver<material::Mat9> eig(H);
  const material::Vec9 root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// Evaluates the incremental potential. order: 0 energy, 1 + gradient,
/// 2 + projected Hessian. Inverted elements set `inverted` and energy = +inf
/// instead of throwing.
inline PotentialEval evaluate_potential(const StepProblem& p, const Eigen::VectorXd& z, int order) {
  const ReducedSystem& sys = *p.sys;
  const SceneConfig& scene = *p.scene;
  const long dofs = sys.dofs();
  const double h2 = p.h * p.h;
  const material::Params& mat = scene.material;
  const bool neo = mat.model == material::Model::NeoHookean;
  const bool plastic = mat.plastic();

  PotentialEval out;
  const Eigen::VectorXd dz = z - p.z_tilde;
  const Eigen::VectorXd Mdz = sys.mass * dz;
  out.energy = 0.5 * dz.dot(Mdz) + h2 * sys.gravity_linear.dot(z);
  if (order >= 1) out.gradient = Mdz + h2 * sys.gravity_linear;
  if (order >= 2) out.hessian = sys.mass;

  // Elastic term, chunked over cubature points for a fixed reduction order.
  const long k = sys.cubature.size();
  const long chunks = (k + detail::kCubatureChunk - 1) / detail::kCubatureChunk;
  struct Partial {
    double energy = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd hessian;
    long inverted = -1;
  };
  std::vector<Partial> partial(chunks);
  detail::parallel_for(
      static_cast<std::size_t>(chunks),
      [&](std::size_t ci) {
        Partial& part = partial[ci];
        const long begin = static_cast<long>(ci) * detail::kCubatureChunk;
        const long end = std::min(k, begin + detail::kCubatureChunk);
        if (order >= 1) part.gradient = Eigen::VectorXd::Zero(dofs);
        Eigen::MatrixXd G;
        if (order >= 2) G.resize(9 * (end - begin), dofs);
        for (long c = begin; c < end; ++c) {
          const Eigen::MatrixXd& J = sys.jacobians[c];
          const material::Vec9 f = material::flatten(Mat3::Identity()) + J * z;
          const Mat3 F = material::unflatten(f);
          const Mat3& Q = p.plastic_inverse[c];
          const Mat3 Fe = plastic ? Mat3(F * Q) : F;
          if (neo && !(Fe.determinant() > 0.0)) {
            part.inverted = c;
            return;
          }
          const double V = sys.cubature.weights[c];
          part.energy += V * material::energy_density(Fe, mat);
          if (order >= 1) {
            const Mat3 P = material::stress(Fe, mat);
            const Mat3 PF = plastic ? Mat3(P * Q.transpose()) : P;
            part.gradient.noalias() += V * (J.transpose() * material::flatten(PF));
          }
          if (order >= 2) {
            material::Mat9 S = detail::psd_factor(material::stress_hessian(Fe, mat));
            if (plastic) S = S * detail::right_multiply_operator(Q);
            G.middleRows(9 * (c - begin), 9).noalias() = (std::sqrt(V) * S) * J;
          }
        }
        if (order >= 2) {
          part.hessian = Eigen::MatrixXd::Zero(dofs, dofs);
          part.hessian.selfadjointView<Eigen::Lower>().rankUpdate(G.transpose());
        }
      },
      1);
  for (const Partial& part : partial) {
    if (part.inverted >= 0) {
      out.inverted = part.inverted;
      out.energy = std::numeric_limits<double>::infinity();
      return out;
    }
  }
  for (const Partial& part : partial) {
    out.energy += h2 * part.energy;
    if (order >= 1) out.gradient.noalias() += h2 * part.gradient;
    if (order >= 2) out.hessian.triangularView<Eigen::Lower>() += h2 * part.hessian;
  }

  // Barriers over all points.
  if (!scene.boundaries.empty()) {
    const Eigen::Matrix3Xd x = sys.positions(z);
    const BarrierEval bar = barrier_energy(x, scene.boundaries, p.time, order >= 2);
    out.energy += h2 * bar.energy;
    if (order >= 1 && bar.energy > 0.0) {
      const Eigen::MatrixXd g4 = sys.basis.transpose() * bar.gradient.transpose();  // 4m x 3
      out.gradient.noalias() += h2 * sys.scatter(g4);
    }
    if (order >= 2 && !bar.hessian_factors.empty()) {
      Eigen::MatrixXd R(bar.hessian_factors.size(), dofs);
      for (std::size_t a = 0; a < bar.hessian_factors.size(); ++a) {
        const auto& [i, f] = bar.hessian_factors[a];
        const Eigen::RowVectorXd q = sys.basis.row(i);
        for (int j = 0; j < sys.handles; ++j)
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) R(static_cast<long>(a), 12 * j + 4 * r + c) = f[r] * q[4 * j + c];
      }
      out.hessian.selfadjointView<Eigen::Lower>().rankUpdate(R.transpose(), h2);
    }
  }
  return out;
}

/// Incremental potential value; throws InvertedElementError with the cubature index.
inline double incremental_potential(const Eigen::VectorXd& z, const SimState& state, const ReducedSystem& sys,
                                    const SceneConfig& scene) {
  const StepProblem p = StepProblem::make(state, sys, scene);
  const PotentialEval e = evaluate_potential(p, z, 0);
  if (e.inverted >= 0)
    throw InvertedElementError("inverted element at cubature point " + std::to_string(e.inverted), e.inverted);
  return e.energy;
}

inline Eigen::VectorXd incremental_potential_gradient(const Eigen::VectorXd& z, const SimState& state,
                                                      const ReducedSystem& sys, const SceneConfig& scene) {
  const StepProblem p = StepProblem::make(state, sys, scene);
  const PotentialEval e = evaluate_potential(p, z, 1);
  if (e.inverted >= 0)
    throw InvertedElementError("inverted element at cubature point " + std::to_string(e.inverted), e.inverted);
  return e.gradient;
}

// ---------------------------------------------------------------------------
// Newton

struct NewtonResult {
  Eigen::VectorXd z;
  int iterations = 0;
  double initial_gradient_norm = 0.0;
  double gradient_norm = 0.0;
  double energy = 0.0;
  bool converged = false;
  std::vector<double> energies;  // objective after each accepted step, starting at the initial guess
};

/// Minimizes the step objective starting from z~, or from the start-of-step
/// coordinates when z~ inverts an element.
inline NewtonResult newton_solve(const StepProblem& p) {
  const NewtonSettings& cfg = p.scene->newton;
  NewtonResult res;
  res.z = p.z_tilde;
  PotentialEval cur = evaluate_potential(p, res.z, 1);
  if (cur.inverted >= 0) {
    res.z = p.z_start;
    cur = evaluate_potential(p, res.z, 1);
  }
  if (cur.inverted >= 0)
    throw InvertedElementError("step starts from an inverted element at cubature point " + std::to_string(cur.inverted),
                               cur.inverted);
  res.initial_gradient_norm = cur.gradient.norm();
  const double tol = cfg.tolerance * std::max(1.0, res.initial_gradient_norm);
  res.energies.push_back(cur.energy);
  res.gradient_norm = res.initial_gradient_norm;
  res.energy = cur.energy;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    if (res.gradient_norm <= tol) {
      res.converged = true;
      return res;
    }
    Eigen::MatrixXd A = evaluate_potential(p, res.z, 2).hessian;
    Eigen::LLT<Eigen::MatrixXd, Eigen::Lower> llt(A);
    double shift = 0.0;
    const double scale = A.diagonal().cwiseAbs().maxCoeff();
    while (llt.info() != Eigen::Success) {
      shift = shift == 0.0 ? 1e-12 * scale : shift * 100.0;
      if (shift > 1e-4 * scale) throw NumericalError("Newton system is not positive definite after projection");
      Eigen::MatrixXd shifted = A;
      shifted.diagonal().array() += shift;
      llt.compute(shifted);
    }
    const Eigen::VectorXd dir = llt.solve(-cur.gradient);
    const double slope = cur.gradient.dot(dir);
    if (!(slope < 0.0)) throw NumericalError("Newton direction is not a descent direction");
    double alpha = 1.0;
    bool accepted = false;
    PotentialEval trial;
    while (alpha >= cfg.min_step) {
      const Eigen::VectorXd zt = res.z + alpha * dir;
      trial = evaluate_potential(p, zt, 0);
      if (trial.inverted < 0 && trial.energy <= cur.energy + cfg.armijo * alpha * slope) {
        res.z = zt;
        accepted = true;
        break;
      }
      alpha *= cfg.shrink;
    }
    if (!accepted) {
      // Near the minimum the predicted decrease drops below the round-off of
      // the energy sum (and the C1 barrier breaks the quadratic model), so
      // Armijo cannot pass. Keep the iterate instead of failing the step.
      if (std::abs(slope) <= 1e-9 * std::max(1.0, std::abs(cur.energy)) || res.gradient_norm <= 1e2 * tol) {
        res.converged = res.gradient_norm <= tol;
        return res;
      }
      std::ostringstream msg;
      msg << "line search failed at step floor " << cfg.min_step << " (iteration " << it << ", gradient norm "
          << res.gradient_norm << ", energy " << cur.energy << ", slope " << slope << ")";
      throw NumericalError(msg.str());
    }
    cur = evaluate_potential(p, res.z, 1);
    res.iterations = it + 1;
    res.gradient_norm = cur.gradient.norm();
    res.energy = cur.energy;
    res.energies.push_back(cur.energy);
  }
  res.converged = res.gradient_norm <= tol;
  return res;
}

inline NewtonResult newton_solve(const SimState& state, const ReducedSystem& sys, const SceneConfig& scene) {
  return newton_solve(StepProblem::make(state, sys, scene));
}

// ---------------------------------------------------------------------------
// Stepping

struct StepStats {
  int newton_iterations = 0;
  bool converged = true;
};

/// One implicit-Euler step of size dt / substeps, including the plastic update.
inline SimState step(const SimState& state, const ReducedSystem& sys, const SceneConfig& scene,
                     StepStats* stats = nullptr) {
  const StepProblem p = StepProblem::make(state, sys, scene);
  NewtonResult nr = newton_solve(p);
  SimState next;
  next.z = std::move(nr.z);
  next.z_dot = (next.z - state.z) / p.h;
  next.time = state.time + p.h;
  next.frame = state.frame;
  next.plastic_F = state.plastic_F;
  if (scene.material.plastic()) {
    for (long c = 0; c < sys.cubature.size(); ++c) {
      const Mat3 F = material::unflatten(material::flatten(Mat3::Identity()) + sys.jacobians[c] * next.z);
      const Mat3 Fe = material::return_map(F * p.plastic_inverse[c], scene.material);
      next.plastic_F[c] = Fe.inverse() * F;
    }
  }
  if (stats) {
    stats->newton_iterations += nr.iterations;
    stats->converged = stats->converged && nr.converged;
  }
  return next;
}

// ---------------------------------------------------------------------------
// Trajectories

struct Trajectory {
  double dt = 1.0 / 24.0;
  std::vector<Eigen::Matrix3Xd> frames;

  long frame_count() const { return static_cast<long>(frames.size()); }
  long point_count() const { return frames.empty() ? 0 : frames.front().cols(); }

  const Eigen::Matrix3Xd& frame(long f) const {
    if (f < 0 || f >= frame_count())
      throw InputError("frame " + std::to_string(f) + " outside trajectory of " + std::to_string(frame_count()) +
                       " frames");
    return frames[f];
  }

  void validate() const {
    detail::require(dt > 0.0 && std::isfinite(dt), "trajectory dt must be positive");
    for (const auto& f : frames) {
      detail::require(f.cols() == point_count(), "trajectory frames have inconsistent point counts");
      detail::require(f.allFinite(), "trajectory contains non-finite positions");
    }
  }

  /// Frames [begin, begin + count).
  Trajectory slice(long begin, long count) const {
    detail::require(begin >= 0 && count >= 0 && begin + count <= frame_count(), "trajectory slice out of range");
    Trajectory t;
    t.dt = dt;
    t.frames.assign(frames.begin() + begin, frames.begin() + begin + count);
    return t;
  }
};

inline constexpr char kTrajectoryMagic[] = "V2STRJ1";

/// Layout: "V2STRJ1\0", u32 frames, u32 points, f64 dt, then frame-major f32 xyz.
inline void save_trajectory(const Trajectory& traj, std::ostream& out) {
  using detail::write_le;
  traj.validate();
  out.write(kTrajectoryMagic, sizeof(kTrajectoryMagic));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(traj.frame_count()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(traj.point_count()));
  write_le<double>(out, traj.dt);
  for (const auto& f : traj.frames)
    for (long i = 0; i < f.cols(); ++i)
      for (int d = 0; d < 3; ++d) write_le<float>(out, static_cast<float>(f(d, i)));
}

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write trajectory file: " + path);
  save_trajectory(traj, out);
  if (!out) throw InputError("failed writing trajectory file: " + path);
}

inline Trajectory load_trajectory(std::istream& in) {
  using detail::read_le;
  detail::expect_magic(in, kTrajectoryMagic, sizeof(kTrajectoryMagic));
  Trajectory t;
  const auto frames = read_le<std::uint32_t>(in, "frame count");
  const auto points = read_le<std::uint32_t>(in, "point count");
  t.dt = read_le<double>(in, "dt");
  t.frames.assign(frames, Eigen::Matrix3Xd(3, points));
  for (auto& f : t.frames)
    for (long i = 0; i < f.cols(); ++i)
      for (int d = 0; d < 3; ++d) f(d, i) = read_le<float>(in, "positions");
  t.validate();
  return t;
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open trajectory file: " + path);
  try {
    return load_trajectory(in);
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

/// CSV rows frame,index,x,y,z with values rounded like the binary file.
inline void export_trajectory_csv(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write CSV file: " + path);
  out << "frame,index,x,y,z\n";
  for (long f = 0; f < traj.frame_count(); ++f)
    for (long i = 0; i < traj.point_count(); ++i) {
      out << f << ',' << i;
      for (int d = 0; d < 3; ++d) out << ',' << detail::format_double(static_cast<float>(traj.frames[f](d, i)));
      out << '\n';
    }
}

struct FrameStats {
  long frame = 0;
  int newton_iterations = 0;
  bool converged = true;
  double wall_seconds = 0.0;
};

struct SimulationResult {
  Trajectory trajectory;
  std::vector<FrameStats> stats;
  SimState final_state;
};

/// Simulates `frames` output frames starting from `initial`; frame 0 is the
/// initial configuration itself.
inline SimulationResult simulate(const ReducedSystem& sys, const SceneConfig& scene, const SimState& initial,
                                 long frames) {
  scene.validate();
  detail::require(frames >= 0, "frame count must be non-negative");
  SimulationResult out;
  out.trajectory.dt = scene.dt;
  SimState state = initial;
  for (long f = 0; f < frames; ++f) {
    FrameStats fs;
    fs.frame = state.frame;
    const auto t0 = std::chrono::steady_clock::now();
    if (f > 0) {
      StepStats ss;
      for (int s = 0; s < scene.substeps; ++s) {
        try {
          state = step(state, sys, scene, &ss);
        } catch (const NumericalError& e) {
          throw NumericalError("frame " + std::to_string(state.frame + 1) + ": " + e.what());
        }
      }
      ++state.frame;
      fs.frame = state.frame;
      fs.newton_iterations = ss.newton_iterations;
      fs.converged = ss.converged;
    }
    out.trajectory.frames.push_back(sys.positions(state.z));
    fs.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.stats.push_back(fs);
  }
  out.final_state = std::move(state);
  return out;
}

/// Initial state of a scene: rest pose moving with the scene's initial velocity.
inline SimState initial_state(const ReducedSystem& sys, const SceneConfig& scene) {
  SimState s = SimState::rest(sys);
  s.z_dot = sys.project_uniform(scene.initial_velocity);
  return s;
}

inline SimulationResult simulate(const ReducedSystem& sys, const SceneConfig& scene) {
  return simulate(sys, scene, initial_state(sys, scene), scene.frames);
}

/// Restart state at frame s of an observed trajectory: coordinates by
/// mass-weighted least squares, velocity by backward difference of frames
/// s - 1 and s (frame 0 uses the scene's initial velocity). Plastic state is
/// reset to the identity.
inline SimState reconstruct_state(const ReducedSystem& sys, const SceneConfig& scene, const Trajectory& observed,
                                  long s) {
  detail::require(observed.point_count() == sys.point_count(), "observed trajectory point count mismatch");
  SimState st = SimState::rest(sys);
  st.z = sys.project_displacements(observed.frame(s) - sys.rest);
  if (s == 0) {
    st.z_dot = sys.project_uniform(scene.initial_velocity);
  } else {
    const Eigen::VectorXd prev = sys.project_displacements(observed.frame(s - 1) - sys.rest);
    st.z_dot = (st.z - prev) / observed.dt;
  }
  st.time = static_cast<double>(s) * observed.dt;
  st.frame = s;
  return st;
}

/// Kinetic energy 1/2 zdot^T M zdot.
inline double kinetic_energy(const ReducedSystem& sys, const SimState& s) { return 0.5 * s.z_dot.dot(sys.mass * s.z_dot); }

/// Elastic energy sum_c V_c Psi(F_c Fp_c^-1).
inline double elastic_energy(const ReducedSystem& sys, const SceneConfig& scene, const SimState& s) {
  double e = 0.0;
  for (long c = 0; c < sys.cubature.size(); ++c) {
    const Mat3 F = material::unflatten(material::flatten(Mat3::Identity()) + sys.jacobians[c] * s.z);
    e += sys.cubature.weights[c] * material::energy_density(F * s.plastic_F[c].inverse(), scene.material);
  }
  return e;
}

}  // namespace v2s

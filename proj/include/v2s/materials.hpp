#pragma once

// Constitutive models: Neo-Hookean and StVK energy densities, first
// Piola-Kirchhoff stress, 9x9 stress derivatives with SPD projection, Lame
// conversion, and the von Mises / Drucker-Prager return mappings on Hencky
// strain. All 9-vectors flatten 3x3 matrices row-major: index 3*row + col.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>

#include "v2s/detail/error.hpp"

namespace v2s::material {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using Vec9 = Eigen::Matrix<double, 9, 1>;

enum class Model { NeoHookean, StVKVonMises, StVKDruckerPrager };

inline const char* to_string(Model m) {
  switch (m) {
    case Model::NeoHookean: return "neo_hookean";
    case Model::StVKVonMises: return "stvk_von_mises";
    case Model::StVKDruckerPrager: return "stvk_drucker_prager";
  }
  return "?";
}

inline Model model_from_string(const std::string& name) {
  if (name == "neo_hookean") return Model::NeoHookean;
  if (name == "stvk_von_mises") return Model::StVKVonMises;
  if (name == "stvk_drucker_prager") return Model::StVKDruckerPrager;
  throw InputError("unknown material model '" + name + "'");
}

inline constexpr double kMaxPoisson = 0.49;

struct Params {
  Model model = Model::NeoHookean;
  double E = 1e5;
  double nu = 0.3;
  double density = 1000.0;
  double tau_y = 0.0;    // Pa, von Mises only
  double theta_f = 0.0;  // radians, Drucker-Prager only

  bool plastic() const { return model != Model::NeoHookean; }

  /// Clamps nu into [0, 0.49] when it lies in (0.49, 0.5) and checks the rest.
  Params& sanitize() {
    if (nu > kMaxPoisson && nu < 0.5) nu = kMaxPoisson;
    validate();
    return *this;
  }

  void validate() const {
    detail::require(std::isfinite(E) && E > 0.0, "Young's modulus must be positive");
    detail::require(nu >= 0.0 && nu <= kMaxPoisson, "Poisson ratio must lie in [0, 0.49]");
    detail::require(std::isfinite(density) && density > 0.0, "density must be positive");
    if (model == Model::StVKVonMises) detail::require(tau_y > 0.0, "von Mises material needs tau_y > 0");
    if (model == Model::StVKDruckerPrager)
      detail::require(theta_f > 0.0 && theta_f < std::numbers::pi / 2, "friction angle must lie in (0, pi/2)");
  }
};

struct Lame {
  double mu;
  double lambda;
};

inline Lame lame(double E, double nu) {
  if (!(E > 0.0)) throw InputError("Young's modulus must be positive");
  if (nu >= 0.5) throw InputError("Poisson ratio >= 0.5 makes lambda singular");
  if (nu < 0.0) throw InputError("Poisson ratio must be non-negative");
  return {E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))};
}

inline Lame lame(const Params& p) { return lame(p.E, p.nu); }

inline Vec9 flatten(const Mat3& m) {
  Vec9 v;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) v[3 * a + b] = m(a, b);
  return v;
}

inline Mat3 unflatten(const Vec9& v) {
  Mat3 m;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) m(a, b) = v[3 * a + b];
  return m;
}

// ---------------------------------------------------------------------------
// Neo-Hookean: mu/2 (tr(F^T F) - 3) - mu ln J + lambda/2 ln^2 J

inline double psi_neo_hookean(const Mat3& F, double mu, double lambda) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw InvertedElementError("Neo-Hookean energy undefined for det(F) = " + std::to_string(J));
  const double lnJ = std::log(J);
  return 0.5 * mu * (F.squaredNorm() - 3.0) - mu * lnJ + 0.5 * lambda * lnJ * lnJ;
}

inline Mat3 stress_neo_hookean(const Mat3& F, double mu, double lambda) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw InvertedElementError("Neo-Hookean stress undefined for det(F) = " + std::to_string(J));
  const Mat3 FinvT = F.inverse().transpose();
  return mu * (F - FinvT) + lambda * std::log(J) * FinvT;
}

inline Mat9 hessian_neo_hookean(const Mat3& F, double mu, double lambda) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw InvertedElementError("Neo-Hookean Hessian undefined for det(F) = " + std::to_string(J));
  const Mat3 Finv = F.inverse();
  const Mat3 FinvT = Finv.transpose();
  const double c = mu - lambda * std::log(J);
  Mat9 H;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c1 = 0; c1 < 3; ++c1)
        for (int d = 0; d < 3; ++d)
          H(3 * a + b, 3 * c1 + d) = (a == c1 && b == d ? mu : 0.0) + c * Finv(d, a) * Finv(b, c1) +
                                     lambda * FinvT(a, b) * FinvT(c1, d);
  return H;
}

/// Neo-Hookean energy whose ln J is continued below j_floor by its second-order
/// Taylor expansion. Finite for every F (including inverted ones); identical to
/// psi_neo_hookean when det F >= j_floor. Used as a training loss.
struct ExtendedNeoHookean {
  double value;
  Mat3 stress;
};

inline ExtendedNeoHookean neo_hookean_extended(const Mat3& F, double mu, double lambda, double j_floor) {
  const double J = F.determinant();
  double L, dL;
  if (J >= j_floor) {
    L = std::log(J);
    dL = 1.0 / J;
  } else {
    const double t = (J - j_floor) / j_floor;
    L = std::log(j_floor) + t - 0.5 * t * t;
    dL = (1.0 - t) / j_floor;
  }
  Mat3 cof;
  cof.col(0) = F.col(1).cross(F.col(2));
  cof.col(1) = F.col(2).cross(F.col(0));
  cof.col(2) = F.col(0).cross(F.col(1));
  const double value = 0.5 * mu * (F.squaredNorm() - 3.0) - mu * L + 0.5 * lambda * L * L;
  const Mat3 P = mu * F + (lambda * L - mu) * dL * cof;
  return {value, P};
}

// ---------------------------------------------------------------------------
// StVK: mu tr(G^2) + lambda/2 tr^2(G), G = (F^T F - I)/2

inline Mat3 green_strain(const Mat3& F) { return 0.5 * (F.transpose() * F - Mat3::Identity()); }

inline double psi_stvk(const Mat3& F, double mu, double lambda) {
  const Mat3 G = green_strain(F);
  const double tr = G.trace();
  return mu * (G * G).trace() + 0.5 * lambda * tr * tr;
}

inline Mat3 stress_stvk(const Mat3& F, double mu, double lambda) {
  const Mat3 G = green_strain(F);
  return F * (2.0 * mu * G + lambda * G.trace() * Mat3::Identity());
}

inline Mat9 hessian_stvk(const Mat3& F, double mu, double lambda) {
  const Mat3 G = green_strain(F);
  const Mat3 S = 2.0 * mu * G + lambda * G.trace() * Mat3::Identity();
  const Mat3 FFt = F * F.transpose();
  Mat9 H;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d)
          H(3 * a + b, 3 * c + d) = (a == c ? S(d, b) : 0.0) + mu * (F(a, d) * F(c, b) + (b == d ? FFt(a, c) : 0.0)) +
                                    lambda * F(a, b) * F(c, d);
  return H;
}

// ---------------------------------------------------------------------------
// Model dispatch. Plastic models use StVK for the elastic part.

inline double energy_density(const Mat3& F, const Params& p) {
  const auto [mu, lambda] = lame(p);
  return p.model == Model::NeoHookean ? psi_neo_hookean(F, mu, lambda) : psi_stvk(F, mu, lambda);
}

inline Mat3 stress(const Mat3& F, const Params& p) {
  const auto [mu, lambda] = lame(p);
  return p.model == Model::NeoHookean ? stress_neo_hookean(F, mu, lambda) : stress_stvk(F, mu, lambda);
}

/// d^2 Psi / dF^2, symmetrized, without projection.
inline Mat9 stress_hessian_raw(const Mat3& F, const Params& p) {
  const auto [mu, lambda] = lame(p);
  const Mat9 H = p.model == Model::NeoHookean ? hessian_neo_hookean(F, mu, lambda) : hessian_stvk(F, mu, lambda);
  return 0.5 * (H + H.transpose());
}

/// Clamps negative eigenvalues of a symmetric matrix to zero.
inline Mat9 project_spd(const Mat9& H) {
  Eigen::LLT<Mat9> llt(H);
  if (llt.info() == Eigen::Success) return H;
  Eigen::SelfAdjointEigenSolver<Mat9> eig(H);
  const Vec9 clamped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
}

inline Mat9 stress_hessian(const Mat3& F, const Params& p) { return project_spd(stress_hessian_raw(F, p)); }

// ---------------------------------------------------------------------------
// Return mappings

/// F = U diag(sigma) V^T with sigma descending and det U = det V = +1. The
/// last singular value carries the sign of det F.
struct RotationSvd {
  Mat3 U;
  Vec3 sigma;
  Mat3 V;
};

inline RotationSvd rotation_svd(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  RotationSvd out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  if (out.U.determinant() < 0.0) {
    out.U.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  if (out.V.determinant() < 0.0) {
    out.V.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  return out;
}

namespace detail {

inline RotationSvd full_rank_svd(const Mat3& F, const char* who) {
  const RotationSvd s = rotation_svd(F);
  const double tol = 1e-12 * std::max(1.0, std::abs(s.sigma[0]));
  if (!(s.sigma[2] > tol)) throw NumericalError(std::string(who) + ": deformation gradient is rank-deficient or inverted");
  return s;
}

inline Mat3 compose(const RotationSvd& s, const Vec3& log_sigma) {
  return s.U * log_sigma.array().exp().matrix().asDiagonal() * s.V.transpose();
}

}  // namespace detail

/// Hencky strain: log of the singular values.
inline Vec3 hencky_strain(const Mat3& F) {
  return detail::full_rank_svd(F, "hencky_strain").sigma.array().log().matrix();
}

/// Von Mises yield residual ||dev eps|| - tau_y / (2 mu).
inline double von_mises_residual(const Mat3& F, double mu, double tau_y) {
  const Vec3 eps = hencky_strain(F);
  const Vec3 dev = eps.array() - eps.mean();
  return dev.norm() - tau_y / (2.0 * mu);
}

inline Mat3 return_map_von_mises(const Mat3& F, double mu, double tau_y) {
  const RotationSvd s = detail::full_rank_svd(F, "von Mises return map");
  const Vec3 eps = s.sigma.array().log().matrix();
  const Vec3 dev = eps.array() - eps.mean();
  const double dev_norm = dev.norm();
  const double dgamma = dev_norm - tau_y / (2.0 * mu);
  if (dgamma <= 0.0) return F;
  return detail::compose(s, eps - dgamma * dev / dev_norm);
}

inline double drucker_prager_alpha(double theta_f) {
  const double s = std::sin(theta_f);
  return std::sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s);
}

/// Drucker-Prager yield residual ||dev eps|| + alpha (3 lambda + 2 mu) tr(eps) / (2 mu).
inline double drucker_prager_residual(const Mat3& F, double mu, double lambda, double theta_f) {
  const Vec3 eps = hencky_strain(F);
  const Vec3 dev = eps.array() - eps.mean();
  return dev.norm() + drucker_prager_alpha(theta_f) * (3.0 * lambda + 2.0 * mu) * eps.sum() / (2.0 * mu);
}

inline Mat3 return_map_drucker_prager(const Mat3& F, double mu, double lambda, double theta_f) {
  const RotationSvd s = detail::full_rank_svd(F, "Drucker-Prager return map");
  const Vec3 eps = s.sigma.array().log().matrix();
  const double tr = eps.sum();
  if (tr > 0.0) return s.U * s.V.transpose();
  const Vec3 dev = eps.array() - eps.mean();
  const double dev_norm = dev.norm();
  const double dgamma = dev_norm + drucker_prager_alpha(theta_f) * (3.0 * lambda + 2.0 * mu) * tr / (2.0 * mu);
  if (dgamma <= 0.0) return F;
  return detail::compose(s, eps - dgamma * dev / dev_norm);
}

/// Applies the material's return map (identity for purely elastic models).
inline Mat3 return_map(const Mat3& F, const Params& p) {
  const auto [mu, lambda] = lame(p);
  switch (p.model) {
    case Model::NeoHookean: return F;
    case Model::StVKVonMises: return return_map_von_mises(F, mu, p.tau_y);
    case Model::StVKDruckerPrager: return return_map_drucker_prager(F, mu, lambda, p.theta_f);
  }
  return F;
}

/// Yield residual of the material's criterion; <= 0 means admissible.
inline double yield_residual(const Mat3& F, const Params& p) {
  const auto [mu, lambda] = lame(p);
  switch (p.model) {
    case Model::NeoHookean: return -1.0;
    case Model::StVKVonMises: return von_mises_residual(F, mu, p.tau_y);
    case Model::StVKDruckerPrager: {
      const Vec3 eps = hencky_strain(F);
      if (eps.sum() > 0.0) return (eps.array() - eps.mean()).matrix().norm() + eps.sum();
      return drucker_prager_residual(F, mu, lambda, p.theta_f);
    }
  }
  return -1.0;
}

}  // namespace v2s::material

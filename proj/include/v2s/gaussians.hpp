#pragma once

// 3D Gaussian primitives carried through the skinning deformation: means move
// with the deformation map and covariances transform as F (RS)(RS)^T F^T.
// Appearance is degree-0 color only. Files are ASCII PLY with shortest
// round-trip decimal text, so save/load is bit-exact.

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "v2s/detail/error.hpp"
#include "v2s/detail/format.hpp"
#include "v2s/geometry.hpp"
#include "v2s/kinematics.hpp"

namespace v2s {

struct GaussianSet {
  Eigen::Matrix3Xd means;
  Eigen::Matrix4Xd rotations;  // unit quaternions (w, x, y, z)
  Eigen::Matrix3Xd scales;
  Eigen::VectorXd opacities;
  Eigen::Matrix3Xd colors;     // rgb

  long size() const { return means.cols(); }

  void resize(long n) {
    means.resize(3, n);
    rotations.resize(4, n);
    scales.resize(3, n);
    opacities.resize(n);
    colors.resize(3, n);
  }

  Mat3 rotation(long i) const {
    return Eigen::Quaterniond(rotations(0, i), rotations(1, i), rotations(2, i), rotations(3, i)).toRotationMatrix();
  }

  /// Sigma = R S S^T R^T.
  Mat3 covariance(long i) const {
    const Mat3 L = rotation(i) * scales.col(i).asDiagonal();
    return L * L.transpose();
  }

  void validate() const {
    const long n = size();
    detail::require(rotations.cols() == n && scales.cols() == n && opacities.size() == n && colors.cols() == n,
                    "Gaussian set fields have inconsistent sizes");
    for (long i = 0; i < n; ++i) {
      const std::string at = " (Gaussian " + std::to_string(i) + ")";
      detail::require(means.col(i).allFinite() && colors.col(i).allFinite(), "non-finite Gaussian field" + at);
      detail::require(std::abs(rotations.col(i).norm() - 1.0) <= 1e-6, "rotation quaternion is not unit-norm" + at);
      detail::require((scales.col(i).array() > 0.0).all(), "Gaussian scales must be positive" + at);
      detail::require(opacities[i] >= 0.0 && opacities[i] <= 1.0, "opacity outside [0, 1]" + at);
    }
  }

  friend bool operator==(const GaussianSet& a, const GaussianSet& b) {
    auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
    };
    return same(a.means, b.means) && same(a.rotations, b.rotations) && same(a.scales, b.scales) &&
           same(a.opacities, b.opacities) && same(a.colors, b.colors);
  }
};

struct DeformedGaussians {
  Eigen::Matrix3Xd means;
  std::vector<Mat3> covariances;
};

inline DeformedGaussians advect(const GaussianSet& g, const LbsModel& lbs, const HandleCoords& z) {
  g.validate();
  check_handles(lbs, z);
  DeformedGaussians out;
  out.means = deform_batch(lbs, g.means, z);
  const auto Fs = deformation_gradients(lbs, g.means, z);
  out.covariances.resize(g.size());
  for (long i = 0; i < g.size(); ++i) {
    const Mat3& F = Fs[i];
    const Mat3 L = F * g.rotation(i) * g.scales.col(i).asDiagonal();
    const Mat3 C = L * L.transpose();
    out.covariances[i] = 0.5 * (C + C.transpose());  // the product is only symmetric to round-off
  }
  return out;
}

/// Re-expresses deformed covariances as rotation + scales (eigen-decomposition)
/// and keeps the appearance of `source`.
inline GaussianSet to_gaussian_set(const DeformedGaussians& d, const GaussianSet& source) {
  GaussianSet out = source;
  out.means = d.means;
  for (long i = 0; i < source.size(); ++i) {
    Eigen::SelfAdjointEigenSolver<Mat3> eig(0.5 * (d.covariances[i] + d.covariances[i].transpose()));
    Mat3 R = eig.eigenvectors();
    if (R.determinant() < 0.0) R.col(0) *= -1.0;
    Eigen::Quaterniond q(R);
    q.normalize();
    out.rotations.col(i) << q.w(), q.x(), q.y(), q.z();
    out.scales.col(i) = eig.eigenvalues().cwiseMax(1e-24).cwiseSqrt();
  }
  return out;
}

/// Maps a set from the input frame into the canonical frame of `to_input`.
inline GaussianSet to_canonical(GaussianSet g, const Similarity& to_input) {
  for (long i = 0; i < g.size(); ++i) g.means.col(i) = to_input.invert(g.means.col(i));
  g.scales /= to_input.scale;
  return g;
}

/// Inverse of to_canonical.
inline GaussianSet to_input_frame(GaussianSet g, const Similarity& to_input) {
  for (long i = 0; i < g.size(); ++i) g.means.col(i) = to_input.apply(g.means.col(i));
  g.scales *= to_input.scale;
  return g;
}

namespace detail {

inline constexpr const char* kGaussianFields[] = {"x",     "y",     "z",       "rot_w",   "rot_x",   "rot_y", "rot_z",
                                                  "scale_x", "scale_y", "scale_z", "opacity", "r", "g", "b"};

}  // namespace detail

inline void save_gaussians(const GaussianSet& g, std::ostream& out) {
  g.validate();
  out << "ply\nformat ascii 1.0\nelement vertex " << g.size() << '\n';
  for (const char* name : detail::kGaussianFields) out << "property double " << name << '\n';
  out << "end_header\n";
  for (long i = 0; i < g.size(); ++i) {
    const double row[14] = {g.means(0, i),     g.means(1, i),     g.means(2, i),     g.rotations(0, i), g.rotations(1, i),
                            g.rotations(2, i), g.rotations(3, i), g.scales(0, i),    g.scales(1, i),    g.scales(2, i),
                            g.opacities[i],    g.colors(0, i),    g.colors(1, i),    g.colors(2, i)};
    for (int k = 0; k < 14; ++k) out << (k ? " " : "") << detail::format_double(row[k]);
    out << '\n';
  }
}

inline void save_gaussians(const GaussianSet& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write Gaussian file: " + path);
  save_gaussians(g, out);
  if (!out) throw InputError("failed writing Gaussian file: " + path);
}

inline GaussianSet load_gaussians(std::istream& in, const std::string& path) {
  const auto header = detail::read_ply_header(in, path);
  long idx[14];
  for (int k = 0; k < 14; ++k) idx[k] = detail::property_index(header, detail::kGaussianFields[k], path);
  GaussianSet g;
  g.resize(header.vertex_count);
  const std::size_t width = header.vertex_properties.size();
  std::string line;
  std::vector<double> row(width);
  for (long v = 0; v < header.vertex_count; ++v) {
    const long line_no = header.header_lines + v + 1;
    if (!std::getline(in, line))
      throw InputError(path + ": expected " + std::to_string(header.vertex_count) + " Gaussians, got " +
                       std::to_string(v));
    std::istringstream ls(line);
    std::string token;
    for (std::size_t p = 0; p < width; ++p) {
      if (!(ls >> token) || !detail::parse_double(token, row[p]))
        throw InputError(path + ": line " + std::to_string(line_no) + ": bad or missing value for '" +
                         header.vertex_properties[p] + "'");
    }
    if (ls >> token) throw InputError(path + ": line " + std::to_string(line_no) + ": trailing values");
    g.means.col(v) << row[idx[0]], row[idx[1]], row[idx[2]];
    g.rotations.col(v) << row[idx[3]], row[idx[4]], row[idx[5]], row[idx[6]];
    g.scales.col(v) << row[idx[7]], row[idx[8]], row[idx[9]];
    g.opacities[v] = row[idx[10]];
    g.colors.col(v) << row[idx[11]], row[idx[12]], row[idx[13]];
  }
  try {
    g.validate();
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
  return g;
}

inline GaussianSet load_gaussians(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open Gaussian file: " + path);
  return load_gaussians(in, path);
}

/// Writes one PLY per frame as <directory>/<stem>_NNNN.ply and returns the paths.
inline std::vector<std::string> export_gaussian_frames(const std::vector<GaussianSet>& frames,
                                                       const std::string& directory, const std::string& stem) {
  std::vector<std::string> paths;
  paths.reserve(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "_%04zu.ply", f);
    paths.push_back(directory + "/" + stem + suffix);
    save_gaussians(frames[f], paths.back());
  }
  return paths;
}

}  // namespace v2s

#pragma once

// Rest-configuration point sets, canonical normalization, mass assignment,
// farthest-point sampling, and point-cloud readers (ASCII PLY, CSV).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "v2s/detail/error.hpp"
#include "v2s/detail/random.hpp"

namespace v2s {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rest configuration: positions (3 x n), per-point masses and volumes.
struct PointSet {
  Eigen::Matrix3Xd positions;
  Eigen::VectorXd masses;
  Eigen::VectorXd volumes;
  double total_volume = 0.0;

  long size() const { return positions.cols(); }
  Vec3 position(long i) const { return positions.col(i); }

  /// Uniform volumes summing to total_volume, masses at unit density.
  static PointSet from_positions(Eigen::Matrix3Xd positions, double total_volume);

  /// Throws InputError when any invariant is violated.
  void validate() const;
};

/// Integration points for the elastic energy: indices into a PointSet plus volumes.
struct CubatureSet {
  std::vector<long> indices;
  Eigen::VectorXd weights;

  long size() const { return static_cast<long>(indices.size()); }
  void validate(const PointSet& points) const;
};

/// Maps canonical coordinates back to the input frame: x = scale * c + translation.
struct Similarity {
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& canonical) const { return scale * canonical + translation; }
  Vec3 invert(const Vec3& x) const { return (x - translation) / scale; }
};

struct AxisBox {
  Vec3 lower;
  Vec3 upper;
  Vec3 extent() const { return upper - lower; }
  Vec3 center() const { return 0.5 * (lower + upper); }
  double diagonal() const { return extent().norm(); }
  double volume() const { return extent().prod(); }
};

inline AxisBox bounding_box(const Eigen::Matrix3Xd& positions) {
  detail::require(positions.cols() > 0, "bounding box of an empty point set");
  return {positions.rowwise().minCoeff(), positions.rowwise().maxCoeff()};
}

/// Bounding-box volume times the 0.5 occupancy factor.
inline double default_total_volume(const Eigen::Matrix3Xd& positions) {
  return 0.5 * bounding_box(positions).volume();
}

inline PointSet PointSet::from_positions(Eigen::Matrix3Xd positions, double total_volume) {
  PointSet p;
  const auto n = positions.cols();
  detail::require(n > 0, "point set is empty");
  p.positions = std::move(positions);
  p.total_volume = total_volume;
  p.volumes = Eigen::VectorXd::Constant(n, total_volume / static_cast<double>(n));
  p.masses = p.volumes;
  return p;
}

inline void PointSet::validate() const {
  const auto n = positions.cols();
  detail::require(n >= 4, "point set needs at least 4 points, got " + std::to_string(n));
  detail::require(masses.size() == n && volumes.size() == n, "point set masses/volumes size mismatch");
  detail::require(positions.allFinite(), "point set contains non-finite positions");
  detail::require((masses.array() > 0.0).all(), "point masses must be positive");
  detail::require((volumes.array() > 0.0).all(), "point volumes must be positive");
  detail::require(total_volume > 0.0, "total volume must be positive");
  detail::require(std::abs(volumes.sum() - total_volume) <= 1e-9 * total_volume,
                  "point volumes do not sum to total_volume");
}

inline void CubatureSet::validate(const PointSet& points) const {
  detail::require(!indices.empty(), "cubature set is empty");
  detail::require(weights.size() == size(), "cubature weights/indices size mismatch");
  std::vector<long> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  detail::require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "cubature indices not unique");
  detail::require(sorted.front() >= 0 && sorted.back() < points.size(), "cubature index out of range");
  detail::require((weights.array() > 0.0).all(), "cubature weights must be positive");
  detail::require(std::abs(weights.sum() - points.total_volume) <= 1e-9 * points.total_volume,
                  "cubature weights do not sum to total_volume");
}

/// Centers the bounding box at the origin and scales its longest axis to 1.
/// Volumes follow the scaling; masses are left untouched.
inline std::pair<PointSet, Similarity> normalize_to_canonical(const PointSet& points) {
  const AxisBox box = bounding_box(points.positions);
  const double longest = box.extent().maxCoeff();
  if (!(longest > 0.0) || !std::isfinite(longest))
    throw InputError("cannot normalize a point set with zero extent");
  Similarity transform{longest, box.center()};
  PointSet out = points;
  out.positions = (points.positions.colwise() - transform.translation) / longest;
  const double volume_scale = 1.0 / (longest * longest * longest);
  out.volumes = points.volumes * volume_scale;
  out.total_volume = points.total_volume * volume_scale;
  return {std::move(out), transform};
}

inline PointSet assign_masses(const PointSet& points, double density) {
  if (!(density > 0.0) || !std::isfinite(density))
    throw InputError("density must be positive, got " + std::to_string(density));
  detail::require(points.total_volume > 0.0, "total_volume must be set before assigning masses");
  PointSet out = points;
  const auto n = points.size();
  out.volumes = Eigen::VectorXd::Constant(n, points.total_volume / static_cast<double>(n));
  out.masses = density * out.volumes;
  return out;
}

/// Picks the first index with a seeded uniform draw, then greedily the point
/// farthest from the chosen set. Ties go to the lowest index.
inline CubatureSet farthest_point_sample(const PointSet& points, long k, std::uint64_t seed) {
  const long n = points.size();
  if (k < 1 || k > n)
    throw InputError("cubature count " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  detail::Rng rng(seed);
  CubatureSet out;
  out.indices.reserve(static_cast<std::size_t>(k));
  long current = static_cast<long>(rng.index(static_cast<std::uint64_t>(n)));
  Eigen::VectorXd min_dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  for (long step = 0; step < k; ++step) {
    out.indices.push_back(current);
    taken[static_cast<std::size_t>(current)] = 1;
    const Vec3 chosen = points.positions.col(current);
    long best = -1;
    double best_dist = -1.0;
    for (long i = 0; i < n; ++i) {
      const double d = (points.positions.col(i) - chosen).squaredNorm();
      if (d < min_dist[i]) min_dist[i] = d;
      if (!taken[static_cast<std::size_t>(i)] && min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  out.weights = Eigen::VectorXd::Constant(k, points.total_volume / static_cast<double>(k));
  return out;
}

// ---------------------------------------------------------------------------
// Readers

namespace detail {

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open file: " + path);
  return in;
}

inline Eigen::Matrix3Xd to_matrix(const std::vector<Vec3>& pts) {
  Eigen::Matrix3Xd m(3, static_cast<long>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) m.col(static_cast<long>(i)) = pts[i];
  return m;
}

/// Header of an ASCII PLY file: vertex count and vertex property names.
struct PlyHeader {
  long vertex_count = -1;
  std::vector<std::string> vertex_properties;
  long header_lines = 0;
};

inline PlyHeader read_ply_header(std::istream& in, const std::string& path) {
  PlyHeader header;
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw InputError(path + ": missing 'ply' magic line");
  header.header_lines = 1;
  bool in_vertex = false;
  bool ascii = false;
  while (std::getline(in, line)) {
    ++header.header_lines;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword == "end_header") {
      if (!ascii) throw InputError(path + ": only 'format ascii 1.0' PLY files are supported");
      if (header.vertex_count < 0) throw InputError(path + ": no vertex element");
      return header;
    }
    if (keyword == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (keyword == "element") {
      std::string name;
      long count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) header.vertex_count = count;
    } else if (keyword == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") throw InputError(path + ": list properties are not supported on vertices");
      header.vertex_properties.push_back(name);
    }
  }
  throw InputError(path + ": unterminated PLY header");
}

inline long property_index(const PlyHeader& header, const std::string& name, const std::string& path) {
  const auto it = std::find(header.vertex_properties.begin(), header.vertex_properties.end(), name);
  if (it == header.vertex_properties.end()) throw InputError(path + ": missing vertex property '" + name + "'");
  return static_cast<long>(it - header.vertex_properties.begin());
}

/// Reads the vertex rows of an ASCII PLY body as doubles.
inline std::vector<std::vector<double>> read_ply_vertices(std::istream& in, const PlyHeader& header,
                                                          const std::string& path) {
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(header.vertex_count));
  std::string line;
  const std::size_t width = header.vertex_properties.size();
  for (long v = 0; v < header.vertex_count; ++v) {
    if (!std::getline(in, line))
      throw InputError(path + ": expected " + std::to_string(header.vertex_count) + " vertices, got " +
                       std::to_string(v));
    std::istringstream ls(line);
    std::vector<double> row(width);
    for (std::size_t p = 0; p < width; ++p) {
      if (!(ls >> row[p]))
        throw InputError(path + ": line " + std::to_string(header.header_lines + v + 1) + ": cannot read property '" +
                         header.vertex_properties[p] + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline Eigen::Matrix3Xd load_points_ply(const std::string& path) {
  auto in = detail::open_input(path);
  const auto header = detail::read_ply_header(in, path);
  const long ix = detail::property_index(header, "x", path);
  const long iy = detail::property_index(header, "y", path);
  const long iz = detail::property_index(header, "z", path);
  const auto rows = detail::read_ply_vertices(in, header, path);
  std::vector<Vec3> pts;
  pts.reserve(rows.size());
  for (const auto& r : rows) pts.emplace_back(r[ix], r[iy], r[iz]);
  return detail::to_matrix(pts);
}

/// x,y,z per line, no header.
inline Eigen::Matrix3Xd load_points_csv(const std::string& path) {
  auto in = detail::open_input(path);
  std::vector<Vec3> pts;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z()))
      throw InputError(path + ": line " + std::to_string(line_no) + ": expected x,y,z");
    pts.push_back(p);
  }
  return detail::to_matrix(pts);
}

/// Dispatches on extension (.ply or .csv).
inline Eigen::Matrix3Xd load_points(const std::string& path) {
  const auto dot = path.find_last_of('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "ply" || ext == "PLY") return load_points_ply(path);
  if (ext == "csv" || ext == "CSV") return load_points_csv(path);
  throw InputError("unsupported point-cloud extension: " + path);
}

inline void save_points_ply(const Eigen::Matrix3Xd& positions, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write file: " + path);
  out << "ply\nformat ascii 1.0\nelement vertex " << positions.cols()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  out.precision(17);
  for (long i = 0; i < positions.cols(); ++i)
    out << positions(0, i) << ' ' << positions(1, i) << ' ' << positions(2, i) << '\n';
}

/// Uniform random samples in a solid primitive: "cube" ([-0.5,0.5]^3) or "sphere" (radius 0.5).
inline Eigen::Matrix3Xd sample_primitive(const std::string& shape, long count, std::uint64_t seed) {
  detail::require(count >= 4, "primitive needs at least 4 points");
  detail::Rng rng(seed);
  Eigen::Matrix3Xd pts(3, count);
  for (long i = 0; i < count; ++i) {
    Vec3 p;
    if (shape == "cube") {
      p = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    } else if (shape == "sphere") {
      do {
        p = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
      } while (p.squaredNorm() > 0.25);
    } else {
      throw InputError("unknown primitive shape: " + shape);
    }
    pts.col(i) = p;
  }
  return pts;
}

}  // namespace v2s

#pragma once

// Linear blend skinning on neural weight fields: the deformation map, its
// deformation gradient, the exact Jacobian dF/dz, the neural Jacobian, and the
// data-free training of both networks.
//
// Reduced coordinates z stack m affine handles Z_j (3x4), each flattened
// row-major: z[12 j + 4 r + c] = Z_j(r, c). vec(F) is row-major as well.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "v2s/detail/error.hpp"
#include "v2s/detail/format.hpp"
#include "v2s/detail/parallel.hpp"
#include "v2s/detail/random.hpp"
#include "v2s/geometry.hpp"
#include "v2s/materials.hpp"
#include "v2s/neuralnet.hpp"

namespace v2s {

using HandleCoords = Eigen::VectorXd;
using HandleMatrix = Eigen::Matrix<double, 3, 4>;

inline int handle_count(const HandleCoords& z) {
  detail::require(z.size() > 0 && z.size() % 12 == 0, "handle coordinate length must be a positive multiple of 12");
  return static_cast<int>(z.size() / 12);
}

inline HandleMatrix handle_matrix(const HandleCoords& z, int j) {
  HandleMatrix Z;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) Z(r, c) = z[12 * j + 4 * r + c];
  return Z;
}

inline void set_handle_matrix(HandleCoords& z, int j, const HandleMatrix& Z) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) z[12 * j + 4 * r + c] = Z(r, c);
}

// ---------------------------------------------------------------------------
// LBS weight model

struct LbsArchitecture {
  int hidden_width = 64;
  int linear_layers = 8;
};

/// Skinning-weight field X -> w(X) in R^m. With rigid_handle set, the last
/// handle has constant weight 1 and the network supplies the other m - 1.
class LbsModel {
 public:
  LbsModel() = default;

  LbsModel(nn::Mlp net, bool rigid_handle) : net_(std::move(net)), rigid_(rigid_handle) {
    detail::require(net_.input_width() == 3, "LBS network must take 3 inputs");
    net_.metadata()["kind"] = "lbs";
    net_.metadata()["handles"] = std::to_string(handle_count());
    net_.metadata()["rigid_handle"] = rigid_ ? "1" : "0";
    net_.metadata()["vec"] = "row-major";
  }

  static LbsModel create(int handles, const LbsArchitecture& arch, std::uint64_t seed, bool rigid_handle = true) {
    const int outputs = handles - (rigid_handle ? 1 : 0);
    detail::require(outputs >= 1, "LBS model needs at least one learned handle");
    detail::require(arch.linear_layers >= 1 && arch.hidden_width >= 1, "invalid LBS architecture");
    std::vector<int> widths{3};
    for (int l = 0; l + 1 < arch.linear_layers; ++l) widths.push_back(arch.hidden_width);
    widths.push_back(outputs);
    return LbsModel(nn::Mlp::initialized(widths, nn::Activation::Elu, false, seed), rigid_handle);
  }

  bool valid() const { return net_.layer_count() > 0; }
  int handle_count() const { return net_.output_width() + (rigid_ ? 1 : 0); }
  int network_outputs() const { return net_.output_width(); }
  bool rigid_handle() const { return rigid_; }
  const nn::Mlp& net() const { return net_; }
  nn::Mlp& net() { return net_; }

  void save(const std::string& path) const { nn::save_model(net_, path); }

  static LbsModel load(const std::string& path) {
    nn::Mlp net = nn::load_model(path);
    const auto& meta = net.metadata();
    auto kind = meta.find("kind");
    if (kind == meta.end() || kind->second != "lbs") throw InputError("not an LBS model file: " + path);
    auto rigid = meta.find("rigid_handle");
    return LbsModel(std::move(net), rigid != meta.end() && rigid->second == "1");
  }

  friend bool operator==(const LbsModel& a, const LbsModel& b) { return a.rigid_ == b.rigid_ && a.net_ == b.net_; }

 private:
  nn::Mlp net_;
  bool rigid_ = false;
};

enum class Derivative { None, Forward, Reverse };

/// Weights and their spatial gradients for a batch: w is m x B and dw[k] holds
/// dw/dX_k (m x B).
struct WeightField {
  Eigen::MatrixXd w;
  std::array<Eigen::MatrixXd, 3> dw;
};

/// Evaluates the weight field. Forward carries three input tangents through
/// the network; Reverse runs one input-gradient pass per network output, the
/// way a reverse-mode autodiff framework builds a full Jacobian.
inline WeightField evaluate_weights(const LbsModel& model, const Eigen::Matrix3Xd& X,
                                    Derivative mode = Derivative::Forward) {
  detail::require(model.valid(), "LBS model is not initialized");
  if (!X.allFinite()) throw InputError("non-finite position passed to the weight field");
  const long B = X.cols();
  const int mn = model.network_outputs();
  const int m = model.handle_count();
  WeightField out;
  out.w.resize(m, B);
  for (auto& d : out.dw) d = Eigen::MatrixXd::Zero(m, B);
  const Eigen::MatrixXd Xd = X;
  if (mode == Derivative::Forward) {
    auto t = model.net().forward_tangent_batch(Xd);
    out.w.topRows(mn) = t.value;
    for (int k = 0; k < 3; ++k) out.dw[k].topRows(mn) = t.tangent[k];
  } else {
    nn::Mlp::Tape tape;
    out.w.topRows(mn) = model.net().forward_batch(Xd, mode == Derivative::Reverse ? &tape : nullptr);
    if (mode == Derivative::Reverse) {
      Eigen::MatrixXd up = Eigen::MatrixXd::Zero(mn, B);
      for (int j = 0; j < mn; ++j) {
        up.row(j).setOnes();
        const Eigen::MatrixXd g = model.net().input_gradient_batch(tape, up);
        for (int k = 0; k < 3; ++k) out.dw[k].row(j) = g.row(k);
        up.row(j).setZero();
      }
    }
  }
  if (model.rigid_handle()) out.w.row(m - 1).setOnes();
  return out;
}

inline Eigen::VectorXd lbs_weights(const LbsModel& model, const Vec3& X) {
  return evaluate_weights(model, X, Derivative::None).w.col(0);
}

inline void check_handles(const LbsModel& model, const HandleCoords& z) {
  if (z.size() != 12L * model.handle_count())
    throw InputError("handle coordinates have length " + std::to_string(z.size()) + ", model expects " +
                     std::to_string(12L * model.handle_count()));
}

/// x = X + sum_j w_j(X) Z_j [X; 1] for every column of X.
inline Eigen::Matrix3Xd deform_batch(const LbsModel& model, const Eigen::Matrix3Xd& X, const HandleCoords& z) {
  check_handles(model, z);
  const Eigen::MatrixXd w = evaluate_weights(model, X, Derivative::None).w;
  Eigen::Matrix3Xd x = X;
  for (int j = 0; j < model.handle_count(); ++j) {
    const HandleMatrix Z = handle_matrix(z, j);
    const Eigen::Matrix3Xd moved = (Z.leftCols<3>() * X).colwise() + Z.col(3);
    x += moved * w.row(j).transpose().asDiagonal();
  }
  return x;
}

inline Vec3 deform(const LbsModel& model, const Vec3& X, const HandleCoords& z) {
  return deform_batch(model, X, z).col(0);
}

/// F = I + sum_j [w_j A_j + (Z_j [X; 1]) grad(w_j)^T].
inline Mat3 deformation_gradient(const LbsModel& model, const Vec3& X, const HandleCoords& z,
                                 Derivative mode = Derivative::Reverse) {
  check_handles(model, z);
  const WeightField f = evaluate_weights(model, X, mode);
  const Eigen::Vector4d Xh(X[0], X[1], X[2], 1.0);
  Mat3 F = Mat3::Identity();
  for (int j = 0; j < model.handle_count(); ++j) {
    const HandleMatrix Z = handle_matrix(z, j);
    const Vec3 grad(f.dw[0](j, 0), f.dw[1](j, 0), f.dw[2](j, 0));
    F += f.w(j, 0) * Z.leftCols<3>() + (Z * Xh) * grad.transpose();
  }
  return F;
}

/// Batched deformation gradients, one per column of X.
inline std::vector<Mat3> deformation_gradients(const LbsModel& model, const Eigen::Matrix3Xd& X, const HandleCoords& z,
                                               Derivative mode = Derivative::Reverse) {
  check_handles(model, z);
  const WeightField f = evaluate_weights(model, X, mode);
  std::vector<Mat3> out(X.cols(), Mat3::Identity());
  for (int j = 0; j < model.handle_count(); ++j) {
    const HandleMatrix Z = handle_matrix(z, j);
    for (long b = 0; b < X.cols(); ++b) {
      const Vec3 grad(f.dw[0](j, b), f.dw[1](j, b), f.dw[2](j, b));
      out[b] += f.w(j, b) * Z.leftCols<3>() + (Z.leftCols<3>() * X.col(b) + Z.col(3)) * grad.transpose();
    }
  }
  return out;
}

/// J[3a+b, 12j+4c+d] = delta_ac (w_j delta_bd [d<3] + Xh_d dw_j/dX_b).
inline Eigen::MatrixXd jacobian_from_weights(const WeightField& f, long column, const Vec3& X) {
  const int m = static_cast<int>(f.w.rows());
  const double Xh[4] = {X[0], X[1], X[2], 1.0};
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(9, 12 * m);
  for (int j = 0; j < m; ++j) {
    const double w = f.w(j, column);
    const double g[3] = {f.dw[0](j, column), f.dw[1](j, column), f.dw[2](j, column)};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        for (int d = 0; d < 4; ++d) J(3 * a + b, 12 * j + 4 * a + d) = (b == d ? w : 0.0) + Xh[d] * g[b];
  }
  return J;
}

inline Eigen::MatrixXd exact_jacobian(const LbsModel& model, const Vec3& X) {
  return jacobian_from_weights(evaluate_weights(model, X, Derivative::Reverse), 0, X);
}

inline std::vector<Eigen::MatrixXd> exact_jacobians(const LbsModel& model, const Eigen::Matrix3Xd& X,
                                                    Derivative mode = Derivative::Reverse) {
  const WeightField f = evaluate_weights(model, X, mode);
  std::vector<Eigen::MatrixXd> out(X.cols());
  for (long b = 0; b < X.cols(); ++b) out[b] = jacobian_from_weights(f, b, X.col(b));
  return out;
}

// ---------------------------------------------------------------------------
// Neural Jacobian model

/// Positional encoding followed by residual blocks of the given widths; a
/// dense bridge layer is inserted wherever the width changes.
struct JacobianArchitecture {
  int encoding_width = 512;
  double max_octave = 8.0;
  std::vector<int> block_widths{512, 512, 1024, 1024};
};

class JacobianModel {
 public:
  JacobianModel() = default;

  JacobianModel(nn::Mlp net, int handles, nn::EncodingConfig encoding)
      : net_(std::move(net)), handles_(handles), encoding_(encoding) {
    detail::require(handles_ >= 1, "Jacobian model needs at least one handle");
    detail::require(net_.input_width() == encoding_.width, "Jacobian network input must match the encoding width");
    detail::require(net_.output_width() == 9 * 12 * handles_, "Jacobian network output must be 9 x 12m");
    auto& meta = net_.metadata();
    meta["kind"] = "jacobian";
    meta["handles"] = std::to_string(handles_);
    meta["encoding_width"] = std::to_string(encoding_.width);
    meta["max_octave"] = detail::format_double(encoding_.max_octave);
    meta["encoding"] = "sin,cos per coordinate per level; frequency pi*2^(level*step)";
    meta["vec"] = "row-major";
  }

  static std::vector<int> layer_widths(int handles, const JacobianArchitecture& arch) {
    detail::require(!arch.block_widths.empty(), "Jacobian architecture needs at least one block");
    std::vector<int> widths{arch.encoding_width};
    for (int w : arch.block_widths) {
      if (widths.back() != w) widths.push_back(w);
      widths.push_back(w);
      widths.push_back(w);
    }
    widths.push_back(9 * 12 * handles);
    return widths;
  }

  static JacobianModel create(int handles, const JacobianArchitecture& arch, std::uint64_t seed) {
    nn::Mlp net = nn::Mlp::initialized(layer_widths(handles, arch), nn::Activation::Gelu, true, seed);
    return JacobianModel(std::move(net), handles, nn::EncodingConfig{arch.encoding_width, arch.max_octave});
  }

  bool valid() const { return handles_ > 0 && net_.layer_count() > 0; }
  int handle_count() const { return handles_; }
  const nn::EncodingConfig& encoding() const { return encoding_; }
  const nn::Mlp& net() const { return net_; }
  nn::Mlp& net() { return net_; }

  Eigen::MatrixXd encode(const Eigen::Matrix3Xd& X) const { return nn::positional_encode_batch(X, encoding_); }

  void save(const std::string& path) const { nn::save_model(net_, path); }

  static JacobianModel load(const std::string& path) {
    nn::Mlp net = nn::load_model(path);
    const auto& meta = net.metadata();
    auto get = [&](const char* key) {
      auto it = meta.find(key);
      if (it == meta.end()) throw InputError(std::string("Jacobian model file lacks '") + key + "': " + path);
      return it->second;
    };
    if (get("kind") != "jacobian") throw InputError("not a Jacobian model file: " + path);
    const int handles = std::stoi(get("handles"));
    const nn::EncodingConfig enc{std::stoi(get("encoding_width")), std::stod(get("max_octave"))};
    return JacobianModel(std::move(net), handles, enc);
  }

  friend bool operator==(const JacobianModel& a, const JacobianModel& b) {
    return a.handles_ == b.handles_ && a.net_ == b.net_;
  }

 private:
  nn::Mlp net_;
  int handles_ = 0;
  nn::EncodingConfig encoding_;
};

/// Reshapes a network output column into the 9 x 12m Jacobian (row-major).
inline Eigen::MatrixXd reshape_jacobian(const Eigen::VectorXd& out, int handles) {
  return Eigen::Map<const nn::RowMatrix>(out.data(), 9, 12 * handles);
}

inline std::vector<Eigen::MatrixXd> neural_jacobians(const JacobianModel& model, const Eigen::Matrix3Xd& X) {
  if (!model.valid()) throw InputError("Jacobian model is not initialized");
  const Eigen::MatrixXd out = model.net().forward_batch(model.encode(X));
  std::vector<Eigen::MatrixXd> J(X.cols());
  for (long b = 0; b < X.cols(); ++b) J[b] = reshape_jacobian(out.col(b), model.handle_count());
  return J;
}

inline Eigen::MatrixXd neural_jacobian(const JacobianModel& model, const Vec3& X) {
  return neural_jacobians(model, X).front();
}

// ---------------------------------------------------------------------------
// Data-free LBS training

struct LbsTrainConfig {
  int handles = 10;
  LbsArchitecture arch;
  bool rigid_handle = true;
  int iterations = 10000;
  int batch = 1000;
  double learning_rate = 1e-3;
  double sigma_max = 0.5;    // z ~ N(0, sigma_t^2), sigma_t annealed linearly from 0
  double ortho_weight = 0.1;
  double j_floor = 0.05;     // ln J continued quadratically below this
  int probe_count = 512;     // fixed probe batch for the start/end loss report
  std::uint64_t seed = 0;
  std::function<void(int, double)> progress;  // (iteration, loss)
};

struct LbsLoss {
  double elastic = 0.0;
  double ortho = 0.0;
  double total() const { return elastic + ortho; }
};

/// alpha * ||W^T W / B - I||_F for a B x m weight matrix.
inline double ortho_penalty(const Eigen::MatrixXd& W, double alpha) {
  const long B = W.rows();
  const Eigen::MatrixXd C = W.transpose() * W / static_cast<double>(B) - Eigen::MatrixXd::Identity(W.cols(), W.cols());
  return alpha * C.norm();
}

/// Elastic plus orthogonality loss on a batch. X: 3 x B, Z: 12m x B (one
/// perturbation per point), volume: per-point volume. Adds the parameter
/// gradient into grad when given.
inline LbsLoss lbs_loss(const LbsModel& model, const Eigen::Matrix3Xd& X, const Eigen::MatrixXd& Z, double volume,
                        material::Lame lame, double alpha, double j_floor, Eigen::VectorXd* grad = nullptr) {
  const long B = X.cols();
  const int m = model.handle_count();
  const int mn = model.network_outputs();
  detail::require(Z.rows() == 12L * m && Z.cols() == B, "perturbation batch has the wrong shape");
  nn::Mlp::TangentTape tape;
  auto t = model.net().forward_tangent_batch(Eigen::MatrixXd(X), grad ? &tape : nullptr);

  Eigen::MatrixXd W(B, m);
  W.leftCols(mn) = t.value.transpose();
  if (model.rigid_handle()) W.col(m - 1).setOnes();

  LbsLoss loss;
  Eigen::MatrixXd up_value = Eigen::MatrixXd::Zero(mn, B);
  std::vector<Eigen::MatrixXd> up_tangent(3, Eigen::MatrixXd::Zero(mn, B));
  const double scale = volume / static_cast<double>(B);
  for (long b = 0; b < B; ++b) {
    const Eigen::Vector4d Xh(X(0, b), X(1, b), X(2, b), 1.0);
    Mat3 F = Mat3::Identity();
    std::vector<HandleMatrix> Zs(m);
    std::vector<Vec3> moved(m);
    for (int j = 0; j < m; ++j) {
      Zs[j] = Eigen::Map<const Eigen::Matrix<double, 3, 4, Eigen::RowMajor>>(Z.col(b).data() + 12 * j);
      moved[j] = Zs[j] * Xh;
      const double w = W(b, j);
      F += w * Zs[j].leftCols<3>();
      if (j < mn) F += moved[j] * Vec3(t.tangent[0](j, b), t.tangent[1](j, b), t.tangent[2](j, b)).transpose();
    }
    const auto e = material::neo_hookean_extended(F, lame.mu, lame.lambda, j_floor);
    loss.elastic += scale * e.value;
    if (grad) {
      for (int j = 0; j < mn; ++j) {
        up_value(j, b) = scale * (e.stress.cwiseProduct(Zs[j].leftCols<3>())).sum();
        const Vec3 gt = scale * e.stress.transpose() * moved[j];
        for (int k = 0; k < 3; ++k) up_tangent[k](j, b) = gt[k];
      }
    }
  }

  const Eigen::MatrixXd C = W.transpose() * W / static_cast<double>(B) - Eigen::MatrixXd::Identity(m, m);
  const double cn = C.norm();
  loss.ortho = alpha * cn;
  if (!std::isfinite(loss.elastic) || !std::isfinite(loss.ortho)) throw NumericalError("LBS training loss is not finite");
  if (grad) {
    if (cn > 0.0) {
      const Eigen::MatrixXd dW = (2.0 * alpha / (static_cast<double>(B) * cn)) * (W * C);
      up_value += dW.leftCols(mn).transpose();
    }
    model.net().backward_tangent_batch(tape, up_value, up_tangent, *grad);
  }
  return loss;
}

struct LbsTrainResult {
  LbsModel model;
  double initial_loss = 0.0;  // probe loss before training
  double final_loss = 0.0;    // probe loss after training
  std::vector<double> history;
};

/// Gaussian perturbations, one 12m column per point.
inline Eigen::MatrixXd sample_perturbations(int handles, long count, double sigma, detail::Rng& rng) {
  Eigen::MatrixXd Z(12L * handles, count);
  for (long b = 0; b < count; ++b)
    for (long r = 0; r < Z.rows(); ++r) Z(r, b) = sigma * rng.normal();
  return Z;
}

inline Eigen::Matrix3Xd sample_points(const PointSet& points, long count, detail::Rng& rng) {
  Eigen::Matrix3Xd X(3, count);
  const auto n = static_cast<std::uint64_t>(points.size());
  for (long b = 0; b < count; ++b) X.col(b) = points.positions.col(static_cast<long>(rng.index(n)));
  return X;
}

inline LbsTrainResult train_lbs_datafree(const PointSet& points, const material::Params& material,
                                         const LbsTrainConfig& config) {
  points.validate();
  detail::require(config.iterations >= 0 && config.batch >= 1, "invalid LBS training schedule");
  const material::Lame lame = material::lame(material);
  const double volume = points.total_volume / static_cast<double>(points.size());
  LbsTrainResult result;
  result.model = LbsModel::create(config.handles, config.arch, detail::derive_seed(config.seed, "lbs-init"),
                                  config.rigid_handle);
  LbsModel& model = result.model;

  detail::Rng probe_rng(detail::derive_seed(config.seed, "lbs-probe"));
  const Eigen::Matrix3Xd probe_X = sample_points(points, config.probe_count, probe_rng);
  const Eigen::MatrixXd probe_Z = sample_perturbations(config.handles, config.probe_count, config.sigma_max, probe_rng);
  auto probe = [&] {
    return lbs_loss(model, probe_X, probe_Z, volume, lame, config.ortho_weight, config.j_floor).total();
  };
  result.initial_loss = probe();

  detail::Rng rng(detail::derive_seed(config.seed, "lbs-train"));
  nn::AdamState adam = nn::AdamState::for_size(model.net().parameter_count(), config.learning_rate);
  Eigen::VectorXd grad(model.net().parameter_count());
  result.history.reserve(config.iterations);
  for (int it = 0; it < config.iterations; ++it) {
    const double sigma =
        config.iterations > 1 ? config.sigma_max * static_cast<double>(it) / (config.iterations - 1) : config.sigma_max;
    const Eigen::Matrix3Xd X = sample_points(points, config.batch, rng);
    const Eigen::MatrixXd Z = sample_perturbations(config.handles, config.batch, sigma, rng);
    grad.setZero();
    const double loss = lbs_loss(model, X, Z, volume, lame, config.ortho_weight, config.j_floor, &grad).total();
    nn::adam_step(adam, model.net(), grad);
    result.history.push_back(loss);
    if (config.progress) config.progress(it, loss);
  }
  result.final_loss = probe();
  if (!std::isfinite(result.final_loss)) throw NumericalError("LBS training diverged");
  return result;
}

// ---------------------------------------------------------------------------
// Neural Jacobian training

/// Jacobian of F with respect to z estimated by central differences of
/// deform() in X. deform is linear in z, so F_fd(X, z) = I + J_fd z exactly
/// and the 12m columns can be read off the displacement basis.
inline std::vector<Eigen::MatrixXd> finite_difference_jacobians(const LbsModel& model, const Eigen::Matrix3Xd& X,
                                                                double h) {
  const int m = model.handle_count();
  const long n = X.cols();
  std::vector<Eigen::MatrixXd> J(n, Eigen::MatrixXd::Zero(9, 12 * m));
  for (int k = 0; k < 3; ++k) {
    Eigen::Matrix3Xd Xp = X, Xm = X;
    Xp.row(k).array() += h;
    Xm.row(k).array() -= h;
    const Eigen::MatrixXd wp = evaluate_weights(model, Xp, Derivative::None).w;
    const Eigen::MatrixXd wm = evaluate_weights(model, Xm, Derivative::None).w;
    for (long b = 0; b < n; ++b) {
      const double hp[4] = {Xp(0, b), Xp(1, b), Xp(2, b), 1.0};
      const double hm[4] = {Xm(0, b), Xm(1, b), Xm(2, b), 1.0};
      for (int j = 0; j < m; ++j)
        for (int c = 0; c < 4; ++c) {
          const double d = (wp(j, b) * hp[c] - wm(j, b) * hm[c]) / (2.0 * h);
          for (int a = 0; a < 3; ++a) J[b](3 * a + k, 12 * j + 4 * a + c) = d;
        }
    }
  }
  return J;
}

enum class JacobianLoss { L1, L2 };

struct JacobianTrainConfig {
  JacobianArchitecture arch;
  int iterations = 10000;
  int batch = 64;
  int z_per_point = 4;
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-5;  // cosine decay target
  double sigma = 0.5;                 // z ~ N(0, sigma^2)
  double fd_step = 1e-4;
  JacobianLoss loss = JacobianLoss::L2;
  int holdout = 1000;                 // held-out (X, z) pairs
  std::uint64_t seed = 0;
  std::function<void(int, double)> progress;
};

struct JacobianTrainResult {
  JacobianModel model;
  double initial_holdout_mse = 0.0;
  double holdout_mse = 0.0;
  std::vector<double> history;  // per-iteration training loss
};

/// Per-entry mean of (J_theta z + I - F(X, z))^2 with F from deformation_gradient.
struct JacobianHoldout {
  Eigen::Matrix3Xd X;
  Eigen::MatrixXd Z;   // 12m x count
  Eigen::MatrixXd F;   // 9 x count, exact vec(F)

  static JacobianHoldout make(const LbsModel& lbs, const PointSet& points, int count, double sigma, std::uint64_t seed) {
    detail::Rng rng(seed);
    JacobianHoldout h;
    h.X = sample_points(points, count, rng);
    h.Z = sample_perturbations(lbs.handle_count(), count, sigma, rng);
    const auto J = exact_jacobians(lbs, h.X, Derivative::Reverse);
    h.F.resize(9, count);
    for (int b = 0; b < count; ++b) h.F.col(b) = material::flatten(Mat3::Identity()) + J[b] * h.Z.col(b);
    return h;
  }

  double mse(const JacobianModel& model) const {
    double sum = 0.0;
    const long chunk = 256;
    for (long start = 0; start < X.cols(); start += chunk) {
      const long len = std::min(chunk, X.cols() - start);
      const auto J = neural_jacobians(model, X.middleCols(start, len));
      for (long b = 0; b < len; ++b) {
        const material::Vec9 r = material::flatten(Mat3::Identity()) + J[b] * Z.col(start + b) - F.col(start + b);
        sum += r.squaredNorm();
      }
    }
    return sum / (9.0 * static_cast<double>(X.cols()));
  }
};

inline JacobianTrainResult train_neural_jacobian(const LbsModel& lbs, const PointSet& points,
                                                 const JacobianTrainConfig& config) {
  detail::require(lbs.valid(), "train_neural_jacobian needs a trained LBS model");
  points.validate();
  detail::require(config.iterations >= 0 && config.batch >= 1 && config.z_per_point >= 1,
                  "invalid Jacobian training schedule");
  const int m = lbs.handle_count();
  const long n = points.size();
  JacobianTrainResult result;
  result.model = JacobianModel::create(m, config.arch, detail::derive_seed(config.seed, "jacobian-init"));
  JacobianModel& model = result.model;

  // Ground truth for every point of the cloud, and its encoding.
  const auto targets = finite_difference_jacobians(lbs, points.positions, config.fd_step);
  const Eigen::MatrixXd encoded = model.encode(points.positions);
  const JacobianHoldout holdout =
      JacobianHoldout::make(lbs, points, config.holdout, config.sigma, detail::derive_seed(config.seed, "jacobian-holdout"));
  result.initial_holdout_mse = holdout.mse(model);

  detail::Rng rng(detail::derive_seed(config.seed, "jacobian-train"));
  nn::AdamState adam = nn::AdamState::for_size(model.net().parameter_count(), config.learning_rate);
  Eigen::VectorXd grad(model.net().parameter_count());
  const int cols = 12 * m;
  const double entries = 9.0 * config.batch * config.z_per_point;
  Eigen::MatrixXd input(encoded.rows(), config.batch);
  Eigen::MatrixXd upstream(9 * cols, config.batch);
  std::vector<long> picks(config.batch);
  result.history.reserve(config.iterations);
  for (int it = 0; it < config.iterations; ++it) {
    const double progress = config.iterations > 1 ? static_cast<double>(it) / (config.iterations - 1) : 1.0;
    adam.learning_rate = config.final_learning_rate + 0.5 * (config.learning_rate - config.final_learning_rate) *
                                                          (1.0 + std::cos(std::numbers::pi * progress));
    for (int b = 0; b < config.batch; ++b) {
      picks[b] = static_cast<long>(rng.index(static_cast<std::uint64_t>(n)));
      input.col(b) = encoded.col(picks[b]);
    }
    nn::Mlp::Tape tape;
    const Eigen::MatrixXd out = model.net().forward_batch(input, &tape);
    double loss = 0.0;
    for (int b = 0; b < config.batch; ++b) {
      const Eigen::Map<const nn::RowMatrix> Jp(out.col(b).data(), 9, cols);
      const Eigen::MatrixXd Z = sample_perturbations(m, config.z_per_point, config.sigma, rng);
      // Residual J_theta z + I - F_fd(X, z) for each perturbation.
      const Eigen::MatrixXd R = Jp * Z - targets[picks[b]] * Z;
      Eigen::MatrixXd G;
      if (config.loss == JacobianLoss::L2) {
        loss += R.squaredNorm();
        G = (2.0 / entries) * R * Z.transpose();
      } else {
        loss += R.cwiseAbs().sum();
        G = (1.0 / entries) * R.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); }) *
            Z.transpose();
      }
      Eigen::Map<nn::RowMatrix>(upstream.col(b).data(), 9, cols) = G;
    }
    loss /= entries;
    if (!std::isfinite(loss)) throw NumericalError("Jacobian training diverged at iteration " + std::to_string(it));
    grad.setZero();
    model.net().backward_batch(tape, upstream, grad);
    nn::adam_step(adam, model.net(), grad);
    result.history.push_back(loss);
    if (config.progress) config.progress(it, loss);
  }
  result.holdout_mse = holdout.mse(model);
  if (!std::isfinite(result.holdout_mse)) throw NumericalError("Jacobian training produced a non-finite model");
  return result;
}

}  // namespace v2s

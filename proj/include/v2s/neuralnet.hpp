#pragma once

// Dense networks for the skinning-weight field and the Jacobian field:
// batched forward/backward passes, forward-mode input tangents (so losses that
// depend on dW/dX can be trained), Adam, positional encoding, and the binary
// model format.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "v2s/detail/binary_io.hpp"
#include "v2s/detail/error.hpp"
#include "v2s/detail/random.hpp"

namespace v2s::nn {

enum class Activation : std::uint32_t { Identity = 0, Elu = 1, Gelu = 2 };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Elu: return "elu";
    case Activation::Gelu: return "gelu";
  }
  return "?";
}

namespace detail {

// GELU uses the exact erf form.
inline double act(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Elu: return x > 0.0 ? x : std::expm1(x);
    case Activation::Gelu: return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
  }
  return x;
}

inline double act_d1(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::Elu: return x > 0.0 ? 1.0 : std::exp(x);
    case Activation::Gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
      const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * std::numbers::sqrt2 * 0.5;
      return cdf + x * pdf;
    }
  }
  return 1.0;
}

inline double act_d2(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return 0.0;
    case Activation::Elu: return x > 0.0 ? 0.0 : std::exp(x);
    case Activation::Gelu: {
      const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * std::numbers::sqrt2 * 0.5;
      return pdf * (2.0 - x * x);
    }
  }
  return 0.0;
}

inline Eigen::MatrixXd apply(Activation a, const Eigen::MatrixXd& x) {
  if (a == Activation::Identity) return x;
  return x.unaryExpr([a](double v) { return act(a, v); });
}

inline Eigen::MatrixXd apply_d1(Activation a, const Eigen::MatrixXd& x) {
  return x.unaryExpr([a](double v) { return act_d1(a, v); });
}

inline Eigen::MatrixXd apply_d2(Activation a, const Eigen::MatrixXd& x) {
  return x.unaryExpr([a](double v) { return act_d2(a, v); });
}

}  // namespace detail

/// One step of the evaluation plan. A residual stage spans two square layers:
/// y = act(x + L2(act(L1 x))). The last layer is always a linear output.
struct Stage {
  enum class Kind { Dense, Residual, Output } kind;
  int layer;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialized network. widths = {in, hidden..., out}.
  Mlp(std::vector<int> widths, Activation activation, bool residual)
      : widths_(std::move(widths)), activation_(activation), residual_(residual) {
    ::v2s::detail::require(widths_.size() >= 2, "network needs at least one layer");
    for (int w : widths_) ::v2s::detail::require(w > 0, "network widths must be positive");
    long offset = 0;
    for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
      offsets_.push_back(offset);
      offset += static_cast<long>(widths_[i]) * widths_[i + 1] + widths_[i + 1];
    }
    params_ = Eigen::VectorXd::Zero(offset);
    build_plan();
  }

  /// Glorot-uniform weights, zero biases.
  static Mlp initialized(std::vector<int> widths, Activation activation, bool residual, std::uint64_t seed) {
    Mlp net(std::move(widths), activation, residual);
    ::v2s::detail::Rng rng(seed);
    for (int l = 0; l < net.layer_count(); ++l) {
      const double bound = std::sqrt(6.0 / (net.widths_[l] + net.widths_[l + 1]));
      auto w = net.weight(l);
      for (long r = 0; r < w.rows(); ++r)
        for (long c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    }
    return net;
  }

  const std::vector<int>& widths() const { return widths_; }
  int layer_count() const { return static_cast<int>(widths_.size()) - 1; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  Activation activation() const { return activation_; }
  bool residual() const { return residual_; }
  const std::vector<Stage>& stages() const { return plan_; }

  long parameter_count() const { return params_.size(); }
  Eigen::VectorXd& parameters() { return params_; }
  const Eigen::VectorXd& parameters() const { return params_; }

  Eigen::Map<RowMatrix> weight(int layer) {
    return {params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]};
  }
  Eigen::Map<const RowMatrix> weight(int layer) const {
    return {params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int layer) {
    return {params_.data() + offsets_[layer] + static_cast<long>(widths_[layer]) * widths_[layer + 1],
            widths_[layer + 1]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int layer) const {
    return {params_.data() + offsets_[layer] + static_cast<long>(widths_[layer]) * widths_[layer + 1],
            widths_[layer + 1]};
  }
  long weight_offset(int layer) const { return offsets_[layer]; }
  long bias_offset(int layer) const {
    return offsets_[layer] + static_cast<long>(widths_[layer]) * widths_[layer + 1];
  }

  /// Free-form key/value header stored with the model file.
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// Intermediate values kept by forward_batch for backward_batch.
  struct Tape {
    std::vector<Eigen::MatrixXd> input;  // stage input
    std::vector<Eigen::MatrixXd> pre1;   // first pre-activation
    std::vector<Eigen::MatrixXd> post1;  // residual: act(pre1)
    std::vector<Eigen::MatrixXd> pre2;   // residual: x + L2(post1)
    std::vector<Eigen::MatrixXd> slope1; // act'(pre1)
    std::vector<Eigen::MatrixXd> slope2; // act'(pre2)
  };

  /// Batched forward pass; samples are columns.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x, Tape* tape = nullptr) const {
    check_input(x.rows());
    if (tape) {
      const auto s = plan_.size();
      tape->input.assign(s, {});
      tape->pre1.assign(s, {});
      tape->post1.assign(s, {});
      tape->pre2.assign(s, {});
      tape->slope1.assign(s, {});
      tape->slope2.assign(s, {});
    }
    Eigen::MatrixXd h = x;
    for (std::size_t si = 0; si < plan_.size(); ++si) {
      const Stage& st = plan_[si];
      Eigen::MatrixXd a = affine(st.layer, h);
      if (st.kind == Stage::Kind::Output) {
        if (tape) tape->input[si] = std::move(h);
        h = std::move(a);
      } else if (st.kind == Stage::Kind::Dense) {
        Eigen::MatrixXd next = detail::apply(activation_, a);
        if (tape) {
          tape->input[si] = std::move(h);
          tape->slope1[si] = detail::apply_d1(activation_, a);
          tape->pre1[si] = std::move(a);
        }
        h = std::move(next);
      } else {
        Eigen::MatrixXd u = detail::apply(activation_, a);
        Eigen::MatrixXd s = affine(st.layer + 1, u) + h;
        Eigen::MatrixXd next = detail::apply(activation_, s);
        if (tape) {
          tape->input[si] = std::move(h);
          tape->slope1[si] = detail::apply_d1(activation_, a);
          tape->slope2[si] = detail::apply_d1(activation_, s);
          tape->pre1[si] = std::move(a);
          tape->post1[si] = std::move(u);
          tape->pre2[si] = std::move(s);
        }
        h = std::move(next);
      }
    }
    return h;
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
    return forward_batch(Eigen::MatrixXd(x)).col(0);
  }

  /// Reverse pass for the scalar sum_b <upstream_b, y_b>. Adds parameter
  /// gradients into grad and returns the input gradient (input_width x B).
  Eigen::MatrixXd backward_batch(const Tape& tape, const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad) const {
    ::v2s::detail::require(grad.size() == parameter_count(), "gradient buffer size mismatch");
    return backward_impl(tape, upstream, &grad);
  }

  /// Input gradient only; skips parameter accumulation.
  Eigen::MatrixXd input_gradient_batch(const Tape& tape, const Eigen::MatrixXd& upstream) const {
    return backward_impl(tape, upstream, nullptr);
  }

 private:
  Eigen::MatrixXd backward_impl(const Tape& tape, const Eigen::MatrixXd& upstream, Eigen::VectorXd* grad) const {
    ::v2s::detail::require(upstream.rows() == output_width(), "upstream width mismatch");
    ::v2s::detail::require(upstream.cols() == tape.input.front().cols(), "upstream batch mismatch");
    Eigen::MatrixXd dh = upstream;
    for (std::size_t k = plan_.size(); k-- > 0;) {
      const Stage& st = plan_[k];
      const Eigen::MatrixXd& x = tape.input[k];
      if (st.kind == Stage::Kind::Output) {
        if (grad) accumulate(*grad, st.layer, dh, x);
        dh = weight(st.layer).transpose() * dh;
      } else if (st.kind == Stage::Kind::Dense) {
        Eigen::MatrixXd da = tape.slope1[k].cwiseProduct(dh);
        if (grad) accumulate(*grad, st.layer, da, x);
        dh = weight(st.layer).transpose() * da;
      } else {
        Eigen::MatrixXd ds = tape.slope2[k].cwiseProduct(dh);
        if (grad) accumulate(*grad, st.layer + 1, ds, tape.post1[k]);
        Eigen::MatrixXd du = weight(st.layer + 1).transpose() * ds;
        Eigen::MatrixXd da = tape.slope1[k].cwiseProduct(du);
        if (grad) accumulate(*grad, st.layer, da, x);
        dh = ds + weight(st.layer).transpose() * da;
      }
    }
    return dh;
  }

 public:
  struct Gradient {
    Eigen::VectorXd parameters;
    Eigen::VectorXd input;
  };

  /// Gradients of <upstream, forward(x)> with respect to parameters and input.
  Gradient gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& upstream) const {
    ::v2s::detail::require(upstream.size() == output_width(), "upstream width mismatch");
    Tape tape;
    forward_batch(Eigen::MatrixXd(x), &tape);
    Gradient g{Eigen::VectorXd::Zero(parameter_count()), {}};
    g.input = backward_batch(tape, Eigen::MatrixXd(upstream), g.parameters).col(0);
    return g;
  }

  /// Forward pass that also carries d(activation)/d(input_k) for every input
  /// coordinate k. Only plain (non-residual) networks are supported.
  struct TangentTape {
    std::vector<Eigen::MatrixXd> input;                 // per layer
    std::vector<std::vector<Eigen::MatrixXd>> dinput;   // per layer, per input coordinate
    std::vector<Eigen::MatrixXd> pre;                   // per hidden layer
    std::vector<std::vector<Eigen::MatrixXd>> dpre;     // per hidden layer, per coordinate
  };

  struct TangentOutput {
    Eigen::MatrixXd value;                 // out x B
    std::vector<Eigen::MatrixXd> tangent;  // per input coordinate, out x B
  };

  TangentOutput forward_tangent_batch(const Eigen::MatrixXd& x, TangentTape* tape = nullptr) const {
    ::v2s::detail::require(!residual_, "tangent propagation supports plain networks only");
    check_input(x.rows());
    const int d = input_width();
    const long batch = x.cols();
    Eigen::MatrixXd h = x;
    std::vector<Eigen::MatrixXd> dh(d);
    for (int k = 0; k < d; ++k) {
      dh[k] = Eigen::MatrixXd::Zero(d, batch);
      dh[k].row(k).setOnes();
    }
    if (tape) {
      tape->input.assign(layer_count(), {});
      tape->dinput.assign(layer_count(), {});
      tape->pre.assign(layer_count(), {});
      tape->dpre.assign(layer_count(), {});
    }
    for (int l = 0; l < layer_count(); ++l) {
      Eigen::MatrixXd a = affine(l, h);
      std::vector<Eigen::MatrixXd> da(d);
      for (int k = 0; k < d; ++k) da[k] = weight(l) * dh[k];
      if (tape) {
        tape->input[l] = h;
        tape->dinput[l] = dh;
      }
      if (l + 1 == layer_count()) {
        return {std::move(a), std::move(da)};
      }
      const Eigen::MatrixXd s1 = detail::apply_d1(activation_, a);
      h = detail::apply(activation_, a);
      for (int k = 0; k < d; ++k) dh[k] = s1.cwiseProduct(da[k]);
      if (tape) {
        tape->pre[l] = std::move(a);
        tape->dpre[l] = std::move(da);
      }
    }
    return {h, dh};  // unreachable: the last layer returns above
  }

  /// Reverse pass through forward_tangent_batch for the scalar
  /// sum_b <up_b, y_b> + sum_k <up_tangent[k]_b, dy/dx_k_b>. Adds into grad.
  void backward_tangent_batch(const TangentTape& tape, const Eigen::MatrixXd& upstream,
                              const std::vector<Eigen::MatrixXd>& upstream_tangent, Eigen::VectorXd& grad) const {
    const int d = input_width();
    ::v2s::detail::require(static_cast<int>(upstream_tangent.size()) == d, "tangent upstream count mismatch");
    ::v2s::detail::require(grad.size() == parameter_count(), "gradient buffer size mismatch");
    Eigen::MatrixXd gh = upstream;
    std::vector<Eigen::MatrixXd> gdh = upstream_tangent;
    for (int l = layer_count(); l-- > 0;) {
      Eigen::MatrixXd ga;
      std::vector<Eigen::MatrixXd> gda(d);
      if (l + 1 == layer_count()) {
        ga = std::move(gh);
        gda = std::move(gdh);
      } else {
        const Eigen::MatrixXd s1 = detail::apply_d1(activation_, tape.pre[l]);
        const Eigen::MatrixXd s2 = detail::apply_d2(activation_, tape.pre[l]);
        ga = s1.cwiseProduct(gh);
        for (int k = 0; k < d; ++k) {
          ga += s2.cwiseProduct(tape.dpre[l][k]).cwiseProduct(gdh[k]);
          gda[k] = s1.cwiseProduct(gdh[k]);
        }
      }
      auto gw = Eigen::Map<RowMatrix>(grad.data() + weight_offset(l), widths_[l + 1], widths_[l]);
      gw.noalias() += ga * tape.input[l].transpose();
      for (int k = 0; k < d; ++k) gw.noalias() += gda[k] * tape.dinput[l][k].transpose();
      Eigen::Map<Eigen::VectorXd>(grad.data() + bias_offset(l), widths_[l + 1]) += ga.rowwise().sum();
      if (l > 0) {
        gh = weight(l).transpose() * ga;
        gdh.resize(d);
        for (int k = 0; k < d; ++k) gdh[k] = weight(l).transpose() * gda[k];
      }
    }
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    return a.widths_ == b.widths_ && a.activation_ == b.activation_ && a.residual_ == b.residual_ &&
           a.metadata_ == b.metadata_ && a.params_.size() == b.params_.size() &&
           (a.params_.array() == b.params_.array()).all();
  }

 private:
  void check_input(long rows) const {
    if (rows != input_width())
      throw InputError("network input width mismatch: expected " + std::to_string(input_width()) + ", got " +
                       std::to_string(rows));
  }

  Eigen::MatrixXd affine(int layer, const Eigen::MatrixXd& h) const {
    Eigen::MatrixXd a = weight(layer) * h;
    a.colwise() += bias(layer);
    return a;
  }

  void accumulate(Eigen::VectorXd& grad, int layer, const Eigen::MatrixXd& delta, const Eigen::MatrixXd& x) const {
    auto gw = Eigen::Map<RowMatrix>(grad.data() + weight_offset(layer), widths_[layer + 1], widths_[layer]);
    gw.noalias() += delta * x.transpose();
    Eigen::Map<Eigen::VectorXd>(grad.data() + bias_offset(layer), widths_[layer + 1]) += delta.rowwise().sum();
  }

  // Greedy grouping: with the residual flag, two consecutive square layers of
  // equal width form a block. The final layer is always the output.
  void build_plan() {
    plan_.clear();
    const int layers = layer_count();
    int l = 0;
    while (l < layers - 1) {
      const bool block = residual_ && l + 2 < layers && widths_[l] == widths_[l + 1] && widths_[l + 1] == widths_[l + 2];
      if (block) {
        plan_.push_back({Stage::Kind::Residual, l});
        l += 2;
      } else {
        plan_.push_back({Stage::Kind::Dense, l});
        l += 1;
      }
    }
    plan_.push_back({Stage::Kind::Output, layers - 1});
  }

  std::vector<int> widths_;
  Activation activation_ = Activation::Identity;
  bool residual_ = false;
  std::vector<long> offsets_;
  Eigen::VectorXd params_;
  std::vector<Stage> plan_;
  std::map<std::string, std::string> metadata_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_size(long n, double learning_rate) {
    AdamState s;
    s.first_moment = Eigen::VectorXd::Zero(n);
    s.second_moment = Eigen::VectorXd::Zero(n);
    s.learning_rate = learning_rate;
    return s;
  }
};

/// Bias-corrected Adam update of params in place.
inline void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads) {
  ::v2s::detail::require(grads.size() == params.size() && state.first_moment.size() == params.size() &&
                             state.second_moment.size() == params.size(),
                         "Adam buffer shape mismatch");
  if (!grads.allFinite()) throw NumericalError("non-finite gradient at Adam step " + std::to_string(state.step));
  ++state.step;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

inline void adam_step(AdamState& state, Mlp& model, const Eigen::VectorXd& grads) {
  adam_step(state, model.parameters(), grads);
}

// ---------------------------------------------------------------------------
// Positional encoding

/// Frequencies pi * 2^(l * s) for l = 0..levels-1. s = 1 (integer octaves)
/// until levels exceeds max_octave + 1; beyond that the octaves are spread
/// evenly over [0, max_octave].
struct EncodingConfig {
  int width = 512;
  double max_octave = 8.0;

  int levels() const { return width / 6; }
  double octave_step() const {
    const int l = levels();
    if (l <= 1) return 1.0;
    return std::min(1.0, max_octave / static_cast<double>(l - 1));
  }
};

/// Layout: for each coordinate d, for each level l: sin, cos. Widths that are
/// not a multiple of 6 are zero-padded at the end.
inline Eigen::VectorXd positional_encode(const Eigen::Vector3d& x, const EncodingConfig& config) {
  if (config.width < 6) throw InputError("positional encoding width must be at least 6");
  const int levels = config.levels();
  const double step = config.octave_step();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(config.width);
  int idx = 0;
  for (int d = 0; d < 3; ++d) {
    for (int l = 0; l < levels; ++l) {
      const double f = std::numbers::pi * std::exp2(step * l);
      out[idx++] = std::sin(f * x[d]);
      out[idx++] = std::cos(f * x[d]);
    }
  }
  return out;
}

inline Eigen::VectorXd positional_encode(const Eigen::Vector3d& x, int target_width) {
  return positional_encode(x, EncodingConfig{target_width, 8.0});
}

/// Column-wise encoding of a 3 x B batch.
inline Eigen::MatrixXd positional_encode_batch(const Eigen::Matrix3Xd& x, const EncodingConfig& config) {
  Eigen::MatrixXd out(config.width, x.cols());
  for (long b = 0; b < x.cols(); ++b) out.col(b) = positional_encode(x.col(b), config);
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "V2SMLP1\0", u32 layer count, u32 widths[L+1], u32 activation,
// u32 residual flag, u32 metadata byte count, metadata ("key=value\n" lines),
// then f64 parameters, layer by layer, weights row-major then biases.

inline constexpr char kModelMagic[] = "V2SMLP1";

inline void save_model(const Mlp& model, std::ostream& out) {
  using ::v2s::detail::write_le;
  out.write(kModelMagic, sizeof(kModelMagic));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.layer_count()));
  for (int w : model.widths()) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.activation()));
  write_le<std::uint32_t>(out, model.residual() ? 1u : 0u);
  std::string meta;
  for (const auto& [k, v] : model.metadata()) {
    ::v2s::detail::require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
                           "metadata keys/values must not contain '=' or newlines");
    meta += k + "=" + v + "\n";
  }
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  const auto& p = model.parameters();
  for (long i = 0; i < p.size(); ++i) write_le<double>(out, p[i]);
}

inline void save_model(const Mlp& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write model file: " + path);
  save_model(model, out);
  if (!out) throw InputError("failed writing model file: " + path);
}

inline Mlp load_model(std::istream& in) {
  using ::v2s::detail::read_le;
  ::v2s::detail::expect_magic(in, kModelMagic, sizeof(kModelMagic));
  const auto layers = read_le<std::uint32_t>(in, "layer count");
  if (layers == 0 || layers > 4096) throw InputError("implausible layer count in model file");
  std::vector<int> widths(layers + 1);
  for (auto& w : widths) w = static_cast<int>(read_le<std::uint32_t>(in, "widths"));
  const auto act = read_le<std::uint32_t>(in, "activation");
  if (act > 2) throw InputError("unknown activation code " + std::to_string(act));
  const auto residual = read_le<std::uint32_t>(in, "residual flag");
  Mlp model(widths, static_cast<Activation>(act), residual != 0);
  const auto meta_len = read_le<std::uint32_t>(in, "metadata length");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  if (!in) throw InputError("truncated model metadata");
  std::istringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("malformed metadata line: " + line);
    model.metadata()[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto& p = model.parameters();
  for (long i = 0; i < p.size(); ++i) p[i] = read_le<double>(in, "parameters");
  if (!p.allFinite()) throw InputError("model file contains non-finite parameters");
  return model;
}

inline Mlp load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open model file: " + path);
  return load_model(in);
}

}  // namespace v2s::nn

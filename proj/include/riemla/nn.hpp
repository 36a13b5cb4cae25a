#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "riemla/rng.hpp"

namespace riemla {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeightMap = Eigen::Map<const RowMajorMatrix>;
using WeightMap = Eigen::Map<RowMajorMatrix>;

/// Fully connected tanh network, fixed layout.
///
/// layer_widths = [D, h1, ..., C]; hidden activations are tanh, the output
/// layer is linear (logits for classification, means for regression).
///
/// Parameter flattening order (shared by every module that indexes into a
/// flat parameter vector): for each layer l in order, the weight matrix
/// W_l (out x in, row-major) followed by the bias b_l (out).
struct MlpArchitecture {
  std::vector<int> layer_widths;

  MlpArchitecture() = default;
  explicit MlpArchitecture(std::vector<int> widths) : layer_widths(std::move(widths)) {
    validate();
  }

  void validate() const {
    if (layer_widths.size() < 2)
      throw std::invalid_argument("MlpArchitecture: need at least input and output widths");
    for (int w : layer_widths)
      if (w <= 0) throw std::invalid_argument("MlpArchitecture: all layer widths must be positive");
  }

  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  int num_layers() const { return static_cast<int>(layer_widths.size()) - 1; }

  int param_count() const {
    int k = 0;
    for (int l = 0; l < num_layers(); ++l)
      k += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
    return k;
  }

  int weight_offset(int layer) const {
    int off = 0;
    for (int l = 0; l < layer; ++l)
      off += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
    return off;
  }
  int bias_offset(int layer) const {
    return weight_offset(layer) + layer_widths[layer] * layer_widths[layer + 1];
  }

  ConstWeightMap weights(const Vector& theta, int layer) const {
    return ConstWeightMap(theta.data() + weight_offset(layer),
                          layer_widths[layer + 1], layer_widths[layer]);
  }
  Eigen::Map<const Vector> bias(const Vector& theta, int layer) const {
    return Eigen::Map<const Vector>(theta.data() + bias_offset(layer), layer_widths[layer + 1]);
  }
  WeightMap weights(Vector& theta, int layer) const {
    return WeightMap(theta.data() + weight_offset(layer),
                     layer_widths[layer + 1], layer_widths[layer]);
  }
  Eigen::Map<Vector> bias(Vector& theta, int layer) const {
    return Eigen::Map<Vector>(theta.data() + bias_offset(layer), layer_widths[layer + 1]);
  }

  bool operator==(const MlpArchitecture& other) const {
    return layer_widths == other.layer_widths;
  }
};

/// A batch of inputs with optional targets. Regression targets are an N x C
/// matrix; classification targets are integer class indices in [0, C).
struct BatchInput {
  Matrix inputs;             // N x D
  Matrix targets;            // N x C, empty unless regression
  std::vector<int> labels;   // size N, empty unless classification

  long size() const { return inputs.rows(); }
  bool has_targets() const { return targets.size() > 0; }
  bool has_labels() const { return !labels.empty(); }
};

namespace detail {

inline void check_input_dims(const MlpArchitecture& arch, const Matrix& x) {
  if (x.cols() != arch.input_dim()) {
    std::ostringstream msg;
    msg << "forward: input feature axis has " << x.cols() << " columns, architecture expects "
        << arch.input_dim();
    throw std::invalid_argument(msg.str());
  }
  if (x.rows() < 1) throw std::invalid_argument("forward: batch axis is empty (N must be >= 1)");
}

inline void check_param_count(const MlpArchitecture& arch, const Vector& theta, const char* who) {
  if (theta.size() != arch.param_count()) {
    std::ostringstream msg;
    msg << who << ": parameter vector has length " << theta.size() << ", architecture requires K="
        << arch.param_count();
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace detail

/// Activations of every layer for one batch; acts[0] is the input, acts.back()
/// the linear network output.
struct ForwardPass {
  std::vector<Matrix> acts;
  const Matrix& output() const { return acts.back(); }
};

inline ForwardPass forward_pass(const MlpArchitecture& arch, const Vector& theta, const Matrix& x) {
  detail::check_input_dims(arch, x);
  detail::check_param_count(arch, theta, "forward");
  ForwardPass fp;
  fp.acts.resize(arch.num_layers() + 1);
  fp.acts[0] = x;
  for (int l = 0; l < arch.num_layers(); ++l) {
    auto W = arch.weights(theta, l);
    auto b = arch.bias(theta, l);
    Matrix z = fp.acts[l] * W.transpose();
    z.rowwise() += b.transpose();
    if (l + 1 < arch.num_layers())
      fp.acts[l + 1] = z.array().tanh().matrix();
    else
      fp.acts[l + 1] = std::move(z);
  }
  return fp;
}

/// Raw network outputs (logits / means) for a batch.
inline Matrix forward(const MlpArchitecture& arch, const Vector& theta, const Matrix& x) {
  return forward_pass(arch, theta, x).acts.back();
}

inline Matrix forward(const MlpArchitecture& arch, const Vector& theta, const BatchInput& batch) {
  return forward(arch, theta, batch.inputs);
}

/// Reverse pass: given d(loss)/d(output) for each row, accumulate the gradient
/// with respect to the flattened parameters. Pure data term; no prior.
inline Vector backprop_params(const MlpArchitecture& arch, const Vector& theta,
                              const ForwardPass& fp, const Matrix& delta_out) {
  Vector grad = Vector::Zero(arch.param_count());
  Matrix delta = delta_out;  // N x w_{l+1}
  for (int l = arch.num_layers() - 1; l >= 0; --l) {
    auto W = arch.weights(theta, l);
    WeightMap gW(grad.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);
    gW = delta.transpose() * fp.acts[l];
    Eigen::Map<Vector> gb(grad.data() + arch.bias_offset(l), arch.layer_widths[l + 1]);
    gb = delta.colwise().sum().transpose();
    if (l > 0) {
      // tanh'(z) = 1 - a^2 with a the stored activation
      Matrix back = delta * W;
      delta = (back.array() * (1.0 - fp.acts[l].array().square())).matrix();
    }
  }
  return grad;
}

/// Jacobian-vector product of the network outputs with respect to the
/// parameters: returns d f_theta(x) / d theta applied to direction u, for the
/// whole batch at once (N x C). Reuses the forward activations at theta.
inline Matrix output_jvp(const MlpArchitecture& arch, const Vector& theta, const ForwardPass& fp,
                         const Vector& u) {
  detail::check_param_count(arch, u, "output_jvp direction");
  const long n = fp.acts[0].rows();
  Matrix a_dot = Matrix::Zero(n, arch.input_dim());
  for (int l = 0; l < arch.num_layers(); ++l) {
    auto W = arch.weights(theta, l);
    ConstWeightMap Wd(u.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);
    Eigen::Map<const Vector> bd(u.data() + arch.bias_offset(l), arch.layer_widths[l + 1]);
    Matrix z_dot = a_dot * W.transpose() + fp.acts[l] * Wd.transpose();
    z_dot.rowwise() += bd.transpose();
    if (l + 1 < arch.num_layers())
      a_dot = (z_dot.array() * (1.0 - fp.acts[l + 1].array().square())).matrix();
    else
      a_dot = std::move(z_dot);
  }
  return a_dot;
}

/// Vector-Jacobian product: sum_n J(x_n)^T w_n for per-row cotangents w
/// (N x C). This is a plain reverse pass seeded at the outputs.
inline Vector output_vjp(const MlpArchitecture& arch, const Vector& theta, const ForwardPass& fp,
                         const Matrix& w) {
  return backprop_params(arch, theta, fp, w);
}

/// C x K Jacobian of the network outputs for a single input row.
/// Row c holds the gradient of output c with respect to theta.
inline Matrix network_jacobian(const MlpArchitecture& arch, const Vector& theta,
                               const Eigen::RowVectorXd& x) {
  Matrix xin = x;
  ForwardPass fp = forward_pass(arch, theta, xin);
  const int c_out = arch.output_dim();
  Matrix jac(c_out, arch.param_count());
  for (int c = 0; c < c_out; ++c) {
    Matrix seed = Matrix::Zero(1, c_out);
    seed(0, c) = 1.0;
    jac.row(c) = backprop_params(arch, theta, fp, seed).transpose();
  }
  return jac;
}

/// Standard init: W ~ N(0, 1/fan_in), b = 0. Deterministic from the seed.
inline Vector init_params(const MlpArchitecture& arch, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, 0x1817);
  Vector theta = Vector::Zero(arch.param_count());
  for (int l = 0; l < arch.num_layers(); ++l) {
    double scale = 1.0 / std::sqrt(static_cast<double>(arch.layer_widths[l]));
    auto W = arch.weights(theta, l);
    for (int r = 0; r < W.rows(); ++r)
      for (int c = 0; c < W.cols(); ++c) W(r, c) = scale * rng.normal();
  }
  return theta;
}

}  // namespace riemla

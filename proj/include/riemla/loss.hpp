#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "riemla/nn.hpp"
#include "riemla/rng.hpp"

namespace riemla {

enum class LikelihoodKind { gaussian, categorical };

struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::gaussian;
  double sigma2 = 1.0;

  static Likelihood gaussian(double sigma2) {
    if (sigma2 <= 0.0) throw std::invalid_argument("Likelihood: sigma2 must be positive");
    return Likelihood{LikelihoodKind::gaussian, sigma2};
  }
  static Likelihood categorical() { return Likelihood{LikelihoodKind::categorical, 1.0}; }
};

enum class LossMode { plain, linearized };

/// Bundles everything needed to evaluate the regularized training loss
///   L(theta) = scale * (data NLL) + (alpha/2) ||theta||^2
/// and its derivatives. Immutable after construction; all evaluation entry
/// points are const and safe to call concurrently.
///
/// In linearized mode the data term is evaluated on
///   f_lin(x) = f_anchor(x) + J(x) (theta - anchor),
/// with J applied matrix-free through tangent passes at the anchor.
///
/// `scale` carries the N/B factor of a mini-batch context; the prior term is
/// global and never scaled. `data_weight` is 1 except for the degenerate
/// constant-loss context used to exercise flat-manifold behavior.
struct LossContext {
  MlpArchitecture arch;
  BatchInput data;
  Likelihood likelihood;
  double prior_precision = 1.0;
  LossMode mode = LossMode::plain;
  double scale = 1.0;
  double data_weight = 1.0;
  Vector anchor;            // linearized mode only
  ForwardPass anchor_pass;  // activations at the anchor on data.inputs
  std::vector<int> batch_indices;  // set by make_minibatch_ctx

  long data_size() const { return data.size(); }
  bool is_constant() const { return data_weight == 0.0; }
  bool is_classification() const { return likelihood.kind == LikelihoodKind::categorical; }
};

namespace detail {

inline void validate_targets(const MlpArchitecture& arch, const BatchInput& data,
                             const Likelihood& lik) {
  const int c_out = arch.output_dim();
  if (lik.kind == LikelihoodKind::gaussian) {
    if (data.targets.rows() != data.inputs.rows() || data.targets.cols() != c_out)
      throw std::invalid_argument("LossContext: gaussian likelihood needs N x C real targets");
  } else {
    if (static_cast<long>(data.labels.size()) != data.inputs.rows())
      throw std::invalid_argument("LossContext: categorical likelihood needs N class labels");
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (data.labels[i] < 0 || data.labels[i] >= c_out) {
        std::ostringstream msg;
        msg << "LossContext: label " << data.labels[i] << " at row " << i << " outside [0, "
            << c_out << ")";
        throw std::invalid_argument(msg.str());
      }
  }
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (long n = 0; n < p.rows(); ++n) {
    double m = p.row(n).maxCoeff();
    p.row(n) = (p.row(n).array() - m).exp().matrix();
    p.row(n) /= p.row(n).sum();
  }
  return p;
}

constexpr double kLogSqrt2Pi = 0.9189385332046727;  // log(sqrt(2*pi))

/// Data NLL of raw outputs F under the likelihood (no scale, no prior).
inline double data_nll(const LossContext& ctx, const Matrix& f) {
  if (ctx.likelihood.kind == LikelihoodKind::gaussian) {
    const double s2 = ctx.likelihood.sigma2;
    double sse = (f - ctx.data.targets).squaredNorm();
    double norm_const = static_cast<double>(f.rows()) * f.cols() *
                        (0.5 * std::log(s2) + kLogSqrt2Pi);
    return sse / (2.0 * s2) + norm_const;
  }
  double nll = 0.0;
  for (long n = 0; n < f.rows(); ++n) {
    double m = f.row(n).maxCoeff();
    double lse = m + std::log((f.row(n).array() - m).exp().sum());
    nll += lse - f(n, ctx.data.labels[static_cast<std::size_t>(n)]);
  }
  return nll;
}

/// d(data NLL)/d(outputs), rowwise.
inline Matrix data_nll_delta(const LossContext& ctx, const Matrix& f) {
  if (ctx.likelihood.kind == LikelihoodKind::gaussian)
    return (f - ctx.data.targets) / ctx.likelihood.sigma2;
  Matrix delta = softmax_rows(f);
  for (long n = 0; n < f.rows(); ++n) delta(n, ctx.data.labels[static_cast<std::size_t>(n)]) -= 1.0;
  return delta;
}

/// Tangent of the delta above along an output tangent f_dot.
inline Matrix data_nll_delta_tangent(const LossContext& ctx, const Matrix& f, const Matrix& f_dot) {
  if (ctx.likelihood.kind == LikelihoodKind::gaussian) return f_dot / ctx.likelihood.sigma2;
  // d(softmax)/dz applied rowwise: p .* q - p * <p, q>
  Matrix p = softmax_rows(f);
  Matrix pq = (p.array() * f_dot.array()).matrix();
  Vector row_dot = pq.rowwise().sum();
  return (pq.array() - p.array().colwise() * row_dot.array()).matrix();
}

inline void check_finite_outputs(const LossContext& ctx, const Matrix& f, const Vector& theta) {
  if (f.allFinite()) return;
  long bad_row = 0;
  for (long n = 0; n < f.rows(); ++n)
    if (!f.row(n).allFinite()) {
      bad_row = n;
      break;
    }
  std::ostringstream msg;
  msg << "loss evaluation overflowed: non-finite network output at data index " << bad_row
      << " (||theta|| = " << theta.norm() << ")";
  throw std::runtime_error(msg.str());
}

/// Outputs of the model the context evaluates: plain forward, or the
/// first-order model around the anchor.
inline Matrix context_outputs(const LossContext& ctx, const Vector& theta) {
  if (ctx.mode == LossMode::plain) return forward(ctx.arch, theta, ctx.data.inputs);
  Vector d = theta - ctx.anchor;
  return ctx.anchor_pass.output() + output_jvp(ctx.arch, ctx.anchor, ctx.anchor_pass, d);
}

}  // namespace detail

inline LossContext make_loss_context(const MlpArchitecture& arch, BatchInput data,
                                     const Likelihood& likelihood, double prior_precision) {
  arch.validate();
  if (prior_precision <= 0.0)
    throw std::invalid_argument("LossContext: prior precision alpha must be positive");
  if (data.size() < 1) throw std::invalid_argument("LossContext: need at least one data point");
  detail::validate_targets(arch, data, likelihood);
  LossContext ctx;
  ctx.arch = arch;
  ctx.data = std::move(data);
  ctx.likelihood = likelihood;
  ctx.prior_precision = prior_precision;
  return ctx;
}

/// Same data and likelihood, but the data term is evaluated on the model
/// linearized around `anchor`.
inline LossContext make_linearized_context(const LossContext& base, const Vector& anchor) {
  detail::check_param_count(base.arch, anchor, "make_linearized_context");
  LossContext ctx = base;
  ctx.mode = LossMode::linearized;
  ctx.anchor = anchor;
  ctx.anchor_pass = forward_pass(ctx.arch, anchor, ctx.data.inputs);
  return ctx;
}

/// Degenerate context with identically zero loss (and zero gradient): the
/// associated pullback metric is Euclidean everywhere. Test/diagnostic hook.
inline LossContext constant_loss_context(const MlpArchitecture& arch) {
  LossContext ctx;
  ctx.arch = arch;
  ctx.data.inputs = Matrix::Zero(1, arch.input_dim());
  ctx.data.targets = Matrix::Zero(1, arch.output_dim());
  ctx.likelihood = Likelihood::gaussian(1.0);
  ctx.prior_precision = 0.0;  // no prior: L == 0 for every theta
  ctx.data_weight = 0.0;
  return ctx;
}

inline LossContext with_prior_precision(const LossContext& base, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("with_prior_precision: alpha must be positive");
  LossContext ctx = base;
  ctx.prior_precision = alpha;
  return ctx;
}

inline LossContext with_sigma2(const LossContext& base, double sigma2) {
  if (base.likelihood.kind != LikelihoodKind::gaussian)
    throw std::invalid_argument("with_sigma2: context is not Gaussian");
  LossContext ctx = base;
  ctx.likelihood.sigma2 = sigma2;
  return ctx;
}

/// L(theta) = scale * NLL(data | theta) + (alpha/2) ||theta||^2.
/// The Gaussian NLL keeps its sigma-dependent normalization constant so that
/// marginal-likelihood optimization of sigma is well-posed.
inline double loss_value(const LossContext& ctx, const Vector& theta) {
  detail::check_param_count(ctx.arch, theta, "loss_value");
  double prior = 0.5 * ctx.prior_precision * theta.squaredNorm();
  if (ctx.is_constant()) return prior;
  Matrix f = detail::context_outputs(ctx, theta);
  detail::check_finite_outputs(ctx, f, theta);
  double value = ctx.scale * ctx.data_weight * detail::data_nll(ctx, f) + prior;
  if (!std::isfinite(value)) throw std::runtime_error("loss_value: non-finite loss");
  return value;
}

/// Gradient of L, including the prior term alpha * theta.
inline Vector loss_gradient(const LossContext& ctx, const Vector& theta) {
  detail::check_param_count(ctx.arch, theta, "loss_gradient");
  if (ctx.is_constant()) return ctx.prior_precision * theta;
  Vector grad;
  if (ctx.mode == LossMode::plain) {
    ForwardPass fp = forward_pass(ctx.arch, theta, ctx.data.inputs);
    detail::check_finite_outputs(ctx, fp.output(), theta);
    Matrix delta = detail::data_nll_delta(ctx, fp.output());
    grad = ctx.scale * ctx.data_weight * backprop_params(ctx.arch, theta, fp, delta);
  } else {
    Matrix f = detail::context_outputs(ctx, theta);
    detail::check_finite_outputs(ctx, f, theta);
    Matrix delta = detail::data_nll_delta(ctx, f);
    grad = ctx.scale * ctx.data_weight *
           output_vjp(ctx.arch, ctx.anchor, ctx.anchor_pass, delta);
  }
  grad += ctx.prior_precision * theta;
  if (!grad.allFinite()) throw std::runtime_error("loss_gradient: non-finite gradient");
  return grad;
}

namespace detail {

/// Forward-over-reverse pass for the plain loss: propagates a parameter
/// tangent v through the forward and backward sweeps, yielding the loss
/// gradient and the exact Hessian-vector product H[L] v in one traversal.
inline std::pair<Vector, Vector> plain_gradient_and_hvp(const LossContext& ctx,
                                                        const Vector& theta, const Vector& v) {
  const MlpArchitecture& arch = ctx.arch;
  const int layers = arch.num_layers();
  const long n = ctx.data.inputs.rows();

  std::vector<Matrix> acts(layers + 1), acts_dot(layers + 1);
  acts[0] = ctx.data.inputs;
  acts_dot[0] = Matrix::Zero(n, arch.input_dim());
  for (int l = 0; l < layers; ++l) {
    auto W = arch.weights(theta, l);
    auto b = arch.bias(theta, l);
    ConstWeightMap Wd(v.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);
    Eigen::Map<const Vector> bd(v.data() + arch.bias_offset(l), arch.layer_widths[l + 1]);
    Matrix z = acts[l] * W.transpose();
    z.rowwise() += b.transpose();
    Matrix z_dot = acts_dot[l] * W.transpose() + acts[l] * Wd.transpose();
    z_dot.rowwise() += bd.transpose();
    if (l + 1 < layers) {
      acts[l + 1] = z.array().tanh().matrix();
      acts_dot[l + 1] = (z_dot.array() * (1.0 - acts[l + 1].array().square())).matrix();
    } else {
      acts[l + 1] = std::move(z);
      acts_dot[l + 1] = std::move(z_dot);
    }
  }
  check_finite_outputs(ctx, acts[layers], theta);

  Matrix delta = data_nll_delta(ctx, acts[layers]);
  Matrix delta_dot = data_nll_delta_tangent(ctx, acts[layers], acts_dot[layers]);

  Vector grad = Vector::Zero(arch.param_count());
  Vector hv = Vector::Zero(arch.param_count());
  for (int l = layers - 1; l >= 0; --l) {
    auto W = arch.weights(theta, l);
    ConstWeightMap Wd(v.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);

    WeightMap gW(grad.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);
    gW = delta.transpose() * acts[l];
    Eigen::Map<Vector> gb(grad.data() + arch.bias_offset(l), arch.layer_widths[l + 1]);
    gb = delta.colwise().sum().transpose();

    WeightMap hW(hv.data() + arch.weight_offset(l), arch.layer_widths[l + 1], arch.layer_widths[l]);
    hW = delta_dot.transpose() * acts[l] + delta.transpose() * acts_dot[l];
    Eigen::Map<Vector> hb(hv.data() + arch.bias_offset(l), arch.layer_widths[l + 1]);
    hb = delta_dot.colwise().sum().transpose();

    if (l > 0) {
      Matrix s = (1.0 - acts[l].array().square()).matrix();
      Matrix back = delta * W;
      Matrix back_dot = delta_dot * W + delta * Wd;
      delta = (back.array() * s.array()).matrix();
      delta_dot = (back_dot.array() * s.array() -
                   2.0 * back.array() * acts[l].array() * acts_dot[l].array()).matrix();
    }
  }
  const double w = ctx.scale * ctx.data_weight;
  grad = w * grad + ctx.prior_precision * theta;
  hv = w * hv + ctx.prior_precision * v;
  return {std::move(grad), std::move(hv)};
}

inline std::pair<Vector, Vector> linearized_gradient_and_hvp(const LossContext& ctx,
                                                             const Vector& theta, const Vector& v) {
  Matrix f = context_outputs(ctx, theta);
  check_finite_outputs(ctx, f, theta);
  Matrix delta = data_nll_delta(ctx, f);
  Matrix jv = output_jvp(ctx.arch, ctx.anchor, ctx.anchor_pass, v);
  Matrix delta_dot = data_nll_delta_tangent(ctx, f, jv);
  const double w = ctx.scale * ctx.data_weight;
  Vector grad = w * output_vjp(ctx.arch, ctx.anchor, ctx.anchor_pass, delta) +
                ctx.prior_precision * theta;
  Vector hv = w * output_vjp(ctx.arch, ctx.anchor, ctx.anchor_pass, delta_dot) +
              ctx.prior_precision * v;
  return {std::move(grad), std::move(hv)};
}

}  // namespace detail

/// Gradient and exact Hessian-vector product at theta, sharing one pass.
/// This is the geodesic right-hand side workhorse.
inline std::pair<Vector, Vector> loss_gradient_and_hvp(const LossContext& ctx, const Vector& theta,
                                                       const Vector& v) {
  detail::check_param_count(ctx.arch, theta, "loss_gradient_and_hvp");
  detail::check_param_count(ctx.arch, v, "loss_gradient_and_hvp direction");
  if (ctx.is_constant())
    return {ctx.prior_precision * theta, ctx.prior_precision * v};
  auto result = ctx.mode == LossMode::plain ? detail::plain_gradient_and_hvp(ctx, theta, v)
                                            : detail::linearized_gradient_and_hvp(ctx, theta, v);
  if (!result.first.allFinite() || !result.second.allFinite())
    throw std::runtime_error("loss_gradient_and_hvp: non-finite result");
  return result;
}

/// H[L](theta) v, matrix-free.
inline Vector hvp(const LossContext& ctx, const Vector& theta, const Vector& v) {
  return loss_gradient_and_hvp(ctx, theta, v).second;
}

/// Gradient of the linearized loss (context must be in linearized mode).
inline Vector linearized_loss_gradient(const LossContext& ctx, const Vector& theta) {
  if (ctx.mode != LossMode::linearized)
    throw std::invalid_argument("linearized_loss_gradient: context is not linearized");
  return loss_gradient(ctx, theta);
}

/// HVP of the linearized loss; constant in theta for Gaussian likelihoods.
inline Vector linearized_hvp(const LossContext& ctx, const Vector& theta, const Vector& v) {
  if (ctx.mode != LossMode::linearized)
    throw std::invalid_argument("linearized_hvp: context is not linearized");
  return hvp(ctx, theta, v);
}

inline constexpr int kDenseHessianLimit = 4096;

/// Dense K x K Hessian assembled column-by-column from HVPs with basis
/// vectors, then symmetrized. Test and desk-scale path only.
inline Matrix hessian_dense(const LossContext& ctx, const Vector& theta,
                            int dense_limit = kDenseHessianLimit) {
  const int k = ctx.arch.param_count();
  if (k > dense_limit) {
    std::ostringstream msg;
    msg << "hessian_dense: K=" << k << " exceeds the dense limit " << dense_limit;
    throw std::invalid_argument(msg.str());
  }
  Matrix h(k, k);
  Vector e = Vector::Zero(k);
  for (int i = 0; i < k; ++i) {
    e(i) = 1.0;
    h.col(i) = hvp(ctx, theta, e);
    e(i) = 0.0;
  }
  double scale_ref = std::max(1.0, h.cwiseAbs().maxCoeff());
  double asym = (h - h.transpose()).cwiseAbs().maxCoeff() / scale_ref;
  if (asym >= 1e-7) {
    std::ostringstream msg;
    msg << "hessian_dense: asymmetry " << asym << " before averaging exceeds 1e-7";
    throw std::runtime_error(msg.str());
  }
  return 0.5 * (h + h.transpose());
}

/// Label-stratified mini-batch context with scale = N/B. The prior term is
/// global and stays unscaled. Batch membership is recorded and the draw is a
/// pure function of the rng stream.
inline LossContext make_minibatch_ctx(const LossContext& ctx, int batch_size, Rng& rng) {
  const long n = ctx.data_size();
  if (batch_size < 1 || batch_size > n) {
    std::ostringstream msg;
    msg << "make_minibatch_ctx: batch size " << batch_size << " outside [1, " << n << "]";
    throw std::invalid_argument(msg.str());
  }

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(batch_size));
  if (ctx.is_classification()) {
    const int c_out = ctx.arch.output_dim();
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(c_out));
    for (long i = 0; i < n; ++i)
      by_class[static_cast<std::size_t>(ctx.data.labels[static_cast<std::size_t>(i)])].push_back(
          static_cast<int>(i));
    // proportional allocation, largest remainder first
    std::vector<int> take(static_cast<std::size_t>(c_out), 0);
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (int c = 0; c < c_out; ++c) {
      double exact = static_cast<double>(batch_size) * by_class[c].size() / static_cast<double>(n);
      take[c] = static_cast<int>(std::floor(exact));
      take[c] = std::min<int>(take[c], static_cast<int>(by_class[c].size()));
      assigned += take[c];
      remainders.push_back({exact - std::floor(exact), c});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t i = 0; assigned < batch_size; i = (i + 1) % remainders.size()) {
      int c = remainders[i].second;
      if (take[c] < static_cast<int>(by_class[c].size())) {
        ++take[c];
        ++assigned;
      }
    }
    for (int c = 0; c < c_out; ++c) {
      rng.shuffle(by_class[c]);
      chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + take[c]);
    }
  } else {
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    chosen.assign(all.begin(), all.begin() + batch_size);
  }
  std::sort(chosen.begin(), chosen.end());

  LossContext sub = ctx;
  sub.data.inputs.resize(batch_size, ctx.data.inputs.cols());
  if (ctx.data.has_targets()) sub.data.targets.resize(batch_size, ctx.data.targets.cols());
  sub.data.labels.clear();
  for (int i = 0; i < batch_size; ++i) {
    sub.data.inputs.row(i) = ctx.data.inputs.row(chosen[static_cast<std::size_t>(i)]);
    if (ctx.data.has_targets())
      sub.data.targets.row(i) = ctx.data.targets.row(chosen[static_cast<std::size_t>(i)]);
    if (ctx.data.has_labels())
      sub.data.labels.push_back(ctx.data.labels[static_cast<std::size_t>(chosen[static_cast<std::size_t>(i)])]);
  }
  if (ctx.mode == LossMode::linearized) {
    // anchor activations are per-row; reuse the cached pass on the subset
    for (std::size_t l = 0; l < ctx.anchor_pass.acts.size(); ++l) {
      Matrix rows(batch_size, ctx.anchor_pass.acts[l].cols());
      for (int i = 0; i < batch_size; ++i)
        rows.row(i) = ctx.anchor_pass.acts[l].row(chosen[static_cast<std::size_t>(i)]);
      sub.anchor_pass.acts[l] = std::move(rows);
    }
  }
  sub.scale = ctx.scale * static_cast<double>(n) / static_cast<double>(batch_size);
  sub.batch_indices = std::move(chosen);
  return sub;
}

}  // namespace riemla

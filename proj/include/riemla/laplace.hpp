#pragma once

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "riemla/loss.hpp"

namespace riemla {

enum class OptimizerKind { gd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  int epochs = 1000;
  double momentum = 0.0;   // gd only
  bool cosine_decay = false;
  int trace_every = 0;     // 0: auto (~200 trace points)
};

struct MapEstimate {
  Vector theta;
  double final_loss = 0.0;
  double grad_norm = 0.0;
  bool stationary = false;  // grad_norm < 1e-3 sqrt(K)
  std::vector<std::pair<int, double>> trace;
};

enum class HessianKind { exact, ggn };

class NotPositiveDefiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Full-batch MAP training. Weight decay is realized through the prior term
/// inside the context gradient and never duplicated in the optimizer.
inline MapEstimate train_map_from(const LossContext& ctx, Vector theta,
                                  const OptimizerConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("train_map: epochs must be positive");
  if (cfg.lr <= 0.0) throw std::invalid_argument("train_map: lr must be positive");

  const int k = ctx.arch.param_count();
  Vector vel = Vector::Zero(k);            // gd momentum
  Vector m = Vector::Zero(k), s = Vector::Zero(k);  // adam moments
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  MapEstimate est;
  const int stride = cfg.trace_every > 0 ? cfg.trace_every : std::max(1, cfg.epochs / 200);
  double last_finite_loss = loss_value(ctx, theta);
  est.trace.push_back({0, last_finite_loss});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Vector grad;
    double value;
    try {
      grad = loss_gradient(ctx, theta);
      value = loss_value(ctx, theta);
    } catch (const std::runtime_error&) {
      std::ostringstream msg;
      msg << "train_map: loss diverged; last finite loss " << last_finite_loss << " at epoch "
          << epoch - 1;
      throw std::runtime_error(msg.str());
    }
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "train_map: loss diverged; last finite loss " << last_finite_loss << " at epoch "
          << epoch - 1;
      throw std::runtime_error(msg.str());
    }
    last_finite_loss = value;

    double lr = cfg.lr;
    if (cfg.cosine_decay)
      lr *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * (epoch - 1) / cfg.epochs));
    if (cfg.kind == OptimizerKind::gd) {
      vel = cfg.momentum * vel - lr * grad;
      theta += vel;
    } else {
      m = beta1 * m + (1.0 - beta1) * grad;
      s = beta2 * s + (1.0 - beta2) * grad.cwiseProduct(grad);
      double bc1 = 1.0 - std::pow(beta1, epoch);
      double bc2 = 1.0 - std::pow(beta2, epoch);
      theta -= (lr / bc1) * m.cwiseQuotient(((s / bc2).cwiseSqrt().array() + eps).matrix());
    }
    if (epoch % stride == 0 || epoch == cfg.epochs) {
      double current = std::numeric_limits<double>::quiet_NaN();
      try {
        current = loss_value(ctx, theta);
      } catch (const std::runtime_error&) {
      }
      if (!std::isfinite(current)) {
        std::ostringstream msg;
        msg << "train_map: loss diverged; last finite loss " << last_finite_loss << " at epoch "
            << epoch - 1;
        throw std::runtime_error(msg.str());
      }
      est.trace.push_back({epoch, current});
    }
  }

  est.theta = theta;
  est.final_loss = loss_value(ctx, theta);
  est.grad_norm = loss_gradient(ctx, theta).norm();
  est.stationary = est.grad_norm < 1e-3 * std::sqrt(static_cast<double>(k));
  return est;
}

inline MapEstimate train_map(const LossContext& ctx, std::uint64_t init_seed,
                             const OptimizerConfig& cfg) {
  return train_map_from(ctx, init_params(ctx.arch, init_seed), cfg);
}

/// Generalized Gauss-Newton matrix at theta, including the prior alpha I.
/// Gaussian: scale/sigma^2 sum_n J_n^T J_n + alpha I.
/// Categorical: scale sum_n J_n^T (diag(p_n) - p_n p_n^T) J_n + alpha I.
/// SPD for every alpha > 0 by construction.
inline Matrix ggn_hessian(const LossContext& ctx, const Vector& theta,
                          int dense_limit = kDenseHessianLimit) {
  const int k = ctx.arch.param_count();
  if (k > dense_limit) {
    std::ostringstream msg;
    msg << "ggn_hessian: K=" << k << " exceeds the dense limit " << dense_limit;
    throw std::invalid_argument(msg.str());
  }

  Matrix h = Matrix::Zero(k, k);
  const long n = ctx.data_size();
  Matrix outputs = detail::context_outputs(ctx, theta);
  // The GGN is the exact Hessian of the model linearized at theta, so the
  // Jacobians are taken at the anchor when the context itself is linearized.
  const Vector& jac_point = ctx.mode == LossMode::linearized ? ctx.anchor : theta;
  for (long i = 0; i < n; ++i) {
    Matrix jac = network_jacobian(ctx.arch, jac_point, ctx.data.inputs.row(i));
    if (ctx.likelihood.kind == LikelihoodKind::gaussian) {
      h.noalias() += jac.transpose() * jac / ctx.likelihood.sigma2;
    } else {
      Matrix p_row = detail::softmax_rows(outputs.row(i));
      Vector p = p_row.row(0).transpose();
      Matrix lambda = Matrix(p.asDiagonal()) - p * p.transpose();
      h.noalias() += jac.transpose() * lambda * jac;
    }
  }
  h *= ctx.scale * ctx.data_weight;
  h += ctx.prior_precision * Matrix::Identity(k, k);
  return 0.5 * (h + h.transpose());
}

/// Gaussian posterior N(theta_star, H^{-1}) with H the loss Hessian (exact or
/// GGN) at the MAP. chol_cov is lower triangular with chol_cov chol_cov^T =
/// H^{-1}; samples are theta_star + chol_cov z.
struct LaplacePosterior {
  MlpArchitecture arch;
  Vector theta_star;
  Matrix precision;  // H, SPD
  double alpha = 1.0;
  double sigma2 = 1.0;
  HessianKind hessian_kind = HessianKind::ggn;
  Matrix chol_cov;

  int param_count() const { return arch.param_count(); }
};

inline LaplacePosterior fit_laplace(const LossContext& ctx, const Vector& theta_star,
                                    HessianKind kind) {
  LaplacePosterior post;
  post.arch = ctx.arch;
  post.theta_star = theta_star;
  post.alpha = ctx.prior_precision;
  post.sigma2 = ctx.likelihood.sigma2;
  post.hessian_kind = kind;
  post.precision =
      kind == HessianKind::exact ? hessian_dense(ctx, theta_star) : ggn_hessian(ctx, theta_star);
  post.precision = 0.5 * (post.precision + post.precision.transpose());

  const int k = post.param_count();
  Eigen::LLT<Matrix> llt(post.precision);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError(
        "fit_laplace: Hessian is not positive definite (exact Hessians of nonconvex losses "
        "often are not); use the GGN or a larger prior precision");

  Matrix cov = llt.solve(Matrix::Identity(k, k));
  cov = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Matrix> cov_llt(cov);
  if (cov_llt.info() != Eigen::Success) {
    // fall back with a relative jitter; covariance of an SPD precision can
    // lose definiteness to rounding when badly conditioned
    double jitter = 1e-12 * cov.diagonal().maxCoeff();
    cov.diagonal().array() += jitter;
    cov_llt.compute(cov);
    if (cov_llt.info() != Eigen::Success)
      throw NotPositiveDefiniteError("fit_laplace: covariance factorization failed");
  }
  post.chol_cov = cov_llt.matrixL();

  double residual =
      (post.precision * (post.chol_cov * post.chol_cov.transpose()) - Matrix::Identity(k, k))
          .cwiseAbs()
          .maxCoeff();
  if (residual >= 1e-6) {
    std::ostringstream msg;
    msg << "fit_laplace: ||H (L L^T) - I||_max = " << residual << " exceeds 1e-6";
    throw std::runtime_error(msg.str());
  }
  return post;
}

/// Laplace evidence log p(D) ~= -L(theta_star) + (K/2) log 2 pi +
/// (1/2) log det Sigma with L the full regularized loss including the
/// Gaussian prior normalization -(K/2) log(alpha / 2 pi); the 2 pi terms
/// cancel, leaving
///   -[data NLL + (alpha/2)||theta*||^2] + (K/2) log alpha - (1/2) log det H.
/// Without the (K/2) log alpha term the objective diverges as alpha -> 0
/// whenever the data Hessian is rank deficient, and prior optimization is
/// ill-posed. log det H is read off the Cholesky factor; a candidate H that
/// is not positive definite scores -inf.
inline double log_marginal_likelihood(const LossContext& ctx, const Vector& theta_star,
                                      const Matrix& hessian) {
  const int k = ctx.arch.param_count();
  Eigen::LLT<Matrix> llt(hessian);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  double log_det_h = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  return -loss_value(ctx, theta_star) + 0.5 * k * std::log(ctx.prior_precision) -
         0.5 * log_det_h;
}

struct HyperOptResult {
  double alpha = 1.0;
  std::optional<double> sigma2;  // set for Gaussian likelihoods
  double objective = 0.0;
  std::vector<std::pair<double, double>> alpha_grid;  // (alpha, objective) of the final sweep
};

namespace detail {

/// Cached pieces that let the evidence be re-scored cheaply across the
/// hyperparameter grid: the data Hessian without its prior term, plus the
/// sufficient statistics of the data NLL at theta_star.
struct EvidenceCache {
  Matrix h_data;       // data term of H at sigma2_ref (alpha removed)
  double sigma2_ref;   // sigma2 at which h_data was assembled
  double sse;          // gaussian: ||f - y||^2 at theta_star, unscaled
  double nll_ref;      // categorical: scaled data NLL at theta_star
  double theta_sq;     // ||theta_star||^2
  double scale_weight = 1.0;
  long n_rows = 0;
  int n_cols = 0;
  bool gaussian = false;
  int k = 0;

  double data_nll(double sigma2) const {
    if (!gaussian) return nll_ref;
    return scale_weight *
           (sse / (2.0 * sigma2) +
            static_cast<double>(n_rows) * n_cols * (0.5 * std::log(sigma2) + kLogSqrt2Pi));
  }

  // same expression as log_marginal_likelihood, with H_data reused
  double objective(double alpha, double sigma2) const {
    double loss = data_nll(sigma2) + 0.5 * alpha * theta_sq;
    Matrix h = h_data * (gaussian ? sigma2_ref / sigma2 : 1.0);
    h.diagonal().array() += alpha;
    Eigen::LLT<Matrix> llt(h);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    double log_det_h = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
    return -loss + 0.5 * k * std::log(alpha) - 0.5 * log_det_h;
  }
};

inline EvidenceCache make_evidence_cache(const LossContext& ctx, const Vector& theta_star,
                                         HessianKind kind) {
  EvidenceCache cache;
  cache.gaussian = ctx.likelihood.kind == LikelihoodKind::gaussian;
  cache.sigma2_ref = ctx.likelihood.sigma2;
  cache.k = ctx.arch.param_count();
  cache.theta_sq = theta_star.squaredNorm();
  Matrix f = detail::context_outputs(ctx, theta_star);
  cache.n_rows = f.rows();
  cache.n_cols = static_cast<int>(f.cols());
  cache.scale_weight = ctx.scale * ctx.data_weight;
  if (cache.gaussian)
    cache.sse = (f - ctx.data.targets).squaredNorm();
  else
    cache.nll_ref = detail::data_nll(ctx, f) * cache.scale_weight;

  Matrix h = kind == HessianKind::exact ? hessian_dense(ctx, theta_star)
                                        : ggn_hessian(ctx, theta_star);
  h.diagonal().array() -= ctx.prior_precision;  // strip the prior term
  cache.h_data = 0.5 * (h + h.transpose());
  return cache;
}

/// Golden-section maximization of f over [lo, hi] to absolute tolerance tol.
template <typename F>
double golden_section_max(F&& f, double lo, double hi, double tol) {
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, b = hi;
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + phi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - phi * (b - a);
      f1 = f(x1);
    }
  }
  return f1 > f2 ? x1 : x2;
}

}  // namespace detail

/// Post-hoc evidence maximization at a fixed theta_star: a 41-point grid over
/// log10 alpha in [-4, 4] refined by golden section, alternated (Gaussian
/// case) with the same 1-D search over log10 sigma, for at most 10 rounds or
/// until the objective improves by less than 1e-6. The data Hessian is
/// assembled once and re-used across the grid.
inline HyperOptResult optimize_hyperparameters(const LossContext& ctx, const Vector& theta_star,
                                               HessianKind kind = HessianKind::ggn) {
  detail::EvidenceCache cache = detail::make_evidence_cache(ctx, theta_star, kind);

  constexpr int kGridPoints = 41;
  constexpr double kLogLo = -4.0, kLogHi = 4.0;
  constexpr double kRefineTol = 1e-3;

  double log_alpha = std::log10(ctx.prior_precision);
  double log_sigma = cache.gaussian ? 0.5 * std::log10(ctx.likelihood.sigma2) : 0.0;

  HyperOptResult result;
  double best_obj = -std::numeric_limits<double>::infinity();

  // One grid-plus-golden-section pass over a single log10 variable. The
  // incumbent value stays a candidate so alternation never loses ground.
  auto sweep = [&](auto&& objective_of_log, double& log_var,
                   std::vector<std::pair<double, double>>* grid_out) {
    double best = objective_of_log(log_var);
    double arg = log_var;
    bool grid_all_invalid = true;
    if (grid_out) grid_out->clear();
    for (int i = 0; i < kGridPoints; ++i) {
      double lx = kLogLo + (kLogHi - kLogLo) * i / (kGridPoints - 1);
      double obj = objective_of_log(lx);
      if (std::isfinite(obj)) grid_all_invalid = false;
      if (grid_out) grid_out->push_back({std::pow(10.0, lx), obj});
      if (obj > best) {
        best = obj;
        arg = lx;
      }
    }
    if (grid_all_invalid)
      throw std::runtime_error(
          "optimize_hyperparameters: objective not finite at any grid point");
    double step = (kLogHi - kLogLo) / (kGridPoints - 1);
    double refined = detail::golden_section_max(objective_of_log, arg - step, arg + step,
                                                kRefineTol);
    double refined_obj = objective_of_log(refined);
    log_var = refined_obj >= best ? refined : arg;
    return std::max(refined_obj, best);
  };

  auto obj_at = [&](double la, double ls) {
    return cache.objective(std::pow(10.0, la), std::pow(10.0, 2.0 * ls));
  };

  const int rounds = cache.gaussian ? 10 : 1;
  for (int round = 0; round < rounds; ++round) {
    double obj = sweep([&](double la) { return obj_at(la, log_sigma); }, log_alpha,
                       &result.alpha_grid);
    if (cache.gaussian)
      obj = sweep([&](double ls) { return obj_at(log_alpha, ls); }, log_sigma, nullptr);
    if (obj <= best_obj + 1e-6) {
      best_obj = std::max(best_obj, obj);
      break;
    }
    best_obj = obj;
  }

  result.alpha = std::pow(10.0, log_alpha);
  if (cache.gaussian) result.sigma2 = std::pow(10.0, 2.0 * log_sigma);
  result.objective = best_obj;
  return result;
}

}  // namespace riemla

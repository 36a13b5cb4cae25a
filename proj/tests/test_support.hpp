#pragma once

#include <Eigen/Cholesky>

#include "riemla/loss.hpp"
#include "riemla/rng.hpp"

namespace testsup {

using namespace riemla;

/// Linear-Gaussian model f(x) = Wx + b as a no-hidden-layer net. With the
/// augmented design x~ = (x, 1) everything is available in closed form:
///   L(theta) = ||X~ theta - y||^2 / (2 s2) + (alpha/2)||theta||^2 + const,
///   grad = X~^T (X~ theta - y) / s2 + alpha theta,
///   H = X~^T X~ / s2 + alpha I,  theta_hat = H^{-1} X~^T y / s2.
/// The flattening order (weights row-major, then bias) makes theta line up
/// with the augmented columns exactly.
struct QuadraticToy {
  MlpArchitecture arch;
  LossContext ctx;
  Matrix design;  // N x (d+1)
  Vector y;
  double sigma2 = 1.0;
  double alpha = 1.0;

  Matrix analytic_hessian() const {
    int k = arch.param_count();
    return design.transpose() * design / sigma2 + alpha * Matrix::Identity(k, k);
  }
  Vector analytic_gradient(const Vector& theta) const {
    return design.transpose() * (design * theta - y) / sigma2 + alpha * theta;
  }
  Vector analytic_minimizer() const {
    return analytic_hessian().ldlt().solve(design.transpose() * y / sigma2);
  }
};

inline QuadraticToy make_quadratic_toy(Rng& rng, int n, int d, double sigma2, double alpha) {
  QuadraticToy toy;
  toy.arch = MlpArchitecture({d, 1});
  toy.sigma2 = sigma2;
  toy.alpha = alpha;
  BatchInput data;
  data.inputs.resize(n, d);
  data.targets.resize(n, 1);
  toy.design.resize(n, d + 1);
  toy.y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      data.inputs(i, j) = 2.0 * rng.uniform() - 1.0;
      toy.design(i, j) = data.inputs(i, j);
    }
    toy.design(i, d) = 1.0;
    data.targets(i, 0) = rng.normal();
    toy.y(i) = data.targets(i, 0);
  }
  toy.ctx = make_loss_context(toy.arch, data, Likelihood::gaussian(sigma2), alpha);
  return toy;
}

inline Vector random_theta(Rng& rng, int k, double scale = 1.0) {
  Vector v(k);
  for (int i = 0; i < k; ++i) v(i) = scale * rng.normal();
  return v;
}

inline LossContext make_mlp_ctx(Rng& rng, const std::vector<int>& widths, bool classification,
                                int n, double alpha = 0.5, double sigma2 = 0.25) {
  MlpArchitecture arch(widths);
  BatchInput data;
  data.inputs.resize(n, arch.input_dim());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < arch.input_dim(); ++j) data.inputs(i, j) = 2.0 * rng.uniform() - 1.0;
  Likelihood lik;
  if (classification) {
    lik = Likelihood::categorical();
    for (int i = 0; i < n; ++i)
      data.labels.push_back(static_cast<int>(rng.uniform_int(arch.output_dim())));
  } else {
    lik = Likelihood::gaussian(sigma2);
    data.targets.resize(n, arch.output_dim());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < arch.output_dim(); ++j) data.targets(i, j) = rng.normal();
  }
  return make_loss_context(arch, data, lik, alpha);
}

inline Vector fd_gradient(const LossContext& ctx, const Vector& theta, double h = 1e-5) {
  Vector g(theta.size());
  Vector probe = theta;
  for (int i = 0; i < theta.size(); ++i) {
    probe(i) = theta(i) + h;
    double up = loss_value(ctx, probe);
    probe(i) = theta(i) - h;
    double down = loss_value(ctx, probe);
    probe(i) = theta(i);
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

/// Context whose loss is exactly (1 + alpha)/2 * ||theta||^2: a bias-equipped
/// linear unit on the symmetric two-point design {(1, 0), (-1, 0)} with
/// sigma2 = 2 gives a data term of (w^2 + b^2)/2.
inline LossContext make_isotropic_quadratic_ctx(double alpha = 1e-12) {
  MlpArchitecture arch({1, 1});
  BatchInput data;
  data.inputs.resize(2, 1);
  data.inputs << 1.0, -1.0;
  data.targets = Matrix::Zero(2, 1);
  return make_loss_context(arch, data, Likelihood::gaussian(2.0), alpha);
}

}  // namespace testsup

#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "riemla/geometry.hpp"
#include "riemla/laplace.hpp"
#include "riemla/sampling.hpp"

namespace riemla {

struct CheckResult {
  std::string name;
  bool pass = false;
  bool skipped = false;
  std::string detail;
};

namespace detail {

/// Random small network + data context for oracle checks. Alternates between
/// likelihoods; parameter counts stay small enough for dense oracles.
inline LossContext random_small_ctx(Rng& rng, MlpArchitecture* arch_out = nullptr,
                                    int max_hidden = 4) {
  int d = 1 + static_cast<int>(rng.uniform_int(2));
  int c = 1 + static_cast<int>(rng.uniform_int(2));
  int hidden = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_hidden)));
  MlpArchitecture arch({d, hidden, c});
  bool categorical = rng.uniform() < 0.5 && c >= 2;

  int n = 3 + static_cast<int>(rng.uniform_int(5));
  BatchInput data;
  data.inputs.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) data.inputs(i, j) = 2.0 * rng.uniform() - 1.0;
  Likelihood lik;
  if (categorical) {
    lik = Likelihood::categorical();
    for (int i = 0; i < n; ++i) data.labels.push_back(static_cast<int>(rng.uniform_int(c)));
  } else {
    lik = Likelihood::gaussian(0.25);
    data.targets.resize(n, c);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) data.targets(i, j) = rng.normal();
  }
  double alpha = 0.1 + rng.uniform();
  if (arch_out) *arch_out = arch;
  return make_loss_context(arch, data, lik, alpha);
}

inline Vector random_vector(Rng& rng, int k, double scale = 1.0) {
  Vector v(k);
  for (int i = 0; i < k; ++i) v(i) = scale * rng.normal();
  return v;
}

}  // namespace detail

/// Simplified geodesic RHS against the general Christoffel system with
/// finite-difference metric derivatives, on random small nets.
inline CheckResult check_lemma_equivalence(std::uint64_t seed, int n_pairs = 50, int k_max = 30,
                                           double tol = 1e-4) {
  CheckResult result;
  result.name = "lemma-equivalence";
  Rng rng = Rng::stream(seed, 0x1E44A);
  double worst = 0.0;
  int tested = 0;
  while (tested < n_pairs) {
    MlpArchitecture arch;
    LossContext ctx = detail::random_small_ctx(rng, &arch);
    const int k = arch.param_count();
    if (k > k_max) continue;
    GeodesicState state{detail::random_vector(rng, k, 0.8), detail::random_vector(rng, k, 1.0)};
    GeodesicState simplified = geodesic_rhs(ctx, state);
    GeodesicState general = general_geodesic_rhs(ctx, state);
    double denom = std::max(general.velocity.norm(), 1e-9);
    worst = std::max(worst, (simplified.velocity - general.velocity).norm() / denom);
    ++tested;
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.3e over %d pairs (tol %.1e)", worst, n_pairs, tol);
  result.detail = buf;
  result.pass = worst < tol;
  return result;
}

/// HVP against central finite differences of the gradient.
inline CheckResult check_hvp_finite_difference(std::uint64_t seed, int n_cases = 100,
                                               double tol = 1e-4) {
  CheckResult result;
  result.name = "hvp-vs-fd";
  Rng rng = Rng::stream(seed, 0x4FD);
  const double h = 1e-5;
  double worst = 0.0;
  for (int i = 0; i < n_cases; ++i) {
    MlpArchitecture arch;
    LossContext ctx = detail::random_small_ctx(rng, &arch, 8);
    const int k = arch.param_count();
    Vector theta = detail::random_vector(rng, k, 0.8);
    Vector v = detail::random_vector(rng, k, 1.0);
    Vector hv = hvp(ctx, theta, v);
    Vector fd = (loss_gradient(ctx, theta + h * v) - loss_gradient(ctx, theta - h * v)) / (2.0 * h);
    worst = std::max(worst, (hv - fd).norm() / std::max(fd.norm(), 1e-9));
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.3e over %d cases (tol %.1e)", worst, n_cases, tol);
  result.detail = buf;
  result.pass = worst < tol;
  return result;
}

/// Riemannian speed <cdot, M(c) cdot> along expmap trajectories of a fitted
/// posterior. drift_cap bounds the tolerance from above so that corrupted
/// solver settings cannot trivially pass their own inflated 50*rtol budget.
inline CheckResult check_constant_speed(const LossContext& ctx, const LaplacePosterior& post,
                                        std::uint64_t seed, int n_solves,
                                        SolverOptions opts = SolverOptions{},
                                        double drift_cap = 0.5) {
  CheckResult result;
  result.name = "constant-speed";
  opts.store_trajectory = true;
  double tol = std::min(50.0 * opts.rtol, drift_cap);
  double worst = 0.0;
  int fallbacks = 0;
  for (int s = 0; s < n_solves; ++s) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(s), 0);
    Vector z = detail::random_vector(rng, post.param_count(), 1.0);
    Vector v = post.chol_cov.triangularView<Eigen::Lower>() * z;
    GeodesicSolution sol;
    try {
      sol = expmap(ctx, post.theta_star, v, opts);
    } catch (const GeodesicIntegrationError&) {
      ++fallbacks;
      continue;
    }
    double s0 = geodesic_speed(ctx, sol.trajectory.front().second);
    if (s0 <= 0.0) continue;
    for (const auto& [t, state] : sol.trajectory)
      worst = std::max(worst, std::abs(geodesic_speed(ctx, state) - s0) / s0);
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "max rel drift %.3e over %d solves (tol %.1e, %d failed solves)",
                worst, n_solves, tol, fallbacks);
  result.detail = buf;
  result.pass = worst < tol && fallbacks == 0;
  return result;
}

/// Tangential covariance identity A (A H A)^{-1} A = H^{-1} on random small
/// SPD posteriors, with A the normal-coordinate map at theta.
inline CheckResult check_covariance_identity(std::uint64_t seed, int n_cases = 10,
                                             double tol = 1e-6) {
  CheckResult result;
  result.name = "tangential-covariance";
  Rng rng = Rng::stream(seed, 0xC0F);
  double worst = 0.0;
  for (int i = 0; i < n_cases; ++i) {
    MlpArchitecture arch;
    LossContext ctx = detail::random_small_ctx(rng, &arch);
    const int k = arch.param_count();
    if (k > 30) {
      --i;
      continue;
    }
    Vector theta = detail::random_vector(rng, k, 0.6);
    Matrix h = ggn_hessian(ctx, theta);
    Matrix a = normal_coordinate_map(ctx, theta);
    Matrix h_inv = h.llt().solve(Matrix::Identity(k, k));
    Matrix tangential = a * (a * h * a).llt().solve(Matrix::Identity(k, k)) * a;
    worst = std::max(worst, (tangential - h_inv).cwiseAbs().maxCoeff());
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max abs err %.3e over %d posteriors (tol %.1e)", worst, n_cases,
                tol);
  result.detail = buf;
  result.pass = worst < tol;
  return result;
}

}  // namespace riemla

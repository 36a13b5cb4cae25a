#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "riemla/loss.hpp"

namespace riemla {

/// Position/velocity pair evolved by the geodesic ODE, both of length K.
struct GeodesicState {
  Vector position;
  Vector velocity;
};

struct SolverOptions {
  double rtol = 1e-3;
  double atol = 1e-6;
  double t_begin = 0.0;
  double t_end = 1.0;
  int max_steps = 10000;
  double initial_step = 1e-2;
  bool store_trajectory = false;

  void validate() const {
    if (rtol <= 0.0 || atol <= 0.0)
      throw std::invalid_argument("SolverOptions: tolerances must be positive");
    if (!(t_begin < t_end)) throw std::invalid_argument("SolverOptions: t span must be increasing");
    if (max_steps < 1) throw std::invalid_argument("SolverOptions: max_steps must be positive");
    if (initial_step <= 0.0)
      throw std::invalid_argument("SolverOptions: initial_step must be positive");
  }
};

struct SolverStats {
  int steps_accepted = 0;
  int steps_rejected = 0;
  int rhs_evaluations = 0;
};

struct GeodesicSolution {
  Vector endpoint;
  std::vector<std::pair<double, GeodesicState>> trajectory;  // empty unless requested
  SolverStats stats;
};

/// Thrown when the integrator runs out of steps; carries how far it got so
/// callers can decide on a fallback.
class GeodesicIntegrationError : public std::runtime_error {
 public:
  GeodesicIntegrationError(std::string what, GeodesicState state, double t)
      : std::runtime_error(std::move(what)), last_state(std::move(state)), t_reached(t) {}
  GeodesicState last_state;
  double t_reached;
};

/// Pullback metric M(theta) = I + grad L grad L^T, materialized densely.
/// Eigenvalues are 1 (multiplicity K-1) and 1 + ||grad L||^2. Test path only;
/// the ODE never forms this matrix.
inline Matrix metric(const LossContext& ctx, const Vector& theta,
                     int dense_limit = kDenseHessianLimit) {
  const int k = ctx.arch.param_count();
  if (k > dense_limit) {
    std::ostringstream msg;
    msg << "metric: K=" << k << " exceeds the dense limit " << dense_limit;
    throw std::invalid_argument(msg.str());
  }
  Vector g = loss_gradient(ctx, theta);
  return Matrix::Identity(k, k) + g * g.transpose();
}

/// M(theta)^{-1} u via Sherman-Morrison: u - grad <grad, u> / (1 + ||grad||^2).
/// O(K), never forms the matrix; the denominator is >= 1.
inline Vector metric_inverse_apply(const Vector& grad, const Vector& u) {
  double denom = 1.0 + grad.squaredNorm();
  return u - grad * (grad.dot(u) / denom);
}

/// A(theta) = M(theta)^{-1/2}, closed form from the rank-1 structure:
///   A = I - (1 - (1 + ||g||^2)^{-1/2}) g g^T / ||g||^2.
/// Maps normal coordinates to tangential coordinates, v = A vbar.
inline Matrix normal_coordinate_map(const LossContext& ctx, const Vector& theta,
                                    int dense_limit = kDenseHessianLimit) {
  const int k = ctx.arch.param_count();
  if (k > dense_limit) {
    std::ostringstream msg;
    msg << "normal_coordinate_map: K=" << k << " exceeds the dense limit " << dense_limit;
    throw std::invalid_argument(msg.str());
  }
  Vector g = loss_gradient(ctx, theta);
  double g2 = g.squaredNorm();
  if (std::sqrt(g2) < 1e-14) return Matrix::Identity(k, k);
  double coef = (1.0 - 1.0 / std::sqrt(1.0 + g2)) / g2;
  return Matrix::Identity(k, k) - coef * (g * g.transpose());
}

/// Byproducts of one RHS evaluation; enough to reconstruct the Riemannian
/// speed <cdot, M(c) cdot> = ||cdot||^2 + <grad L, cdot>^2 at the point.
struct GeodesicRhsExtras {
  double grad_dot_velocity = 0.0;
  double velocity_sq = 0.0;
  double speed() const { return velocity_sq + grad_dot_velocity * grad_dot_velocity; }
};

/// Simplified geodesic right-hand side:
///   cddot = -grad L(c) * (1 + ||grad L(c)||^2)^{-1} * <cdot, H[L](c) cdot>.
/// Exactly one gradient evaluation and one HVP per call (shared pass).
inline GeodesicState geodesic_rhs(const LossContext& ctx, const GeodesicState& state,
                                  GeodesicRhsExtras* extras = nullptr) {
  auto [grad, hv] = loss_gradient_and_hvp(ctx, state.position, state.velocity);
  double quad = state.velocity.dot(hv);
  double inv = 1.0 / (1.0 + grad.squaredNorm());
  if (extras) {
    extras->grad_dot_velocity = grad.dot(state.velocity);
    extras->velocity_sq = state.velocity.squaredNorm();
  }
  GeodesicState deriv;
  deriv.position = state.velocity;
  deriv.velocity = (-inv * quad) * grad;
  if (!deriv.velocity.allFinite())
    throw std::runtime_error("geodesic_rhs: non-finite acceleration");
  return deriv;
}

/// General geodesic system with finite-difference metric derivatives:
///   cddot = -(1/2) M^{-1} [ 2 sum_i cdot_i dM/dc_i cdot - w ],  w_i = cdot^T dM/dc_i cdot.
/// Test oracle for the simplified RHS; O(K^3) per call, K capped small.
inline GeodesicState general_geodesic_rhs(const LossContext& ctx, const GeodesicState& state,
                                          double fd_step = 1e-5, int k_limit = 64) {
  const int k = ctx.arch.param_count();
  if (k > k_limit) {
    std::ostringstream msg;
    msg << "general_geodesic_rhs: K=" << k << " exceeds the oracle limit " << k_limit;
    throw std::invalid_argument(msg.str());
  }
  const Vector& c = state.position;
  const Vector& cdot = state.velocity;

  Vector rhs = Vector::Zero(k);  // 2 sum_i cdot_i T_i cdot - w
  Vector w(k);
  Vector probe = c;
  for (int i = 0; i < k; ++i) {
    probe(i) = c(i) + fd_step;
    Matrix m_plus = metric(ctx, probe, k_limit);
    probe(i) = c(i) - fd_step;
    Matrix m_minus = metric(ctx, probe, k_limit);
    probe(i) = c(i);
    Matrix t_i = (m_plus - m_minus) / (2.0 * fd_step);
    rhs += (2.0 * cdot(i)) * (t_i * cdot);
    w(i) = cdot.dot(t_i * cdot);
  }
  rhs -= w;
  Vector grad = loss_gradient(ctx, c);
  GeodesicState deriv;
  deriv.position = cdot;
  deriv.velocity = -0.5 * metric_inverse_apply(grad, rhs);
  return deriv;
}

/// Riemannian speed (squared) <cdot, M(c) cdot> = ||cdot||^2 + <grad L, cdot>^2,
/// computed without materializing the metric. Constant along exact geodesics.
inline double geodesic_speed(const LossContext& ctx, const GeodesicState& state) {
  Vector g = loss_gradient(ctx, state.position);
  double gv = g.dot(state.velocity);
  return state.velocity.squaredNorm() + gv * gv;
}

namespace detail {

// Dormand-Prince 5(4) tableau.
constexpr double kDpC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double kDpA[7][6] = {
    {0, 0, 0, 0, 0, 0},
    {1.0 / 5, 0, 0, 0, 0, 0},
    {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
    {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
    {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
constexpr double kDpB5[7] = {35.0 / 384,      0, 500.0 / 1113, 125.0 / 192,
                             -2187.0 / 6784, 11.0 / 84, 0};
constexpr double kDpB4[7] = {5179.0 / 57600,    0,          7571.0 / 16695, 393.0 / 640,
                             -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

}  // namespace detail

/// Exponential map Exp_{theta0}(v): integrates the geodesic ODE from
/// (theta0, v) over [0, 1] with an embedded Dormand-Prince 5(4) pair.
/// Step control: error norm is the RMS of err_i / (atol + rtol * |y_i|),
/// a step is accepted when the norm <= 1, and the step factor
/// 0.9 * norm^{-1/5} is clamped to [0.2, 5].
///
/// Exact geodesics conserve the Riemannian speed s0 = ||cdot||^2 +
/// <grad L, cdot>^2, which bounds the Euclidean velocity by sqrt(s0) along
/// the whole curve. That bound is a well-conditioned divergence monitor
/// (unlike the speed itself, whose gradient term amplifies tiny velocity
/// errors in stiff regions): a trajectory whose velocity norm exceeds
/// 2 sqrt(s0) cannot be a geodesic, so integration aborts instead of
/// accepting its way into overflow, and the caller falls back.
inline GeodesicSolution expmap(const LossContext& ctx, const Vector& theta0, const Vector& v,
                               const SolverOptions& opts = SolverOptions{}) {
  opts.validate();
  detail::check_param_count(ctx.arch, theta0, "expmap");
  detail::check_param_count(ctx.arch, v, "expmap velocity");

  GeodesicSolution sol;
  if (ctx.is_constant() && ctx.prior_precision == 0.0) {
    // Flat manifold: the RHS vanishes identically and the geodesic is the
    // straight line c(t) = theta0 + t v. Return it exactly.
    double dt = opts.t_end - opts.t_begin;
    sol.endpoint = theta0 + dt * v;
    if (opts.store_trajectory) {
      sol.trajectory.push_back({opts.t_begin, GeodesicState{theta0, v}});
      sol.trajectory.push_back({opts.t_end, GeodesicState{sol.endpoint, v}});
    }
    return sol;
  }

  const int k = ctx.arch.param_count();
  auto rhs = [&](const GeodesicState& s, GeodesicRhsExtras* extras = nullptr) {
    ++sol.stats.rhs_evaluations;
    return geodesic_rhs(ctx, s, extras);
  };

  GeodesicState y{theta0, v};
  double t = opts.t_begin;
  double h = std::min(opts.initial_step, opts.t_end - t);

  GeodesicState k_stages[7];
  GeodesicRhsExtras start_extras;
  k_stages[0] = rhs(y, &start_extras);  // FSAL: stage 7 of an accepted step seeds the next
  const double speed0 = start_extras.speed();
  if (opts.store_trajectory) sol.trajectory.push_back({t, y});

  auto weighted_sum = [&](const double* w, int stages, const GeodesicState& base, double step) {
    GeodesicState out;
    out.position = base.position;
    out.velocity = base.velocity;
    for (int i = 0; i < stages; ++i) {
      if (w[i] == 0.0) continue;
      out.position += (step * w[i]) * k_stages[i].position;
      out.velocity += (step * w[i]) * k_stages[i].velocity;
    }
    return out;
  };

  int steps = 0;
  while (t < opts.t_end) {
    if (steps++ >= opts.max_steps) {
      std::ostringstream msg;
      msg << "expmap: exceeded max_steps=" << opts.max_steps << " at t=" << t;
      throw GeodesicIntegrationError(msg.str(), y, t);
    }
    h = std::min(h, opts.t_end - t);
    if (t + h == t) {
      std::ostringstream msg;
      msg << "expmap: step size underflow at t=" << t;
      throw GeodesicIntegrationError(msg.str(), y, t);
    }

    bool finite_stages = true;
    GeodesicRhsExtras end_extras;
    try {
      for (int i = 1; i < 7; ++i)
        k_stages[i] = rhs(weighted_sum(detail::kDpA[i], i, y, h), i == 6 ? &end_extras : nullptr);
    } catch (const std::runtime_error&) {
      finite_stages = false;  // overflow inside a trial stage: retry smaller
    }

    if (!finite_stages) {
      ++sol.stats.steps_rejected;
      h *= 0.2;
      continue;
    }

    GeodesicState y5 = weighted_sum(detail::kDpB5, 7, y, h);
    GeodesicState y4 = weighted_sum(detail::kDpB4, 7, y, h);

    double err_sq = 0.0;
    for (int j = 0; j < k; ++j) {
      double sc_p = opts.atol + opts.rtol * std::max(std::abs(y.position(j)), std::abs(y5.position(j)));
      double sc_v = opts.atol + opts.rtol * std::max(std::abs(y.velocity(j)), std::abs(y5.velocity(j)));
      double ep = (y5.position(j) - y4.position(j)) / sc_p;
      double ev = (y5.velocity(j) - y4.velocity(j)) / sc_v;
      err_sq += ep * ep + ev * ev;
    }
    double err = std::sqrt(err_sq / (2.0 * k));
    if (!std::isfinite(err)) {
      std::ostringstream msg;
      msg << "expmap: non-finite error estimate at t=" << t;
      throw GeodesicIntegrationError(msg.str(), y, t);
    }

    double factor = err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
    factor = std::min(5.0, std::max(0.2, factor));
    if (err <= 1.0) {
      // stage 7 sits at (t + h, y5): its extras give the end-of-step velocity
      if (speed0 > 0.0 && end_extras.velocity_sq > 4.0 * speed0) {
        std::ostringstream msg;
        msg << "expmap: velocity exceeded the geodesic speed bound at t=" << t;
        throw GeodesicIntegrationError(msg.str(), y, t);
      }
      t += h;
      y = std::move(y5);
      k_stages[0] = k_stages[6];  // FSAL reuse: k7 was evaluated at (t+h, y5)
      ++sol.stats.steps_accepted;
      if (opts.store_trajectory) sol.trajectory.push_back({t, y});
    } else {
      ++sol.stats.steps_rejected;
      factor = std::min(factor, 1.0);
    }
    h *= factor;
  }

  sol.endpoint = y.position;
  return sol;
}

/// Trajectory dump for solutions integrated with store_trajectory:
/// one row per stored node with t, ||c - theta_star||, the Riemannian speed
/// <cdot, M(c) cdot> and the loss L(c).
inline void dump_trajectory_csv(const std::string& path, const LossContext& ctx,
                                const GeodesicSolution& sol, const Vector& theta_star) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dump_trajectory_csv: cannot open " + path);
  out << "t,dist_to_map,speed,loss\n";
  char buf[160];
  for (const auto& [t, state] : sol.trajectory) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", t,
                  (state.position - theta_star).norm(), geodesic_speed(ctx, state),
                  loss_value(ctx, state.position));
    out << buf;
  }
  if (!out) throw std::runtime_error("dump_trajectory_csv: write failed for " + path);
}

}  // namespace riemla

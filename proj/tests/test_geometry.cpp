#include <catch2/catch_amalgamated.hpp>
#include <Eigen/Eigenvalues>
#include <filesystem>
#include <fstream>

#include "riemla/diagnostics.hpp"
#include "riemla/geometry.hpp"
#include "test_support.hpp"

using namespace riemla;
using testsup::random_theta;

namespace {

/// Context with loss gradient exactly (g1, 0) at theta = (g1/2 * sigma2 ...).
/// Uses the symmetric two-point design: grad = (r1 - r2, r1 + r2)/sigma2 with
/// r_i the residuals, so theta = (w, 0) gives grad = (2w, 0) for sigma2 = 1.
LossContext make_two_point_ctx(double alpha = 1e-12) {
  MlpArchitecture arch({1, 1});
  BatchInput data;
  data.inputs.resize(2, 1);
  data.inputs << 1.0, -1.0;
  data.targets = Matrix::Zero(2, 1);
  return make_loss_context(arch, data, Likelihood::gaussian(1.0), alpha);
}

/// Fixed-step classic RK4 on the geodesic system, the dense oracle for expmap.
Vector rk4_expmap(const LossContext& ctx, const Vector& theta0, const Vector& v, double dt) {
  GeodesicState y{theta0, v};
  int n_steps = static_cast<int>(std::round(1.0 / dt));
  for (int s = 0; s < n_steps; ++s) {
    GeodesicState k1 = geodesic_rhs(ctx, y);
    GeodesicState k2 = geodesic_rhs(
        ctx, {y.position + 0.5 * dt * k1.position, y.velocity + 0.5 * dt * k1.velocity});
    GeodesicState k3 = geodesic_rhs(
        ctx, {y.position + 0.5 * dt * k2.position, y.velocity + 0.5 * dt * k2.velocity});
    GeodesicState k4 =
        geodesic_rhs(ctx, {y.position + dt * k3.position, y.velocity + dt * k3.velocity});
    y.position += dt / 6.0 * (k1.position + 2 * k2.position + 2 * k3.position + k4.position);
    y.velocity += dt / 6.0 * (k1.velocity + 2 * k2.velocity + 2 * k3.velocity + k4.velocity);
  }
  return y.position;
}

}  // namespace

TEST_CASE("metric: identity at stationary points, direct substitution") {
  MlpArchitecture arch({1, 1});
  LossContext flat = constant_loss_context(arch);
  Vector theta = Vector::Zero(2);
  CHECK((metric(flat, theta) - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);

  // gradient (2, 0) at theta = (1, 0): M = [[5, 0], [0, 1]]
  LossContext ctx = make_two_point_ctx();
  Vector t2(2);
  t2 << 1.0, 0.0;
  Matrix expected(2, 2);
  expected << 5.0, 0.0, 0.0, 1.0;
  CHECK((metric(ctx, t2) - expected).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("metric equals the assembled graph-Jacobian Gram matrix") {
  Rng rng(71);
  LossContext ctx = testsup::make_mlp_ctx(rng, {2, 4, 2}, true, 6);
  const int k = ctx.arch.param_count();
  Vector theta = random_theta(rng, k, 0.7);
  Vector g = loss_gradient(ctx, theta);
  Matrix jg(k + 1, k);
  jg.topRows(k) = Matrix::Identity(k, k);
  jg.bottomRows(1) = g.transpose();
  Matrix expected = jg.transpose() * jg;
  CHECK((metric(ctx, theta) - expected).cwiseAbs().maxCoeff() < 1e-12 * expected.norm());
}

TEST_CASE("metric eigenvalues are 1 and 1 + ||grad||^2") {
  Rng rng(72);
  LossContext ctx = testsup::make_mlp_ctx(rng, {2, 3, 2}, false, 5);
  Vector theta = random_theta(rng, ctx.arch.param_count(), 0.6);
  Vector g = loss_gradient(ctx, theta);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(metric(ctx, theta));
  CHECK(eig.eigenvalues().minCoeff() == Catch::Approx(1.0).epsilon(1e-8));
  CHECK(eig.eigenvalues().maxCoeff() == Catch::Approx(1.0 + g.squaredNorm()).epsilon(1e-8));
}

TEST_CASE("metric_inverse_apply: substitution cases and multiply-back") {
  Vector zero = Vector::Zero(2);
  Vector u(2);
  u << 1.0, 0.0;
  CHECK(metric_inverse_apply(zero, u) == u);

  Vector g(2);
  g << 2.0, 0.0;
  Vector result = metric_inverse_apply(g, u);
  CHECK(result(0) == Catch::Approx(0.2).epsilon(1e-14));
  CHECK(result(1) == 0.0);

  Rng rng(73);
  for (int trial = 0; trial < 10; ++trial) {
    Vector grad = random_theta(rng, 50);
    Vector vec = random_theta(rng, 50);
    Vector inv = metric_inverse_apply(grad, vec);
    Vector back = inv + grad * grad.dot(inv);  // M * inv
    CHECK((back - vec).norm() < 1e-10 * vec.norm());
  }
}

TEST_CASE("normal_coordinate_map: limits, diagonal case, eigendecomposition oracle") {
  MlpArchitecture arch({1, 1});
  LossContext flat = constant_loss_context(arch);
  CHECK((normal_coordinate_map(flat, Vector::Zero(2)) - Matrix::Identity(2, 2))
            .cwiseAbs()
            .maxCoeff() == 0.0);

  // gradient (sqrt(3), 0): M = diag(4, 1), A = diag(1/2, 1)
  LossContext ctx = make_two_point_ctx();
  Vector theta(2);
  theta << std::sqrt(3.0) / 2.0, 0.0;
  Matrix a = normal_coordinate_map(ctx, theta);
  CHECK(a(0, 0) == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(a(1, 1) == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(a(0, 1)) < 1e-12);
  Matrix m = metric(ctx, theta);
  CHECK((a * m * a - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);

  // closed form vs eigendecomposition-based inverse square root, K = 20
  Rng rng(74);
  LossContext big = testsup::make_mlp_ctx(rng, {2, 3, 2}, true, 6);
  REQUIRE(big.arch.param_count() == 17);
  Vector t = random_theta(rng, 17, 0.8);
  Matrix a2 = normal_coordinate_map(big, t);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(metric(big, t));
  Matrix sqrt_inv = eig.eigenvectors() *
                    eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                    eig.eigenvectors().transpose();
  CHECK((a2 - sqrt_inv).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("geodesic_rhs: flat point, substitution case, evaluation count") {
  MlpArchitecture arch({1, 1});
  LossContext flat = constant_loss_context(arch);
  GeodesicState st{Vector::Zero(2), Vector::Ones(2)};
  GeodesicState deriv = geodesic_rhs(flat, st);
  CHECK(deriv.velocity.cwiseAbs().maxCoeff() == 0.0);
  CHECK(deriv.position == st.velocity);

  // isotropic quadratic, position (1,0), velocity (1,0):
  // grad = (1,0), H = I, so cddot = -(1,0) * 1/2 * 1 = (-0.5, 0)
  LossContext quad = testsup::make_isotropic_quadratic_ctx();
  GeodesicState st2{Vector(2), Vector(2)};
  st2.position << 1.0, 0.0;
  st2.velocity << 1.0, 0.0;
  GeodesicState d2 = geodesic_rhs(quad, st2);
  CHECK(d2.velocity(0) == Catch::Approx(-0.5).epsilon(1e-9));
  CHECK(std::abs(d2.velocity(1)) < 1e-9);
}

TEST_CASE("general_geodesic_rhs: Euclidean metric and rest states") {
  MlpArchitecture arch({1, 1});
  LossContext flat = constant_loss_context(arch);
  GeodesicState st{Vector::Zero(2), Vector::Ones(2)};
  GeodesicState deriv = general_geodesic_rhs(flat, st);
  CHECK(deriv.velocity.cwiseAbs().maxCoeff() < 1e-12);

  Rng rng(75);
  LossContext ctx = testsup::make_mlp_ctx(rng, {1, 2, 1}, false, 4);
  GeodesicState rest{random_theta(rng, ctx.arch.param_count()),
                     Vector::Zero(ctx.arch.param_count())};
  GeodesicState d2 = general_geodesic_rhs(ctx, rest);
  CHECK(d2.position.cwiseAbs().maxCoeff() == 0.0);
  CHECK(d2.velocity.cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_WITH(
      general_geodesic_rhs(testsup::make_mlp_ctx(rng, {4, 20, 4}, false, 3),
                           GeodesicState{Vector::Zero(184), Vector::Zero(184)}),
      Catch::Matchers::ContainsSubstring("oracle limit"));
}

TEST_CASE("geodesic_rhs matches the general system (lemma)") {
  // quadratic case first (matches the spec's K=2 example), then random nets
  LossContext quad = testsup::make_isotropic_quadratic_ctx(0.3);
  Rng rng(76);
  GeodesicState st{random_theta(rng, 2), random_theta(rng, 2)};
  GeodesicState simp = geodesic_rhs(quad, st);
  GeodesicState gen = general_geodesic_rhs(quad, st);
  CHECK((simp.velocity - gen.velocity).norm() < 1e-5 * std::max(1.0, gen.velocity.norm()));

  CheckResult lemma = check_lemma_equivalence(991, 50, 30, 1e-4);
  INFO(lemma.detail);
  CHECK(lemma.pass);
}

TEST_CASE("expmap: flat manifold is an exact translation") {
  MlpArchitecture arch({2, 3, 2});
  LossContext flat = constant_loss_context(arch);
  Rng rng(77);
  Vector theta0 = random_theta(rng, arch.param_count());
  Vector v = random_theta(rng, arch.param_count());
  GeodesicSolution sol = expmap(flat, theta0, v);
  CHECK(sol.endpoint == theta0 + v);
}

TEST_CASE("expmap: zero velocity stays at the base point") {
  Rng rng(78);
  LossContext ctx = testsup::make_mlp_ctx(rng, {2, 4, 2}, true, 6);
  Vector theta0 = random_theta(rng, ctx.arch.param_count(), 0.5);
  GeodesicSolution sol = expmap(ctx, theta0, Vector::Zero(ctx.arch.param_count()));
  CHECK(sol.endpoint == theta0);
}

TEST_CASE("expmap agrees with a dense fixed-step RK4 oracle") {
  LossContext quad = testsup::make_isotropic_quadratic_ctx();
  Vector theta0(2), v(2);
  theta0 << 1.0, 0.0;
  v << 1.0, 0.0;
  Vector dense = rk4_expmap(quad, theta0, v, 1e-5);
  SolverOptions opts;
  opts.rtol = 1e-8;
  opts.atol = 1e-11;
  GeodesicSolution sol = expmap(quad, theta0, v, opts);
  CHECK((sol.endpoint - dense).cwiseAbs().maxCoeff() < 1e-6);

  // and on a nonlinear net with tightened tolerances
  Rng rng(79);
  LossContext ctx = testsup::make_mlp_ctx(rng, {1, 3, 1}, false, 5);
  Vector t0 = random_theta(rng, ctx.arch.param_count(), 0.5);
  Vector v2 = random_theta(rng, ctx.arch.param_count(), 0.8);
  Vector dense2 = rk4_expmap(ctx, t0, v2, 1e-4);
  SolverOptions tight;
  tight.rtol = 1e-9;
  tight.atol = 1e-12;
  GeodesicSolution sol2 = expmap(ctx, t0, v2, tight);
  CHECK((sol2.endpoint - dense2).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("expmap: constant speed along trajectories") {
  Rng rng(80);
  LossContext ctx = testsup::make_mlp_ctx(rng, {2, 6, 2}, true, 10);
  SolverOptions opts;
  opts.store_trajectory = true;
  for (int trial = 0; trial < 5; ++trial) {
    Vector theta0 = random_theta(rng, ctx.arch.param_count(), 0.5);
    Vector v = random_theta(rng, ctx.arch.param_count(), 1.0);
    GeodesicSolution sol = expmap(ctx, theta0, v, opts);
    double s0 = geodesic_speed(ctx, sol.trajectory.front().second);
    for (const auto& [t, state] : sol.trajectory)
      CHECK(std::abs(geodesic_speed(ctx, state) - s0) / s0 < 50.0 * opts.rtol);
  }
}

TEST_CASE("expmap: time reversal returns to the start") {
  Rng rng(81);
  LossContext ctx = testsup::make_mlp_ctx(rng, {2, 5, 2}, false, 8);
  SolverOptions opts;
  opts.store_trajectory = true;
  Vector theta0 = random_theta(rng, ctx.arch.param_count(), 0.5);
  Vector v = random_theta(rng, ctx.arch.param_count(), 1.0);
  GeodesicSolution sol = expmap(ctx, theta0, v, opts);
  const GeodesicState& last = sol.trajectory.back().second;
  GeodesicSolution back = expmap(ctx, last.position, -last.velocity, opts);
  CHECK((back.endpoint - theta0).norm() < 10.0 * opts.rtol * theta0.norm() + opts.atol);
}

TEST_CASE("expmap: step budget exhaustion carries the state reached") {
  LossContext quad = testsup::make_isotropic_quadratic_ctx();
  Vector theta0(2), v(2);
  theta0 << 1.0, 0.0;
  v << 50.0, 0.0;
  SolverOptions opts;
  opts.max_steps = 3;
  try {
    expmap(quad, theta0, v, opts);
    FAIL("expected GeodesicIntegrationError");
  } catch (const GeodesicIntegrationError& err) {
    CHECK(err.t_reached < 1.0);
    CHECK(err.last_state.position.size() == 2);
    CHECK(std::string(err.what()).find("max_steps") != std::string::npos);
  }
}

TEST_CASE("trajectory csv dump") {
  Rng rng(83);
  LossContext ctx = testsup::make_mlp_ctx(rng, {1, 3, 1}, false, 5);
  SolverOptions opts;
  opts.store_trajectory = true;
  Vector theta0 = random_theta(rng, ctx.arch.param_count(), 0.4);
  Vector v = random_theta(rng, ctx.arch.param_count(), 0.6);
  GeodesicSolution sol = expmap(ctx, theta0, v, opts);

  auto path = std::filesystem::temp_directory_path() / "riemla_traj.csv";
  dump_trajectory_csv(path.string(), ctx, sol, theta0);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,dist_to_map,speed,loss");
  long rows = 0;
  std::string line;
  double first_dist = -1.0;
  while (std::getline(in, line)) {
    if (rows == 0) first_dist = std::stod(line.substr(line.find(',') + 1));
    ++rows;
  }
  CHECK(rows == static_cast<long>(sol.trajectory.size()));
  CHECK(first_dist == 0.0);  // the curve starts at theta*
  std::filesystem::remove(path);
}

TEST_CASE("expmap stats: endpoint equals the last trajectory node") {
  Rng rng(82);
  LossContext ctx = testsup::make_mlp_ctx(rng, {1, 4, 1}, false, 5);
  SolverOptions opts;
  opts.store_trajectory = true;
  Vector theta0 = random_theta(rng, ctx.arch.param_count(), 0.4);
  Vector v = random_theta(rng, ctx.arch.param_count(), 0.8);
  GeodesicSolution sol = expmap(ctx, theta0, v, opts);
  CHECK(sol.endpoint == sol.trajectory.back().second.position);
  CHECK(sol.stats.steps_accepted + 1 == static_cast<int>(sol.trajectory.size()));
  CHECK(sol.stats.rhs_evaluations > 0);
}

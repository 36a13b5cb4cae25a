#include <catch2/catch_amalgamated.hpp>

#include "riemla/metrics.hpp"
#include "riemla/rng.hpp"

using namespace riemla;

namespace {

// Naive reimplementation used as the oracle: plain loops, no shared helpers.
struct NaiveMetrics {
  double accuracy, nll, brier, ece, mce;
};

NaiveMetrics naive_classification_metrics(const Matrix& probs, const std::vector<int>& labels,
                                          int n_bins) {
  const long n = probs.rows(), c = probs.cols();
  double correct = 0, nll = 0, brier = 0;
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> hit_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<long> count(static_cast<std::size_t>(n_bins), 0);
  for (long i = 0; i < n; ++i) {
    int arg = 0;
    for (long j = 1; j < c; ++j)
      if (probs(i, j) > probs(i, arg)) arg = static_cast<int>(j);
    double conf = probs(i, arg);
    bool hit = arg == labels[static_cast<std::size_t>(i)];
    correct += hit;
    double p = probs(i, labels[static_cast<std::size_t>(i)]);
    nll += -std::log(p < 1e-12 ? 1e-12 : p);
    for (long j = 0; j < c; ++j) {
      double t = j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      brier += (probs(i, j) - t) * (probs(i, j) - t);
    }
    int b = static_cast<int>(conf * n_bins);
    if (b >= n_bins) b = n_bins - 1;
    conf_sum[static_cast<std::size_t>(b)] += conf;
    hit_sum[static_cast<std::size_t>(b)] += hit;
    count[static_cast<std::size_t>(b)] += 1;
  }
  double ece = 0, mce = 0;
  for (int b = 0; b < n_bins; ++b) {
    if (count[static_cast<std::size_t>(b)] == 0) continue;
    double gap = std::abs(hit_sum[static_cast<std::size_t>(b)] / count[static_cast<std::size_t>(b)] -
                          conf_sum[static_cast<std::size_t>(b)] / count[static_cast<std::size_t>(b)]);
    ece += gap * count[static_cast<std::size_t>(b)] / n;
    if (gap > mce) mce = gap;
  }
  return {correct / n, nll / n, brier / (n * c), ece, mce};
}

Matrix random_prob_matrix(Rng& rng, long n, long c) {
  Matrix p(n, c);
  for (long i = 0; i < n; ++i) {
    double sum = 0;
    for (long j = 0; j < c; ++j) {
      p(i, j) = rng.uniform() + 1e-6;
      sum += p(i, j);
    }
    p.row(i) /= sum;
  }
  return p;
}

}  // namespace

TEST_CASE("classification_metrics: perfect one-hot predictions") {
  Matrix probs(3, 2);
  probs << 1, 0, 0, 1, 1, 0;
  std::vector<int> labels{0, 1, 0};
  MetricsReport m = classification_metrics(probs, labels, 10);
  CHECK(*m.accuracy == 1.0);
  CHECK(m.nll == 0.0);
  CHECK(*m.brier == 0.0);
  CHECK(*m.ece == 0.0);
  CHECK(*m.mce == 0.0);
}

TEST_CASE("classification_metrics: uniform binary predictions on balanced labels") {
  Matrix probs = Matrix::Constant(10, 2, 0.5);
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  MetricsReport m = classification_metrics(probs, labels, 10);
  CHECK(m.nll == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(*m.ece == Catch::Approx(0.0).margin(1e-12));
  CHECK(*m.accuracy == 0.5);  // argmax ties resolve to class 0
}

TEST_CASE("classification_metrics: hand-computed two-bin case") {
  // confidences 0.9 / 0.8 / 0.6 / 0.55, outcomes hit/hit/miss/hit, 2 bins:
  // every point lands in the upper bin, acc 3/4, conf 0.7125
  Matrix probs(4, 2);
  probs << 0.9, 0.1, 0.8, 0.2, 0.4, 0.6, 0.55, 0.45;
  std::vector<int> labels{0, 0, 0, 0};
  MetricsReport m = classification_metrics(probs, labels, 2);
  double conf_mean = (0.9 + 0.8 + 0.6 + 0.55) / 4.0;
  CHECK(*m.ece == Catch::Approx(std::abs(0.75 - conf_mean)).epsilon(1e-12));
  CHECK(*m.mce == Catch::Approx(std::abs(0.75 - conf_mean)).epsilon(1e-12));
  CHECK(*m.accuracy == 0.75);
}

TEST_CASE("classification_metrics: label out of range") {
  Matrix probs = Matrix::Constant(2, 2, 0.5);
  CHECK_THROWS_WITH(classification_metrics(probs, {0, 2}, 10),
                    Catch::Matchers::ContainsSubstring("outside"));
}

TEST_CASE("classification_metrics equals the naive oracle on random instances") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    long n = 1 + rng.uniform_int(40);
    long c = 2 + rng.uniform_int(4);
    int bins = 1 + static_cast<int>(rng.uniform_int(15));
    Matrix probs = random_prob_matrix(rng, n, c);
    std::vector<int> labels;
    for (long i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.uniform_int(c)));
    MetricsReport m = classification_metrics(probs, labels, bins);
    NaiveMetrics naive = naive_classification_metrics(probs, labels, bins);
    REQUIRE(std::abs(*m.accuracy - naive.accuracy) < 1e-12);
    REQUIRE(std::abs(m.nll - naive.nll) < 1e-12);
    REQUIRE(std::abs(*m.brier - naive.brier) < 1e-12);
    REQUIRE(std::abs(*m.ece - naive.ece) < 1e-12);
    REQUIRE(std::abs(*m.mce - naive.mce) < 1e-12);
    REQUIRE(*m.ece <= *m.mce + 1e-15);
  }
}

TEST_CASE("classification_metrics: permutation invariance and NLL monotonicity") {
  Rng rng(102);
  Matrix probs = random_prob_matrix(rng, 25, 3);
  std::vector<int> labels;
  for (int i = 0; i < 25; ++i) labels.push_back(static_cast<int>(rng.uniform_int(3)));
  MetricsReport base = classification_metrics(probs, labels, 10);

  std::vector<int> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Matrix probs_p(25, 3);
  std::vector<int> labels_p(25);
  for (int i = 0; i < 25; ++i) {
    probs_p.row(i) = probs.row(perm[static_cast<std::size_t>(i)]);
    labels_p[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  MetricsReport permuted = classification_metrics(probs_p, labels_p, 10);
  CHECK(*permuted.ece == Catch::Approx(*base.ece).epsilon(1e-12));
  CHECK(*permuted.mce == Catch::Approx(*base.mce).epsilon(1e-12));

  // raising the true-class probability of one row lowers the NLL
  Matrix improved = probs;
  int row = 4;
  int label = labels[static_cast<std::size_t>(row)];
  improved(row, label) += 0.5 * (1.0 - improved(row, label));
  MetricsReport better = classification_metrics(improved, labels, 10);
  CHECK(better.nll < base.nll);
}

TEST_CASE("regression_nll: degenerate mixtures and the naive oracle") {
  double sigma2 = 0.09;
  Matrix means(1, 1);
  means << 1.7;
  Vector target(1);
  target << 1.7;
  double expected = std::log(std::sqrt(sigma2) * std::sqrt(2.0 * 3.14159265358979323846));
  CHECK(regression_nll(means, sigma2, target) == Catch::Approx(expected).epsilon(1e-12));

  // duplicated sample means collapse to the single-sample value
  Matrix dup(1, 4);
  dup << 1.7, 1.7, 1.7, 1.7;
  CHECK(regression_nll(dup, sigma2, target) ==
        Catch::Approx(regression_nll(means, sigma2, target)).epsilon(1e-12));

  // probability-space oracle
  Rng rng(103);
  Matrix m(6, 5);
  Vector y(6);
  for (int i = 0; i < 6; ++i) {
    y(i) = rng.normal();
    for (int s = 0; s < 5; ++s) m(i, s) = rng.normal();
  }
  double direct = 0.0;
  for (int i = 0; i < 6; ++i) {
    double p = 0.0;
    for (int s = 0; s < 5; ++s) {
      double r = y(i) - m(i, s);
      p += std::exp(-r * r / (2 * sigma2)) / std::sqrt(2 * 3.14159265358979323846 * sigma2) / 5.0;
    }
    direct += -std::log(p) / 6.0;
  }
  CHECK(regression_nll(m, sigma2, y) == Catch::Approx(direct).epsilon(1e-10));

  CHECK_THROWS_AS(regression_nll(m, -1.0, y), std::invalid_argument);
}

TEST_CASE("auroc: separation, ties, and the pairwise oracle") {
  CHECK(auroc({0.9, 0.8, 0.95}, {0.1, 0.2, 0.3}) == 1.0);
  CHECK(auroc({0.5, 0.5}, {0.5, 0.5, 0.5}) == 0.5);

  std::vector<double> a{0.9, 0.8, 0.8, 0.6, 0.55, 0.3};
  std::vector<double> b{0.85, 0.8, 0.5, 0.5, 0.2, 0.1};
  double pairwise = 0.0;
  for (double x : a)
    for (double y : b) pairwise += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  pairwise /= a.size() * b.size();
  CHECK(auroc(a, b) == pairwise);

  CHECK(auroc(a, b) + auroc(b, a) == 1.0);
  CHECK_THROWS_AS(auroc({}, b), std::invalid_argument);
}

TEST_CASE("auroc symmetry holds on random inputs") {
  Rng rng(104);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a, b;
    for (std::uint64_t i = 0; i <= rng.uniform_int(20); ++i)
      a.push_back(std::round(rng.uniform() * 8) / 8.0);  // force ties
    for (std::uint64_t i = 0; i <= rng.uniform_int(20); ++i)
      b.push_back(std::round(rng.uniform() * 8) / 8.0);
    REQUIRE(auroc(a, b) + auroc(b, a) == 1.0);
  }
}

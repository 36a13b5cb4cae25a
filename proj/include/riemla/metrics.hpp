#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "riemla/sampling.hpp"

namespace riemla {

/// Scores of a predictive distribution. Classification-only fields are unset
/// for regression runs. Brier is the per-class mean (1/C normalization); the
/// conversion factor to the per-point-sum convention is C.
struct MetricsReport {
  std::optional<double> accuracy;
  double nll = 0.0;
  std::optional<double> brier;
  std::optional<double> ece;
  std::optional<double> mce;
  int n_bins = 0;
  std::optional<double> auroc;
};

/// Accuracy, NLL, Brier, ECE and MCE of an averaged-softmax predictive.
/// ECE/MCE use equal-width bins on the max-probability confidence, skipping
/// empty bins; argmax ties resolve to the lowest class index; NLL clamps
/// probabilities at 1e-12.
inline MetricsReport classification_metrics(const Matrix& probs, const std::vector<int>& labels,
                                            int n_bins = 10) {
  const long n = probs.rows();
  const long c = probs.cols();
  if (n_bins < 1) throw std::invalid_argument("classification_metrics: n_bins must be >= 1");
  if (static_cast<long>(labels.size()) != n)
    throw std::invalid_argument("classification_metrics: labels/probabilities size mismatch");
  for (long i = 0; i < n; ++i)
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c) {
      std::ostringstream msg;
      msg << "classification_metrics: label " << labels[static_cast<std::size_t>(i)] << " at row "
          << i << " outside [0, " << c << ")";
      throw std::invalid_argument(msg.str());
    }

  double correct = 0.0, nll = 0.0, brier = 0.0;
  std::vector<double> bin_conf(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> bin_acc(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<long> bin_count(static_cast<std::size_t>(n_bins), 0);

  for (long i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    long pred = 0;
    double conf = probs(i, 0);
    for (long j = 1; j < c; ++j)
      if (probs(i, j) > conf) {
        conf = probs(i, j);
        pred = j;
      }
    const bool hit = pred == label;
    correct += hit ? 1.0 : 0.0;
    nll += -std::log(std::max(probs(i, label), 1e-12));
    for (long j = 0; j < c; ++j) {
      double diff = probs(i, j) - (j == label ? 1.0 : 0.0);
      brier += diff * diff;
    }
    int bin = std::min<int>(n_bins - 1, static_cast<int>(conf * n_bins));
    bin_conf[static_cast<std::size_t>(bin)] += conf;
    bin_acc[static_cast<std::size_t>(bin)] += hit ? 1.0 : 0.0;
    bin_count[static_cast<std::size_t>(bin)] += 1;
  }

  double ece = 0.0, mce = 0.0;
  for (int b = 0; b < n_bins; ++b) {
    if (bin_count[static_cast<std::size_t>(b)] == 0) continue;
    double cnt = static_cast<double>(bin_count[static_cast<std::size_t>(b)]);
    double gap = std::abs(bin_acc[static_cast<std::size_t>(b)] / cnt -
                          bin_conf[static_cast<std::size_t>(b)] / cnt);
    ece += (cnt / static_cast<double>(n)) * gap;
    mce = std::max(mce, gap);
  }

  MetricsReport report;
  report.accuracy = correct / static_cast<double>(n);
  report.nll = nll / static_cast<double>(n);
  report.brier = brier / static_cast<double>(n * c);
  report.ece = ece;
  report.mce = mce;
  report.n_bins = n_bins;
  return report;
}

/// Mean negative log-likelihood of targets under the per-point Gaussian
/// mixture (1/S) sum_s N(y | mean_s, sigma2), evaluated in log-sum-exp form.
inline double regression_nll(const Matrix& sample_means, double sigma2, const Vector& targets) {
  if (sigma2 <= 0.0) throw std::invalid_argument("regression_nll: sigma2 must be positive");
  const long n = sample_means.rows();
  const long s = sample_means.cols();
  if (targets.size() != n)
    throw std::invalid_argument("regression_nll: targets/means size mismatch");
  if (s < 1) throw std::invalid_argument("regression_nll: need at least one sample mean");

  const double log_norm = 0.5 * std::log(2.0 * 3.14159265358979323846 * sigma2);
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    // log (1/S) sum_s exp(-(y - m_s)^2 / (2 sigma2)) - log_norm
    double best = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < s; ++j) {
      double r = targets(i) - sample_means(i, j);
      best = std::max(best, -r * r / (2.0 * sigma2));
    }
    double acc = 0.0;
    for (long j = 0; j < s; ++j) {
      double r = targets(i) - sample_means(i, j);
      acc += std::exp(-r * r / (2.0 * sigma2) - best);
    }
    total += -(best + std::log(acc / static_cast<double>(s)) - log_norm);
  }
  return total / static_cast<double>(n);
}

inline MetricsReport regression_metrics(const PredictiveResult& pred, const Vector& targets) {
  MetricsReport report;
  report.nll = regression_nll(pred.sample_means, pred.sigma2, targets);
  return report;
}

/// AUROC by the rank-sum (Mann-Whitney) statistic with midrank ties;
/// in-distribution confidences are the positive class.
inline double auroc(const std::vector<double>& conf_in_dist, const std::vector<double>& conf_ood) {
  if (conf_in_dist.empty() || conf_ood.empty())
    throw std::invalid_argument("auroc: both confidence lists must be non-empty");
  struct Entry {
    double value;
    bool positive;
  };
  std::vector<Entry> all;
  all.reserve(conf_in_dist.size() + conf_ood.size());
  for (double v : conf_in_dist) all.push_back({v, true});
  for (double v : conf_ood) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.value < b.value; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].value == all[i].value) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t t = i; t < j; ++t)
      if (all[t].positive) rank_sum_pos += midrank;
    i = j;
  }
  const double n1 = static_cast<double>(conf_in_dist.size());
  const double n0 = static_cast<double>(conf_ood.size());
  // rank sums are exact half-integer arithmetic, so u and n1*n0 - u divide
  // to complements that sum to exactly 1
  double u = rank_sum_pos - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * n0);
}

/// Max-probability confidences of a classification predictive.
inline std::vector<double> max_prob_confidences(const Matrix& probs) {
  std::vector<double> conf(static_cast<std::size_t>(probs.rows()));
  for (long i = 0; i < probs.rows(); ++i) conf[static_cast<std::size_t>(i)] = probs.row(i).maxCoeff();
  return conf;
}

}  // namespace riemla

#pragma once

#include <atomic>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "riemla/geometry.hpp"
#include "riemla/laplace.hpp"

namespace riemla {

enum class SampleKind { vanilla, riem, lin_riem };

inline const char* sample_kind_name(SampleKind k) {
  switch (k) {
    case SampleKind::vanilla: return "vanilla";
    case SampleKind::riem: return "riem";
    case SampleKind::lin_riem: return "lin_riem";
  }
  return "?";
}

struct SampleMode {
  SampleKind kind = SampleKind::vanilla;
  int batch_size = 0;  // 0 = full-data metric

  void validate() const {
    if (batch_size < 0) throw std::invalid_argument("SampleMode: batch_size must be >= 0");
    if (batch_size > 0 && kind == SampleKind::vanilla)
      throw std::invalid_argument("SampleMode: mini-batched metric only applies to riem/lin_riem");
  }
  bool batched() const { return batch_size > 0; }
};

struct PosteriorSample {
  Vector theta;
  Vector velocity;  // tangent draw v_s = chol_cov * z_s
  SampleMode mode;
  std::optional<SolverStats> solver_stats;
  std::vector<int> batch_indices;
  bool fallback_used = false;
};

/// Draws S posterior samples. Tangent vectors come from the standard Laplace
/// covariance, v_s = chol_cov z_s with z_s standard normal from the stream
/// (master_seed, s); riem/lin_riem map them through the exponential map of
/// the plain/linearized loss metric. With a batched mode every sample solves
/// the ODE under a fresh stratified mini-batch metric.
///
/// Each sample is a pure function of (posterior, ctx, mode, master_seed, s),
/// so the result is bit-identical for any thread count. A failed integration
/// falls back to the Euclidean sample theta* + v_s and is flagged, never
/// aborting the batch.
inline std::vector<PosteriorSample> draw_samples(const LaplacePosterior& post,
                                                 const LossContext& ctx, const SampleMode& mode,
                                                 int n_samples, std::uint64_t master_seed,
                                                 const SolverOptions& opts = SolverOptions{},
                                                 int n_threads = 1) {
  mode.validate();
  if (n_samples < 1) throw std::invalid_argument("draw_samples: need S >= 1");
  if (ctx.mode != LossMode::plain)
    throw std::invalid_argument("draw_samples: pass the plain context; linearization is internal");
  if (!(post.arch == ctx.arch))
    throw std::invalid_argument("draw_samples: posterior and context architectures differ");

  const int k = post.param_count();
  LossContext lin_ctx;
  if (mode.kind == SampleKind::lin_riem) lin_ctx = make_linearized_context(ctx, post.theta_star);
  const LossContext& geo_ctx = mode.kind == SampleKind::lin_riem ? lin_ctx : ctx;

  std::vector<PosteriorSample> samples(static_cast<std::size_t>(n_samples));
  std::atomic<int> failures{0};

  auto run_one = [&](int s) {
    PosteriorSample& out = samples[static_cast<std::size_t>(s)];
    out.mode = mode;
    Rng rng = Rng::stream(master_seed, static_cast<std::uint64_t>(s), 0);
    Vector z(k);
    for (int i = 0; i < k; ++i) z(i) = rng.normal();
    out.velocity = post.chol_cov.template triangularView<Eigen::Lower>() * z;

    if (mode.kind == SampleKind::vanilla) {
      out.theta = post.theta_star + out.velocity;
      return;
    }
    const LossContext* use_ctx = &geo_ctx;
    LossContext batch_ctx;
    if (mode.batched()) {
      Rng batch_rng = Rng::stream(master_seed, static_cast<std::uint64_t>(s), 1);
      batch_ctx = make_minibatch_ctx(geo_ctx, mode.batch_size, batch_rng);
      out.batch_indices = batch_ctx.batch_indices;
      use_ctx = &batch_ctx;
    }
    try {
      GeodesicSolution sol = expmap(*use_ctx, post.theta_star, out.velocity, opts);
      out.theta = sol.endpoint;
      out.solver_stats = sol.stats;
    } catch (const std::runtime_error& err) {
      // step-budget exhaustion or a numeric overflow along the trajectory:
      // fall back to the Euclidean sample, flag it, keep the batch going
      out.theta = post.theta_star + out.velocity;
      out.fallback_used = true;
      failures.fetch_add(1);
      std::fprintf(stderr, "warning: expmap fell back to the Euclidean sample (s=%d): %s\n", s,
                   err.what());
    }
  };

  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = n_threads > 0 ? n_threads : (hw > 0 ? hw : 1);
  workers = std::min(workers, n_samples);
  if (workers <= 1) {
    for (int s = 0; s < n_samples; ++s) run_one(s);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (int s = next.fetch_add(1); s < n_samples; s = next.fetch_add(1)) run_one(s);
      });
    for (auto& th : pool) th.join();
  }
  return samples;
}

inline double fallback_rate(const std::vector<PosteriorSample>& samples) {
  if (samples.empty()) return 0.0;
  long n = 0;
  for (const auto& s : samples) n += s.fallback_used ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(samples.size());
}

enum class PredictFn { plain, linearized };

inline PredictFn default_predict_fn(SampleKind kind) {
  return kind == SampleKind::lin_riem ? PredictFn::linearized : PredictFn::plain;
}

/// Monte-Carlo predictive. Classification keeps the averaged softmax matrix;
/// regression keeps every sampled mean so two-moment mixture summaries and
/// the exact mixture NLL stay available.
struct PredictiveResult {
  bool classification = true;
  Matrix class_probs;   // N x C, rows sum to 1
  Matrix sample_means;  // N x S (regression)
  double sigma2 = 1.0;

  Vector mixture_mean() const { return sample_means.rowwise().mean(); }

  /// Predictive variance of the Gaussian mixture: variance of the sampled
  /// means plus the shared observation noise.
  Vector mixture_variance() const {
    Vector mean = mixture_mean();
    Matrix centered = sample_means.colwise() - mean;
    Vector var = centered.array().square().matrix().rowwise().mean();
    return (var.array() + sigma2).matrix();
  }
};

inline PredictiveResult predictive(const MlpArchitecture& arch,
                                   const std::vector<PosteriorSample>& samples, const Matrix& x,
                                   PredictFn predict_fn, const Likelihood& likelihood,
                                   const Vector& anchor = Vector()) {
  if (samples.empty()) throw std::invalid_argument("predictive: empty sample list");
  detail::check_input_dims(arch, x);

  ForwardPass anchor_pass;
  if (predict_fn == PredictFn::linearized) {
    detail::check_param_count(arch, anchor, "predictive anchor");
    anchor_pass = forward_pass(arch, anchor, x);
  }
  auto model_outputs = [&](const Vector& theta) {
    if (predict_fn == PredictFn::plain) return forward(arch, theta, x);
    return Matrix(anchor_pass.output() + output_jvp(arch, anchor, anchor_pass, theta - anchor));
  };

  PredictiveResult result;
  result.sigma2 = likelihood.sigma2;
  result.classification = likelihood.kind == LikelihoodKind::categorical;
  const long n = x.rows();
  const long s_count = static_cast<long>(samples.size());

  if (result.classification) {
    Matrix acc = Matrix::Zero(n, arch.output_dim());
    for (const auto& sample : samples) acc += detail::softmax_rows(model_outputs(sample.theta));
    result.class_probs = acc / static_cast<double>(s_count);
  } else {
    if (arch.output_dim() != 1)
      throw std::invalid_argument("predictive: regression path expects one output");
    result.sample_means.resize(n, s_count);
    for (long s = 0; s < s_count; ++s)
      result.sample_means.col(s) = model_outputs(samples[static_cast<std::size_t>(s)].theta).col(0);
  }
  return result;
}

}  // namespace riemla

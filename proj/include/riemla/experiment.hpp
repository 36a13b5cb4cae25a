#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "riemla/config.hpp"
#include "riemla/diagnostics.hpp"
#include "riemla/io.hpp"
#include "riemla/metrics.hpp"
#include "riemla/svg.hpp"

namespace riemla {

inline constexpr const char* kVersion = "0.1.0";

namespace detail {

// purpose tags for per-seed sub-streams
inline constexpr std::uint64_t kSeedData = 0xDA;
inline constexpr std::uint64_t kSeedInit = 0x1A;
inline constexpr std::uint64_t kSeedSample = 0x5A;
inline constexpr std::uint64_t kSeedOod = 0x0D;

inline std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t purpose,
                                 std::uint64_t idx = 0) {
  return Rng::stream(run_seed, purpose, idx).next_u64();
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string opt_cell(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

}  // namespace detail

/// Dataset splits plus the training context for one experiment seed. All
/// randomness (data draw, init, sampling) is derived from the run seed, so a
/// seed fully determines the pipeline.
struct StageData {
  MlpArchitecture arch;
  BatchInput train;
  BatchInput test;
  LossContext ctx;  // plain training context at the configured alpha/sigma2
};

inline StageData make_stage_data(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  StageData stage;
  stage.arch = cfg.architecture();
  if (cfg.dataset.kind == DatasetKind::csv) {
    stage.train = load_csv(cfg.dataset.train_path, cfg.dataset.task());
    if (!cfg.dataset.test_path.empty())
      stage.test = load_csv(cfg.dataset.test_path, cfg.dataset.task());
    else
      stage.test = stage.train;
  } else {
    DatasetSpec spec = cfg.dataset;
    spec.seed = detail::derive_seed(run_seed, detail::kSeedData, cfg.dataset.seed);
    auto [train, test] = generate(spec);
    stage.train = std::move(train);
    stage.test = std::move(test);
  }
  stage.ctx = make_loss_context(stage.arch, stage.train, cfg.likelihood(), cfg.prior_precision);
  return stage;
}

/// Synthetic out-of-distribution inputs for AUROC: points in a shell
/// 3-5 bounding-box extents away from the reference data.
inline Matrix synthetic_ood_inputs(const BatchInput& reference, std::uint64_t seed, int n) {
  const long d = reference.inputs.cols();
  Vector lo = reference.inputs.colwise().minCoeff();
  Vector hi = reference.inputs.colwise().maxCoeff();
  Vector center = 0.5 * (lo + hi);
  Vector extent = 0.5 * (hi - lo);
  for (long j = 0; j < d; ++j) extent(j) = std::max(extent(j), 1e-3);
  Rng rng = Rng::stream(seed, detail::kSeedOod);
  Matrix out(n, d);
  for (int i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) {
      double mag = (3.0 + 2.0 * rng.uniform()) * extent(j);
      double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      out(i, j) = center(j) + sign * mag;
    }
  return out;
}

struct ModeRunResult {
  std::string name;
  MetricsReport metrics;
  double fallback_rate = 0.0;
  double mean_train_loss = 0.0;
  std::vector<PosteriorSample> samples;
};

struct SeedRunResult {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  StageData stage;
  MapEstimate map_estimate;
  MetricsReport map_metrics;
  double map_train_loss = 0.0;
  double alpha_used = 0.0;
  double sigma2_used = 0.0;
  LossContext eval_ctx;  // context after optional hyperparameter refit
  LaplacePosterior posterior;
  std::vector<ModeRunResult> modes;
};

namespace detail {

inline MetricsReport score_predictive(const ExperimentConfig& cfg, const MlpArchitecture& arch,
                                      const std::vector<PosteriorSample>& samples,
                                      PredictFn predict_fn, const Likelihood& lik,
                                      const Vector& anchor, const BatchInput& test,
                                      std::uint64_t run_seed) {
  PredictiveResult pred = predictive(arch, samples, test.inputs, predict_fn, lik, anchor);
  if (lik.kind == LikelihoodKind::categorical) {
    MetricsReport report = classification_metrics(pred.class_probs, test.labels, cfg.n_bins);
    int n_ood = static_cast<int>(std::min<long>(test.size(), 200));
    Matrix ood = synthetic_ood_inputs(test, run_seed, n_ood);
    PredictiveResult ood_pred = predictive(arch, samples, ood, predict_fn, lik, anchor);
    report.auroc = auroc(max_prob_confidences(pred.class_probs),
                         max_prob_confidences(ood_pred.class_probs));
    return report;
  }
  return regression_metrics(pred, test.targets.col(0));
}

}  // namespace detail

/// Full pipeline for one seed: data, MAP, (optional) evidence-based
/// hyperparameters, posterior, then every configured sampling mode.
inline SeedRunResult run_seed(const ExperimentConfig& cfg, std::uint64_t run_seed,
                              int n_threads = 1) {
  SeedRunResult result;
  result.seed = run_seed;
  result.stage = make_stage_data(cfg, run_seed);
  const MlpArchitecture& arch = result.stage.arch;

  result.map_estimate =
      train_map(result.stage.ctx, detail::derive_seed(run_seed, detail::kSeedInit), cfg.optimizer);

  result.eval_ctx = result.stage.ctx;
  result.alpha_used = cfg.prior_precision;
  result.sigma2_used = cfg.likelihood().sigma2;
  if (cfg.optimize_prior) {
    HyperOptResult hyper =
        optimize_hyperparameters(result.stage.ctx, result.map_estimate.theta, cfg.hessian_kind);
    result.eval_ctx = with_prior_precision(result.stage.ctx, hyper.alpha);
    result.alpha_used = hyper.alpha;
    if (hyper.sigma2) {
      result.eval_ctx = with_sigma2(result.eval_ctx, *hyper.sigma2);
      result.sigma2_used = *hyper.sigma2;
    }
  }
  result.posterior = fit_laplace(result.eval_ctx, result.map_estimate.theta, cfg.hessian_kind);

  // MAP row: the point estimate scored through the same predictive machinery
  PosteriorSample map_sample;
  map_sample.theta = result.map_estimate.theta;
  map_sample.velocity = Vector::Zero(arch.param_count());
  result.map_metrics = detail::score_predictive(
      cfg, arch, {map_sample}, PredictFn::plain, result.eval_ctx.likelihood,
      result.posterior.theta_star, result.stage.test, run_seed);
  result.map_train_loss = loss_value(result.eval_ctx, result.map_estimate.theta);

  for (std::size_t m = 0; m < cfg.modes.size(); ++m) {
    const ModeSpec& mode = cfg.modes[m];
    ModeRunResult mode_result;
    mode_result.name = mode.name();
    std::uint64_t master = detail::derive_seed(run_seed, detail::kSeedSample, m);
    mode_result.samples = draw_samples(result.posterior, result.eval_ctx, mode.mode,
                                       cfg.n_samples, master, cfg.solver, n_threads);
    mode_result.fallback_rate = fallback_rate(mode_result.samples);
    mode_result.metrics = detail::score_predictive(cfg, arch, mode_result.samples,
                                                   mode.predict_fn(), result.eval_ctx.likelihood,
                                                   result.posterior.theta_star, result.stage.test,
                                                   run_seed);
    double loss_sum = 0.0;
    for (const auto& s : mode_result.samples) loss_sum += loss_value(result.eval_ctx, s.theta);
    mode_result.mean_train_loss = loss_sum / static_cast<double>(mode_result.samples.size());
    result.modes.push_back(std::move(mode_result));
  }
  return result;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json ds = {
      {"kind", cfg.dataset.kind == DatasetKind::banana_like ? "banana_like"
               : cfg.dataset.kind == DatasetKind::pinwheel  ? "pinwheel"
               : cfg.dataset.kind == DatasetKind::gapped_sine ? "gapped_sine"
                                                              : "csv"},
      {"n_train", cfg.dataset.n_train},
      {"n_test", cfg.dataset.n_test},
      {"seed", cfg.dataset.seed},
      {"noise", cfg.dataset.noise},
  };
  if (cfg.dataset.kind == DatasetKind::pinwheel) {
    ds["pinwheel_rate"] = cfg.dataset.pinwheel_rate;
    ds["pinwheel_radial_std"] = cfg.dataset.pinwheel_radial_std;
    ds["pinwheel_angle_std"] = cfg.dataset.pinwheel_angle_std;
    ds["pinwheel_arms"] = cfg.dataset.pinwheel_arms;
  }
  if (cfg.dataset.kind == DatasetKind::csv) {
    ds["train_path"] = cfg.dataset.train_path;
    ds["test_path"] = cfg.dataset.test_path;
  }
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& m : cfg.modes) {
    nlohmann::json mj = {{"kind", sample_kind_name(m.mode.kind)},
                         {"batch_size", m.mode.batch_size}};
    if (m.predict_override)
      mj["predict"] = *m.predict_override == PredictFn::plain ? "plain" : "linearized";
    modes.push_back(mj);
  }
  return nlohmann::json{
      {"dataset", ds},
      {"hidden_units", cfg.hidden_units},
      {"optimizer",
       {{"kind", cfg.optimizer.kind == OptimizerKind::adam ? "adam" : "gd"},
        {"lr", cfg.optimizer.lr},
        {"epochs", cfg.optimizer.epochs},
        {"momentum", cfg.optimizer.momentum},
        {"cosine_decay", cfg.optimizer.cosine_decay}}},
      {"prior_precision", cfg.prior_precision},
      {"sigma2", cfg.sigma2},
      {"laplace",
       {{"hessian_kind", cfg.hessian_kind == HessianKind::ggn ? "ggn" : "exact"},
        {"optimize_prior", cfg.optimize_prior}}},
      {"modes", modes},
      {"samples", cfg.n_samples},
      {"seeds", cfg.seeds},
      {"solver",
       {{"rtol", cfg.solver.rtol},
        {"atol", cfg.solver.atol},
        {"max_steps", cfg.solver.max_steps},
        {"initial_step", cfg.solver.initial_step}}},
      {"n_bins", cfg.n_bins},
  };
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  std::string dump = config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ExperimentOutcome {
  int n_seeds = 0;
  int n_failed = 0;
  std::filesystem::path results_csv;
  std::filesystem::path summary_csv;
  std::filesystem::path manifest_json;
};

namespace detail {

inline void write_results_csv(const std::filesystem::path& path,
                              const std::vector<SeedRunResult>& runs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "seed,mode,accuracy,nll,brier,ece,mce,n_bins,auroc,fallback_rate,mean_train_loss\n";
  auto row = [&](std::uint64_t seed, const std::string& mode, const MetricsReport& m,
                 const std::optional<double>& fb, double train_loss) {
    out << seed << ',' << mode << ',' << opt_cell(m.accuracy) << ',' << format_double(m.nll) << ','
        << opt_cell(m.brier) << ',' << opt_cell(m.ece) << ',' << opt_cell(m.mce) << ','
        << m.n_bins << ',' << opt_cell(m.auroc) << ',' << opt_cell(fb) << ','
        << format_double(train_loss) << '\n';
  };
  for (const auto& run : runs) {
    if (run.failed) continue;
    row(run.seed, "map", run.map_metrics, std::nullopt, run.map_train_loss);
    for (const auto& mode : run.modes)
      row(run.seed, mode.name, mode.metrics, mode.fallback_rate, mode.mean_train_loss);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct SummaryAccumulator {
  std::vector<double> values;
  void add(double v) { values.push_back(v); }
  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
  /// standard error: sample std (ddof 1) / sqrt(n); 0 for a single seed
  double stderror() const {
    if (values.size() < 2) return 0.0;
    double m = mean(), acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    double sd = std::sqrt(acc / static_cast<double>(values.size() - 1));
    return sd / std::sqrt(static_cast<double>(values.size()));
  }
};

inline void write_summary_csv(const std::filesystem::path& path,
                              const std::vector<SeedRunResult>& runs) {
  // fixed row order: map first, then modes in config order
  std::vector<std::string> order;
  for (const auto& run : runs) {
    if (run.failed) continue;
    order.push_back("map");
    for (const auto& mode : run.modes) order.push_back(mode.name);
    break;
  }

  const char* fields[] = {"accuracy", "nll",   "brier",         "ece",
                          "mce",      "auroc", "fallback_rate", "mean_train_loss"};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "mode,n_seeds";
  for (const char* f : fields) out << ',' << f << "_mean," << f << "_se";
  out << '\n';

  for (const std::string& name : order) {
    std::vector<SummaryAccumulator> acc(8);
    int n = 0;
    for (const auto& run : runs) {
      if (run.failed) continue;
      const MetricsReport* m = nullptr;
      std::optional<double> fb;
      double train_loss = 0.0;
      if (name == "map") {
        m = &run.map_metrics;
        train_loss = run.map_train_loss;
      } else {
        for (const auto& mode : run.modes)
          if (mode.name == name) {
            m = &mode.metrics;
            fb = mode.fallback_rate;
            train_loss = mode.mean_train_loss;
          }
      }
      if (!m) continue;
      ++n;
      if (m->accuracy) acc[0].add(*m->accuracy);
      acc[1].add(m->nll);
      if (m->brier) acc[2].add(*m->brier);
      if (m->ece) acc[3].add(*m->ece);
      if (m->mce) acc[4].add(*m->mce);
      if (m->auroc) acc[5].add(*m->auroc);
      if (fb) acc[6].add(*fb);
      acc[7].add(train_loss);
    }
    out << name << ',' << n;
    for (const auto& a : acc) {
      out << ',';
      if (!a.values.empty()) out << format_double(a.mean());
      out << ',';
      if (!a.values.empty()) out << format_double(a.stderror());
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void write_sample_manifest(const std::filesystem::path& path, const ModeRunResult& mode,
                                  const LossContext& eval_ctx) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "sample_id,mode,v_norm,loss,fallback_used,steps\n";
  for (std::size_t s = 0; s < mode.samples.size(); ++s) {
    const PosteriorSample& ps = mode.samples[s];
    out << s << ',' << mode.name << ',' << format_double(ps.velocity.norm()) << ','
        << format_double(loss_value(eval_ctx, ps.theta)) << ',' << (ps.fallback_used ? 1 : 0)
        << ',' << (ps.solver_stats ? ps.solver_stats->steps_accepted : 0) << '\n';
  }
}

inline std::vector<std::string> write_figures(const std::filesystem::path& dir,
                                              const ExperimentConfig& cfg,
                                              const SeedRunResult& run) {
  std::vector<std::string> files;
  const MlpArchitecture& arch = run.stage.arch;
  const Likelihood& lik = run.eval_ctx.likelihood;

  if (lik.kind == LikelihoodKind::categorical && arch.input_dim() == 2) {
    // 100x100 max-probability grid over the data bounding box padded 30%
    Vector lo = run.stage.train.inputs.colwise().minCoeff();
    Vector hi = run.stage.train.inputs.colwise().maxCoeff();
    Vector pad = 0.3 * (hi - lo);
    lo -= pad;
    hi += pad;
    const int nx = 100, ny = 100;
    Matrix grid(nx * ny, 2);
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        grid(j * nx + i, 0) = lo(0) + (hi(0) - lo(0)) * (i + 0.5) / nx;
        grid(j * nx + i, 1) = lo(1) + (hi(1) - lo(1)) * (j + 0.5) / ny;
      }
    double chance = 1.0 / arch.output_dim();

    auto emit = [&](const std::string& name, const std::vector<PosteriorSample>& samples,
                    PredictFn fn) {
      PredictiveResult pred = predictive(arch, samples, grid, fn, lik, run.posterior.theta_star);
      std::vector<double> conf = max_prob_confidences(pred.class_probs);
      std::string file = "fig_confidence_" + name + ".svg";
      svg::write_confidence_heatmap((dir / file).string(), lo(0), hi(0), lo(1), hi(1), nx, ny,
                                    conf, chance, run.stage.train.inputs,
                                    run.stage.train.labels);
      files.push_back(file);
    };
    PosteriorSample map_sample;
    map_sample.theta = run.map_estimate.theta;
    emit("map", {map_sample}, PredictFn::plain);
    for (std::size_t m = 0; m < cfg.modes.size(); ++m)
      emit(run.modes[m].name, run.modes[m].samples, cfg.modes[m].predict_fn());
  }

  if (lik.kind == LikelihoodKind::gaussian && arch.input_dim() == 1) {
    double x_lo = std::min(run.stage.train.inputs.minCoeff(), run.stage.test.inputs.minCoeff());
    double x_hi = std::max(run.stage.train.inputs.maxCoeff(), run.stage.test.inputs.maxCoeff());
    double pad = 0.1 * (x_hi - x_lo);
    const int n_grid = 200;
    Matrix grid(n_grid, 1);
    for (int i = 0; i < n_grid; ++i)
      grid(i, 0) = x_lo - pad + (x_hi - x_lo + 2 * pad) * i / (n_grid - 1);

    auto emit = [&](const std::string& name, const std::vector<PosteriorSample>& samples,
                    PredictFn fn) {
      PredictiveResult pred = predictive(arch, samples, grid, fn, lik, run.posterior.theta_star);
      Vector mean = pred.mixture_mean();
      Vector sd = pred.mixture_variance().cwiseSqrt();
      std::string file = "fig_band_" + name + ".svg";
      svg::write_regression_band((dir / file).string(), grid.col(0), mean, sd,
                                 run.stage.train.inputs, run.stage.train.targets);
      files.push_back(file);
    };
    PosteriorSample map_sample;
    map_sample.theta = run.map_estimate.theta;
    emit("map", {map_sample}, PredictFn::plain);
    for (std::size_t m = 0; m < cfg.modes.size(); ++m)
      emit(run.modes[m].name, run.modes[m].samples, cfg.modes[m].predict_fn());
  }
  return files;
}

}  // namespace detail

/// Runs every seed of the configured experiment and writes results.csv,
/// summary.csv, manifest.json, per-mode sample manifests and figures into
/// out_dir. Per-seed failures are recorded and the rest keeps going.
/// results.csv and summary.csv are pure functions of (config, seeds).
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                        const std::filesystem::path& out_dir, int n_threads = 1,
                                        bool force = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ExperimentOutcome outcome;
  outcome.results_csv = out_dir / "results.csv";
  outcome.summary_csv = out_dir / "summary.csv";
  outcome.manifest_json = out_dir / "manifest.json";
  if (!force && fs::exists(outcome.results_csv))
    throw std::runtime_error("refusing to overwrite " + outcome.results_csv.string() +
                             " (pass --force)");

  std::vector<SeedRunResult> runs;
  std::vector<double> wall_times;
  for (std::uint64_t seed : cfg.seeds) {
    auto t0 = std::chrono::steady_clock::now();
    SeedRunResult run;
    try {
      run = run_seed(cfg, seed, n_threads);
    } catch (const std::exception& e) {
      run.seed = seed;
      run.failed = true;
      run.error = e.what();
      std::fprintf(stderr, "seed %llu failed: %s\n", static_cast<unsigned long long>(seed),
                   e.what());
    }
    wall_times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    runs.push_back(std::move(run));
  }

  detail::write_results_csv(outcome.results_csv, runs);
  detail::write_summary_csv(outcome.summary_csv, runs);

  std::vector<std::string> figure_files;
  for (const auto& run : runs) {
    if (run.failed) continue;
    for (std::size_t m = 0; m < run.modes.size(); ++m) {
      char name[128];
      std::snprintf(name, sizeof(name), "samples_seed%llu_%s.csv",
                    static_cast<unsigned long long>(run.seed), run.modes[m].name.c_str());
      detail::write_sample_manifest(out_dir / name, run.modes[m], run.eval_ctx);
    }
  }
  for (const auto& run : runs) {
    if (run.failed) continue;
    figure_files = detail::write_figures(out_dir, cfg, run);  // first successful seed only
    break;
  }

  nlohmann::json manifest = {
      {"version", kVersion},
      {"config_hash", config_hash(cfg)},
      {"config", config_to_json(cfg)},
      {"wall_time_s", wall_times},
      {"figures", figure_files},
      {"files", {"results.csv", "summary.csv"}},
  };
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& run : runs) {
    outcome.n_seeds++;
    if (run.failed) {
      outcome.n_failed++;
      failed.push_back({{"seed", run.seed}, {"error", run.error}});
    }
  }
  manifest["failed_seeds"] = failed;
  std::ofstream mout(outcome.manifest_json);
  mout << manifest.dump(2) << "\n";
  if (!mout) throw std::runtime_error("write failed for " + outcome.manifest_json.string());
  return outcome;
}

/// Diagnostic suite behind `check`: the oracle checks with a small built-in
/// problem, honoring the config's solver options when one is given.
inline std::vector<CheckResult> run_diagnostics(const ExperimentConfig* cfg_opt = nullptr,
                                                std::uint64_t seed = 1234) {
  std::vector<CheckResult> checks;
  SolverOptions solver;
  if (cfg_opt) solver = cfg_opt->solver;

  // Lemma check is skipped when the configured net is too large for the
  // finite-difference oracle; the randomized small-net sweep always runs.
  if (cfg_opt && cfg_opt->architecture().param_count() > 64) {
    CheckResult skip;
    skip.name = "lemma-equivalence";
    skip.skipped = true;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "configured net has K=%d > 64 (dense oracle limit)",
                  cfg_opt->architecture().param_count());
    skip.detail = buf;
    checks.push_back(skip);
  } else {
    checks.push_back(check_lemma_equivalence(seed));
  }

  checks.push_back(check_hvp_finite_difference(seed));

  // small banana problem for the expmap-based check
  ExperimentConfig cfg;
  cfg.dataset = DatasetSpec::banana_like_default(seed);
  cfg.dataset.n_train = 80;
  cfg.dataset.n_test = 40;
  cfg.hidden_units = {8};
  cfg.optimizer.kind = OptimizerKind::adam;
  cfg.optimizer.lr = 5e-2;
  cfg.optimizer.epochs = 400;
  cfg.prior_precision = 0.1;
  StageData stage = make_stage_data(cfg, seed);
  MapEstimate est = train_map(stage.ctx, seed, cfg.optimizer);
  LaplacePosterior post = fit_laplace(stage.ctx, est.theta, HessianKind::ggn);
  checks.push_back(check_constant_speed(stage.ctx, post, seed, 20, solver));

  checks.push_back(check_covariance_identity(seed));
  return checks;
}

}  // namespace riemla

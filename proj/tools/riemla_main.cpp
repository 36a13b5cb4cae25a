#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "riemla/experiment.hpp"

namespace fs = std::filesystem;
using namespace riemla;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct GlobalOpts {
  std::string out_dir;
  bool force = false;
  int threads = 0;  // 0 = all hardware threads
  std::uint64_t seed = 0;
  bool seed_set = false;
};

std::uint64_t stage_seed(const GlobalOpts& g, const ExperimentConfig& cfg) {
  return g.seed_set ? g.seed : cfg.seeds.front();
}

void require_out(const GlobalOpts& g) {
  if (g.out_dir.empty()) throw ConfigError("--out is required for this command");
  fs::create_directories(g.out_dir);
}

void refuse_overwrite(const fs::path& p, bool force) {
  if (!force && fs::exists(p))
    throw std::runtime_error("refusing to overwrite " + p.string() + " (pass --force)");
}

std::string metrics_csv_header() {
  return "accuracy,nll,brier,ece,mce,n_bins,auroc";
}

std::string metrics_csv_row(const MetricsReport& m) {
  std::string row;
  row += detail::opt_cell(m.accuracy) + ',';
  row += detail::format_double(m.nll) + ',';
  row += detail::opt_cell(m.brier) + ',';
  row += detail::opt_cell(m.ece) + ',';
  row += detail::opt_cell(m.mce) + ',';
  row += std::to_string(m.n_bins) + ',';
  row += detail::opt_cell(m.auroc);
  return row;
}

nlohmann::json metrics_to_json(const MetricsReport& m) {
  nlohmann::json j;
  if (m.accuracy) j["accuracy"] = *m.accuracy;
  j["nll"] = m.nll;
  if (m.brier) j["brier"] = *m.brier;
  if (m.ece) j["ece"] = *m.ece;
  if (m.mce) j["mce"] = *m.mce;
  j["n_bins"] = m.n_bins;
  if (m.auroc) j["auroc"] = *m.auroc;
  j["brier_normalization"] = "per-class mean; multiply by C for the per-point-sum convention";
  return j;
}

int cmd_gen_data(const DatasetSpec& spec, const GlobalOpts& g) {
  require_out(g);
  fs::path train_path = fs::path(g.out_dir) / "train.csv";
  fs::path test_path = fs::path(g.out_dir) / "test.csv";
  refuse_overwrite(train_path, g.force);
  refuse_overwrite(test_path, g.force);
  DatasetSpec use = spec;
  if (g.seed_set) use.seed = g.seed;
  auto [train, test] = generate(use);
  write_csv(train_path.string(), train, use.task());
  write_csv(test_path.string(), test, use.task());
  std::printf("wrote %s (%ld rows) and %s (%ld rows)\n", train_path.c_str(), train.size(),
              test_path.c_str(), test.size());
  return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, const GlobalOpts& g) {
  require_out(g);
  std::uint64_t seed = stage_seed(g, cfg);
  StageData stage = make_stage_data(cfg, seed);
  MapEstimate est = train_map(stage.ctx, detail::derive_seed(seed, detail::kSeedInit),
                              cfg.optimizer);
  fs::path map_path = fs::path(g.out_dir) / "map.bin";
  refuse_overwrite(map_path, g.force);
  save_map_estimate(map_path.string(), stage.arch, est);
  std::ofstream trace(fs::path(g.out_dir) / "trace.csv");
  trace << "epoch,loss\n";
  for (auto [epoch, loss] : est.trace) trace << epoch << ',' << detail::format_double(loss) << '\n';
  std::printf("MAP trained: loss %.6g, grad norm %.3e%s -> %s\n", est.final_loss, est.grad_norm,
              est.stationary ? "" : " (non-stationary!)", map_path.c_str());
  return kExitOk;
}

int cmd_fit_laplace(const ExperimentConfig& cfg, const std::string& map_file,
                    const GlobalOpts& g) {
  require_out(g);
  std::uint64_t seed = stage_seed(g, cfg);
  auto [arch, est] = load_map_estimate(map_file);
  StageData stage = make_stage_data(cfg, seed);
  if (!(arch == stage.arch))
    throw ConfigError("fit-laplace: MAP file architecture does not match the config");

  LossContext eval_ctx = stage.ctx;
  if (cfg.optimize_prior) {
    HyperOptResult hyper = optimize_hyperparameters(stage.ctx, est.theta, cfg.hessian_kind);
    eval_ctx = with_prior_precision(stage.ctx, hyper.alpha);
    if (hyper.sigma2) eval_ctx = with_sigma2(eval_ctx, *hyper.sigma2);
    std::printf("evidence-optimized alpha %.6g%s\n", hyper.alpha,
                hyper.sigma2 ? (" sigma2 " + std::to_string(*hyper.sigma2)).c_str() : "");
  }
  LaplacePosterior post = fit_laplace(eval_ctx, est.theta, cfg.hessian_kind);
  fs::path path = fs::path(g.out_dir) / "posterior.bin";
  refuse_overwrite(path, g.force);
  save_posterior(path.string(), post);
  std::printf("posterior (K=%d, %s) -> %s\n", post.param_count(),
              cfg.hessian_kind == HessianKind::ggn ? "ggn" : "exact", path.c_str());
  return kExitOk;
}

int cmd_sample(const ExperimentConfig& cfg, const std::string& posterior_file,
               const std::string& mode_name, int batch, int n_samples, int n_trajectories,
               const GlobalOpts& g) {
  require_out(g);
  std::uint64_t seed = stage_seed(g, cfg);
  LaplacePosterior post = load_posterior(posterior_file);
  StageData stage = make_stage_data(cfg, seed);
  LossContext eval_ctx = with_prior_precision(stage.ctx, post.alpha);
  if (eval_ctx.likelihood.kind == LikelihoodKind::gaussian)
    eval_ctx = with_sigma2(eval_ctx, post.sigma2);

  SampleMode mode;
  if (mode_name == "vanilla")
    mode.kind = SampleKind::vanilla;
  else if (mode_name == "riem")
    mode.kind = SampleKind::riem;
  else if (mode_name == "lin-riem")
    mode.kind = SampleKind::lin_riem;
  else
    throw ConfigError("sample: --mode must be vanilla, riem or lin-riem");
  mode.batch_size = batch;

  std::uint64_t master = detail::derive_seed(seed, detail::kSeedSample, 0);
  auto samples = draw_samples(post, eval_ctx, mode, n_samples, master, cfg.solver, g.threads);

  fs::path bin_path = fs::path(g.out_dir) / "samples.bin";
  refuse_overwrite(bin_path, g.force);
  save_samples(bin_path.string(), stage.arch, samples);
  ModeRunResult manifest;
  manifest.name = mode_name;
  manifest.samples = samples;
  detail::write_sample_manifest(fs::path(g.out_dir) / "samples.csv", manifest, eval_ctx);

  if (n_trajectories > 0 && mode.kind != SampleKind::vanilla) {
    // re-solve the first few draws with dense output; same seeds, same paths
    LossContext geo_ctx = mode.kind == SampleKind::lin_riem
                              ? make_linearized_context(eval_ctx, post.theta_star)
                              : eval_ctx;
    SolverOptions opts = cfg.solver;
    opts.store_trajectory = true;
    for (int s = 0; s < std::min(n_trajectories, n_samples); ++s) {
      const LossContext* use_ctx = &geo_ctx;
      LossContext batch_ctx;
      if (mode.batched()) {
        Rng batch_rng = Rng::stream(master, static_cast<std::uint64_t>(s), 1);
        batch_ctx = make_minibatch_ctx(geo_ctx, mode.batch_size, batch_rng);
        use_ctx = &batch_ctx;
      }
      char name[64];
      std::snprintf(name, sizeof(name), "trajectory_%03d.csv", s);
      try {
        GeodesicSolution sol =
            expmap(*use_ctx, post.theta_star, samples[static_cast<std::size_t>(s)].velocity, opts);
        dump_trajectory_csv((fs::path(g.out_dir) / name).string(), *use_ctx, sol,
                            post.theta_star);
      } catch (const GeodesicIntegrationError&) {
        std::fprintf(stderr, "trajectory %d not written: integration failed\n", s);
      }
    }
  }
  std::printf("drew %zu %s samples (fallback rate %.3f) -> %s\n", samples.size(),
              mode_name.c_str(), fallback_rate(samples), bin_path.c_str());
  return kExitOk;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& posterior_file,
                 const std::string& samples_file, const std::string& predict,
                 const GlobalOpts& g) {
  require_out(g);
  std::uint64_t seed = stage_seed(g, cfg);
  LaplacePosterior post = load_posterior(posterior_file);
  MlpArchitecture arch;
  auto samples = load_samples(samples_file, &arch);
  StageData stage = make_stage_data(cfg, seed);
  if (!(arch == stage.arch))
    throw ConfigError("evaluate: samples architecture does not match the config");

  Likelihood lik = cfg.likelihood();
  if (lik.kind == LikelihoodKind::gaussian) lik.sigma2 = post.sigma2;
  PredictFn fn = default_predict_fn(samples.front().mode.kind);
  if (predict == "plain")
    fn = PredictFn::plain;
  else if (predict == "linearized")
    fn = PredictFn::linearized;
  else if (predict != "default")
    throw ConfigError("evaluate: --predict must be plain, linearized or default");

  MetricsReport report = detail::score_predictive(cfg, stage.arch, samples, fn, lik,
                                                  post.theta_star, stage.test, seed);
  std::ofstream csv(fs::path(g.out_dir) / "metrics.csv");
  csv << metrics_csv_header() << '\n' << metrics_csv_row(report) << '\n';
  std::ofstream js(fs::path(g.out_dir) / "metrics.json");
  js << metrics_to_json(report).dump(2) << '\n';
  std::printf("%s\n%s\n", metrics_csv_header().c_str(), metrics_csv_row(report).c_str());
  return kExitOk;
}

int cmd_experiment(const ExperimentConfig& cfg, const GlobalOpts& g) {
  std::string out = !g.out_dir.empty() ? g.out_dir
                    : !cfg.output_dir.empty() ? cfg.output_dir
                                              : std::string();
  if (out.empty()) throw ConfigError("experiment: pass --out or set 'outputs' in the config");
  ExperimentOutcome outcome = run_experiment(cfg, out, g.threads, g.force);
  std::printf("experiment finished: %d/%d seeds ok; results in %s\n",
              outcome.n_seeds - outcome.n_failed, outcome.n_seeds, out.c_str());
  if (outcome.n_failed == outcome.n_seeds) return kExitRuntime;
  return kExitOk;
}

int cmd_check(const ExperimentConfig* cfg, std::uint64_t seed) {
  auto checks = run_diagnostics(cfg, seed);
  bool all_ok = true;
  for (const auto& c : checks) {
    const char* tag = c.skipped ? "SKIP" : (c.pass ? "PASS" : "FAIL");
    std::printf("[%s] %-24s %s\n", tag, c.name.c_str(), c.detail.c_str());
    if (!c.skipped && !c.pass) all_ok = false;
  }
  return all_ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Riemannian Laplace approximations for Bayesian neural networks"};
  app.require_subcommand(1);
  app.fallthrough(true);

  GlobalOpts g;
  app.add_option("--out", g.out_dir, "output directory");
  app.add_flag("--force", g.force, "overwrite existing outputs");
  app.add_option("--threads", g.threads, "worker threads (0 = all cores)");
  auto* seed_opt = app.add_option("--seed", g.seed, "override the run seed");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset as CSV");
  std::string gen_kind = "banana_like";
  DatasetSpec gen_spec = DatasetSpec::banana_like_default(0);
  int gen_train = -1, gen_test = -1;
  double gen_noise = -1.0;
  gen->add_option("--kind", gen_kind, "banana_like | pinwheel | gapped_sine");
  gen->add_option("--n-train", gen_train, "training points");
  gen->add_option("--n-test", gen_test, "test points");
  gen->add_option("--noise", gen_noise, "noise level");

  std::string config_path, map_file, posterior_file, samples_file;
  std::string sample_mode = "riem", predict = "default";
  int sample_batch = 0, sample_count = 100, sample_trajectories = 0;

  auto* train = app.add_subcommand("train", "train the MAP estimate");
  train->add_option("--config", config_path, "experiment config JSON")->required();

  auto* fitlap = app.add_subcommand("fit-laplace", "fit the Laplace posterior at a trained MAP");
  fitlap->add_option("--config", config_path, "experiment config JSON")->required();
  fitlap->add_option("--map", map_file, "map.bin from `train`")->required();

  auto* sample = app.add_subcommand("sample", "draw posterior samples");
  sample->add_option("--config", config_path, "experiment config JSON")->required();
  sample->add_option("--posterior", posterior_file, "posterior.bin from `fit-laplace`")->required();
  sample->add_option("--mode", sample_mode, "vanilla | riem | lin-riem");
  sample->add_option("--batch", sample_batch, "mini-batch size for the metric (0 = full data)");
  sample->add_option("--samples", sample_count, "number of samples S");
  sample->add_option("--trajectories", sample_trajectories,
                     "dump the first N geodesic trajectories as CSV");

  auto* evaluate = app.add_subcommand("evaluate", "score stored samples on the test split");
  evaluate->add_option("--config", config_path, "experiment config JSON")->required();
  evaluate->add_option("--posterior", posterior_file, "posterior.bin")->required();
  evaluate->add_option("--samples", samples_file, "samples.bin from `sample`")->required();
  evaluate->add_option("--predict", predict, "plain | linearized | default");

  auto* experiment = app.add_subcommand("experiment", "run the full multi-seed experiment");
  experiment->add_option("--config", config_path, "experiment config JSON")->required();

  auto* check = app.add_subcommand("check", "run the numerical diagnostics suite");
  check->add_option("--config", config_path, "experiment config JSON (optional)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (gen->parsed()) {
      if (gen_kind == "banana_like")
        gen_spec = DatasetSpec::banana_like_default(g.seed);
      else if (gen_kind == "pinwheel")
        gen_spec = DatasetSpec::pinwheel_default(g.seed);
      else if (gen_kind == "gapped_sine")
        gen_spec = DatasetSpec::gapped_sine_default(g.seed);
      else
        throw ConfigError("gen-data: unknown --kind " + gen_kind);
      if (gen_train > 0) gen_spec.n_train = gen_train;
      if (gen_test > 0) gen_spec.n_test = gen_test;
      if (gen_noise >= 0) gen_spec.noise = gen_noise;
      return cmd_gen_data(gen_spec, g);
    }
    if (check->parsed()) {
      if (!config_path.empty()) {
        ExperimentConfig cfg = load_experiment_config(config_path);
        return cmd_check(&cfg, g.seed_set ? g.seed : 1234);
      }
      return cmd_check(nullptr, g.seed_set ? g.seed : 1234);
    }
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (train->parsed()) return cmd_train(cfg, g);
    if (fitlap->parsed()) return cmd_fit_laplace(cfg, map_file, g);
    if (sample->parsed()) return cmd_sample(cfg, posterior_file, sample_mode, sample_batch,
                                            sample_count, sample_trajectories, g);
    if (evaluate->parsed()) return cmd_evaluate(cfg, posterior_file, samples_file, predict, g);
    if (experiment->parsed()) return cmd_experiment(cfg, g);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

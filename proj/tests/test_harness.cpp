#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "riemla/experiment.hpp"

using namespace riemla;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_banana_config() {
  ExperimentConfig cfg;
  cfg.dataset = DatasetSpec::banana_like_default(3);
  cfg.dataset.n_train = 60;
  cfg.dataset.n_test = 40;
  cfg.hidden_units = {6};
  cfg.optimizer.kind = OptimizerKind::adam;
  cfg.optimizer.lr = 2e-2;
  cfg.optimizer.epochs = 400;
  cfg.prior_precision = 0.1;
  cfg.optimize_prior = true;
  cfg.modes = {ModeSpec{SampleMode{SampleKind::vanilla, 0}, std::nullopt},
               ModeSpec{SampleMode{SampleKind::riem, 0}, std::nullopt}};
  cfg.n_samples = 6;
  cfg.seeds = {1, 2};
  return cfg;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: strict schema") {
  nlohmann::json good = {
      {"dataset", {{"kind", "banana_like"}, {"n_train", 50}, {"n_test", 20}, {"seed", 1}}},
      {"hidden_units", {8, 8}},
      {"optimizer", {{"kind", "adam"}, {"lr", 0.01}, {"epochs", 100}}},
      {"modes", {{{"kind", "vanilla"}}, {{"kind", "riem"}, {"batch_size", 10}}}},
      {"samples", 5},
      {"seeds", {0, 1}},
  };
  ExperimentConfig cfg = parse_experiment_config(good);
  CHECK(cfg.architecture().param_count() ==
        MlpArchitecture({2, 8, 8, 2}).param_count());
  CHECK(cfg.modes.size() == 2);
  CHECK(cfg.modes[1].mode.batch_size == 10);

  nlohmann::json unknown = good;
  unknown["typo_key"] = 1;
  CHECK_THROWS_WITH(parse_experiment_config(unknown),
                    Catch::Matchers::ContainsSubstring("typo_key"));

  nlohmann::json nested = good;
  nested["dataset"]["surprise"] = true;
  CHECK_THROWS_AS(parse_experiment_config(nested), ConfigError);

  nlohmann::json bad_mode = good;
  bad_mode["modes"] = {{{"kind", "vanilla"}, {"batch_size", 5}}};
  CHECK_THROWS_AS(parse_experiment_config(bad_mode), ConfigError);

  nlohmann::json bad_value = good;
  bad_value["samples"] = 0;
  CHECK_THROWS_AS(parse_experiment_config(bad_value), ConfigError);

  CHECK_THROWS_AS(parse_experiment_config(nlohmann::json::object()), ConfigError);
}

TEST_CASE("mode names cover the method table") {
  CHECK(ModeSpec{SampleMode{SampleKind::vanilla, 0}, std::nullopt}.name() == "vanilla-la");
  CHECK(ModeSpec{SampleMode{SampleKind::vanilla, 0}, PredictFn::linearized}.name() == "lin-la");
  CHECK(ModeSpec{SampleMode{SampleKind::riem, 0}, std::nullopt}.name() == "riem-la");
  CHECK(ModeSpec{SampleMode{SampleKind::riem, 50}, std::nullopt}.name() == "riem-la-batch");
  CHECK(ModeSpec{SampleMode{SampleKind::lin_riem, 0}, std::nullopt}.name() == "lin-riem-la");
  CHECK(ModeSpec{SampleMode{SampleKind::lin_riem, 50}, std::nullopt}.name() ==
        "lin-riem-la-batch");
}

TEST_CASE("experiment: outputs, summary stderr identity, reruns bit-identical") {
  ExperimentConfig cfg = tiny_banana_config();
  fs::path dir = fs::temp_directory_path() / "riemla_exp_test";
  fs::remove_all(dir);

  ExperimentOutcome outcome = run_experiment(cfg, dir, 1, false);
  CHECK(outcome.n_failed == 0);
  REQUIRE(fs::exists(outcome.results_csv));
  REQUIRE(fs::exists(outcome.summary_csv));
  REQUIRE(fs::exists(outcome.manifest_json));

  // one row per seed x (map + modes)
  std::string results = slurp(outcome.results_csv);
  long rows = std::count(results.begin(), results.end(), '\n') - 1;
  CHECK(rows == static_cast<long>(cfg.seeds.size() * (1 + cfg.modes.size())));

  // every figure in the manifest exists and is non-empty
  nlohmann::json manifest = nlohmann::json::parse(slurp(outcome.manifest_json));
  CHECK(manifest.at("figures").size() == 1 + cfg.modes.size());
  for (const auto& fig : manifest.at("figures")) {
    fs::path p = dir / fig.get<std::string>();
    CHECK(fs::exists(p));
    CHECK(fs::file_size(p) > 0);
  }
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);

  // summary standard errors equal std/sqrt(n) of the results rows
  {
    std::ifstream in(outcome.results_csv);
    std::string line;
    std::string cell;
    std::getline(in, line);
    std::vector<double> riem_nll;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells[1] == "riem-la") riem_nll.push_back(std::stod(cells[3]));
    }
    REQUIRE(riem_nll.size() == 2);
    double mean = (riem_nll[0] + riem_nll[1]) / 2.0;
    double sd = std::sqrt(((riem_nll[0] - mean) * (riem_nll[0] - mean) +
                           (riem_nll[1] - mean) * (riem_nll[1] - mean)) /
                          1.0);
    double se = sd / std::sqrt(2.0);

    std::ifstream sin(outcome.summary_csv);
    std::getline(sin, line);  // header
    std::stringstream hs(line);
    std::vector<std::string> header;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
    std::size_t nll_se_col = 0;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == "nll_se") nll_se_col = i;
    REQUIRE(nll_se_col > 0);
    bool checked = false;
    while (std::getline(sin, line)) {
      std::stringstream ss(line);
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells[0] == "riem-la") {
        CHECK(std::stod(cells[nll_se_col]) == Catch::Approx(se).epsilon(1e-12));
        checked = true;
      }
    }
    CHECK(checked);
  }

  // refusal without --force
  CHECK_THROWS_WITH(run_experiment(cfg, dir, 1, false),
                    Catch::Matchers::ContainsSubstring("--force"));

  // rerun with force and a different thread count: bit-identical csv
  fs::path dir2 = fs::temp_directory_path() / "riemla_exp_test2";
  fs::remove_all(dir2);
  run_experiment(cfg, dir2, 3, false);
  CHECK(slurp(dir / "results.csv") == slurp(dir2 / "results.csv"));
  CHECK(slurp(dir / "summary.csv") == slurp(dir2 / "summary.csv"));

  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("experiment: zero-covariance sampling reproduces MAP metrics") {
  ExperimentConfig cfg = tiny_banana_config();
  cfg.optimize_prior = false;
  std::uint64_t seed = 4;
  StageData stage = make_stage_data(cfg, seed);
  MapEstimate est = train_map(stage.ctx, detail::derive_seed(seed, detail::kSeedInit),
                              cfg.optimizer);
  LaplacePosterior post = fit_laplace(stage.ctx, est.theta, HessianKind::ggn);
  post.chol_cov.setZero();  // the z == 0 hook: every sample collapses onto theta*
  auto samples = draw_samples(post, stage.ctx, SampleMode{SampleKind::vanilla, 0}, 1, 9);

  PosteriorSample map_sample;
  map_sample.theta = est.theta;
  PredictiveResult sampled = predictive(stage.arch, samples, stage.test.inputs, PredictFn::plain,
                                        Likelihood::categorical());
  PredictiveResult direct = predictive(stage.arch, {map_sample}, stage.test.inputs,
                                       PredictFn::plain, Likelihood::categorical());
  MetricsReport a = classification_metrics(sampled.class_probs, stage.test.labels, cfg.n_bins);
  MetricsReport b = classification_metrics(direct.class_probs, stage.test.labels, cfg.n_bins);
  CHECK(*a.accuracy == *b.accuracy);
  CHECK(a.nll == b.nll);
  CHECK(*a.brier == *b.brier);
}

TEST_CASE("regression experiment writes band figures") {
  ExperimentConfig cfg;
  cfg.dataset = DatasetSpec::gapped_sine_default(11);
  cfg.dataset.n_train = 60;
  cfg.dataset.n_test = 20;
  cfg.hidden_units = {8};
  cfg.optimizer.kind = OptimizerKind::adam;
  cfg.optimizer.lr = 2e-2;
  cfg.optimizer.epochs = 500;
  cfg.sigma2 = 0.04;
  cfg.prior_precision = 0.1;
  cfg.optimize_prior = false;
  cfg.modes = {ModeSpec{SampleMode{SampleKind::riem, 0}, std::nullopt}};
  cfg.n_samples = 4;
  cfg.seeds = {5};

  fs::path dir = fs::temp_directory_path() / "riemla_reg_test";
  fs::remove_all(dir);
  ExperimentOutcome outcome = run_experiment(cfg, dir, 1, false);
  CHECK(outcome.n_failed == 0);
  CHECK(fs::exists(dir / "fig_band_map.svg"));
  CHECK(fs::exists(dir / "fig_band_riem-la.svg"));
  CHECK(fs::exists(dir / "samples_seed5_riem-la.csv"));

  // results row carries a finite regression NLL and empty classification cells
  std::string results = slurp(outcome.results_csv);
  CHECK(results.find("riem-la") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("diagnostics: healthy defaults pass, corrupted tolerance fails") {
  auto checks = run_diagnostics(nullptr, 77);
  for (const auto& c : checks) {
    INFO(c.name << ": " << c.detail);
    CHECK((c.pass || c.skipped));
  }

  ExperimentConfig corrupted = tiny_banana_config();
  corrupted.solver.rtol = 10.0;
  auto bad = run_diagnostics(&corrupted, 77);
  bool speed_failed = false;
  for (const auto& c : bad)
    if (c.name == "constant-speed") speed_failed = !c.pass;
  CHECK(speed_failed);
}

TEST_CASE("diagnostics: oversized net skips the lemma check with a reason") {
  ExperimentConfig cfg = tiny_banana_config();
  cfg.hidden_units = {64, 64};
  auto checks = run_diagnostics(&cfg, 77);
  bool found = false;
  for (const auto& c : checks)
    if (c.name == "lemma-equivalence") {
      CHECK(c.skipped);
      CHECK(c.detail.find("K=") != std::string::npos);
      found = true;
    }
  CHECK(found);
}

TEST_CASE("stage data derivation: seeds change data, csv datasets pass through") {
  ExperimentConfig cfg = tiny_banana_config();
  StageData a = make_stage_data(cfg, 1);
  StageData b = make_stage_data(cfg, 2);
  CHECK(a.train.inputs != b.train.inputs);

  fs::path dir = fs::temp_directory_path() / "riemla_stage_test";
  fs::create_directories(dir);
  write_csv((dir / "train.csv").string(), a.train, TaskKind::classification);
  write_csv((dir / "test.csv").string(), a.test, TaskKind::classification);
  ExperimentConfig csv_cfg = cfg;
  csv_cfg.dataset.kind = DatasetKind::csv;
  csv_cfg.dataset.train_path = (dir / "train.csv").string();
  csv_cfg.dataset.test_path = (dir / "test.csv").string();
  StageData c1 = make_stage_data(csv_cfg, 1);
  StageData c2 = make_stage_data(csv_cfg, 2);
  CHECK(c1.train.inputs == c2.train.inputs);  // csv ignores the run seed
  CHECK(c1.train.inputs == a.train.inputs);
  fs::remove_all(dir);
}
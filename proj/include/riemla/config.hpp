#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "riemla/datasets.hpp"
#include "riemla/geometry.hpp"
#include "riemla/laplace.hpp"
#include "riemla/sampling.hpp"

namespace riemla {

/// Invalid configuration input (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One sampling mode to run; the predictive defaults to plain for
/// vanilla/riem and linearized for lin_riem unless overridden.
struct ModeSpec {
  SampleMode mode;
  std::optional<PredictFn> predict_override;

  PredictFn predict_fn() const {
    return predict_override ? *predict_override : default_predict_fn(mode.kind);
  }

  std::string name() const {
    std::string base;
    switch (mode.kind) {
      case SampleKind::vanilla:
        base = predict_fn() == PredictFn::linearized ? "lin-la" : "vanilla-la";
        break;
      case SampleKind::riem:
        base = predict_fn() == PredictFn::linearized ? "riem-la-predlin" : "riem-la";
        break;
      case SampleKind::lin_riem:
        base = predict_fn() == PredictFn::plain ? "lin-riem-la-predplain" : "lin-riem-la";
        break;
    }
    if (mode.batched()) base += "-batch";
    return base;
  }
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<int> hidden_units = {16, 16};
  OptimizerConfig optimizer;
  double prior_precision = 1e-2;
  double sigma2 = 0.04;  // gaussian tasks only
  HessianKind hessian_kind = HessianKind::ggn;
  bool optimize_prior = true;
  std::vector<ModeSpec> modes;
  int n_samples = 100;
  std::vector<std::uint64_t> seeds = {0};
  SolverOptions solver;
  int n_bins = 10;
  std::string output_dir;

  MlpArchitecture architecture() const {
    std::vector<int> widths;
    widths.push_back(dataset.input_dim());
    widths.insert(widths.end(), hidden_units.begin(), hidden_units.end());
    widths.push_back(dataset.task() == TaskKind::classification
                         ? std::max(2, dataset.num_classes())
                         : 1);
    return MlpArchitecture(widths);
  }

  Likelihood likelihood() const {
    return dataset.task() == TaskKind::classification ? Likelihood::categorical()
                                                      : Likelihood::gaussian(sigma2);
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
T get_or(const nlohmann::json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

inline DatasetSpec parse_dataset(const nlohmann::json& obj) {
  reject_unknown_keys(obj,
                      {"kind", "n_train", "n_test", "seed", "noise", "pinwheel_rate",
                       "pinwheel_radial_std", "pinwheel_angle_std", "pinwheel_arms", "train_path",
                       "test_path"},
                      "dataset");
  std::string kind = get_or<std::string>(obj, "kind", "banana_like");
  DatasetSpec spec;
  if (kind == "banana_like")
    spec = DatasetSpec::banana_like_default(0);
  else if (kind == "pinwheel")
    spec = DatasetSpec::pinwheel_default(0);
  else if (kind == "gapped_sine")
    spec = DatasetSpec::gapped_sine_default(0);
  else if (kind == "csv")
    spec.kind = DatasetKind::csv;
  else
    throw ConfigError("config: unknown dataset kind '" + kind + "'");
  spec.n_train = get_or<int>(obj, "n_train", spec.n_train);
  spec.n_test = get_or<int>(obj, "n_test", spec.n_test);
  spec.seed = get_or<std::uint64_t>(obj, "seed", spec.seed);
  spec.noise = get_or<double>(obj, "noise", spec.noise);
  spec.pinwheel_rate = get_or<double>(obj, "pinwheel_rate", spec.pinwheel_rate);
  spec.pinwheel_radial_std = get_or<double>(obj, "pinwheel_radial_std", spec.pinwheel_radial_std);
  spec.pinwheel_angle_std = get_or<double>(obj, "pinwheel_angle_std", spec.pinwheel_angle_std);
  spec.pinwheel_arms = get_or<int>(obj, "pinwheel_arms", spec.pinwheel_arms);
  spec.train_path = get_or<std::string>(obj, "train_path", "");
  spec.test_path = get_or<std::string>(obj, "test_path", "");
  if (spec.kind == DatasetKind::csv && spec.train_path.empty())
    throw ConfigError("config: csv dataset needs train_path");
  if (spec.kind != DatasetKind::csv && (spec.n_train < 1 || spec.n_test < 1))
    throw ConfigError("config: n_train and n_test must be positive");
  if (spec.noise < 0) throw ConfigError("config: noise must be non-negative");
  return spec;
}

inline OptimizerConfig parse_optimizer(const nlohmann::json& obj) {
  reject_unknown_keys(obj, {"kind", "lr", "epochs", "momentum", "cosine_decay"}, "optimizer");
  OptimizerConfig cfg;
  std::string kind = get_or<std::string>(obj, "kind", "adam");
  if (kind == "adam")
    cfg.kind = OptimizerKind::adam;
  else if (kind == "gd")
    cfg.kind = OptimizerKind::gd;
  else
    throw ConfigError("config: unknown optimizer kind '" + kind + "'");
  cfg.lr = get_or<double>(obj, "lr", 1e-3);
  cfg.epochs = get_or<int>(obj, "epochs", 1000);
  cfg.momentum = get_or<double>(obj, "momentum", 0.0);
  cfg.cosine_decay = get_or<bool>(obj, "cosine_decay", false);
  if (cfg.lr <= 0 || cfg.epochs < 1) throw ConfigError("config: optimizer lr/epochs invalid");
  return cfg;
}

inline ModeSpec parse_mode(const nlohmann::json& obj) {
  reject_unknown_keys(obj, {"kind", "batch_size", "predict"}, "modes[]");
  ModeSpec spec;
  std::string kind = get_or<std::string>(obj, "kind", "");
  if (kind == "vanilla")
    spec.mode.kind = SampleKind::vanilla;
  else if (kind == "riem")
    spec.mode.kind = SampleKind::riem;
  else if (kind == "lin_riem")
    spec.mode.kind = SampleKind::lin_riem;
  else
    throw ConfigError("config: unknown mode kind '" + kind + "'");
  spec.mode.batch_size = get_or<int>(obj, "batch_size", 0);
  std::string predict = get_or<std::string>(obj, "predict", "default");
  if (predict == "plain")
    spec.predict_override = PredictFn::plain;
  else if (predict == "linearized")
    spec.predict_override = PredictFn::linearized;
  else if (predict != "default")
    throw ConfigError("config: predict must be plain/linearized/default");
  try {
    spec.mode.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return spec;
}

inline SolverOptions parse_solver(const nlohmann::json& obj) {
  reject_unknown_keys(obj, {"rtol", "atol", "max_steps", "initial_step"}, "solver");
  SolverOptions opts;
  opts.rtol = get_or<double>(obj, "rtol", opts.rtol);
  opts.atol = get_or<double>(obj, "atol", opts.atol);
  opts.max_steps = get_or<int>(obj, "max_steps", opts.max_steps);
  opts.initial_step = get_or<double>(obj, "initial_step", opts.initial_step);
  try {
    opts.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return opts;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& root) {
  detail::reject_unknown_keys(root,
                              {"dataset", "hidden_units", "optimizer", "prior_precision", "sigma2",
                               "laplace", "modes", "samples", "seeds", "solver", "n_bins",
                               "outputs"},
                              "config root");
  ExperimentConfig cfg;
  if (!root.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  cfg.dataset = detail::parse_dataset(root.at("dataset"));
  cfg.hidden_units = detail::get_or<std::vector<int>>(root, "hidden_units", cfg.hidden_units);
  for (int h : cfg.hidden_units)
    if (h < 1) throw ConfigError("config: hidden_units must be positive");
  if (root.contains("optimizer")) cfg.optimizer = detail::parse_optimizer(root.at("optimizer"));
  cfg.prior_precision = detail::get_or<double>(root, "prior_precision", cfg.prior_precision);
  cfg.sigma2 = detail::get_or<double>(root, "sigma2", cfg.sigma2);
  if (cfg.prior_precision <= 0 || cfg.sigma2 <= 0)
    throw ConfigError("config: prior_precision and sigma2 must be positive");
  if (root.contains("laplace")) {
    const auto& lap = root.at("laplace");
    detail::reject_unknown_keys(lap, {"hessian_kind", "optimize_prior"}, "laplace");
    std::string kind = detail::get_or<std::string>(lap, "hessian_kind", "ggn");
    if (kind == "ggn")
      cfg.hessian_kind = HessianKind::ggn;
    else if (kind == "exact")
      cfg.hessian_kind = HessianKind::exact;
    else
      throw ConfigError("config: hessian_kind must be ggn or exact");
    cfg.optimize_prior = detail::get_or<bool>(lap, "optimize_prior", true);
  }
  if (root.contains("modes")) {
    if (!root.at("modes").is_array()) throw ConfigError("config: modes must be an array");
    for (const auto& m : root.at("modes")) cfg.modes.push_back(detail::parse_mode(m));
  }
  if (cfg.modes.empty()) {
    cfg.modes.push_back(ModeSpec{SampleMode{SampleKind::vanilla, 0}, std::nullopt});
    cfg.modes.push_back(ModeSpec{SampleMode{SampleKind::riem, 0}, std::nullopt});
  }
  cfg.n_samples = detail::get_or<int>(root, "samples", cfg.n_samples);
  if (cfg.n_samples < 1) throw ConfigError("config: samples must be >= 1");
  cfg.seeds = detail::get_or<std::vector<std::uint64_t>>(root, "seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  if (root.contains("solver")) cfg.solver = detail::parse_solver(root.at("solver"));
  cfg.n_bins = detail::get_or<int>(root, "n_bins", cfg.n_bins);
  if (cfg.n_bins < 1) throw ConfigError("config: n_bins must be >= 1");
  cfg.output_dir = detail::get_or<std::string>(root, "outputs", "");
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(root);
}

}  // namespace riemla

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "relax/agent.hpp"
#include "relax/eval.hpp"

namespace relax {

struct PredictorSpec {
  std::string kind = "mlp";  // mlp | external
  std::vector<int> hidden = {64, 128};
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::string path;      // saved MlpPredictor; loaded instead of training when present
  std::string endpoint;  // tcp://host:port or exec:<cmd>
  double timeout_s = 5.0;
};

struct EvalSpec {
  int repetitions = 5;
  int instances = 0;  // 0 = every eligible test row
  std::vector<std::string> methods = {"global"};
};

/// One run: data, predictor, goal, environment, agent training and evaluation.
struct RunConfig {
  std::string dataset;
  std::string schema;
  double train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  PredictorSpec predictor;
  GoalSpec goal;
  EnvConfig env;
  TrainConfig train;
  EvalSpec eval;
  std::string output_dir = "out";

  void validate() const;
  nlohmann::json to_json() const;
  /// Relative paths are resolved against `base`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  static RunConfig load(const std::filesystem::path& path);
};

/// Applies "a.b=value" to a config document; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct PreparedRun {
  Dataset raw_train, raw_test;
  Dataset train, test;  // normalized
  NormalizationStats stats;
  PredictorPtr predictor;
  double model_metric = 0.0;  // accuracy or RMSE on the test split
  bool model_trained = false;
};

/// Loads and splits the data, fits the normalizer, then trains, loads or
/// connects the predictor.
PreparedRun prepare_run(const RunConfig& config);

/// Test-row indices the goal admits, capped by eval.instances.
std::vector<std::size_t> eval_indices(const RunConfig& config, PreparedRun& run);

using Progress = std::function<void(const std::string&)>;

/// Runs one method (global | local | nearest-ct) for eval.repetitions rounds.
MetricsReport evaluate_method(const RunConfig& config, PreparedRun& run, const std::string& method,
                              const Progress& progress = {});

struct SweepRow {
  double value = 0.0;  // the swept parameter
  MetricsReport report;
  Aggregate validity;
  std::optional<Aggregate> sparsity;
  std::optional<Aggregate> proximity;
};

std::vector<SweepRow> sweep_sparsity_cap(const RunConfig& config, PreparedRun& run, const std::vector<int>& caps,
                                         const Progress& progress = {});
std::vector<SweepRow> sweep_lambda(const RunConfig& config, PreparedRun& run, const std::vector<double>& lambdas,
                                   const Progress& progress = {});

}  // namespace relax

#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "relax/nn.hpp"
#include "relax/result.hpp"
#include "relax/tabular.hpp"

namespace relax {

/// The black-box model being explained. Inputs are normalized feature vectors;
/// classification returns the class index, regression a raw-unit scalar.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual Task task() const = 0;
  virtual int n_features() const = 0;
  virtual int n_classes() const = 0;  // 0 for regression

  virtual double predict(const Vec& x) = 0;
  /// X holds one instance per row.
  virtual std::vector<double> predict_batch(const Mat& X);
};

using PredictorPtr = std::shared_ptr<Predictor>;

/// Index of the largest score, lowest index on exact ties.
int argmax_lowest(const Vec& scores);

/// In-process MLP target. Regression nets are trained on standardized labels
/// and mapped back to raw units on output.
class MlpPredictor final : public Predictor {
 public:
  MlpPredictor(DenseNet net, Task task, double label_mean = 0.0, double label_scale = 1.0);

  Task task() const override { return task_; }
  int n_features() const override { return net_.input_size(); }
  int n_classes() const override { return task_ == Task::Classification ? net_.output_size() : 0; }
  double predict(const Vec& x) override;
  std::vector<double> predict_batch(const Mat& X) override;

  /// Class probabilities (classification) or the raw-unit value as a 1-vector.
  Vec scores(const Vec& x) const;

  const DenseNet& net() const { return net_; }
  double label_mean() const { return label_mean_; }
  double label_scale() const { return label_scale_; }

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<MlpPredictor> load(const std::filesystem::path& path);

 private:
  DenseNet net_;
  Task task_;
  double label_mean_;
  double label_scale_;
};

struct MlpTrainConfig {
  std::vector<int> hidden = {64, 128};
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
};

std::shared_ptr<MlpPredictor> train_mlp_classifier(const Dataset& train, const MlpTrainConfig& config);
std::shared_ptr<MlpPredictor> train_mlp_regressor(const Dataset& train, const MlpTrainConfig& config);

/// Accuracy for classification, RMSE in raw label units for regression.
double evaluate(Predictor& predictor, const Dataset& test);

/// Training rows with their predicted classes, for the Nearest-CT baseline.
struct NearestCtIndex {
  Mat rows;  // normalized
  std::vector<int> predicted;

  static NearestCtIndex build(const Dataset& train, Predictor& predictor);
};

/// Closest (L1) training row whose predicted class differs from h(x); ties go
/// to the earlier row. Throws NoCounterfactual when none exists.
CfResult nearest_ct(const NearestCtIndex& index, const Vec& x, Predictor& predictor);

}  // namespace relax

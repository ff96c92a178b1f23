#include "relax/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace relax {

namespace {

constexpr char kModelMagic[6] = {'R', 'L', 'X', 'M', 'L', 'P'};
constexpr std::uint32_t kModelVersion = 1;

void check_trainable(const Dataset& train) {
  if (train.size() == 0) throw ConfigError("empty training set");
  if (!train.normalized) throw ConfigError("MLP targets are trained on normalized data");
  train.validate();
}

// Minibatch Adam over shuffled rows; `grad` fills d loss / d output for a batch.
void fit(DenseNet& net, const Mat& X, const Mat& Y, const MlpTrainConfig& cfg,
         const std::function<Mat(const Mat& out, const Mat& target)>& grad) {
  OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  Optimizer opt(oc, net);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(X.cols()));
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<Eigen::Index>(std::max(1, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < X.cols(); start += bs) {
      const Eigen::Index n = std::min(bs, X.cols() - start);
      Mat xb(X.rows(), n), yb(Y.rows(), n);
      for (Eigen::Index j = 0; j < n; ++j) {
        xb.col(j) = X.col(order[static_cast<std::size_t>(start + j)]);
        yb.col(j) = Y.col(order[static_cast<std::size_t>(start + j)]);
      }
      Tape tape;
      const Mat out = net.forward(xb, tape);
      Gradients g = net.backward(tape, grad(out, yb));
      g *= 1.0 / static_cast<double>(n);
      opt.step(net, g);
    }
  }
}

}  // namespace

std::vector<double> Predictor::predict_batch(const Mat& X) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) out.push_back(predict(X.row(i).transpose()));
  return out;
}

int argmax_lowest(const Vec& scores) {
  int best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(best)) best = static_cast<int>(i);
  return best;
}

// ---------------------------------------------------------------------------
// MlpPredictor

MlpPredictor::MlpPredictor(DenseNet net, Task task, double label_mean, double label_scale)
    : net_(std::move(net)), task_(task), label_mean_(label_mean), label_scale_(label_scale) {
  if (task_ == Task::Classification && net_.output_size() < 2)
    throw ConfigError("classifier needs at least two outputs");
  if (task_ == Task::Regression && net_.output_size() != 1)
    throw ConfigError("regressor must have a single output");
}

Vec MlpPredictor::scores(const Vec& x) const {
  if (x.size() != n_features())
    throw ConfigError("predict: expected " + std::to_string(n_features()) + " features, got " +
                      std::to_string(x.size()));
  Vec out = net_.forward(x);
  if (task_ == Task::Regression) out(0) = label_mean_ + label_scale_ * out(0);
  return out;
}

double MlpPredictor::predict(const Vec& x) {
  const Vec s = scores(x);
  return task_ == Task::Classification ? static_cast<double>(argmax_lowest(s)) : s(0);
}

std::vector<double> MlpPredictor::predict_batch(const Mat& X) {
  if (X.cols() != n_features()) throw ConfigError("predict_batch: feature count mismatch");
  const Mat out = net_.forward(Mat(X.transpose()));
  std::vector<double> y(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < out.cols(); ++i)
    y[static_cast<std::size_t>(i)] = task_ == Task::Classification
                                         ? static_cast<double>(argmax_lowest(out.col(i)))
                                         : label_mean_ + label_scale_ * out(0, i);
  return y;
}

void MlpPredictor::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kModelMagic, sizeof(kModelMagic));
  io::write_u32(out, kModelVersion);
  io::write_u32(out, task_ == Task::Classification ? 0u : 1u);
  io::write_f64(out, label_mean_);
  io::write_f64(out, label_scale_);
  write_params(out, net_);
}

std::shared_ptr<MlpPredictor> MlpPredictor::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open model file " + path.string());
  char magic[sizeof(kModelMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw ParseError(path.string() + ": not a model file");
  if (io::read_u32(in) != kModelVersion) throw ParseError(path.string() + ": unsupported model version");
  const auto task = io::read_u32(in) == 0 ? Task::Classification : Task::Regression;
  const double mean = io::read_f64(in);
  const double scale = io::read_f64(in);
  return std::make_shared<MlpPredictor>(read_params(in), task, mean, scale);
}

// ---------------------------------------------------------------------------
// Training

std::shared_ptr<MlpPredictor> train_mlp_classifier(const Dataset& train, const MlpTrainConfig& cfg) {
  check_trainable(train);
  if (train.schema.target.task != Task::Classification)
    throw ConfigError("train_mlp_classifier needs a classification dataset");
  const int k = train.schema.target.n_classes;
  std::set<double> seen(train.labels.data(), train.labels.data() + train.labels.size());
  if (seen.size() < 2) throw ConfigError("training data contains a single class");

  std::vector<int> sizes{train.n_features()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(k);
  DenseNet net(sizes, Activation::Softmax, cfg.seed);

  const Mat X = train.rows.transpose();
  Mat Y = Mat::Zero(k, X.cols());
  for (Eigen::Index i = 0; i < X.cols(); ++i) Y(static_cast<Eigen::Index>(train.labels(i)), i) = 1.0;
  // Cross-entropy through the softmax head: d/dp = -y / p.
  fit(net, X, Y, cfg, [](const Mat& p, const Mat& y) {
    return Mat(-y.cwiseQuotient(p.cwiseMax(1e-300)));
  });
  return std::make_shared<MlpPredictor>(std::move(net), Task::Classification);
}

std::shared_ptr<MlpPredictor> train_mlp_regressor(const Dataset& train, const MlpTrainConfig& cfg) {
  check_trainable(train);
  if (train.schema.target.task != Task::Regression)
    throw ConfigError("train_mlp_regressor needs a regression dataset");
  const double mean = train.labels.mean();
  const double var = (train.labels.array() - mean).square().mean();
  const double scale = var > 0.0 ? std::sqrt(var) : 1.0;

  std::vector<int> sizes{train.n_features()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(1);
  DenseNet net(sizes, Activation::Identity, cfg.seed);

  const Mat X = train.rows.transpose();
  const Mat Y = ((train.labels.array() - mean) / scale).matrix().transpose();
  fit(net, X, Y, cfg, [](const Mat& out, const Mat& y) { return Mat(2.0 * (out - y)); });
  return std::make_shared<MlpPredictor>(std::move(net), Task::Regression, mean, scale);
}

double evaluate(Predictor& predictor, const Dataset& test) {
  if (test.size() == 0) throw ConfigError("evaluate: empty test set");
  const auto pred = predictor.predict_batch(test.rows);
  if (predictor.task() == Task::Classification) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels(static_cast<Eigen::Index>(i));
    return static_cast<double>(hits) / static_cast<double>(pred.size());
  }
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - test.labels(static_cast<Eigen::Index>(i));
    se += d * d;
  }
  return std::sqrt(se / static_cast<double>(pred.size()));
}

// ---------------------------------------------------------------------------
// Nearest-CT

NearestCtIndex NearestCtIndex::build(const Dataset& train, Predictor& predictor) {
  if (predictor.task() != Task::Classification) throw ConfigError("Nearest-CT needs a classifier");
  NearestCtIndex idx;
  idx.rows = train.rows;
  for (double y : predictor.predict_batch(train.rows)) idx.predicted.push_back(static_cast<int>(y));
  return idx;
}

CfResult nearest_ct(const NearestCtIndex& index, const Vec& x, Predictor& predictor) {
  if (predictor.task() != Task::Classification) throw ConfigError("Nearest-CT needs a classifier");
  const int own = static_cast<int>(predictor.predict(x));
  Eigen::Index best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < index.rows.rows(); ++i) {
    if (index.predicted[static_cast<std::size_t>(i)] == own) continue;
    const double d = (index.rows.row(i).transpose() - x).cwiseAbs().sum();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  if (best < 0) throw NoCounterfactual("no counterfactual in corpus: every row shares the query's class");
  return make_result(x, index.rows.row(best).transpose(), true);
}

CfResult make_result(const Vec& original, const Vec& final_state, bool valid) {
  CfResult r;
  r.original = original;
  r.last_state = final_state;
  r.valid = valid;
  if (valid) r.counterfactual = final_state;
  r.proximity = (final_state - original).cwiseAbs().sum();
  r.sparsity = static_cast<int>((final_state.array() != original.array()).count());
  return r;
}

}  // namespace relax

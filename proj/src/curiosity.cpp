#include "relax/curiosity.hpp"

#include <cmath>

namespace relax {

namespace {

std::vector<int> layer_sizes(int input_dim, const RndConfig& c) {
  std::vector<int> s{input_dim};
  s.insert(s.end(), c.hidden.begin(), c.hidden.end());
  s.push_back(c.embedding);
  return s;
}

}  // namespace

RndModule::RndModule(int input_dim, const RndConfig& config, std::uint64_t seed) : config_(config) {
  if (input_dim < 1) throw ConfigError("RND input dimension must be positive");
  if (config.embedding < 1) throw ConfigError("RND embedding must be positive");
  const auto sizes = layer_sizes(input_dim, config);
  target_ = DenseNet(sizes, Activation::Identity, seed);
  // independent init for the predictor so the initial bonus is nonzero
  predictor_ = DenseNet(sizes, Activation::Identity, seed ^ 0x9e3779b97f4a7c15ULL);
  opt_ = Optimizer(config.optimizer, predictor_);
}

Vec RndModule::raw_bonus(const Mat& X) const {
  const Mat d = predictor_.forward(X) - target_.forward(X);
  return d.colwise().squaredNorm().transpose();
}

double RndModule::raw_bonus(const Vec& x) const {
  return (predictor_.forward(x) - target_.forward(x)).squaredNorm();
}

double RndModule::scale() const {
  if (!config_.normalize || count_ < 2) return 1.0;
  const double sd = std::sqrt(m2_ / static_cast<double>(count_ - 1));
  return sd > 1e-12 ? 1.0 / sd : 1.0;
}

double RndModule::bonus(const Vec& x) const { return raw_bonus(x) * scale(); }

void RndModule::observe(double raw) {
  if (!std::isfinite(raw)) throw NumericError("non-finite curiosity bonus");
  ++count_;
  const double d = raw - mean_;
  mean_ += d / static_cast<double>(count_);
  m2_ += d * (raw - mean_);
}

double RndModule::distill_loss(const Mat& X, Gradients* grad) const {
  const double n = static_cast<double>(X.cols());
  Tape tape;
  const Mat diff = predictor_.forward(X, tape) - target_.forward(X);
  const double loss = diff.colwise().squaredNorm().sum() / n;
  if (grad) *grad = predictor_.backward(tape, 2.0 * diff / n, DenseNet::Want::Params);
  return loss;
}

double RndModule::distill_step(const Mat& X) {
  Gradients g;
  const double loss = distill_loss(X, &g);
  opt_.step(predictor_, g);
  return loss;
}

Mat RndModule::input_gradient(const Mat& X) const {
  Tape tp, tt;
  const Mat diff = predictor_.forward(X, tp) - target_.forward(X, tt);
  const Mat up = 2.0 * diff;
  return predictor_.backward(tp, up, DenseNet::Want::Input).input -
         target_.backward(tt, up, DenseNet::Want::Input).input;
}

RndModule::Pass RndModule::pass(const Mat& X) const {
  const double n = static_cast<double>(X.cols());
  Tape tp, tt;
  const Mat diff = predictor_.forward(X, tp) - target_.forward(X, tt);
  Pass p;
  p.raw = diff.colwise().squaredNorm().transpose();
  p.loss = p.raw.sum() / n;
  p.grad = predictor_.backward(tp, 2.0 * diff / n, DenseNet::Want::All);
  // columns are independent, so the predictor's input gradient only needs rescaling
  p.input_grad = n * p.grad.input - target_.backward(tt, 2.0 * diff, DenseNet::Want::Input).input;
  p.grad.input.resize(0, 0);
  return p;
}

Vec action_input(const Vec& encoding, int slot, int n_slots, double v) {
  if (slot < 0 || slot >= n_slots) throw ContractViolation("action slot out of range");
  Vec out = Vec::Zero(encoding.size() + n_slots + 1);
  out.head(encoding.size()) = encoding;
  out(encoding.size() + slot) = 1.0;
  out(out.size() - 1) = v;
  return out;
}

}  // namespace relax

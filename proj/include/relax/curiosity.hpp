#pragma once

#include <vector>

#include "relax/nn.hpp"

namespace relax {

struct RndConfig {
  std::vector<int> hidden = {64};
  int embedding = 32;
  bool normalize = true;  // divide bonuses by the running std of observed raw bonuses
  OptimizerConfig optimizer{OptimizerKind::Adam, 1e-4};
};

/// Random network distillation: a frozen random target embedding and a
/// trainable predictor regressed onto it. The bonus for an input is the
/// squared distance between the two embeddings.
class RndModule {
 public:
  RndModule() = default;
  RndModule(int input_dim, const RndConfig& config, std::uint64_t seed);

  int input_dim() const { return target_.input_size(); }

  /// ||pred(x) - target(x)||^2, one entry per column of X.
  Vec raw_bonus(const Mat& X) const;
  double raw_bonus(const Vec& x) const;

  /// Raw bonus scaled by the running std (when enabled and warmed up).
  double bonus(const Vec& x) const;
  double scale() const;

  /// Folds a raw bonus into the running statistics.
  void observe(double raw);

  /// Mean distillation loss over the columns of X and its predictor gradient.
  double distill_loss(const Mat& X, Gradients* grad) const;

  /// One optimizer step on the predictor; returns the loss before the step.
  double distill_step(const Mat& X);

  /// d raw_bonus / d input for each column, with both nets evaluated at X.
  Mat input_gradient(const Mat& X) const;

  struct Pass {
    Vec raw;
    Mat input_grad;
    double loss = 0.0;
    Gradients grad;
  };

  /// raw_bonus, input_gradient and distill_loss from one forward pass per net.
  Pass pass(const Mat& X) const;

  void apply_gradients(const Gradients& g) { opt_.step(predictor_, g); }

  const DenseNet& target() const { return target_; }
  const DenseNet& predictor() const { return predictor_; }
  DenseNet& mutable_predictor() { return predictor_; }
  Optimizer& optimizer() { return opt_; }
  const RndConfig& config() const { return config_; }

  /// Makes the predictor an exact copy of the target (bonus becomes 0).
  void copy_target_into_predictor() { predictor_ = target_; }

 private:
  RndConfig config_;
  DenseNet target_;
  DenseNet predictor_;
  Optimizer opt_;
  // Welford accumulators over raw bonuses
  long count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// State-novelty input is the state encoding itself.
inline const Vec& state_input(const Vec& encoding) { return encoding; }

/// Action-novelty input: encoding, one-hot of the chosen slot, then the slot's
/// parameter in policy units.
Vec action_input(const Vec& encoding, int slot, int n_slots, double v);

/// r' = r + scale * bonus; scale 0 turns curiosity off.
inline double combine_reward(double r, double bonus, double scale = 1.0) { return r + scale * bonus; }

}  // namespace relax

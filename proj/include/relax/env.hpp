#pragma once

#include <vector>

#include "relax/predictor.hpp"
#include "relax/tabular.hpp"

namespace relax {

enum class GoalMode { Untargeted, Targeted, RegressionThreshold };

/// What counts as a counterfactual: any label change, a specific class, or a
/// regression shift of at least `delta` (raw label units).
struct GoalSpec {
  GoalMode mode = GoalMode::Untargeted;
  int target_class = -1;
  double delta = 0.0;

  static GoalSpec untargeted() { return {}; }
  static GoalSpec targeted(int cls) { return {GoalMode::Targeted, cls, 0.0}; }
  static GoalSpec regression(double delta) { return {GoalMode::RegressionThreshold, -1, delta}; }

  void validate(Task task) const;
  nlohmann::json to_json() const;
  static GoalSpec from_json(const nlohmann::json& j);
};

struct EnvConfig {
  double lambda = 1.0;   // weight of the distance term in the reward
  int max_features = 5;  // episode budget m on modified features

  nlohmann::json to_json() const { return {{"lambda", lambda}, {"max_features", max_features}}; }
  static EnvConfig from_json(const nlohmann::json& j);
};

struct Interval {
  double lo = -1.0;
  double hi = 1.0;
  double width() const { return hi - lo; }
  bool contains(double v, double tol = 1e-12) const { return v >= lo - tol && v <= hi + tol; }
};

Interval allowed_interval(Direction d);

/// s_t = (x_t, f_t). Slots index the actionable feature list F; `available`
/// holds the feature ids still selectable this episode.
struct EnvState {
  Vec x;
  std::vector<std::uint8_t> modified;  // f_t over slots
  std::vector<int> available;          // F_t as feature ids, ascending
  int steps = 0;
  double last_ldist = 0.0;

  /// Network input: x_t followed by f_t.
  Vec encode() const;
};

/// a_t = (k, v): feature id and signed magnitude in normalized units.
struct HybridAction {
  int feature = -1;
  double v = 0.0;
};

struct AllowedAction {
  int feature;
  Interval interval;
};

enum class Done { Continue, Success, Budget };

struct StepResult {
  EnvState next;
  double reward = 0.0;
  Done done = Done::Continue;
};

/// L1 distance in normalized space.
double ldist(const Vec& x, const Vec& xt);

/// 0 when `xt` meets the goal relative to `x`, 1 otherwise.
int lpred(const Vec& x, const Vec& xt, Predictor& predictor, const GoalSpec& goal);

/// The counterfactual MDP for one predictor/goal pair. reset() binds the
/// episode's original instance; apply() is a pure function of its arguments
/// given that binding.
class CfEnv {
 public:
  CfEnv(PredictorPtr predictor, const FeatureSchema& schema, const NormalizationStats& stats,
        GoalSpec goal, EnvConfig config);

  EnvState reset(const Vec& x);
  StepResult apply(const EnvState& state, const HybridAction& action);
  std::vector<AllowedAction> action_mask(const EnvState& state) const;

  /// Goal test against the bound original prediction.
  bool goal_met(const Vec& xt);

  const std::vector<int>& actionable() const { return actionable_; }
  int slot_of(int feature) const { return slot_[static_cast<std::size_t>(feature)]; }
  Interval interval(int feature) const;
  int n_features() const { return static_cast<int>(kinds_.size()); }
  int n_slots() const { return static_cast<int>(actionable_.size()); }
  int state_dim() const { return n_features() + n_slots(); }
  int budget() const { return budget_; }

  const GoalSpec& goal() const { return goal_; }
  const EnvConfig& config() const { return config_; }
  const Vec& origin() const { return origin_; }
  double original_prediction() const { return original_prediction_; }
  Predictor& predictor() { return *predictor_; }
  PredictorPtr predictor_ptr() const { return predictor_; }

 private:
  PredictorPtr predictor_;
  GoalSpec goal_;
  EnvConfig config_;
  std::vector<int> actionable_;
  std::vector<int> slot_;  // feature id -> slot, -1 if not actionable
  std::vector<Direction> directions_;
  std::vector<FeatureKind> kinds_;
  int budget_ = 0;
  Vec origin_;
  double original_prediction_ = 0.0;
  bool bound_ = false;
};

}  // namespace relax

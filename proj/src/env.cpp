#include "relax/env.hpp"

#include <algorithm>
#include <cmath>

namespace relax {

void GoalSpec::validate(Task task) const {
  switch (mode) {
    case GoalMode::Untargeted:
      if (task != Task::Classification) throw ConfigError("untargeted goal needs a classifier");
      break;
    case GoalMode::Targeted:
      if (task != Task::Classification) throw ConfigError("targeted goal needs a classifier");
      if (target_class < 0) throw ConfigError("targeted goal needs a non-negative class");
      break;
    case GoalMode::RegressionThreshold:
      if (task != Task::Regression) throw ConfigError("threshold goal needs a regressor");
      if (!(delta > 0.0)) throw ConfigError("regression threshold delta must be > 0");
      break;
  }
}

nlohmann::json GoalSpec::to_json() const {
  switch (mode) {
    case GoalMode::Targeted: return {{"mode", "targeted"}, {"class", target_class}};
    case GoalMode::RegressionThreshold: return {{"mode", "regression"}, {"delta", delta}};
    default: return {{"mode", "untargeted"}};
  }
}

GoalSpec GoalSpec::from_json(const nlohmann::json& j) {
  const auto mode = j.value("mode", std::string("untargeted"));
  if (mode == "untargeted") return untargeted();
  if (mode == "targeted") {
    if (!j.contains("class")) throw ConfigError("targeted goal needs 'class'");
    return targeted(j.at("class").get<int>());
  }
  if (mode == "regression") {
    if (!j.contains("delta")) throw ConfigError("regression goal needs 'delta'");
    return regression(j.at("delta").get<double>());
  }
  throw ConfigError("unknown goal mode '" + mode + "'");
}

EnvConfig EnvConfig::from_json(const nlohmann::json& j) {
  EnvConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.max_features = j.value("max_features", c.max_features);
  if (!(c.lambda > 0.0)) throw ConfigError("lambda must be > 0");
  if (c.max_features < 1) throw ConfigError("max_features must be >= 1");
  return c;
}

Interval allowed_interval(Direction d) {
  switch (d) {
    case Direction::IncreaseOnly: return {0.0, 1.0};
    case Direction::DecreaseOnly: return {-1.0, 0.0};
    default: return {-1.0, 1.0};
  }
}

Vec EnvState::encode() const {
  Vec out(x.size() + static_cast<Eigen::Index>(modified.size()));
  out.head(x.size()) = x;
  for (std::size_t i = 0; i < modified.size(); ++i)
    out(x.size() + static_cast<Eigen::Index>(i)) = modified[i];
  return out;
}

double ldist(const Vec& x, const Vec& xt) {
  if (x.size() != xt.size()) throw ConfigError("ldist: length mismatch");
  return (x - xt).cwiseAbs().sum();
}

namespace {

bool goal_satisfied(const GoalSpec& goal, double original, double current) {
  switch (goal.mode) {
    case GoalMode::Untargeted: return current != original;
    case GoalMode::Targeted: return current == static_cast<double>(goal.target_class);
    case GoalMode::RegressionThreshold: return std::abs(current - original) >= goal.delta;
  }
  return false;
}

}  // namespace

int lpred(const Vec& x, const Vec& xt, Predictor& predictor, const GoalSpec& goal) {
  return goal_satisfied(goal, predictor.predict(x), predictor.predict(xt)) ? 0 : 1;
}

// ---------------------------------------------------------------------------

CfEnv::CfEnv(PredictorPtr predictor, const FeatureSchema& schema, const NormalizationStats& stats,
             GoalSpec goal, EnvConfig config)
    : predictor_(std::move(predictor)), goal_(goal), config_(config) {
  if (!predictor_) throw ConfigError("CfEnv needs a predictor");
  if (stats.size() != static_cast<int>(schema.size()))
    throw ConfigError("normalizer and schema disagree on feature count");
  goal_.validate(predictor_->task());
  if (goal_.mode == GoalMode::Targeted && goal_.target_class >= predictor_->n_classes())
    throw ConfigError("target class out of range");
  if (!(config_.lambda > 0.0)) throw ConfigError("lambda must be > 0");
  slot_.assign(schema.size(), -1);
  for (std::size_t j = 0; j < schema.size(); ++j) {
    directions_.push_back(schema.features[j].direction);
    kinds_.push_back(schema.features[j].kind);
    if (schema.features[j].actionable && !stats.constant[j]) {
      slot_[j] = static_cast<int>(actionable_.size());
      actionable_.push_back(static_cast<int>(j));
    }
  }
  if (actionable_.empty()) throw ConfigError("no actionable non-constant feature");
  if (config_.max_features < 1 || config_.max_features > static_cast<int>(actionable_.size()))
    throw ConfigError("max_features must lie in [1, |F|] = [1, " + std::to_string(actionable_.size()) + "]");
  budget_ = config_.max_features;
}

Interval CfEnv::interval(int feature) const {
  return allowed_interval(directions_[static_cast<std::size_t>(feature)]);
}

bool CfEnv::goal_met(const Vec& xt) {
  return goal_satisfied(goal_, original_prediction_, predictor_->predict(xt));
}

EnvState CfEnv::reset(const Vec& x) {
  if (x.size() != n_features()) throw ConfigError("reset: instance has the wrong length");
  if (!x.allFinite() || x.minCoeff() < 0.0 || x.maxCoeff() > 1.0)
    throw ConfigError("reset: instance must be normalized to [0, 1]");
  const double pred = predictor_->predict(x);
  if (goal_.mode == GoalMode::Targeted && pred == static_cast<double>(goal_.target_class))
    throw ConfigError("invalid goal: instance is already predicted as the target class");
  origin_ = x;
  original_prediction_ = pred;
  bound_ = true;
  EnvState s;
  s.x = x;
  s.modified.assign(actionable_.size(), 0);
  s.available = actionable_;
  return s;
}

std::vector<AllowedAction> CfEnv::action_mask(const EnvState& state) const {
  std::vector<AllowedAction> out;
  out.reserve(state.available.size());
  for (int f : state.available) out.push_back({f, interval(f)});
  return out;
}

StepResult CfEnv::apply(const EnvState& state, const HybridAction& action) {
  if (!bound_) throw ContractViolation("apply before reset");
  const int k = action.feature;
  if (k < 0 || k >= n_features() || slot_[static_cast<std::size_t>(k)] < 0)
    throw ContractViolation("action on non-actionable feature " + std::to_string(k));
  if (std::find(state.available.begin(), state.available.end(), k) == state.available.end())
    throw ContractViolation("feature " + std::to_string(k) + " already modified this episode");
  if (!std::isfinite(action.v) || !interval(k).contains(action.v))
    throw ContractViolation("magnitude outside the feature's allowed interval");

  StepResult r;
  r.next = state;
  double value = std::clamp(state.x(k) + action.v, 0.0, 1.0);
  if (kinds_[static_cast<std::size_t>(k)] == FeatureKind::Binary) value = value >= 0.5 ? 1.0 : 0.0;
  r.next.x(k) = value;
  r.next.modified[static_cast<std::size_t>(slot_[static_cast<std::size_t>(k)])] = 1;
  r.next.available.erase(std::find(r.next.available.begin(), r.next.available.end(), k));
  r.next.steps = state.steps + 1;
  r.next.last_ldist = ldist(origin_, r.next.x);

  const double delta = r.next.last_ldist - state.last_ldist;
  const bool success = goal_met(r.next.x);
  r.reward = (success ? 1.0 : 0.0) - config_.lambda * delta;
  if (success) {
    r.done = Done::Success;
  } else if (r.next.steps >= budget_ || r.next.available.empty()) {
    r.done = Done::Budget;
  }
  return r;
}

}  // namespace relax

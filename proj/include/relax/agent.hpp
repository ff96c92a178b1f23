#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "relax/curiosity.hpp"
#include "relax/env.hpp"
#include "relax/replay.hpp"
#include "relax/result.hpp"

namespace relax {

/// Q-net theta1: [encoding, all parameters in policy units] -> one Q per slot.
/// Policy theta2: encoding -> tanh parameters in [-1, 1], one per slot.
struct AgentParams {
  DenseNet q;
  DenseNet policy;
  DenseNet q_target;
  DenseNet policy_target;

  static AgentParams create(int state_dim, int n_slots, const std::vector<int>& hidden, std::uint64_t seed);
  void sync_targets();
  int n_slots() const { return policy.output_size(); }
  int state_dim() const { return policy.input_size(); }
};

struct TrainConfig {
  long per_sample_budget = 50000;  // interactions per drawn training instance
  int epochs = 1;                  // instance draws
  double gamma = 0.99;
  int n_step = 3;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_decay_fraction = 0.5;  // linear decay over this share of all steps
  double explore_noise = 0.1;       // sigma as a fraction of the interval width
  double lr_q = 1e-3;
  double lr_policy = 1e-4;
  double lr_rnd_state = 1e-4;
  double lr_rnd_action = 1e-4;
  double clip_norm = 10.0;
  int batch_size = 64;
  std::size_t replay_capacity = 1u << 16;
  double priority_exponent = 0.6;
  double is_exponent_start = 0.4;
  int target_sync = 1000;  // updates between hard target copies
  int learning_starts = 256;
  std::vector<int> hidden = {128, 128};
  double state_curiosity = 1.0;
  double action_curiosity = 1.0;
  int probe_size = 20;
  int probe_every = 1;  // epochs between probe evaluations
  double local_fraction = 0.25;
  long local_steps = -1;  // overrides local_fraction when >= 0
  int neighbors = 32;
  double neighbor_radius = 1.0;
  double local_eps_start = 0.3;
  std::uint64_t seed = 1;
  std::string checkpoint_path;
  int checkpoint_every = 0;  // epochs, 0 disables periodic checkpoints
  bool resume = false;

  long total_steps() const { return per_sample_budget * epochs; }
  long local_budget() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Everything needed to run the greedy policy in another process.
struct PolicySnapshot {
  AgentParams params;
  FeatureSchema schema;
  NormalizationStats stats;
  GoalSpec goal;
  EnvConfig env;
  std::vector<int> actionable;
  nlohmann::json info = nlohmann::json::object();  // free-form: progress, timings

  std::string fingerprint() const { return schema.fingerprint(); }
  void save(const std::filesystem::path& path) const;
  static PolicySnapshot load(const std::filesystem::path& path);
};

/// Maps a policy output in [-1, 1] onto the feature's interval and back.
double to_interval(double u, const Interval& iv);
double to_units(double v, const Interval& iv);

struct ActionChoice {
  HybridAction action;
  int slot = -1;
  Vec units;  // full parameter vector as stored in replay (policy units)
  bool explored = false;
};

/// epsilon-greedy over the masked Q-values at the policy's parameters; the
/// exploratory branch also perturbs v with clipped Gaussian noise.
ActionChoice select_action(const AgentParams& params, const CfEnv& env, const EnvState& state, double eps,
                           Rng& rng, double noise_fraction = 0.1);

/// Replay batch unpacked into column matrices.
struct PreparedBatch {
  Mat states;       // state_dim x B
  Mat params;       // n_slots x B
  Mat next_states;  // state_dim x B
  std::vector<int> slots;
  Vec rewards;
  std::vector<bool> done;
  std::vector<int> steps;
  Vec weights;
  int n_features = 0;  // encoding = n_features values then n_slots flags

  int size() const { return static_cast<int>(slots.size()); }
};

PreparedBatch prepare_batch(const std::vector<const TransitionRecord*>& records, const Vec& weights,
                            int n_features);

/// 1 where a slot is still selectable, read from the flag half of the encoding.
Mat slot_mask(const Mat& states, int n_features);

/// y = R + gamma^steps * max over open slots of Q_target(s', pi_target(s')),
/// with no bootstrap on terminal records.
Vec compute_targets(const AgentParams& params, const PreparedBatch& batch, double gamma);

struct QLoss {
  double value = 0.0;
  double td_term = 0.0;
  double distill_term = 0.0;
  Gradients q_grad;
  Gradients rnd_grad;
  Vec td;  // Q - y per record
};

/// Mean IS-weighted squared TD residual on the chosen slots plus the state
/// distillation loss on the next states. Gradients reach theta1 and eta1 only.
QLoss loss_q(const DenseNet& q, const RndModule* rnd_state, const PreparedBatch& batch, const Vec& y);

struct PiLoss {
  double value = 0.0;
  double q_term = 0.0;        // -mean sum of open-slot Q at the policy output
  double novelty_term = 0.0;  // -c * mean action bonus
  double distill_term = 0.0;  // action distillation loss
  Gradients policy_grad;      // of q_term + novelty_term
  Gradients rnd_grad;         // of distill_term
  std::vector<int> greedy_slots;
};

/// Policy loss with theta1 held fixed. The action bonus is evaluated at the
/// greedy slot and the policy's own parameter for it.
PiLoss loss_pi(const DenseNet& q, const DenseNet& policy, const RndModule* rnd_action, const Mat& states,
               int n_features, double action_scale);

struct LogRow {
  long step = 0;
  int epoch = 0;
  double loss_q = 0.0;
  double loss_pi = 0.0;
  std::optional<double> probe_validity;
};

struct TrainResult {
  PolicySnapshot snapshot;
  std::vector<LogRow> log;
  long steps = 0;
  double seconds = 0.0;
};

using LogSink = std::function<void(const LogRow&)>;

/// Global training over instance draws from `train` (normalized).
TrainResult train_global(const Dataset& train, const NormalizationStats& stats, PredictorPtr predictor,
                         const GoalSpec& goal, const EnvConfig& env_config, const TrainConfig& config,
                         const LogSink& sink = {});

/// Continues from `snapshot` on episodes starting at x_target or at points of
/// its radius-R neighborhood.
TrainResult fine_tune_local(const PolicySnapshot& snapshot, const Vec& x_target, PredictorPtr predictor,
                            const TrainConfig& config, const LogSink& sink = {});

/// Greedy rollout from x until success or the budget runs out.
CfResult generate_cf(const AgentParams& params, CfEnv& env, const Vec& x,
                     const NormalizationStats* stats = nullptr);
CfResult generate_cf(const PolicySnapshot& snapshot, const Vec& x, PredictorPtr predictor);

/// Builds an environment matching a snapshot; throws on schema mismatch.
CfEnv make_env(const PolicySnapshot& snapshot, PredictorPtr predictor);

/// Share of `rows` (normalized, one per row) solved by the greedy policy.
double probe_validity(const AgentParams& params, CfEnv& env, const Mat& rows);

std::string format_log_row(const LogRow& row);

}  // namespace relax

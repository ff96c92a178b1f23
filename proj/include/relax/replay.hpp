#pragma once

#include <optional>
#include <vector>

#include "relax/common.hpp"

namespace relax {

/// One stored experience. `reward` is the n-step discounted sum of modified
/// rewards and `steps` the number of rewards it folds in, so the bootstrap
/// term is discounted by gamma^steps.
struct TransitionRecord {
  Vec state;           // encoded s_t
  int slot = 0;        // chosen actionable slot k_t
  Vec params;          // full parameter vector fed to Q, in [-1, 1] policy units
  double reward = 0.0;
  Vec next_state;      // encoded s_{t+steps}
  bool done = false;   // no bootstrap past an episode end
  int steps = 1;
};

/// Binary sum tree over a power-of-two number of leaves; node i has children
/// 2i and 2i+1, the root is node 1.
class SumTree {
 public:
  explicit SumTree(std::size_t capacity);

  std::size_t capacity() const { return leaves_; }
  void set(std::size_t leaf, double priority);
  double get(std::size_t leaf) const { return nodes_[leaves_ + leaf]; }
  double total() const { return nodes_[1]; }
  /// Leaf whose prefix-sum interval contains `mass`, in [0, total).
  std::size_t find(double mass) const;
  /// Node value by heap index (exposed for consistency checks).
  double node(std::size_t i) const { return nodes_[i]; }

 private:
  std::size_t leaves_;
  std::vector<double> nodes_;
};

struct ReplayConfig {
  std::size_t capacity = 1u << 16;
  double priority_exponent = 0.6;  // how much prioritization is used
  double priority_floor = 1e-3;
  bool importance_weights = true;
};

struct ReplayBatch {
  std::vector<std::size_t> indices;
  std::vector<const TransitionRecord*> records;
  Vec weights;  // importance weights normalized by the batch max
};

/// FIFO prioritized replay. Leaf mass is stored already raised to the
/// priority exponent, so sampling is proportional to the leaf value.
class PrioritizedBuffer {
 public:
  explicit PrioritizedBuffer(ReplayConfig config);

  /// Without a priority the record enters at the largest leaf mass seen so far.
  void push(TransitionRecord record, std::optional<double> priority = std::nullopt);

  /// Stratified sampling: one draw per equal-mass segment. `is_exponent` is the
  /// current importance-weight exponent.
  ReplayBatch sample(std::size_t batch_size, Rng& rng, double is_exponent = 1.0) const;

  /// Leaf mass becomes (|td| + floor)^exponent.
  void update_priorities(const std::vector<std::size_t>& indices, const std::vector<double>& td_errors);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return config_.capacity; }
  const TransitionRecord& at(std::size_t i) const { return records_[i]; }
  const SumTree& tree() const { return tree_; }
  double max_leaf() const { return max_leaf_; }
  const ReplayConfig& config() const { return config_; }

 private:
  ReplayConfig config_;
  SumTree tree_;
  std::vector<TransitionRecord> records_;
  std::size_t cursor_ = 0;
  std::size_t size_ = 0;
  double max_leaf_ = 1.0;
};

/// Folds one-step transitions of a single episode into n-step records.
class NStepAccumulator {
 public:
  NStepAccumulator(int n, double gamma);

  /// Adds a one-step transition; returns records that became complete.
  std::vector<TransitionRecord> push(const TransitionRecord& one_step);
  /// Emits the partial window when an episode is cut short without reaching a
  /// terminal state; those records still bootstrap from their last next_state.
  std::vector<TransitionRecord> flush();

 private:
  int n_;
  double gamma_;
  std::vector<TransitionRecord> window_;
};

}  // namespace relax

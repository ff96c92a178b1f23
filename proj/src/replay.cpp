#include "relax/replay.hpp"

#include <algorithm>
#include <cmath>

namespace relax {

SumTree::SumTree(std::size_t capacity) {
  if (capacity == 0) throw ConfigError("SumTree capacity must be positive");
  leaves_ = 1;
  while (leaves_ < capacity) leaves_ <<= 1;
  nodes_.assign(2 * leaves_, 0.0);
}

void SumTree::set(std::size_t leaf, double priority) {
  if (leaf >= leaves_) throw ContractViolation("SumTree leaf out of range");
  if (!(priority >= 0.0) || !std::isfinite(priority)) throw NumericError("SumTree priority must be finite and >= 0");
  std::size_t i = leaves_ + leaf;
  nodes_[i] = priority;
  for (i >>= 1; i >= 1; i >>= 1) nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
}

std::size_t SumTree::find(double mass) const {
  std::size_t i = 1;
  while (i < leaves_) {
    const double left = nodes_[2 * i];
    if (mass < left || nodes_[2 * i + 1] <= 0.0) {
      i = 2 * i;
    } else {
      mass -= left;
      i = 2 * i + 1;
    }
  }
  return i - leaves_;
}

// ---------------------------------------------------------------------------

PrioritizedBuffer::PrioritizedBuffer(ReplayConfig config)
    : config_(config), tree_(config.capacity) {
  if (config_.capacity == 0) throw ConfigError("replay capacity must be positive");
  if (!(config_.priority_floor > 0.0)) throw ConfigError("priority floor must be > 0");
  if (!(config_.priority_exponent >= 0.0)) throw ConfigError("priority exponent must be >= 0");
  records_.resize(config_.capacity);
  max_leaf_ = std::pow(1.0, config_.priority_exponent);
}

void PrioritizedBuffer::push(TransitionRecord record, std::optional<double> priority) {
  double leaf = max_leaf_;
  if (priority) leaf = std::pow(std::max(*priority, config_.priority_floor), config_.priority_exponent);
  records_[cursor_] = std::move(record);
  tree_.set(cursor_, leaf);
  max_leaf_ = std::max(max_leaf_, leaf);
  cursor_ = (cursor_ + 1) % config_.capacity;
  size_ = std::min(size_ + 1, config_.capacity);
}

ReplayBatch PrioritizedBuffer::sample(std::size_t batch_size, Rng& rng, double is_exponent) const {
  if (size_ == 0) throw ContractViolation("sampling from an empty replay buffer");
  if (batch_size == 0 || batch_size > size_) throw ContractViolation("replay batch larger than buffer");
  ReplayBatch b;
  b.indices.reserve(batch_size);
  const double total = tree_.total();
  const double segment = total / static_cast<double>(batch_size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < batch_size; ++i) {
    double mass = segment * (static_cast<double>(i) + u(rng));
    mass = std::min(mass, std::nextafter(total, 0.0));
    std::size_t leaf = tree_.find(mass);
    if (leaf >= size_) leaf = size_ - 1;  // rounding at the right edge
    b.indices.push_back(leaf);
    b.records.push_back(&records_[leaf]);
  }
  b.weights = Vec::Ones(static_cast<Eigen::Index>(batch_size));
  if (config_.importance_weights) {
    const double n = static_cast<double>(size_);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const double p = tree_.get(b.indices[i]) / total;
      b.weights(static_cast<Eigen::Index>(i)) = std::pow(n * p, -is_exponent);
    }
    b.weights /= b.weights.maxCoeff();
  }
  return b;
}

void PrioritizedBuffer::update_priorities(const std::vector<std::size_t>& indices,
                                          const std::vector<double>& td_errors) {
  if (indices.size() != td_errors.size()) throw ContractViolation("indices/td_errors length mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size_) throw ContractViolation("priority update for an empty slot");
    if (!std::isfinite(td_errors[i])) throw NumericError("non-finite TD error");
    const double leaf =
        std::pow(std::abs(td_errors[i]) + config_.priority_floor, config_.priority_exponent);
    tree_.set(indices[i], leaf);
    max_leaf_ = std::max(max_leaf_, leaf);
  }
}

// ---------------------------------------------------------------------------

NStepAccumulator::NStepAccumulator(int n, double gamma) : n_(n), gamma_(gamma) {
  if (n_ < 1) throw ConfigError("n-step must be >= 1");
}

namespace {

TransitionRecord fold(const std::vector<TransitionRecord>& w, std::size_t from, double gamma, bool done) {
  TransitionRecord out = w[from];
  double g = 1.0, sum = 0.0;
  for (std::size_t j = from; j < w.size(); ++j) {
    sum += g * w[j].reward;
    g *= gamma;
  }
  out.reward = sum;
  out.next_state = w.back().next_state;
  out.done = done;
  out.steps = static_cast<int>(w.size() - from);
  return out;
}

}  // namespace

std::vector<TransitionRecord> NStepAccumulator::push(const TransitionRecord& one_step) {
  window_.push_back(one_step);
  std::vector<TransitionRecord> out;
  if (one_step.done) {
    for (std::size_t i = 0; i < window_.size(); ++i) out.push_back(fold(window_, i, gamma_, true));
    window_.clear();
  } else if (static_cast<int>(window_.size()) == n_) {
    out.push_back(fold(window_, 0, gamma_, false));
    window_.erase(window_.begin());
  }
  return out;
}

std::vector<TransitionRecord> NStepAccumulator::flush() {
  std::vector<TransitionRecord> out;
  for (std::size_t i = 0; i < window_.size(); ++i) out.push_back(fold(window_, i, gamma_, false));
  window_.clear();
  return out;
}

}  // namespace relax

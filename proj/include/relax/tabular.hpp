#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relax/common.hpp"

namespace relax {

enum class FeatureKind { Numeric, Binary };
enum class Direction { Any, IncreaseOnly, DecreaseOnly };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::Numeric;
  bool actionable = true;
  Direction direction = Direction::Any;
  double raw_min = 0.0;
  double raw_max = 1.0;
};

struct TargetSpec {
  std::string name = "label";
  Task task = Task::Classification;
  int n_classes = 2;                 // ignored for regression
  std::vector<std::string> classes;  // optional names for class indices
};

/// Feature declarations plus the prediction target. The schema file is a JSON
/// document with exactly these fields.
struct FeatureSchema {
  std::vector<FeatureSpec> features;
  TargetSpec target;

  /// Throws ConfigError when an invariant is broken.
  void validate() const;

  std::size_t size() const { return features.size(); }
  int index_of(const std::string& name) const;  // -1 when absent
  std::vector<int> actionable_indices() const;

  /// Stable text digest of names, kinds, directions and actionability. Stored in
  /// agent snapshots so a policy is never reused on a different feature layout.
  std::string fingerprint() const;

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);
  static FeatureSchema load(const std::filesystem::path& path);
};

struct Dataset {
  FeatureSchema schema;
  Mat rows;  // count x n
  Vec labels;
  bool normalized = false;

  std::size_t size() const { return static_cast<std::size_t>(rows.rows()); }
  int n_features() const { return static_cast<int>(rows.cols()); }
  Vec row(std::size_t i) const { return rows.row(static_cast<Eigen::Index>(i)).transpose(); }

  Dataset subset(const std::vector<std::size_t>& indices) const;
  void validate() const;
};

/// Per-feature min/max fitted on a training split.
struct NormalizationStats {
  Vec min;
  Vec max;
  std::vector<bool> constant;

  int size() const { return static_cast<int>(min.size()); }

  Vec normalize(const Vec& raw) const;
  Vec denormalize(const Vec& unit) const;
  Dataset normalize(const Dataset& raw) const;

  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);
};

Dataset load_csv(const std::filesystem::path& path, const FeatureSchema& schema);

NormalizationStats fit_normalizer(const Dataset& train);

/// Shuffled partition; the train side gets floor(fraction * n) rows.
std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction, std::uint64_t seed);

/// One point uniform in the L2 ball around `center`, not clamped.
Vec sample_ball(const Vec& center, double radius, Rng& rng);

/// Uniform ball samples clamped to the unit box.
std::vector<Vec> sample_neighborhood(const Vec& x, double radius, int count, Rng& rng);

const char* to_string(FeatureKind k);
const char* to_string(Direction d);

}  // namespace relax

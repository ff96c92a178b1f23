#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <unistd.h>

#include "relax/predictor.hpp"
#include "relax/tabular.hpp"

namespace fixtures {

using relax::Mat;
using relax::Vec;

/// class 1 iff x[feature] > cut
struct Threshold : relax::Predictor {
  int n = 2, feature = 0;
  double cut = 0.5;
  Threshold(int n_ = 2, int f = 0, double c = 0.5) : n(n_), feature(f), cut(c) {}
  relax::Task task() const override { return relax::Task::Classification; }
  int n_features() const override { return n; }
  int n_classes() const override { return 2; }
  double predict(const Vec& x) override { return x(feature) > cut ? 1.0 : 0.0; }
};

/// w.x + b, regression
struct Linear : relax::Predictor {
  Vec w;
  double b = 0.0;
  explicit Linear(Vec w_, double b_ = 0.0) : w(std::move(w_)), b(b_) {}
  relax::Task task() const override { return relax::Task::Regression; }
  int n_features() const override { return static_cast<int>(w.size()); }
  int n_classes() const override { return 0; }
  double predict(const Vec& x) override { return w.dot(x) + b; }
};

inline relax::FeatureSchema numeric_schema(int n, relax::Task task = relax::Task::Classification) {
  relax::FeatureSchema s;
  for (int i = 0; i < n; ++i) {
    relax::FeatureSpec f;
    f.name = "f" + std::to_string(i);
    s.features.push_back(f);
  }
  s.target.name = "y";
  s.target.task = task;
  s.target.n_classes = task == relax::Task::Classification ? 2 : 0;
  return s;
}

/// Identity stats on the unit box.
inline relax::NormalizationStats unit_stats(int n) {
  relax::NormalizationStats s;
  s.min = Vec::Zero(n);
  s.max = Vec::Ones(n);
  s.constant.assign(static_cast<std::size_t>(n), false);
  return s;
}

/// Uniform rows in [0,1]^n, labels from `model`.
inline relax::Dataset uniform_dataset(const relax::FeatureSchema& schema, int rows, relax::Predictor& model,
                                      std::uint64_t seed) {
  relax::Dataset d;
  d.schema = schema;
  d.normalized = true;
  const int n = static_cast<int>(schema.size());
  d.rows.resize(rows, n);
  d.labels.resize(rows);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < n; ++j) d.rows(i, j) = u(rng);
    d.labels(i) = model.predict(d.rows.row(i).transpose());
  }
  return d;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("relax_test_" + std::to_string(std::random_device{}()) + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

inline std::string data_file(const std::string& name) { return std::string(RELAX_DATA_DIR) + "/" + name; }

}  // namespace fixtures

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relax/result.hpp"

namespace relax {

/// Valid share over every attempted instance.
double validity(const std::vector<CfResult>& results);

// Means over valid results only; nullopt when none is valid.
std::optional<double> proximity_mean(const std::vector<CfResult>& results);
std::optional<double> proximity_raw_mean(const std::vector<CfResult>& results);
std::optional<double> sparsity_mean(const std::vector<CfResult>& results);
double gen_time_mean(const std::vector<CfResult>& results);

struct MetricSummary {
  std::size_t attempted = 0;
  double validity = 0.0;
  std::optional<double> proximity;
  std::optional<double> proximity_raw;
  std::optional<double> sparsity;
  double gen_time_s = 0.0;
};

MetricSummary summarize(const std::vector<CfResult>& results);

/// Mean and sample standard deviation (n - 1); std is 0 for a single value.
struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct MetricsReport {
  std::string method;
  std::vector<std::vector<CfResult>> repetitions;
  nlohmann::json config = nlohmann::json::object();

  std::vector<MetricSummary> summaries() const;
  /// Over repetitions; a metric is skipped in a repetition where it is undefined.
  std::map<std::string, Aggregate> aggregates() const;
};

enum class ReportFormat { Csv, Json };

/// CSV columns: instance_id, valid, proximity, sparsity, gen_time_s, then
/// proximity_raw and repetition; footer rows "mean" and "std" hold the
/// aggregates. JSON carries the same rows plus the config echo.
void write_report(const MetricsReport& report, const std::filesystem::path& path, ReportFormat format);
MetricsReport read_report(const std::filesystem::path& path);
nlohmann::json report_to_json(const MetricsReport& report);

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// has no spread.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace relax

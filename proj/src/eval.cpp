#include "relax/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace relax {

double validity(const std::vector<CfResult>& results) {
  if (results.empty()) return 0.0;
  const auto ok = std::count_if(results.begin(), results.end(), [](const CfResult& r) { return r.valid; });
  return static_cast<double>(ok) / static_cast<double>(results.size());
}

namespace {

template <class F>
std::optional<double> valid_mean(const std::vector<CfResult>& results, F value) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : results) {
    if (!r.valid) continue;
    const auto v = value(r);
    if (!v) continue;
    sum += *v;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace

std::optional<double> proximity_mean(const std::vector<CfResult>& results) {
  return valid_mean(results, [](const CfResult& r) { return std::optional<double>(r.proximity); });
}

std::optional<double> proximity_raw_mean(const std::vector<CfResult>& results) {
  return valid_mean(results, [](const CfResult& r) { return r.proximity_raw; });
}

std::optional<double> sparsity_mean(const std::vector<CfResult>& results) {
  return valid_mean(results, [](const CfResult& r) { return std::optional<double>(r.sparsity); });
}

double gen_time_mean(const std::vector<CfResult>& results) {
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) s += r.gen_time_s;
  return s / static_cast<double>(results.size());
}

MetricSummary summarize(const std::vector<CfResult>& results) {
  MetricSummary m;
  m.attempted = results.size();
  m.validity = validity(results);
  m.proximity = proximity_mean(results);
  m.proximity_raw = proximity_raw_mean(results);
  m.sparsity = sparsity_mean(results);
  m.gen_time_s = gen_time_mean(results);
  return m;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.n);
  if (a.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

std::vector<MetricSummary> MetricsReport::summaries() const {
  std::vector<MetricSummary> out;
  for (const auto& rep : repetitions) out.push_back(summarize(rep));
  return out;
}

std::map<std::string, Aggregate> MetricsReport::aggregates() const {
  std::vector<double> val, prox, raw, sp, gt;
  for (const auto& s : summaries()) {
    val.push_back(s.validity);
    gt.push_back(s.gen_time_s);
    if (s.proximity) prox.push_back(*s.proximity);
    if (s.proximity_raw) raw.push_back(*s.proximity_raw);
    if (s.sparsity) sp.push_back(*s.sparsity);
  }
  std::map<std::string, Aggregate> out{{"validity", aggregate(val)}, {"gen_time_s", aggregate(gt)}};
  if (!prox.empty()) out["proximity"] = aggregate(prox);
  if (!raw.empty()) out["proximity_raw"] = aggregate(raw);
  if (!sp.empty()) out["sparsity"] = aggregate(sp);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::vector<double> vec_of(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec vec_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void write_csv(const MetricsReport& report, std::ostream& out) {
  out << "instance_id,valid,proximity,sparsity,gen_time_s,proximity_raw,repetition\n";
  for (std::size_t rep = 0; rep < report.repetitions.size(); ++rep) {
    for (const auto& r : report.repetitions[rep]) {
      out << r.instance_id << ',' << (r.valid ? 1 : 0) << ',';
      if (r.valid) out << num(r.proximity) << ',' << r.sparsity;
      else out << ',';
      out << ',' << num(r.gen_time_s) << ',' << (r.valid ? opt_num(r.proximity_raw) : std::string()) << ',' << rep
          << '\n';
    }
  }
  const auto agg = report.aggregates();
  auto field = [&](const char* name, bool mean) {
    const auto it = agg.find(name);
    if (it == agg.end()) return std::string();
    return num(mean ? it->second.mean : it->second.std);
  };
  for (bool mean : {true, false}) {
    out << (mean ? "mean" : "std") << ',' << field("validity", mean) << ',' << field("proximity", mean) << ','
        << field("sparsity", mean) << ',' << field("gen_time_s", mean) << ',' << field("proximity_raw", mean) << ",\n";
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

MetricsReport read_csv(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty report");
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& c) {
    const auto it = std::find(header.begin(), header.end(), c);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int ci = col("instance_id"), cv = col("valid"), cp = col("proximity"), cs = col("sparsity"),
            cg = col("gen_time_s"), cr = col("proximity_raw"), crep = col("repetition");
  if (ci < 0 || cv < 0 || cp < 0 || cs < 0 || cg < 0) throw ParseError(name + ": missing report columns");
  MetricsReport report;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells[0] == "mean" || cells[0] == "std") continue;
    auto cell = [&](int c) -> std::string { return c >= 0 && c < static_cast<int>(cells.size()) ? cells[c] : ""; };
    try {
      CfResult r;
      r.instance_id = std::stoi(cell(ci));
      r.valid = cell(cv) == "1";
      if (r.valid) {
        r.proximity = std::stod(cell(cp));
        r.sparsity = std::stoi(cell(cs));
        if (!cell(cr).empty()) r.proximity_raw = std::stod(cell(cr));
      }
      r.gen_time_s = std::stod(cell(cg));
      const std::size_t rep = crep >= 0 && !cell(crep).empty() ? std::stoul(cell(crep)) : 0;
      if (report.repetitions.size() <= rep) report.repetitions.resize(rep + 1);
      report.repetitions[rep].push_back(std::move(r));
    } catch (const std::exception&) {
      throw ParseError(name + ": bad value in row " + std::to_string(row));
    }
  }
  return report;
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& rep : report.repetitions) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep) {
      nlohmann::json j = {{"instance_id", r.instance_id},
                          {"valid", r.valid},
                          {"proximity", r.valid ? nlohmann::json(r.proximity) : nlohmann::json(nullptr)},
                          {"proximity_raw", r.valid ? opt_json(r.proximity_raw) : nlohmann::json(nullptr)},
                          {"sparsity", r.valid ? nlohmann::json(r.sparsity) : nlohmann::json(nullptr)},
                          {"gen_time_s", r.gen_time_s}};
      if (r.original.size() > 0) j["original"] = vec_of(r.original);
      if (r.counterfactual) j["counterfactual"] = vec_of(*r.counterfactual);
      rows.push_back(std::move(j));
    }
    reps.push_back(std::move(rows));
  }
  nlohmann::json summaries = nlohmann::json::array();
  for (const auto& s : report.summaries())
    summaries.push_back({{"attempted", s.attempted},
                         {"validity", s.validity},
                         {"proximity", opt_json(s.proximity)},
                         {"proximity_raw", opt_json(s.proximity_raw)},
                         {"sparsity", opt_json(s.sparsity)},
                         {"gen_time_s", s.gen_time_s}});
  nlohmann::json agg = nlohmann::json::object();
  for (const auto& [k, a] : report.aggregates()) agg[k] = {{"mean", a.mean}, {"std", a.std}, {"n", a.n}};
  return {{"method", report.method},
          {"config", report.config},
          {"repetitions", reps},
          {"summaries", summaries},
          {"aggregate", agg}};
}

void write_report(const MetricsReport& report, const std::filesystem::path& path, ReportFormat format) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write report " + path.string());
  if (format == ReportFormat::Csv) {
    write_csv(report, out);
  } else {
    out << report_to_json(report).dump(2) << '\n';
  }
  if (!out) throw ConfigError("short write on report " + path.string());
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open report " + path.string());
  if (path.extension() != ".json") return read_csv(in, path.string());
  MetricsReport report;
  try {
    const auto j = nlohmann::json::parse(in);
    report.method = j.value("method", std::string());
    report.config = j.value("config", nlohmann::json::object());
    for (const auto& rep : j.at("repetitions")) {
      std::vector<CfResult> rows;
      for (const auto& r : rep) {
        CfResult c;
        c.instance_id = r.at("instance_id").get<int>();
        c.valid = r.at("valid").get<bool>();
        if (c.valid) {
          c.proximity = r.at("proximity").get<double>();
          c.sparsity = r.at("sparsity").get<int>();
          if (!r.at("proximity_raw").is_null()) c.proximity_raw = r.at("proximity_raw").get<double>();
        }
        c.gen_time_s = r.at("gen_time_s").get<double>();
        if (r.contains("original")) c.original = vec_from(r.at("original"));
        if (r.contains("counterfactual")) c.counterfactual = vec_from(r.at("counterfactual"));
        rows.push_back(std::move(c));
      }
      report.repetitions.push_back(std::move(rows));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace relax

#include "relax/tabular.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace relax {

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
      cell.push_back(c);
    } else if (c == ',' && !quoted) {
      out.push_back(trim(cell));
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  out.push_back(trim(cell));
  return out;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return errno == 0 && end == s.c_str() + s.size() && std::isfinite(out);
}

FeatureKind kind_from(const std::string& s) {
  if (s == "numeric") return FeatureKind::Numeric;
  if (s == "binary") return FeatureKind::Binary;
  throw ConfigError("unknown feature kind '" + s + "'");
}

Direction direction_from(const std::string& s) {
  if (s == "any") return Direction::Any;
  if (s == "increase-only") return Direction::IncreaseOnly;
  if (s == "decrease-only") return Direction::DecreaseOnly;
  throw ConfigError("unknown direction '" + s + "'");
}

}  // namespace

const char* to_string(FeatureKind k) { return k == FeatureKind::Numeric ? "numeric" : "binary"; }

const char* to_string(Direction d) {
  switch (d) {
    case Direction::IncreaseOnly: return "increase-only";
    case Direction::DecreaseOnly: return "decrease-only";
    default: return "any";
  }
}

// ---------------------------------------------------------------------------
// FeatureSchema

void FeatureSchema::validate() const {
  if (features.empty()) throw ConfigError("schema declares no features");
  std::set<std::string> names;
  bool any_actionable = false;
  for (const auto& f : features) {
    if (f.name.empty()) throw ConfigError("feature with empty name");
    if (!names.insert(f.name).second) throw ConfigError("duplicate feature name '" + f.name + "'");
    if (f.kind == FeatureKind::Binary) {
      if (f.raw_min != 0.0 || f.raw_max != 1.0)
        throw ConfigError("binary feature '" + f.name + "' must have raw range [0, 1]");
    } else if (!(f.raw_min < f.raw_max)) {
      throw ConfigError("feature '" + f.name + "': raw_min must be < raw_max");
    }
    any_actionable = any_actionable || f.actionable;
  }
  if (!any_actionable) throw ConfigError("schema has no actionable feature");
  if (names.count(target.name)) throw ConfigError("target name collides with a feature");
  if (target.task == Task::Classification) {
    if (target.n_classes < 2) throw ConfigError("classification target needs n_classes >= 2");
    if (!target.classes.empty() && static_cast<int>(target.classes.size()) != target.n_classes)
      throw ConfigError("target.classes length differs from n_classes");
  }
}

int FeatureSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return static_cast<int>(i);
  return -1;
}

std::vector<int> FeatureSchema::actionable_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].actionable) out.push_back(static_cast<int>(i));
  return out;
}

std::string FeatureSchema::fingerprint() const {
  // FNV-1a over the structural fields; raw ranges are deliberately left out.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& f : features) {
    mix(f.name);
    mix(to_string(f.kind));
    mix(to_string(f.direction));
    mix(f.actionable ? "1" : "0");
  }
  mix(target.name);
  mix(to_string(target.task));
  mix(std::to_string(target.task == Task::Classification ? target.n_classes : 0));
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

nlohmann::json FeatureSchema::to_json() const {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features) {
    feats.push_back({{"name", f.name},
                     {"kind", to_string(f.kind)},
                     {"actionable", f.actionable},
                     {"direction", to_string(f.direction)},
                     {"raw_min", f.raw_min},
                     {"raw_max", f.raw_max}});
  }
  nlohmann::json t = {{"name", target.name}, {"task", to_string(target.task)}};
  if (target.task == Task::Classification) {
    t["n_classes"] = target.n_classes;
    if (!target.classes.empty()) t["classes"] = target.classes;
  }
  return {{"features", feats}, {"target", t}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  FeatureSchema s;
  try {
    for (const auto& jf : j.at("features")) {
      FeatureSpec f;
      f.name = jf.at("name").get<std::string>();
      f.kind = kind_from(jf.value("kind", "numeric"));
      f.actionable = jf.value("actionable", true);
      f.direction = direction_from(jf.value("direction", "any"));
      if (f.kind == FeatureKind::Binary) {
        f.raw_min = jf.value("raw_min", 0.0);
        f.raw_max = jf.value("raw_max", 1.0);
      } else {
        f.raw_min = jf.at("raw_min").get<double>();
        f.raw_max = jf.at("raw_max").get<double>();
      }
      s.features.push_back(std::move(f));
    }
    const auto& jt = j.at("target");
    s.target.name = jt.at("name").get<std::string>();
    const auto task = jt.at("task").get<std::string>();
    if (task == "classification") {
      s.target.task = Task::Classification;
      s.target.n_classes = jt.at("n_classes").get<int>();
      if (jt.contains("classes")) s.target.classes = jt.at("classes").get<std::vector<std::string>>();
    } else if (task == "regression") {
      s.target.task = Task::Regression;
      s.target.n_classes = 0;
    } else {
      throw ConfigError("unknown target task '" + task + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

FeatureSchema FeatureSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("schema " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.schema = schema;
  out.normalized = normalized;
  out.rows.resize(static_cast<Eigen::Index>(indices.size()), rows.cols());
  out.labels.resize(static_cast<Eigen::Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = static_cast<Eigen::Index>(indices[i]);
    out.rows.row(static_cast<Eigen::Index>(i)) = rows.row(src);
    out.labels(static_cast<Eigen::Index>(i)) = labels(src);
  }
  return out;
}

void Dataset::validate() const {
  if (rows.cols() != static_cast<Eigen::Index>(schema.size()))
    throw ParseError("row width differs from schema feature count");
  if (labels.size() != rows.rows()) throw ParseError("label count differs from row count");
  if (!rows.allFinite()) throw ParseError("non-finite feature value");
  if (normalized && rows.size() > 0 && (rows.minCoeff() < 0.0 || rows.maxCoeff() > 1.0))
    throw ParseError("normalized dataset has entries outside [0, 1]");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const double y = labels(i);
    if (!std::isfinite(y)) throw ParseError("non-finite label at row " + std::to_string(i + 1));
    if (schema.target.task == Task::Classification &&
        (y != std::floor(y) || y < 0 || y >= schema.target.n_classes))
      throw ParseError("label out of range at row " + std::to_string(i + 1));
  }
}

Dataset load_csv(const std::filesystem::path& path, const FeatureSchema& schema) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  std::unordered_map<std::string, std::size_t> column;
  for (std::size_t c = 0; c < header.size(); ++c) column[header[c]] = c;

  std::vector<std::size_t> feature_cols;
  for (const auto& f : schema.features) {
    auto it = column.find(f.name);
    if (it == column.end()) throw ParseError(path.string() + ": missing column '" + f.name + "'");
    feature_cols.push_back(it->second);
  }
  auto it = column.find(schema.target.name);
  if (it == column.end())
    throw ParseError(path.string() + ": missing target column '" + schema.target.name + "'");
  const std::size_t label_col = it->second;

  std::vector<std::vector<double>> values;
  std::vector<double> labels;
  std::size_t row_no = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row_no;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError(path.string() + ": row " + std::to_string(row_no) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()));
    std::vector<double> r(feature_cols.size());
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      if (!parse_double(cells[feature_cols[j]], r[j]))
        throw ParseError(path.string() + ": row " + std::to_string(row_no) + ", column '" +
                         schema.features[j].name + "': non-numeric cell '" +
                         cells[feature_cols[j]] + "'");
    }
    const std::string& lc = cells[label_col];
    double y = 0.0;
    if (!parse_double(lc, y)) {
      const auto& names = schema.target.classes;
      auto pos = std::find(names.begin(), names.end(), lc);
      if (schema.target.task != Task::Classification || pos == names.end())
        throw ParseError(path.string() + ": row " + std::to_string(row_no) + ", column '" +
                         schema.target.name + "': bad label '" + lc + "'");
      y = static_cast<double>(pos - names.begin());
    }
    if (schema.target.task == Task::Classification &&
        (y != std::floor(y) || y < 0 || y >= schema.target.n_classes))
      throw ParseError(path.string() + ": row " + std::to_string(row_no) + ", column '" +
                       schema.target.name + "': label out of range '" + lc + "'");
    values.push_back(std::move(r));
    labels.push_back(y);
  }

  Dataset d;
  d.schema = schema;
  d.rows.resize(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(schema.size()));
  d.labels.resize(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < schema.size(); ++j)
      d.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i][j];
    d.labels(static_cast<Eigen::Index>(i)) = labels[i];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Normalization

NormalizationStats fit_normalizer(const Dataset& train) {
  if (train.size() == 0) throw ConfigError("cannot fit normalizer on an empty dataset");
  NormalizationStats s;
  s.min = train.rows.colwise().minCoeff().transpose();
  s.max = train.rows.colwise().maxCoeff().transpose();
  s.constant.resize(static_cast<std::size_t>(s.min.size()));
  for (Eigen::Index j = 0; j < s.min.size(); ++j) s.constant[static_cast<std::size_t>(j)] = s.max(j) == s.min(j);
  return s;
}

Vec NormalizationStats::normalize(const Vec& raw) const {
  if (raw.size() != min.size()) throw ConfigError("normalize: length mismatch");
  Vec out(raw.size());
  for (Eigen::Index j = 0; j < raw.size(); ++j) {
    if (constant[static_cast<std::size_t>(j)]) {
      out(j) = 0.0;
    } else {
      out(j) = std::clamp((raw(j) - min(j)) / (max(j) - min(j)), 0.0, 1.0);
    }
  }
  return out;
}

Vec NormalizationStats::denormalize(const Vec& unit) const {
  if (unit.size() != min.size()) throw ConfigError("denormalize: length mismatch");
  return min + unit.cwiseProduct(max - min);
}

Dataset NormalizationStats::normalize(const Dataset& raw) const {
  Dataset out = raw;
  for (std::size_t i = 0; i < raw.size(); ++i)
    out.rows.row(static_cast<Eigen::Index>(i)) = normalize(raw.row(i)).transpose();
  out.normalized = true;
  return out;
}

nlohmann::json NormalizationStats::to_json() const {
  std::vector<double> lo(min.data(), min.data() + min.size());
  std::vector<double> hi(max.data(), max.data() + max.size());
  return {{"min", lo}, {"max", hi}};
}

NormalizationStats NormalizationStats::from_json(const nlohmann::json& j) {
  NormalizationStats s;
  try {
    auto lo = j.at("min").get<std::vector<double>>();
    auto hi = j.at("max").get<std::vector<double>>();
    if (lo.size() != hi.size()) throw ConfigError("normalizer: min/max length mismatch");
    s.min = Eigen::Map<Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    s.max = Eigen::Map<Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("normalizer: ") + e.what());
  }
  s.constant.resize(static_cast<std::size_t>(s.min.size()));
  for (Eigen::Index j = 0; j < s.min.size(); ++j) {
    if (s.max(j) < s.min(j)) throw ConfigError("normalizer: max < min");
    s.constant[static_cast<std::size_t>(j)] = s.max(j) == s.min(j);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Splitting and sampling

std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("split: train fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  // The epsilon keeps products like 0.7 * 10 from landing on 6.999...
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(data.size()) + 1e-9));
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  return {data.subset(tr), data.subset(te)};
}

Vec sample_ball(const Vec& center, double radius, Rng& rng) {
  if (!(radius > 0.0)) throw ConfigError("sample_ball: radius must be positive");
  const auto n = center.size();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vec dir(n);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < n; ++i) dir(i) = gauss(rng);
    norm = dir.norm();
  } while (norm == 0.0);
  const double r = radius * std::pow(unif(rng), 1.0 / static_cast<double>(n));
  return center + (r / norm) * dir;
}

std::vector<Vec> sample_neighborhood(const Vec& x, double radius, int count, Rng& rng) {
  if (count <= 0) throw ConfigError("sample_neighborhood: count must be positive");
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(sample_ball(x, radius, rng).cwiseMax(0.0).cwiseMin(1.0));
  return out;
}

}  // namespace relax

#include "relax/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <set>

#include "relax/protocol.hpp"

namespace relax {

namespace {

std::string resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown setting '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void RunConfig::validate() const {
  if (dataset.empty() || schema.empty()) throw ConfigError("config needs 'dataset' and 'schema'");
  if (!std::filesystem::exists(dataset)) throw ConfigError("dataset not found: " + dataset);
  if (!std::filesystem::exists(schema)) throw ConfigError("schema not found: " + schema);
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  if (predictor.kind != "mlp" && predictor.kind != "external")
    throw ConfigError("predictor.kind must be 'mlp' or 'external'");
  if (predictor.kind == "external" && predictor.endpoint.empty())
    throw ConfigError("external predictor needs an endpoint");
  if (predictor.epochs < 1 || predictor.batch_size < 1 || !(predictor.learning_rate > 0.0))
    throw ConfigError("predictor training settings must be positive");
  if (!(predictor.timeout_s > 0.0)) throw ConfigError("predictor.timeout_s must be > 0");
  if (!(env.lambda > 0.0) || env.max_features < 1) throw ConfigError("env settings out of range");
  if (eval.repetitions < 1 || eval.instances < 0) throw ConfigError("eval settings out of range");
  for (const auto& m : eval.methods)
    if (m != "global" && m != "local" && m != "nearest-ct") throw ConfigError("unknown method '" + m + "'");
  train.validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"dataset", dataset},
          {"schema", schema},
          {"split", {{"train_fraction", train_fraction}, {"seed", split_seed}}},
          {"predictor",
           {{"kind", predictor.kind},
            {"hidden", predictor.hidden},
            {"epochs", predictor.epochs},
            {"batch_size", predictor.batch_size},
            {"learning_rate", predictor.learning_rate},
            {"seed", predictor.seed},
            {"path", predictor.path},
            {"endpoint", predictor.endpoint},
            {"timeout_s", predictor.timeout_s}}},
          {"goal", goal.to_json()},
          {"env", env.to_json()},
          {"train", train.to_json()},
          {"eval", {{"repetitions", eval.repetitions}, {"instances", eval.instances}, {"methods", eval.methods}}},
          {"output_dir", output_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  RunConfig c;
  try {
    reject_unknown(j, {"dataset", "schema", "split", "predictor", "goal", "env", "train", "eval", "output_dir"}, "");
    take(j, "dataset", c.dataset);
    take(j, "schema", c.schema);
    take(j, "output_dir", c.output_dir);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      reject_unknown(s, {"train_fraction", "seed"}, "split");
      take(s, "train_fraction", c.train_fraction);
      take(s, "seed", c.split_seed);
    }
    if (j.contains("predictor")) {
      const auto& p = j.at("predictor");
      reject_unknown(p, {"kind", "hidden", "epochs", "batch_size", "learning_rate", "seed", "path", "endpoint", "timeout_s"},
                     "predictor");
      take(p, "kind", c.predictor.kind);
      take(p, "hidden", c.predictor.hidden);
      take(p, "epochs", c.predictor.epochs);
      take(p, "batch_size", c.predictor.batch_size);
      take(p, "learning_rate", c.predictor.learning_rate);
      take(p, "seed", c.predictor.seed);
      take(p, "path", c.predictor.path);
      take(p, "endpoint", c.predictor.endpoint);
      take(p, "timeout_s", c.predictor.timeout_s);
    }
    if (j.contains("goal")) c.goal = GoalSpec::from_json(j.at("goal"));
    if (j.contains("env")) {
      reject_unknown(j.at("env"), {"lambda", "max_features"}, "env");
      c.env = EnvConfig::from_json(j.at("env"));
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"repetitions", "instances", "methods"}, "eval");
      take(e, "repetitions", c.eval.repetitions);
      take(e, "instances", c.eval.instances);
      take(e, "methods", c.eval.methods);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.dataset = resolve(c.dataset, base);
  c.schema = resolve(c.schema, base);
  c.predictor.path = resolve(c.predictor.path, base);
  c.train.checkpoint_path = resolve(c.train.checkpoint_path, base);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty component in override '" + key + "'");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------

PreparedRun prepare_run(const RunConfig& config) {
  config.validate();
  const auto schema = FeatureSchema::load(config.schema);
  const auto data = load_csv(config.dataset, schema);
  PreparedRun run;
  std::tie(run.raw_train, run.raw_test) = split(data, config.train_fraction, config.split_seed);
  run.stats = fit_normalizer(run.raw_train);
  run.train = run.stats.normalize(run.raw_train);
  run.test = run.stats.normalize(run.raw_test);

  const auto& ps = config.predictor;
  if (ps.kind == "external") {
    run.predictor = connect_external(
        ps.endpoint, std::chrono::milliseconds(static_cast<long>(ps.timeout_s * 1000.0)));
  } else if (!ps.path.empty() && std::filesystem::exists(ps.path)) {
    run.predictor = MlpPredictor::load(ps.path);
  } else {
    MlpTrainConfig mc;
    mc.hidden = ps.hidden;
    mc.epochs = ps.epochs;
    mc.batch_size = ps.batch_size;
    mc.learning_rate = ps.learning_rate;
    mc.seed = ps.seed;
    run.predictor = schema.target.task == Task::Classification ? PredictorPtr(train_mlp_classifier(run.train, mc))
                                                               : PredictorPtr(train_mlp_regressor(run.train, mc));
    run.model_trained = true;
  }
  check_compatible(*run.predictor, schema);
  run.model_metric = evaluate(*run.predictor, run.test);
  return run;
}

std::vector<std::size_t> eval_indices(const RunConfig& config, PreparedRun& run) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < run.test.size(); ++i) {
    if (config.goal.mode == GoalMode::Targeted &&
        run.predictor->predict(run.test.row(i)) == static_cast<double>(config.goal.target_class))
      continue;
    out.push_back(i);
    if (config.eval.instances > 0 && static_cast<int>(out.size()) >= config.eval.instances) break;
  }
  if (out.empty()) throw ConfigError("no test instance admits the goal");
  return out;
}

namespace {

double raw_l1(const Vec& a, const Vec& b, const NormalizationStats& s) {
  return ((a - b).cwiseAbs().array() * (s.max - s.min).array()).sum();
}

void say(const Progress& p, const std::string& msg) {
  if (p) p(msg);
}

}  // namespace

MetricsReport evaluate_method(const RunConfig& config, PreparedRun& run, const std::string& method,
                              const Progress& progress) {
  const auto idx = eval_indices(config, run);
  const double n = static_cast<double>(idx.size());
  MetricsReport report;
  report.method = method;
  report.config = config.to_json();
  report.config["model_metric"] = run.model_metric;

  if (method == "nearest-ct") {
    const auto index = NearestCtIndex::build(run.train, *run.predictor);
    for (int rep = 0; rep < config.eval.repetitions; ++rep) {
      std::vector<CfResult> rows;
      for (auto i : idx) {
        const Vec x = run.test.row(i);
        const auto t0 = std::chrono::steady_clock::now();
        CfResult r;
        try {
          r = nearest_ct(index, x, *run.predictor);
          r.proximity_raw = raw_l1(*r.counterfactual, x, run.stats);
        } catch (const NoCounterfactual&) {
          r = make_result(x, x, false);
        }
        r.gen_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.instance_id = static_cast<int>(i);
        rows.push_back(std::move(r));
      }
      report.repetitions.push_back(std::move(rows));
    }
    return report;
  }
  if (method != "global" && method != "local") throw ConfigError("unknown method '" + method + "'");

  for (int rep = 0; rep < config.eval.repetitions; ++rep) {
    TrainConfig tc = config.train;
    tc.seed = config.train.seed + static_cast<std::uint64_t>(rep);
    tc.checkpoint_path.clear();
    tc.resume = false;
    say(progress, method + ": repetition " + std::to_string(rep + 1) + " training");
    const auto g = train_global(run.train, run.stats, run.predictor, config.goal, config.env, tc);
    const double share = g.seconds / n;
    CfEnv env = make_env(g.snapshot, run.predictor);
    std::vector<CfResult> rows;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Vec x = run.test.row(idx[j]);
      CfResult r;
      if (method == "global") {
        r = generate_cf(g.snapshot.params, env, x, &run.stats);
        r.gen_time_s += share;
      } else {
        TrainConfig lc = tc;
        lc.seed = tc.seed * 1000 + j;
        const auto l = fine_tune_local(g.snapshot, x, run.predictor, lc);
        r = generate_cf(l.snapshot.params, env, x, &run.stats);
        r.gen_time_s += share + l.seconds;
      }
      r.instance_id = static_cast<int>(idx[j]);
      rows.push_back(std::move(r));
    }
    say(progress, method + ": repetition " + std::to_string(rep + 1) + " validity " +
                      std::to_string(validity(rows)));
    report.repetitions.push_back(std::move(rows));
  }
  return report;
}

namespace {

SweepRow sweep_point(double value, MetricsReport report) {
  SweepRow row;
  row.value = value;
  const auto agg = report.aggregates();
  row.validity = agg.at("validity");
  if (agg.count("sparsity")) row.sparsity = agg.at("sparsity");
  if (agg.count("proximity")) row.proximity = agg.at("proximity");
  row.report = std::move(report);
  return row;
}

}  // namespace

std::vector<SweepRow> sweep_sparsity_cap(const RunConfig& config, PreparedRun& run, const std::vector<int>& caps,
                                         const Progress& progress) {
  std::vector<int> sorted = caps;
  std::sort(sorted.begin(), sorted.end());
  std::vector<SweepRow> out;
  for (int m : sorted) {
    RunConfig c = config;
    c.env.max_features = m;
    say(progress, "sweep: max_features=" + std::to_string(m));
    out.push_back(sweep_point(m, evaluate_method(c, run, "global", progress)));
  }
  return out;
}

std::vector<SweepRow> sweep_lambda(const RunConfig& config, PreparedRun& run, const std::vector<double>& lambdas,
                                   const Progress& progress) {
  std::vector<SweepRow> out;
  for (double l : lambdas) {
    RunConfig c = config;
    c.env.lambda = l;
    say(progress, "sweep: lambda=" + std::to_string(l));
    out.push_back(sweep_point(l, evaluate_method(c, run, "global", progress)));
  }
  return out;
}

}  // namespace relax

// relax: command-line front end.
//
// Exit codes: 0 ok (an invalid explanation is still ok), 1 unexpected failure,
// 2 configuration error, 3 predictor transport error, 4 numeric failure.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "relax/pipeline.hpp"
#include "relax/protocol.hpp"

using namespace relax;
namespace fs = std::filesystem;

namespace {

void log(const std::string& msg) { std::cerr << "[relax] " << msg << std::endl; }

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "run config (JSON)")->required();
  cmd->add_option("--set", c.overrides, "override a config field, e.g. env.lambda=0.1");
  cmd->add_option("-o,--output", c.output, "output directory");
}

RunConfig resolve_config(const Common& c) {
  std::ifstream in(c.config);
  if (!in) throw ConfigError("cannot open config " + c.config);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(c.config + ": " + e.what());
  }
  for (const auto& o : c.overrides) apply_override(doc, o);
  const bool has_out = doc.contains("output_dir");
  RunConfig rc = RunConfig::from_json(doc, fs::path(c.config).parent_path());
  if (!c.output.empty()) {
    rc.output_dir = c.output;
  } else if (!has_out) {
    const char* env = std::getenv("RELAX_OUTPUT_DIR");
    rc.output_dir = env && *env ? env : "out";
  } else {
    rc.output_dir = fs::path(rc.output_dir).is_absolute()
                        ? rc.output_dir
                        : (fs::path(c.config).parent_path() / rc.output_dir).lexically_normal().string();
  }
  // a model saved by train-model is picked up by later commands
  if (rc.predictor.kind == "mlp" && rc.predictor.path.empty() && fs::exists(fs::path(rc.output_dir) / "model.bin"))
    rc.predictor.path = (fs::path(rc.output_dir) / "model.bin").string();
  return rc;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

std::string metric_name(const PreparedRun& run) {
  return run.train.schema.target.task == Task::Classification ? "accuracy" : "rmse";
}

PreparedRun prepare(const RunConfig& rc) {
  log("loading " + rc.dataset);
  auto run = prepare_run(rc);
  log(std::string(run.model_trained ? "trained" : "loaded") + " predictor, test " + metric_name(run) + " " +
      std::to_string(run.model_metric));
  return run;
}

// --- commands ---------------------------------------------------------------

int cmd_train_model(const Common& c) {
  auto rc = resolve_config(c);
  if (rc.predictor.kind != "mlp") throw ConfigError("train-model needs an in-process mlp predictor");
  rc.predictor.path.clear();  // always retrain
  auto run = prepare(rc);
  const fs::path out = fs::path(rc.output_dir) / "model.bin";
  fs::create_directories(rc.output_dir);
  std::dynamic_pointer_cast<MlpPredictor>(run.predictor)->save(out);
  const nlohmann::json summary = {{metric_name(run), run.model_metric},
                                  {"train_rows", run.train.size()},
                                  {"test_rows", run.test.size()},
                                  {"model", out.string()}};
  write_json(fs::path(rc.output_dir) / "model_metrics.json", summary);
  std::cout << summary.dump() << std::endl;
  return 0;
}

int cmd_train_agent(const Common& c, bool resume) {
  auto rc = resolve_config(c);
  if (rc.train.checkpoint_path.empty()) rc.train.checkpoint_path = (fs::path(rc.output_dir) / "checkpoint.snap").string();
  if (rc.train.checkpoint_every == 0) rc.train.checkpoint_every = std::max(1, rc.train.epochs / 10);
  rc.train.resume = resume || rc.train.resume;
  auto run = prepare(rc);
  fs::create_directories(rc.output_dir);
  const fs::path log_path = fs::path(rc.output_dir) / "train_log.csv";
  std::ofstream log_csv(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!resume) log_csv << "step,epoch,loss_q,loss_pi,probe_validity\n";
  auto result = train_global(run.train, run.stats, run.predictor, rc.goal, rc.env, rc.train, [&](const LogRow& r) {
    log(format_log_row(r));
    log_csv << r.step << ',' << r.epoch << ',' << r.loss_q << ',' << r.loss_pi << ','
            << (r.probe_validity ? std::to_string(*r.probe_validity) : "") << '\n';
    log_csv.flush();
  });
  result.snapshot.info["config"] = rc.to_json();
  const fs::path snap = fs::path(rc.output_dir) / "agent.snap";
  result.snapshot.save(snap);
  nlohmann::json summary = {{"snapshot", snap.string()},
                            {"steps", result.steps},
                            {"train_seconds", result.seconds},
                            {"log", log_path.string()}};
  if (!result.log.empty() && result.log.back().probe_validity)
    summary["probe_validity"] = *result.log.back().probe_validity;
  std::cout << summary.dump() << std::endl;
  return 0;
}

int cmd_explain(const Common& c, const std::string& snapshot_path, std::vector<int> instances, bool local) {
  auto rc = resolve_config(c);
  auto run = prepare(rc);
  const fs::path snap_path = snapshot_path.empty() ? fs::path(rc.output_dir) / "agent.snap" : fs::path(snapshot_path);
  const auto snap = PolicySnapshot::load(snap_path);
  if (snap.fingerprint() != run.train.schema.fingerprint()) throw ConfigError("schema mismatch with snapshot");
  CfEnv env = make_env(snap, run.predictor);
  if (instances.empty()) instances.push_back(0);

  MetricsReport report;
  report.method = local ? "local" : "global";
  report.config = rc.to_json();
  std::vector<CfResult> rows;
  for (int id : instances) {
    if (id < 0 || static_cast<std::size_t>(id) >= run.test.size())
      throw ConfigError("instance " + std::to_string(id) + " outside the test split (" +
                        std::to_string(run.test.size()) + " rows)");
    const Vec x = run.test.row(static_cast<std::size_t>(id));
    CfResult r;
    if (local) {
      TrainConfig lc = rc.train;
      lc.seed = rc.train.seed * 1000 + static_cast<std::uint64_t>(id);
      log("fine-tuning on instance " + std::to_string(id));
      const auto l = fine_tune_local(snap, x, run.predictor, lc);
      r = generate_cf(l.snapshot.params, env, x, &snap.stats);
      r.gen_time_s += l.seconds;
    } else {
      r = generate_cf(snap.params, env, x, &snap.stats);
    }
    r.instance_id = id;

    const Vec raw_x = snap.stats.denormalize(x);
    const Vec raw_end = snap.stats.denormalize(r.last_state);
    std::printf("instance %d: valid=%s prediction %g", id, r.valid ? "true" : "false", run.predictor->predict(x));
    if (r.valid) std::printf(" -> %g  proximity=%.6g sparsity=%d", run.predictor->predict(*r.counterfactual),
                             r.proximity, r.sparsity);
    std::printf("\n");
    for (std::size_t f = 0; f < snap.schema.size(); ++f) {
      const auto i = static_cast<Eigen::Index>(f);
      const double d = raw_end(i) - raw_x(i);
      if (r.last_state(i) == x(i)) continue;
      std::printf("  %-16s %12.6g -> %12.6g  (e_x %+.6g)\n", snap.schema.features[f].name.c_str(), raw_x(i),
                  raw_end(i), d);
    }
    rows.push_back(std::move(r));
  }
  report.repetitions.push_back(std::move(rows));
  write_report(report, fs::path(rc.output_dir) / "explain.csv", ReportFormat::Csv);
  write_report(report, fs::path(rc.output_dir) / "explain.json", ReportFormat::Json);
  return 0;
}

void print_aggregate(const std::string& label, const std::map<std::string, Aggregate>& agg) {
  std::printf("%-12s", label.c_str());
  for (const char* k : {"validity", "proximity", "sparsity", "gen_time_s"}) {
    const auto it = agg.find(k);
    if (it == agg.end()) std::printf("  %s=undefined", k);
    else std::printf("  %s=%.4f±%.4f", k, it->second.mean, it->second.std);
  }
  std::printf("\n");
}

int cmd_evaluate(const Common& c) {
  auto rc = resolve_config(c);
  auto run = prepare(rc);
  for (const auto& method : rc.eval.methods) {
    log("evaluating " + method + " over " + std::to_string(rc.eval.repetitions) + " repetitions");
    const auto report = evaluate_method(rc, run, method, log);
    const auto base = fs::path(rc.output_dir) / ("report_" + method);
    write_report(report, base.string() + ".csv", ReportFormat::Csv);
    write_report(report, base.string() + ".json", ReportFormat::Json);
    print_aggregate(method, report.aggregates());
  }
  return 0;
}

int cmd_sweep(const Common& c, const std::string& param, const std::vector<double>& values) {
  auto rc = resolve_config(c);
  if (values.empty()) throw ConfigError("sweep needs --values");
  auto run = prepare(rc);
  std::vector<SweepRow> rows;
  if (param == "lambda") {
    rows = sweep_lambda(rc, run, values, log);
  } else if (param == "max_features") {
    std::vector<int> caps;
    for (double v : values) caps.push_back(static_cast<int>(v));
    rows = sweep_sparsity_cap(rc, run, caps, log);
  } else {
    throw ConfigError("--param must be 'lambda' or 'max_features'");
  }
  const fs::path dir = fs::path(rc.output_dir) / ("sweep_" + param);
  fs::create_directories(dir);
  std::ofstream summary(dir / "summary.csv");
  summary << param << ",validity_mean,validity_std,sparsity_mean,sparsity_std,proximity_mean,proximity_std,report\n";
  for (const auto& r : rows) {
    char name[64];
    std::snprintf(name, sizeof name, "point_%g.csv", r.value);
    write_report(r.report, dir / name, ReportFormat::Csv);
    std::snprintf(name, sizeof name, "point_%g.json", r.value);
    write_report(r.report, dir / name, ReportFormat::Json);
    std::snprintf(name, sizeof name, "point_%g.csv", r.value);
    auto opt = [](const std::optional<Aggregate>& a, bool mean) {
      return a ? std::to_string(mean ? a->mean : a->std) : std::string();
    };
    summary << r.value << ',' << r.validity.mean << ',' << r.validity.std << ',' << opt(r.sparsity, true) << ','
            << opt(r.sparsity, false) << ',' << opt(r.proximity, true) << ',' << opt(r.proximity, false) << ','
            << name << '\n';
    print_aggregate(param + "=" + std::to_string(r.value), r.report.aggregates());
  }
  log("wrote " + (dir / "summary.csv").string());
  return 0;
}

int cmd_serve_check(const std::string& endpoint, double timeout_s, const std::string& schema_path) {
  auto p = connect_external(endpoint, std::chrono::milliseconds(static_cast<long>(timeout_s * 1000)));
  if (!schema_path.empty()) check_compatible(*p, FeatureSchema::load(schema_path));
  const nlohmann::json info = {{"task", to_string(p->task())},
                               {"n_features", p->n_features()},
                               {"n_classes", p->n_classes()}};
  std::cout << info.dump() << std::endl;
  return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const std::string& model_path, int port) {
  auto model = MlpPredictor::load(model_path);
  if (port < 0) {
    serve_stream(*model, std::cin, std::cout);
    return 0;
  }
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  serve_tcp(*model, static_cast<std::uint16_t>(port), g_stop,
            [](std::uint16_t p) { log("listening on 127.0.0.1:" + std::to_string(p)); });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  relax::retain_heap();
  CLI::App app{"relax: reinforcement-learned counterfactual explanations for tabular models"};
  app.require_subcommand(1);

  Common common;
  auto* train_model = app.add_subcommand("train-model", "train the in-process MLP target and report its test metric");
  add_common(train_model, common);

  bool resume = false;
  auto* train_agent = app.add_subcommand("train-agent", "train a global agent; writes agent.snap and train_log.csv");
  add_common(train_agent, common);
  train_agent->add_flag("--resume", resume, "continue from the checkpoint in the output directory");

  std::string snapshot;
  std::vector<int> instances;
  bool local = false;
  auto* explain = app.add_subcommand("explain", "generate counterfactuals for test instances");
  add_common(explain, common);
  explain->add_option("--snapshot", snapshot, "agent snapshot (default: <output>/agent.snap)");
  explain->add_option("-i,--instance", instances, "test-split row index (repeatable)");
  explain->add_flag("--local", local, "fine-tune a dedicated agent per instance first");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "repeated evaluation of the configured methods");
  add_common(evaluate_cmd, common);

  std::string param;
  std::vector<double> values;
  auto* sweep = app.add_subcommand("sweep", "one train/evaluate cycle per grid point");
  add_common(sweep, common);
  sweep->add_option("--param", param, "lambda or max_features")->required();
  sweep->add_option("--values", values, "grid values")->delimiter(',')->required();

  std::string endpoint, schema_path;
  double timeout_s = 5.0;
  auto* serve_check = app.add_subcommand("serve-check", "handshake with an external predictor");
  serve_check->add_option("endpoint", endpoint, "tcp://host:port or exec:<command>")->required();
  serve_check->add_option("--timeout", timeout_s, "seconds");
  serve_check->add_option("--schema", schema_path, "also check compatibility with this schema");

  std::string model_path;
  int port = -1;
  auto* serve = app.add_subcommand("serve", "serve a saved MLP over stdin/stdout or TCP");
  serve->add_option("model", model_path, "model.bin written by train-model")->required();
  serve->add_option("--tcp", port, "listen on this port instead of stdio (0 picks one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_model) return cmd_train_model(common);
    if (*train_agent) return cmd_train_agent(common, resume);
    if (*explain) return cmd_explain(common, snapshot, instances, local);
    if (*evaluate_cmd) return cmd_evaluate(common);
    if (*sweep) return cmd_sweep(common, param, values);
    if (*serve_check) return cmd_serve_check(endpoint, timeout_s, schema_path);
    if (*serve) return cmd_serve(model_path, port);
  } catch (const ConfigError& e) {
    log(std::string("config error: ") + e.what());
    return 2;
  } catch (const ParseError& e) {
    log(std::string("input error: ") + e.what());
    return 2;
  } catch (const TransportError& e) {
    log(std::string("predictor unreachable: ") + e.what());
    return 3;
  } catch (const NumericError& e) {
    log(std::string("numeric failure: ") + e.what());
    return 4;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "relax/agent.hpp"
#include "relax/eval.hpp"
#include "relax/pipeline.hpp"
#include "relax/protocol.hpp"

namespace py = pybind11;
using namespace relax;

namespace {

// dicts cross the boundary as JSON text
nlohmann::json to_json(const py::handle& obj) {
  auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

py::object from_json(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

// lets Python classes stand in for the model being explained
class PyPredictor : public Predictor {
 public:
  using Predictor::Predictor;
  Task task() const override { PYBIND11_OVERRIDE_PURE(Task, Predictor, task); }
  int n_features() const override { PYBIND11_OVERRIDE_PURE(int, Predictor, n_features); }
  int n_classes() const override { PYBIND11_OVERRIDE_PURE(int, Predictor, n_classes); }
  double predict(const Vec& x) override { PYBIND11_OVERRIDE_PURE(double, Predictor, predict, x); }
  std::vector<double> predict_batch(const Mat& X) override {
    PYBIND11_OVERRIDE(std::vector<double>, Predictor, predict_batch, X);
  }
};

}  // namespace

PYBIND11_MODULE(_relax, m) {
  m.doc() = "relax core bindings";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<TransportError>(m, "TransportError", PyExc_ConnectionError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<NoCounterfactual>(m, "NoCounterfactual", PyExc_LookupError);

  py::enum_<Task>(m, "Task").value("classification", Task::Classification).value("regression", Task::Regression);
  py::enum_<Done>(m, "Done")
      .value("cont", Done::Continue)
      .value("success", Done::Success)
      .value("budget", Done::Budget);

  py::class_<FeatureSchema>(m, "FeatureSchema")
      .def_static("load", &FeatureSchema::load)
      .def_static("from_dict", [](const py::dict& d) { return FeatureSchema::from_json(to_json(d)); })
      .def("to_dict", [](const FeatureSchema& s) { return from_json(s.to_json()); })
      .def("fingerprint", &FeatureSchema::fingerprint)
      .def_property_readonly("names", [](const FeatureSchema& s) {
        std::vector<std::string> out;
        for (const auto& f : s.features) out.push_back(f.name);
        return out;
      })
      .def("__len__", &FeatureSchema::size);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("schema", &Dataset::schema)
      .def_readonly("rows", &Dataset::rows)
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("normalized", &Dataset::normalized)
      .def("row", &Dataset::row)
      .def("__len__", &Dataset::size);

  py::class_<NormalizationStats>(m, "NormalizationStats")
      .def_readonly("min", &NormalizationStats::min)
      .def_readonly("max", &NormalizationStats::max)
      .def("normalize", py::overload_cast<const Vec&>(&NormalizationStats::normalize, py::const_))
      .def("denormalize", &NormalizationStats::denormalize)
      .def("normalize_dataset", py::overload_cast<const Dataset&>(&NormalizationStats::normalize, py::const_));

  m.def("load_csv", &load_csv, py::arg("path"), py::arg("schema"));
  m.def("fit_normalizer", &fit_normalizer);
  m.def("split", &split, py::arg("data"), py::arg("train_fraction") = 0.7, py::arg("seed") = 0);

  py::class_<Predictor, PyPredictor, PredictorPtr>(m, "Predictor")
      .def(py::init<>())
      .def("task", &Predictor::task)
      .def("n_features", &Predictor::n_features)
      .def("n_classes", &Predictor::n_classes)
      .def("predict", &Predictor::predict)
      .def("predict_batch", &Predictor::predict_batch);

  py::class_<MlpPredictor, Predictor, std::shared_ptr<MlpPredictor>>(m, "MlpPredictor")
      .def("scores", &MlpPredictor::scores)
      .def("save", &MlpPredictor::save)
      .def_static("load", &MlpPredictor::load);

  auto mlp_config = [](std::vector<int> hidden, int epochs, int batch_size, double lr, std::uint64_t seed) {
    return MlpTrainConfig{std::move(hidden), epochs, batch_size, lr, seed};
  };
  m.def(
      "train_mlp_classifier",
      [=](const Dataset& d, std::vector<int> hidden, int epochs, int batch, double lr, std::uint64_t seed) {
        return train_mlp_classifier(d, mlp_config(std::move(hidden), epochs, batch, lr, seed));
      },
      py::arg("train"), py::arg("hidden") = std::vector<int>{64, 128}, py::arg("epochs") = 200,
      py::arg("batch_size") = 32, py::arg("learning_rate") = 1e-3, py::arg("seed") = 1);
  m.def(
      "train_mlp_regressor",
      [=](const Dataset& d, std::vector<int> hidden, int epochs, int batch, double lr, std::uint64_t seed) {
        return train_mlp_regressor(d, mlp_config(std::move(hidden), epochs, batch, lr, seed));
      },
      py::arg("train"), py::arg("hidden") = std::vector<int>{64, 128}, py::arg("epochs") = 200,
      py::arg("batch_size") = 32, py::arg("learning_rate") = 1e-3, py::arg("seed") = 1);
  m.def("evaluate", &evaluate);
  m.def("connect_external", [](const std::string& endpoint, double timeout_s) -> PredictorPtr {
    return connect_external(endpoint, std::chrono::milliseconds(static_cast<long>(timeout_s * 1000)));
  }, py::arg("endpoint"), py::arg("timeout_s") = 5.0);

  py::class_<GoalSpec>(m, "GoalSpec")
      .def_static("untargeted", &GoalSpec::untargeted)
      .def_static("targeted", &GoalSpec::targeted)
      .def_static("regression", &GoalSpec::regression)
      .def("to_dict", [](const GoalSpec& g) { return from_json(g.to_json()); });

  py::class_<EnvConfig>(m, "EnvConfig")
      .def(py::init([](double lambda, int max_features) { return EnvConfig{lambda, max_features}; }),
           py::arg("lam") = 1.0, py::arg("max_features") = 5)
      .def_readwrite("lam", &EnvConfig::lambda)
      .def_readwrite("max_features", &EnvConfig::max_features);

  py::class_<EnvState>(m, "EnvState")
      .def_readonly("x", &EnvState::x)
      .def_readonly("available", &EnvState::available)
      .def_readonly("steps", &EnvState::steps)
      .def("encode", &EnvState::encode);

  py::class_<CfEnv>(m, "CfEnv")
      .def(py::init<PredictorPtr, const FeatureSchema&, const NormalizationStats&, GoalSpec, EnvConfig>(),
           py::keep_alive<1, 2>())
      .def("reset", &CfEnv::reset)
      .def("apply",
           [](CfEnv& env, const EnvState& s, int feature, double v) {
             auto r = env.apply(s, {feature, v});
             return py::make_tuple(r.next, r.reward, r.done);
           })
      .def_property_readonly("actionable", &CfEnv::actionable);

  py::class_<CfResult>(m, "CfResult")
      .def_readonly("instance_id", &CfResult::instance_id)
      .def_readonly("original", &CfResult::original)
      .def_readonly("counterfactual", &CfResult::counterfactual)
      .def_readonly("last_state", &CfResult::last_state)
      .def_readonly("valid", &CfResult::valid)
      .def_readonly("proximity", &CfResult::proximity)
      .def_readonly("proximity_raw", &CfResult::proximity_raw)
      .def_readonly("sparsity", &CfResult::sparsity)
      .def_readonly("gen_time_s", &CfResult::gen_time_s)
      .def("explanation", &CfResult::explanation);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init([](const py::kwargs& kw) { return TrainConfig::from_json(to_json(kw)); }))
      .def("to_dict", [](const TrainConfig& c) { return from_json(c.to_json()); });

  py::class_<DenseNet>(m, "DenseNet")
      .def_property_readonly("input_size", &DenseNet::input_size)
      .def_property_readonly("output_size", &DenseNet::output_size)
      .def("forward", py::overload_cast<const Vec&>(&DenseNet::forward, py::const_))
      .def("forward_batch", py::overload_cast<const Mat&>(&DenseNet::forward, py::const_));

  py::class_<PolicySnapshot>(m, "PolicySnapshot")
      .def_property_readonly("q", [](const PolicySnapshot& s) { return s.params.q; })
      .def_property_readonly("policy", [](const PolicySnapshot& s) { return s.params.policy; })
      .def_readonly("actionable", &PolicySnapshot::actionable)
      .def("save", &PolicySnapshot::save)
      .def_static("load", &PolicySnapshot::load)
      .def("fingerprint", &PolicySnapshot::fingerprint)
      .def_property_readonly("info", [](const PolicySnapshot& s) { return from_json(s.info); });

  py::class_<LogRow>(m, "LogRow")
      .def_readonly("step", &LogRow::step)
      .def_readonly("epoch", &LogRow::epoch)
      .def_readonly("loss_q", &LogRow::loss_q)
      .def_readonly("loss_pi", &LogRow::loss_pi)
      .def_readonly("probe_validity", &LogRow::probe_validity)
      .def("__repr__", &format_log_row);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("snapshot", &TrainResult::snapshot)
      .def_readonly("log", &TrainResult::log)
      .def_readonly("steps", &TrainResult::steps)
      .def_readonly("seconds", &TrainResult::seconds);

  // training releases the GIL unless a Python predictor or sink needs it back
  m.def("train_global", &train_global, py::arg("train"), py::arg("stats"), py::arg("predictor"), py::arg("goal"),
        py::arg("env"), py::arg("config"), py::arg("sink") = LogSink{});
  m.def("fine_tune_local", &fine_tune_local, py::arg("snapshot"), py::arg("x"), py::arg("predictor"),
        py::arg("config"), py::arg("sink") = LogSink{});
  m.def("generate_cf", py::overload_cast<const PolicySnapshot&, const Vec&, PredictorPtr>(&generate_cf),
        py::arg("snapshot"), py::arg("x"), py::arg("predictor"));

  m.def("nearest_ct", [](const Dataset& train, const Vec& x, Predictor& p) {
    return nearest_ct(NearestCtIndex::build(train, p), x, p);
  });

  py::class_<MetricsReport>(m, "MetricsReport")
      .def(py::init<>())
      .def_readwrite("method", &MetricsReport::method)
      .def_readwrite("repetitions", &MetricsReport::repetitions)
      .def("aggregates", [](const MetricsReport& r) {
        py::dict out;
        for (const auto& [k, a] : r.aggregates()) out[py::str(k)] = py::make_tuple(a.mean, a.std, a.n);
        return out;
      })
      .def("to_dict", [](const MetricsReport& r) { return from_json(report_to_json(r)); });

  m.def("write_report", [](const MetricsReport& r, const std::filesystem::path& p) {
    write_report(r, p, p.extension() == ".json" ? ReportFormat::Json : ReportFormat::Csv);
  });
  m.def("read_report", &read_report);
  m.def("spearman", &spearman);

  py::class_<RunConfig>(m, "RunConfig")
      .def_static("load", &RunConfig::load)
      .def_static("from_dict",
                  [](const py::dict& d, const std::filesystem::path& base) { return RunConfig::from_json(to_json(d), base); },
                  py::arg("config"), py::arg("base") = std::filesystem::path())
      .def("to_dict", [](const RunConfig& c) { return from_json(c.to_json()); });

  py::class_<PreparedRun>(m, "PreparedRun")
      .def_readonly("train", &PreparedRun::train)
      .def_readonly("test", &PreparedRun::test)
      .def_readonly("stats", &PreparedRun::stats)
      .def_readonly("predictor", &PreparedRun::predictor)
      .def_readonly("model_metric", &PreparedRun::model_metric);

  m.def("prepare_run", &prepare_run);
  m.def("evaluate_method", [](const RunConfig& c, PreparedRun& run, const std::string& method) {
    return evaluate_method(c, run, method);
  });
}

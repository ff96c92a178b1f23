#include <doctest.h>

#include <future>
#include <sstream>
#include <thread>

#include "fixtures.hpp"
#include "relax/protocol.hpp"

using namespace relax;
using nlohmann::json;

namespace {

std::shared_ptr<MlpPredictor> small_model(const std::filesystem::path& save_to = {}) {
  fixtures::Threshold truth(4, 1, 0.5);
  const auto d = fixtures::uniform_dataset(fixtures::numeric_schema(4), 200, truth, 9);
  MlpTrainConfig cfg;
  cfg.hidden = {8};
  cfg.epochs = 20;
  auto m = train_mlp_classifier(d, cfg);
  if (!save_to.empty()) m->save(save_to);
  return m;
}

// serve_tcp on an ephemeral port in a background thread
struct TcpServer {
  std::atomic<bool> stop{false};
  std::uint16_t port = 0;
  std::thread thread;
  explicit TcpServer(Predictor& model) {
    std::promise<std::uint16_t> ready;
    auto fut = ready.get_future();
    thread = std::thread([&, p = &ready] { serve_tcp(model, 0, stop, [p](std::uint16_t pt) { p->set_value(pt); }); });
    port = fut.get();
  }
  ~TcpServer() {
    stop = true;
    thread.join();
  }
};

}  // namespace

TEST_CASE("handle_request") {
  fixtures::Threshold h(2, 0, 0.5);
  auto info = json::parse(handle_request(h, R"({"type":"info"})"));
  CHECK(info["type"] == "info");
  CHECK(info["task"] == "classification");
  CHECK(info["n_features"] == 2);
  CHECK(info["n_classes"] == 2);

  auto p = json::parse(handle_request(h, R"({"type":"predict","x":[0.7,0.1],"extra":true})"));
  CHECK(p["type"] == "prediction");
  CHECK(p["y"] == 1);

  auto b = json::parse(handle_request(h, R"({"type":"predict_batch","X":[[0.7,0.1],[0.2,0.9]]})"));
  CHECK(b["y"] == json::array({1, 0}));

  for (const char* bad : {"not json", R"({"type":"predict","x":[1]})", R"({"type":"predict","x":["a","b"]})",
                          R"({"type":"dance"})", R"([1,2])", R"({"type":"predict_batch"})"}) {
    CAPTURE(bad);
    const auto r = json::parse(handle_request(h, bad));
    CHECK(r["type"] == "error");
    CHECK(r["message"].is_string());
  }

  fixtures::Linear lin(Vec::Constant(1, 2.0));
  auto reg = json::parse(handle_request(lin, R"({"type":"predict","x":[0.25]})"));
  CHECK(reg["y"].get<double>() == 0.5);
  CHECK(json::parse(handle_request(lin, R"({"type":"info"})"))["task"] == "regression");
}

TEST_CASE("serve_stream answers line by line") {
  fixtures::Threshold h(1, 0, 0.5);
  std::istringstream in("{\"type\":\"predict\",\"x\":[0.9]}\n\n{\"type\":\"predict\",\"x\":[0.1]}\n");
  std::ostringstream out;
  serve_stream(h, in, out);
  std::istringstream lines(out.str());
  std::string a, b;
  std::getline(lines, a);
  std::getline(lines, b);
  CHECK(json::parse(a)["y"] == 1);
  CHECK(json::parse(b)["y"] == 0);
}

TEST_CASE("remote predictor over tcp agrees with the in-process model") {
  auto model = small_model();
  TcpServer server(*model);
  auto remote = connect_external("tcp://127.0.0.1:" + std::to_string(server.port));
  CHECK(remote->task() == Task::Classification);
  CHECK(remote->n_features() == 4);
  CHECK(remote->n_classes() == 2);

  Rng rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  Mat X(10000, 4);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = u(rng);
  const auto remote_y = remote->predict_batch(X);
  const auto local_y = model->predict_batch(X);
  CHECK(remote_y == local_y);
  for (Eigen::Index i = 0; i < 50; ++i) CHECK(remote->predict(X.row(i).transpose()) == local_y[static_cast<std::size_t>(i)]);
  CHECK_THROWS_AS(remote->predict(Vec::Zero(3)), ConfigError);
}

TEST_CASE("remote predictor over a spawned process") {
  fixtures::TempDir dir;
  auto model = small_model(dir / "m.bin");
  auto remote = connect_external(std::string("exec:") + RELAX_CLI_PATH + " serve " + (dir / "m.bin").string());
  Rng rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  Mat X(500, 4);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = u(rng);
  CHECK(remote->predict_batch(X) == model->predict_batch(X));
}

TEST_CASE("transport failures") {
  // grab a free port, then close it
  std::uint16_t port = 0;
  {
    fixtures::Threshold h;
    TcpServer s(h);
    port = s.port;
  }
  CHECK_THROWS_AS(connect_external("tcp://127.0.0.1:" + std::to_string(port), std::chrono::seconds(1)),
                  TransportError);
  CHECK_THROWS_AS(connect_external("exec:/bin/false", std::chrono::seconds(1)), TransportError);
  CHECK_THROWS_AS(connect_external("exec:/bin/cat", std::chrono::milliseconds(500)), TransportError);
  CHECK_THROWS_AS(connect_external("udp://x"), ConfigError);
  CHECK_THROWS_AS(connect_external("tcp://localhost:99999"), ConfigError);
}

TEST_CASE("check_compatible") {
  fixtures::Threshold h(3);
  CHECK_NOTHROW(check_compatible(h, fixtures::numeric_schema(3)));
  CHECK_THROWS_WITH_AS(check_compatible(h, fixtures::numeric_schema(4)), doctest::Contains("schema mismatch"),
                       ConfigError);
  CHECK_THROWS_AS(check_compatible(h, fixtures::numeric_schema(3, Task::Regression)), ConfigError);
}

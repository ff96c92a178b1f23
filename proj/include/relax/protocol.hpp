#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "relax/predictor.hpp"

namespace relax {

// Newline-delimited JSON request/reply protocol for external predictors:
//
//   -> {"type":"info"}
//   <- {"type":"info","task":"classification","n_features":8,"n_classes":2}
//   -> {"type":"predict","x":[...]}            <- {"type":"prediction","y":1}
//   -> {"type":"predict_batch","X":[[...],...]} <- {"type":"prediction_batch","y":[...]}
//   <- {"type":"error","message":"..."}         on any failure
//
// Unknown fields are ignored; an unknown type gets an error reply.

/// Answers one request line on behalf of `model`. Never throws.
std::string handle_request(Predictor& model, std::string_view line);

/// Request/reply loop until EOF on `in`.
void serve_stream(Predictor& model, std::istream& in, std::ostream& out);

/// Listens on 127.0.0.1:`port` (0 picks a free port, reported through
/// `on_listening`) and serves connections one at a time until `stop` is set.
void serve_tcp(Predictor& model, std::uint16_t port, const std::atomic<bool>& stop,
               const std::function<void(std::uint16_t)>& on_listening = {});

/// Bidirectional line transport.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void send_line(const std::string& line) = 0;
  /// Throws TransportError on timeout or EOF.
  virtual std::string recv_line(std::chrono::milliseconds timeout) = 0;
};

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                         std::chrono::milliseconds timeout);
/// Spawns `argv` and talks to it over its stdin/stdout.
std::unique_ptr<LineChannel> spawn_process(const std::vector<std::string>& argv);

/// Predictor living behind the protocol. One request in flight at a time; a
/// handle must not be shared between concurrent callers.
class RemotePredictor final : public Predictor {
 public:
  RemotePredictor(std::unique_ptr<LineChannel> channel, std::chrono::milliseconds timeout);

  Task task() const override { return task_; }
  int n_features() const override { return n_features_; }
  int n_classes() const override { return n_classes_; }
  double predict(const Vec& x) override;
  std::vector<double> predict_batch(const Mat& X) override;

 private:
  nlohmann::json call(const nlohmann::json& request);

  std::unique_ptr<LineChannel> channel_;
  std::chrono::milliseconds timeout_;
  Task task_ = Task::Classification;
  int n_features_ = 0;
  int n_classes_ = 0;
};

/// Endpoint forms: "tcp://host:port" or "exec:<command line>" (split on spaces).
std::shared_ptr<RemotePredictor> connect_external(
    const std::string& endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(5));

/// ConfigError when the predictor's handshake disagrees with the schema.
void check_compatible(const Predictor& predictor, const FeatureSchema& schema);

}  // namespace relax

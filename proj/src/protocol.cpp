#include "relax/protocol.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

namespace relax {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

json error_reply(const std::string& message) { return {{"type", "error"}, {"message", message}}; }

json prediction_value(const Predictor& model, double y) {
  if (model.task() == Task::Classification) return static_cast<long long>(y);
  return y;
}

Vec to_vec(const json& arr, int n) {
  if (!arr.is_array()) throw std::invalid_argument("expected an array of numbers");
  if (static_cast<int>(arr.size()) != n)
    throw std::invalid_argument("expected " + std::to_string(n) + " features, got " +
                                std::to_string(arr.size()));
  Vec x(n);
  for (int i = 0; i < n; ++i) {
    if (!arr[static_cast<std::size_t>(i)].is_number()) throw std::invalid_argument("non-numeric feature value");
    x(i) = arr[static_cast<std::size_t>(i)].get<double>();
  }
  return x;
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

// Buffered line reader over a file descriptor with a deadline.
class FdLineReader {
 public:
  explicit FdLineReader(int fd) : fd_(fd) {}

  std::string read_line(std::chrono::milliseconds timeout) {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      const auto pos = buffer_.find('\n');
      if (pos != std::string::npos) {
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      if (left.count() <= 0) throw TransportError("timed out waiting for a reply");
      pollfd p{fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(left.count()));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw TransportError(errno_text("poll"));
      }
      if (rc == 0) throw TransportError("timed out waiting for a reply");
      char chunk[4096];
      const ssize_t n = ::read(fd_, chunk, sizeof(chunk));
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw TransportError(errno_text("read"));
      }
      if (n == 0) throw TransportError("remote predictor closed the connection");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

void write_all(int fd, const std::string& data, bool socket) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = socket ? ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                             : ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_text("write to remote predictor"));
    }
    off += static_cast<std::size_t>(n);
  }
}

class TcpChannel final : public LineChannel {
 public:
  explicit TcpChannel(int fd) : fd_(fd), reader_(fd) {}
  ~TcpChannel() override { ::close(fd_); }

  void send_line(const std::string& line) override { write_all(fd_, line + "\n", true); }
  std::string recv_line(std::chrono::milliseconds timeout) override { return reader_.read_line(timeout); }

 private:
  int fd_;
  FdLineReader reader_;
};

class ProcessChannel final : public LineChannel {
 public:
  ProcessChannel(pid_t pid, int to_child, int from_child)
      : pid_(pid), to_child_(to_child), from_child_(from_child), reader_(from_child) {}

  ~ProcessChannel() override {
    ::close(to_child_);
    ::close(from_child_);
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) != 0) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    ::kill(pid_, SIGTERM);
    ::waitpid(pid_, nullptr, 0);
  }

  void send_line(const std::string& line) override { write_all(to_child_, line + "\n", false); }
  std::string recv_line(std::chrono::milliseconds timeout) override { return reader_.read_line(timeout); }

 private:
  pid_t pid_;
  int to_child_;
  int from_child_;
  FdLineReader reader_;
};

void serve_connection(Predictor& model, int fd, const std::atomic<bool>& stop) {
  FdLineReader reader(fd);
  while (!stop.load()) {
    std::string line;
    try {
      line = reader.read_line(std::chrono::milliseconds(200));
    } catch (const TransportError& e) {
      if (std::string(e.what()).find("timed out") != std::string::npos) continue;
      return;  // peer closed
    }
    try {
      write_all(fd, handle_request(model, line) + "\n", true);
    } catch (const TransportError&) {
      return;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Server side

std::string handle_request(Predictor& model, std::string_view line) {
  json reply;
  try {
    const json req = json::parse(line);
    if (!req.is_object() || !req.contains("type") || !req["type"].is_string())
      return error_reply("request must be an object with a string 'type'").dump();
    const auto type = req["type"].get<std::string>();
    if (type == "info") {
      reply = {{"type", "info"}, {"task", to_string(model.task())}, {"n_features", model.n_features()}};
      if (model.task() == Task::Classification) reply["n_classes"] = model.n_classes();
    } else if (type == "predict") {
      if (!req.contains("x")) return error_reply("predict: missing 'x'").dump();
      const Vec x = to_vec(req["x"], model.n_features());
      reply = {{"type", "prediction"}, {"y", prediction_value(model, model.predict(x))}};
    } else if (type == "predict_batch") {
      if (!req.contains("X") || !req["X"].is_array()) return error_reply("predict_batch: missing 'X'").dump();
      const auto& rows = req["X"];
      Mat X(static_cast<Eigen::Index>(rows.size()), model.n_features());
      for (std::size_t i = 0; i < rows.size(); ++i)
        X.row(static_cast<Eigen::Index>(i)) = to_vec(rows[i], model.n_features()).transpose();
      json ys = json::array();
      for (double y : model.predict_batch(X)) ys.push_back(prediction_value(model, y));
      reply = {{"type", "prediction_batch"}, {"y", ys}};
    } else {
      return error_reply("unknown request type '" + type + "'").dump();
    }
  } catch (const std::exception& e) {
    return error_reply(e.what()).dump();
  }
  return reply.dump();
}

void serve_stream(Predictor& model, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out << handle_request(model, line) << '\n' << std::flush;
  }
}

void serve_tcp(Predictor& model, std::uint16_t port, const std::atomic<bool>& stop,
               const std::function<void(std::uint16_t)>& on_listening) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError(errno_text("socket"));
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 || ::listen(fd, 8) < 0) {
    const auto msg = errno_text("bind/listen");
    ::close(fd);
    throw TransportError(msg);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  if (on_listening) on_listening(ntohs(addr.sin_port));
  while (!stop.load()) {
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, 100);
    if (rc <= 0) continue;
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) continue;
    ::setsockopt(conn, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    serve_connection(model, conn, stop);
    ::close(conn);
  }
  ::close(fd);
}

// ---------------------------------------------------------------------------
// Client side

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                         std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw TransportError("cannot resolve host '" + host + "'");
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw TransportError(errno_text("socket"));
  }
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc < 0 && errno != EINPROGRESS) {
    const auto msg = errno_text("connect");
    ::close(fd);
    throw TransportError(msg);
  }
  if (rc < 0) {
    pollfd p{fd, POLLOUT, 0};
    rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (rc <= 0 || err != 0) {
      ::close(fd);
      throw TransportError("cannot connect to " + host + ":" + std::to_string(port) +
                           (rc == 0 ? " (timeout)" : std::string(": ") + std::strerror(err)));
    }
  }
  ::fcntl(fd, F_SETFL, flags);
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<TcpChannel>(fd);
}

std::unique_ptr<LineChannel> spawn_process(const std::vector<std::string>& argv) {
  if (argv.empty()) throw ConfigError("empty predictor command");
  // Writes to a dead child must surface as EPIPE, not kill this process.
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) < 0) throw TransportError(errno_text("pipe"));
  if (::pipe(out_pipe) < 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw TransportError(errno_text("pipe"));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw TransportError(errno_text("fork"));
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::fcntl(in_pipe[1], F_SETFD, FD_CLOEXEC);
  ::fcntl(out_pipe[0], F_SETFD, FD_CLOEXEC);
  return std::make_unique<ProcessChannel>(pid, in_pipe[1], out_pipe[0]);
}

RemotePredictor::RemotePredictor(std::unique_ptr<LineChannel> channel, std::chrono::milliseconds timeout)
    : channel_(std::move(channel)), timeout_(timeout) {
  const json info = call({{"type", "info"}});
  try {
    if (info.at("type") != "info") throw TransportError("handshake: expected an info reply");
    const auto task = info.at("task").get<std::string>();
    n_features_ = info.at("n_features").get<int>();
    if (task == "classification") {
      task_ = Task::Classification;
      n_classes_ = info.at("n_classes").get<int>();
      if (n_classes_ < 2) throw TransportError("handshake: n_classes must be >= 2");
    } else if (task == "regression") {
      task_ = Task::Regression;
      n_classes_ = 0;
    } else {
      throw TransportError("handshake: unknown task '" + task + "'");
    }
    if (n_features_ <= 0) throw TransportError("handshake: n_features must be positive");
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed handshake reply: ") + e.what());
  }
}

json RemotePredictor::call(const json& request) {
  channel_->send_line(request.dump());
  const std::string line = channel_->recv_line(timeout_);
  json reply;
  try {
    reply = json::parse(line);
  } catch (const json::exception&) {
    throw TransportError("malformed reply from remote predictor: '" + line.substr(0, 200) + "'");
  }
  if (!reply.is_object() || !reply.contains("type")) throw TransportError("reply without a type");
  if (reply["type"] == "error")
    throw TransportError("remote predictor error: " + reply.value("message", std::string("?")));
  return reply;
}

double RemotePredictor::predict(const Vec& x) {
  if (x.size() != n_features_) throw ConfigError("predict: feature count mismatch");
  const json reply = call({{"type", "predict"}, {"x", std::vector<double>(x.data(), x.data() + x.size())}});
  if (reply["type"] != "prediction" || !reply.contains("y") || !reply["y"].is_number())
    throw TransportError("malformed prediction reply");
  return reply["y"].get<double>();
}

std::vector<double> RemotePredictor::predict_batch(const Mat& X) {
  if (X.cols() != n_features_) throw ConfigError("predict_batch: feature count mismatch");
  json rows = json::array();
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const Vec r = X.row(i).transpose();
    rows.push_back(std::vector<double>(r.data(), r.data() + r.size()));
  }
  const json reply = call({{"type", "predict_batch"}, {"X", rows}});
  if (reply["type"] != "prediction_batch" || !reply.contains("y") || !reply["y"].is_array() ||
      reply["y"].size() != static_cast<std::size_t>(X.rows()))
    throw TransportError("malformed batch prediction reply");
  std::vector<double> out;
  for (const auto& y : reply["y"]) {
    if (!y.is_number()) throw TransportError("malformed batch prediction reply");
    out.push_back(y.get<double>());
  }
  return out;
}

std::shared_ptr<RemotePredictor> connect_external(const std::string& endpoint,
                                                  std::chrono::milliseconds timeout) {
  if (endpoint.rfind("tcp://", 0) == 0) {
    const std::string rest = endpoint.substr(6);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) throw ConfigError("tcp endpoint needs host:port");
    int port = 0;
    try {
      port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad port in endpoint '" + endpoint + "'");
    }
    if (port <= 0 || port > 65535) throw ConfigError("bad port in endpoint '" + endpoint + "'");
    return std::make_shared<RemotePredictor>(
        connect_tcp(rest.substr(0, colon), static_cast<std::uint16_t>(port), timeout), timeout);
  }
  if (endpoint.rfind("exec:", 0) == 0) {
    std::istringstream words(endpoint.substr(5));
    std::vector<std::string> argv;
    for (std::string w; words >> w;) argv.push_back(w);
    return std::make_shared<RemotePredictor>(spawn_process(argv), timeout);
  }
  throw ConfigError("unknown endpoint '" + endpoint + "' (use tcp://host:port or exec:command)");
}

void check_compatible(const Predictor& predictor, const FeatureSchema& schema) {
  if (predictor.n_features() != static_cast<int>(schema.size()))
    throw ConfigError("schema mismatch: predictor expects " + std::to_string(predictor.n_features()) +
                      " features, dataset has " + std::to_string(schema.size()));
  if (predictor.task() != schema.target.task)
    throw ConfigError(std::string("schema mismatch: predictor task is ") + to_string(predictor.task()));
  if (predictor.task() == Task::Classification && predictor.n_classes() != schema.target.n_classes)
    throw ConfigError("schema mismatch: predictor has " + std::to_string(predictor.n_classes()) +
                      " classes, schema declares " + std::to_string(schema.target.n_classes));
}

}  // namespace relax

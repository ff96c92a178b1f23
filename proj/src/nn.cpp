#include "relax/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace relax {

namespace {

constexpr char kMagic[6] = {'R', 'L', 'X', 'N', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

void activate(Activation a, Mat& z) {
  switch (a) {
    case Activation::Identity:
      break;
    case Activation::Relu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::Sigmoid:
      z = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      break;
    case Activation::Tanh:
      z = z.array().tanh().matrix();
      break;
    case Activation::Softmax:
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const double m = z.col(c).maxCoeff();
        z.col(c) = (z.col(c).array() - m).exp().matrix();
        z.col(c) /= z.col(c).sum();
      }
      break;
  }
}

// Converts d/d(activated) into d/d(pre-activation) given both values.
Mat activation_backward(Activation a, const Mat& pre, const Mat& post, const Mat& grad) {
  switch (a) {
    case Activation::Identity:
      return grad;
    case Activation::Relu:
      return grad.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    case Activation::Sigmoid:
      return grad.cwiseProduct(post.cwiseProduct((1.0 - post.array()).matrix()));
    case Activation::Tanh:
      return grad.cwiseProduct((1.0 - post.array().square()).matrix());
    case Activation::Softmax: {
      Mat out(grad.rows(), grad.cols());
      for (Eigen::Index c = 0; c < grad.cols(); ++c) {
        const double dot = post.col(c).dot(grad.col(c));
        out.col(c) = post.col(c).cwiseProduct((grad.col(c).array() - dot).matrix());
      }
      return out;
    }
  }
  return grad;
}

}  // namespace

const char* to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Gradients

Gradients& Gradients::operator+=(const Gradients& other) {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] += other.weight[l];
    bias[l] += other.bias[l];
  }
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] *= s;
    bias[l] *= s;
  }
  input *= s;
  return *this;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < weight.size(); ++l) s += weight[l].squaredNorm() + bias[l].squaredNorm();
  return s;
}

bool Gradients::all_finite() const {
  for (std::size_t l = 0; l < weight.size(); ++l)
    if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// DenseNet

DenseNet::DenseNet(std::vector<int> sizes, Activation output, std::uint64_t seed, Activation hidden)
    : sizes_(std::move(sizes)), hidden_(hidden), output_(output) {
  if (sizes_.size() < 2) throw ConfigError("DenseNet needs at least an input and an output layer");
  for (int s : sizes_)
    if (s <= 0) throw ConfigError("DenseNet layer sizes must be positive");
  if (hidden_ == Activation::Softmax) throw ConfigError("softmax is only valid as output activation");
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const int in = sizes_[l];
    const int out = sizes_[l + 1];
    const double limit = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-limit, limit);
    Mat w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = u(rng);
    weights_.push_back(std::move(w));
    biases_.push_back(Vec::Zero(out));
  }
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l)
    n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
  return n;
}

Vec DenseNet::forward(const Vec& x) const {
  Mat X = x;
  return forward(X).col(0);
}

Mat DenseNet::forward(const Mat& X) const {
  if (X.rows() != input_size())
    throw ConfigError("DenseNet::forward: expected input size " + std::to_string(input_size()) +
                      ", got " + std::to_string(X.rows()));
  if (!X.allFinite()) throw NumericError("DenseNet::forward: non-finite input");
  Mat a = X;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Mat z = weights_[l] * a;
    z.colwise() += biases_[l];
    activate(l + 1 == weights_.size() ? output_ : hidden_, z);
    a = std::move(z);
  }
  return a;
}

Mat DenseNet::forward(const Mat& X, Tape& tape) const {
  if (X.rows() != input_size())
    throw ConfigError("DenseNet::forward: expected input size " + std::to_string(input_size()) +
                      ", got " + std::to_string(X.rows()));
  if (!X.allFinite()) throw NumericError("DenseNet::forward: non-finite input");
  tape.inputs.assign(weights_.size(), Mat());
  tape.pre.assign(weights_.size(), Mat());
  Mat a = X;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    tape.inputs[l] = a;
    Mat z = weights_[l] * a;
    z.colwise() += biases_[l];
    tape.pre[l] = z;
    activate(l + 1 == weights_.size() ? output_ : hidden_, z);
    a = std::move(z);
  }
  tape.output = a;
  return a;
}

Gradients DenseNet::backward(const Tape& tape, const Mat& output_grad, Want want) const {
  if (tape.inputs.size() != weights_.size())
    throw ConfigError("DenseNet::backward: tape does not match network");
  if (output_grad.rows() != output_size() || output_grad.cols() != tape.output.cols())
    throw ConfigError("DenseNet::backward: output gradient shape mismatch");
  Gradients g;
  const bool params = want != Want::Input;
  if (params) {
    g.weight.resize(weights_.size());
    g.bias.resize(weights_.size());
  }
  Mat delta = output_grad;
  const Mat* post = &tape.output;
  for (std::size_t li = weights_.size(); li-- > 0;) {
    const Activation act = li + 1 == weights_.size() ? output_ : hidden_;
    delta = activation_backward(act, tape.pre[li], *post, delta);
    if (params) {
      g.weight[li].noalias() = delta * tape.inputs[li].transpose();
      g.bias[li] = delta.rowwise().sum();
    }
    if (li == 0 && want == Want::Params) break;
    delta = weights_[li].transpose() * delta;
    post = &tape.inputs[li];
  }
  if (want != Want::Params) g.input = std::move(delta);
  return g;
}

Gradients DenseNet::zero_gradients() const {
  Gradients g;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    g.weight.push_back(Mat::Zero(weights_[l].rows(), weights_[l].cols()));
    g.bias.push_back(Vec::Zero(biases_[l].size()));
  }
  g.input = Mat::Zero(input_size(), 1);
  return g;
}

Vec DenseNet::flat_parameters() const {
  Vec out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
      for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) out(k++) = weights_[l](r, c);
    for (Eigen::Index r = 0; r < biases_[l].size(); ++r) out(k++) = biases_[l](r);
  }
  return out;
}

void DenseNet::set_flat_parameters(const Vec& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
    throw ConfigError("set_flat_parameters: size mismatch");
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
      for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) weights_[l](r, c) = flat(k++);
    for (Eigen::Index r = 0; r < biases_[l].size(); ++r) biases_[l](r) = flat(k++);
  }
}

Vec DenseNet::flatten(const Gradients& g) {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) n += g.weight[l].size() + g.bias[l].size();
  Vec out(n);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    for (Eigen::Index r = 0; r < g.weight[l].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weight[l].cols(); ++c) out(k++) = g.weight[l](r, c);
    for (Eigen::Index r = 0; r < g.bias[l].size(); ++r) out(k++) = g.bias[l](r);
  }
  return out;
}

bool DenseNet::all_finite() const {
  for (std::size_t l = 0; l < weights_.size(); ++l)
    if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
  return true;
}

bool operator==(const DenseNet& a, const DenseNet& b) {
  if (a.sizes_ != b.sizes_ || a.hidden_ != b.hidden_ || a.output_ != b.output_) return false;
  for (std::size_t l = 0; l < a.weights_.size(); ++l) {
    const auto& wa = a.weights_[l];
    const auto& wb = b.weights_[l];
    if (std::memcmp(wa.data(), wb.data(), sizeof(double) * static_cast<std::size_t>(wa.size())) != 0)
      return false;
    if (std::memcmp(a.biases_[l].data(), b.biases_[l].data(),
                    sizeof(double) * static_cast<std::size_t>(a.biases_[l].size())) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(const OptimizerConfig& config, const DenseNet& net) : config_(config) {
  if (!(config.learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    m_w_.push_back(Mat::Zero(net.weight(l).rows(), net.weight(l).cols()));
    v_w_.push_back(Mat::Zero(net.weight(l).rows(), net.weight(l).cols()));
    m_b_.push_back(Vec::Zero(net.bias(l).size()));
    v_b_.push_back(Vec::Zero(net.bias(l).size()));
  }
}

void Optimizer::set_learning_rate(double lr) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  config_.learning_rate = lr;
}

void Optimizer::step(DenseNet& net, const Gradients& grads) {
  if (grads.weight.size() != net.layer_count()) throw ConfigError("Optimizer::step: layer mismatch");
  for (std::size_t l = 0; l < grads.weight.size(); ++l) {
    if (grads.weight[l].rows() != net.weight(l).rows() || grads.weight[l].cols() != net.weight(l).cols())
      throw ConfigError("Optimizer::step: shape mismatch at layer " + std::to_string(l));
    if (!grads.weight[l].allFinite() || !grads.bias[l].allFinite())
      throw NumericError("non-finite gradient at layer " + std::to_string(l) + " of a " +
                         std::to_string(net.layer_count()) + "-layer network");
  }
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  const double lr = config_.learning_rate;
  ++t_;
  if (config_.kind == OptimizerKind::Sgd) {
    for (std::size_t l = 0; l < grads.weight.size(); ++l) {
      net.weight(l) -= (lr * scale) * grads.weight[l];
      net.bias(l) -= (lr * scale) * grads.bias[l];
    }
  } else {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
      m = b1 * m + (1.0 - b1) * scale * g;
      v = b2 * v + (1.0 - b2) * (scale * g).cwiseAbs2();
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
    };
    for (std::size_t l = 0; l < grads.weight.size(); ++l) {
      update(net.weight(l), m_w_[l], v_w_[l], grads.weight[l]);
      update(net.bias(l), m_b_[l], v_b_[l], grads.bias[l]);
    }
  }
  if (!net.all_finite()) throw NumericError("parameters became non-finite after an update");
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport check_gradient(const std::function<double(const Vec&)>& f, const Vec& params,
                               const Vec& analytic, double h, double tolerance, double floor) {
  if (analytic.size() != params.size()) throw ConfigError("check_gradient: size mismatch");
  GradCheckReport r;
  Vec p = params;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + h;
    const double fp = f(p);
    p(i) = orig - h;
    const double fm = f(p);
    p(i) = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic(i)), floor});
    const double rel = std::abs(numeric - analytic(i)) / denom;
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_index = static_cast<std::size_t>(i);
    }
    ++r.checked;
  }
  r.passed = r.max_relative_error <= tolerance;
  return r;
}

GradCheckReport finite_diff_check(const DenseNet& net, const std::function<double(const Mat&)>& loss,
                                  const std::function<Mat(const Mat&)>& loss_grad, const Mat& X,
                                  double h, double tolerance) {
  Tape tape;
  const Mat out = net.forward(X, tape);
  const Vec analytic = DenseNet::flatten(net.backward(tape, loss_grad(out)));
  DenseNet probe = net;
  auto f = [&](const Vec& flat) {
    probe.set_flat_parameters(flat);
    return loss(probe.forward(X));
  };
  return check_gradient(f, net.flat_parameters(), analytic, h, tolerance);
}

// ---------------------------------------------------------------------------
// Serialization

namespace io {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ParseError("unexpected end of file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace io

void write_params(std::ostream& out, const DenseNet& net) {
  out.write(kMagic, sizeof(kMagic));
  io::write_u32(out, kVersion);
  io::write_u32(out, static_cast<std::uint32_t>(net.hidden_activation()));
  io::write_u32(out, static_cast<std::uint32_t>(net.output_activation()));
  io::write_u32(out, static_cast<std::uint32_t>(net.sizes().size()));
  for (int s : net.sizes()) io::write_u32(out, static_cast<std::uint32_t>(s));
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const Mat& w = net.weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) io::write_f64(out, w(r, c));
    for (Eigen::Index r = 0; r < net.bias(l).size(); ++r) io::write_f64(out, net.bias(l)(r));
  }
  if (!out) throw Error("failed writing network parameters");
}

DenseNet read_params(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a network parameter file (bad magic)");
  const auto version = io::read_u32(in);
  if (version != kVersion)
    throw ParseError("unsupported parameter file version " + std::to_string(version));
  const auto hidden = io::read_u32(in);
  const auto output = io::read_u32(in);
  const auto n = io::read_u32(in);
  if (hidden > 4 || output > 4 || n < 2 || n > 64) throw ParseError("corrupt parameter file header");
  std::vector<int> sizes;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto s = io::read_u32(in);
    if (s == 0 || s > (1u << 20)) throw ParseError("corrupt layer size in parameter file");
    sizes.push_back(static_cast<int>(s));
  }
  DenseNet net(sizes, static_cast<Activation>(output), 0, static_cast<Activation>(hidden));
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    Mat& w = net.weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = io::read_f64(in);
    for (Eigen::Index r = 0; r < net.bias(l).size(); ++r) net.bias(l)(r) = io::read_f64(in);
  }
  return net;
}

void save_params(const DenseNet& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_params(out, net);
}

DenseNet load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return read_params(in);
}

void retain_heap() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace relax

#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include "relax/common.hpp"

namespace relax {

enum class Activation { Identity, Relu, Sigmoid, Tanh, Softmax };

const char* to_string(Activation a);

/// Cached per-layer values from a forward pass; columns are batch samples.
struct Tape {
  std::vector<Mat> inputs;  // inputs[l] feeds layer l; inputs[0] is the network input
  std::vector<Mat> pre;     // pre-activation of layer l
  Mat output;
};

struct Gradients {
  std::vector<Mat> weight;
  std::vector<Vec> bias;
  Mat input;  // d loss / d input, one column per sample

  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
  double squared_norm() const;
  bool all_finite() const;
};

/// Dense feed-forward network. Layer l maps sizes[l] -> sizes[l+1] with
/// weight (out x in) and bias; hidden layers share one activation.
class DenseNet {
 public:
  DenseNet() = default;
  DenseNet(std::vector<int> sizes, Activation output, std::uint64_t seed,
           Activation hidden = Activation::Relu);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  std::size_t layer_count() const { return weights_.size(); }
  Activation hidden_activation() const { return hidden_; }
  Activation output_activation() const { return output_; }
  std::size_t parameter_count() const;

  Mat& weight(std::size_t l) { return weights_[l]; }
  const Mat& weight(std::size_t l) const { return weights_[l]; }
  Vec& bias(std::size_t l) { return biases_[l]; }
  const Vec& bias(std::size_t l) const { return biases_[l]; }

  Vec forward(const Vec& x) const;
  /// Batched forward; X is input_size x batch.
  Mat forward(const Mat& X) const;
  Mat forward(const Mat& X, Tape& tape) const;

  /// Which gradients backward() fills; skipping the unused half saves a
  /// matrix product per layer.
  enum class Want { All, Params, Input };

  /// Backpropagates d loss / d output (output_size x batch). Parameter
  /// gradients are summed over the batch.
  Gradients backward(const Tape& tape, const Mat& output_grad, Want want = Want::All) const;

  Gradients zero_gradients() const;

  /// Flat views in layer order (weights row-major, then bias).
  Vec flat_parameters() const;
  void set_flat_parameters(const Vec& flat);
  static Vec flatten(const Gradients& g);

  bool all_finite() const;

  friend bool operator==(const DenseNet& a, const DenseNet& b);

 private:
  std::vector<int> sizes_;
  Activation hidden_ = Activation::Relu;
  Activation output_ = Activation::Identity;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
};

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

/// Optimizer state bound to one network's shapes.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& config, const DenseNet& net);

  /// Applies one update. Throws NumericError (with the offending layer) on
  /// non-finite gradients, leaving the network untouched.
  void step(DenseNet& net, const Gradients& grads);

  const OptimizerConfig& config() const { return config_; }
  void set_learning_rate(double lr);
  long steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<Mat> m_w_, v_w_;
  std::vector<Vec> m_b_, v_b_;
  long t_ = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Central-difference check of `analytic` against f at `params`. Relative error
/// is |a - n| / max(|a|, |n|, floor), the floor absorbing round-off on
/// near-zero components.
GradCheckReport check_gradient(const std::function<double(const Vec&)>& f, const Vec& params,
                               const Vec& analytic, double h = 1e-5, double tolerance = 1e-4,
                               double floor = 1e-4);

/// Checks DenseNet::backward for `loss(output)` with gradient `loss_grad(output)`
/// on input batch X, over every parameter.
GradCheckReport finite_diff_check(const DenseNet& net, const std::function<double(const Mat&)>& loss,
                                  const std::function<Mat(const Mat&)>& loss_grad, const Mat& X,
                                  double h = 1e-5, double tolerance = 1e-4);

// Parameter file: "RLXNET" magic, format version, activations, layer sizes,
// then row-major little-endian float64 weights and biases per layer.
void write_params(std::ostream& out, const DenseNet& net);
DenseNet read_params(std::istream& in);
void save_params(const DenseNet& net, const std::filesystem::path& path);
DenseNet load_params(const std::filesystem::path& path);

// Little-endian scalar IO shared by the binary file formats.
namespace io {
void write_u32(std::ostream& out, std::uint32_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
double read_f64(std::istream& in);
}  // namespace io

/// Keeps freed batch buffers in the process heap (glibc) instead of handing
/// them back to the OS after every update; for long-running executables.
void retain_heap();

}  // namespace relax

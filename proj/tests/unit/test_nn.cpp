#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "relax/nn.hpp"

using namespace relax;

namespace {

Mat random_batch(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat X(rows, cols);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = g(rng);
  return X;
}

// Loss with a nonzero Hessian so output-gradient bugs show up.
double cubic(const Mat& Y) { return (Y.array().square() + 0.3 * Y.array().cube()).sum(); }
Mat cubic_grad(const Mat& Y) { return (2.0 * Y.array() + 0.9 * Y.array().square()).matrix(); }

}  // namespace

TEST_CASE("init is fan-in scaled, zero-bias and seed-deterministic") {
  DenseNet a({5, 7, 3}, Activation::Identity, 42);
  DenseNet b({5, 7, 3}, Activation::Identity, 42);
  DenseNet c({5, 7, 3}, Activation::Identity, 43);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.bias(0).isZero());
  CHECK(a.weight(0).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
  CHECK(a.weight(1).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(7.0));
  CHECK(DenseNet({60, 256, 256, 1}, Activation::Identity, 1).parameter_count() == 81665);
  CHECK_THROWS_AS(DenseNet({3, 0, 1}, Activation::Identity, 1), ConfigError);
  CHECK_THROWS_AS(DenseNet({3}, Activation::Identity, 1), ConfigError);
}

TEST_CASE("forward on known weights") {
  DenseNet net({2, 1}, Activation::Identity, 1);
  net.weight(0) << 2.0, -3.0;
  net.bias(0) << 0.5;
  Vec x(2);
  x << 1.5, 4.0;
  CHECK(net.forward(x)(0) == doctest::Approx(2.0 * 1.5 - 3.0 * 4.0 + 0.5));

  DenseNet zero({3, 4, 2}, Activation::Identity, 1);
  for (std::size_t l = 0; l < zero.layer_count(); ++l) {
    zero.weight(l).setZero();
    zero.bias(l).setZero();
  }
  CHECK(zero.forward(Vec(Vec::Ones(3))).isZero());

  DenseNet sm({4, 6, 5}, Activation::Softmax, 3);
  const Mat P = sm.forward(Mat(random_batch(4, 20, 9) * 10.0));
  for (int c = 0; c < P.cols(); ++c) {
    CHECK(P.col(c).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(P.col(c).minCoeff() > 0.0);
  }
}

TEST_CASE("forward rejects bad input") {
  DenseNet net({3, 2}, Activation::Identity, 1);
  CHECK_THROWS(net.forward(Vec(Vec::Zero(2))));
  Vec bad = Vec::Zero(3);
  bad(1) = std::nan("");
  CHECK_THROWS(net.forward(bad));
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  DenseNet net({3, 5, 2}, Activation::Tanh, 4);
  Tape tape;
  net.forward(random_batch(3, 6, 1), tape);
  const auto g = net.backward(tape, Mat::Zero(2, 6));
  CHECK(g.squared_norm() == 0.0);
  CHECK(g.input.isZero());
}

TEST_CASE("backward: linear least squares closed form") {
  DenseNet net({3, 2}, Activation::Identity, 8);
  const Mat X = random_batch(3, 1, 2);
  const Mat t = random_batch(2, 1, 3);
  Tape tape;
  const Mat y = net.forward(X, tape);
  const auto g = net.backward(tape, 2.0 * (y - t));
  const Mat expect = 2.0 * (net.weight(0) * X + net.bias(0) - t) * X.transpose();
  CHECK((g.weight[0] - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("finite differences agree for every activation") {
  const std::vector<std::pair<Activation, Activation>> combos = {
      {Activation::Relu, Activation::Identity}, {Activation::Relu, Activation::Sigmoid},
      {Activation::Relu, Activation::Tanh},     {Activation::Relu, Activation::Softmax},
      {Activation::Tanh, Activation::Identity}, {Activation::Sigmoid, Activation::Softmax},
      {Activation::Identity, Activation::Tanh}};
  std::uint64_t seed = 100;
  for (auto [hidden, out] : combos) {
    CAPTURE(to_string(hidden));
    CAPTURE(to_string(out));
    DenseNet net({4, 6, 5, 3}, out, ++seed, hidden);
    const auto rep = finite_diff_check(net, cubic, cubic_grad, random_batch(4, 3, seed));
    CHECK(rep.passed);
    CHECK(rep.max_relative_error <= 1e-4);
    CHECK(rep.checked == net.parameter_count());
  }
}

TEST_CASE("optimizer arithmetic") {
  DenseNet net({1, 1}, Activation::Identity, 1);
  net.weight(0)(0, 0) = 1.0;
  Gradients g = net.zero_gradients();
  g.weight[0](0, 0) = 2.0;

  Optimizer sgd(OptimizerConfig{OptimizerKind::Sgd, 0.1}, net);
  sgd.step(net, g);
  CHECK(net.weight(0)(0, 0) == doctest::Approx(0.8));

  DenseNet frozen = net;
  Optimizer zero(OptimizerConfig{OptimizerKind::Adam, 0.0}, frozen);
  zero.step(frozen, g);
  CHECK(frozen == net);

  // bias-corrected Adam: first step has magnitude lr whatever the gradient scale
  for (double scale : {1e-3, 1.0, 1e3}) {
    DenseNet n2({1, 1}, Activation::Identity, 1);
    const double before = n2.weight(0)(0, 0);
    Gradients g2 = n2.zero_gradients();
    g2.weight[0](0, 0) = scale;
    Optimizer adam(OptimizerConfig{OptimizerKind::Adam, 0.01}, n2);
    adam.step(n2, g2);
    CHECK(before - n2.weight(0)(0, 0) == doctest::Approx(0.01).epsilon(1e-4));
  }
}

TEST_CASE("optimizer refuses non-finite gradients and leaves the net alone") {
  DenseNet net({2, 3, 1}, Activation::Identity, 1);
  const DenseNet before = net;
  Gradients g = net.zero_gradients();
  g.bias[1](0) = std::numeric_limits<double>::infinity();
  Optimizer opt(OptimizerConfig{}, net);
  CHECK_THROWS_WITH_AS(opt.step(net, g), doctest::Contains("layer 1"), NumericError);
  CHECK(net == before);
}

TEST_CASE("XOR is learnable") {
  DenseNet net({2, 8, 1}, Activation::Sigmoid, 7, Activation::Tanh);
  Mat X(2, 4);
  X << 0, 0, 1, 1, 0, 1, 0, 1;
  Mat t(1, 4);
  t << 0, 1, 1, 0;
  Optimizer opt(OptimizerConfig{OptimizerKind::Adam, 0.05}, net);
  double loss = 1.0;
  for (int i = 0; i < 5000 && loss >= 0.01; ++i) {
    Tape tape;
    const Mat y = net.forward(X, tape);
    loss = (y - t).squaredNorm() / 4.0;
    opt.step(net, net.backward(tape, (y - t) / 2.0));
  }
  CHECK(loss < 0.01);
}

TEST_CASE("parameter files round-trip bit-exactly") {
  fixtures::TempDir dir;
  DenseNet net({3, 4, 2}, Activation::Softmax, 5, Activation::Sigmoid);
  save_params(net, dir / "p.bin");
  const DenseNet back = load_params(dir / "p.bin");
  CHECK(back == net);
  CHECK(back.hidden_activation() == Activation::Sigmoid);
  const Mat X = random_batch(3, 5, 1);
  CHECK(back.forward(X) == net.forward(X));

  std::stringstream ss;
  write_params(ss, net);
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_params(cut), ParseError);
  bytes[0] = 'X';
  std::stringstream bad(bytes);
  CHECK_THROWS_AS(read_params(bad), ParseError);
  CHECK_THROWS_AS(load_params(dir / "missing.bin"), Error);
}

TEST_CASE("flat parameters round-trip") {
  DenseNet net({3, 4, 2}, Activation::Identity, 5);
  Vec p = net.flat_parameters();
  p *= 2.0;
  net.set_flat_parameters(p);
  CHECK(net.flat_parameters() == p);
}

#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <numeric>

#include "relax/replay.hpp"

using namespace relax;

namespace {

TransitionRecord rec(double reward, bool done = false) {
  TransitionRecord r;
  r.state = Vec::Constant(2, reward);
  r.params = Vec::Zero(1);
  r.next_state = Vec::Constant(2, reward + 1);
  r.reward = reward;
  r.done = done;
  return r;
}

// Pearson statistic against expected probabilities, compared with the 99% quantile.
bool chi2_passes(const std::vector<long>& counts, const std::vector<double>& probs) {
  const double n = std::accumulate(counts.begin(), counts.end(), 0.0);
  double stat = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    stat += (counts[i] - e) * (counts[i] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return stat < boost::math::quantile(dist, 0.99);
}

}  // namespace

TEST_CASE("sum tree keeps parent sums") {
  SumTree t(5);
  CHECK(t.capacity() == 8);
  t.set(0, 1.0);
  t.set(4, 2.5);
  t.set(2, 0.5);
  CHECK(t.total() == doctest::Approx(4.0));
  for (std::size_t i = 1; i < 8; ++i) CHECK(t.node(i) == doctest::Approx(t.node(2 * i) + t.node(2 * i + 1)));
  CHECK(t.find(0.0) == 0);
  CHECK(t.find(0.99) == 0);
  CHECK(t.find(1.2) == 2);
  CHECK(t.find(3.99) == 4);
  CHECK_THROWS_AS(t.set(8, 1.0), ContractViolation);
  CHECK_THROWS_AS(t.set(1, -1.0), NumericError);
}

TEST_CASE("push") {
  ReplayConfig c;
  c.capacity = 4;
  c.priority_exponent = 1.0;
  PrioritizedBuffer b(c);
  b.push(rec(0), 2.0);
  CHECK(b.size() == 1);
  CHECK(b.tree().total() == doctest::Approx(2.0));

  PrioritizedBuffer s(c);
  s.push(rec(1), 1.0);
  s.push(rec(2), 2.0);
  s.push(rec(3), 3.0);
  CHECK(s.tree().total() == doctest::Approx(6.0));

  for (int i = 0; i < 5; ++i) b.push(rec(i + 10));
  CHECK(b.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(b.at(i).reward != 10.0);

  // unspecified priority enters at the largest leaf seen
  PrioritizedBuffer m(c);
  m.push(rec(0), 5.0);
  m.push(rec(1));
  CHECK(m.tree().get(1) == doctest::Approx(5.0));
}

TEST_CASE("priority exponent applied at write time with a floor") {
  ReplayConfig c;
  c.capacity = 4;
  PrioritizedBuffer b(c);
  b.push(rec(0), 4.0);
  CHECK(b.tree().get(0) == doctest::Approx(std::pow(4.0, 0.6)));
  b.update_priorities({0}, {0.0});
  CHECK(b.tree().get(0) == doctest::Approx(std::pow(1e-3, 0.6)));
  CHECK(b.tree().get(0) > 0.0);
  b.update_priorities({0}, {-2.0});
  CHECK(b.tree().get(0) == doctest::Approx(std::pow(2.0 + 1e-3, 0.6)));
  CHECK_THROWS_AS(b.update_priorities({0}, {std::nan("")}), NumericError);
  CHECK_THROWS_AS(b.update_priorities({3}, {1.0}), ContractViolation);
}

TEST_CASE("fuzzed operations keep the root equal to a naive sum") {
  ReplayConfig c;
  c.capacity = 100;
  PrioritizedBuffer b(c);
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int op = 0; op < 3000; ++op) {
    if (b.size() < 64 || op % 3 == 0) {
      b.push(rec(op), u(rng));
    } else if (op % 3 == 1) {
      auto s = b.sample(16, rng, 0.5);
      std::vector<double> td(s.indices.size());
      for (auto& t : td) t = u(rng) - 2.5;
      b.update_priorities(s.indices, td);
    } else {
      b.sample(8, rng);
    }
    double naive = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) naive += b.tree().get(i);
    REQUIRE(std::abs(naive - b.tree().total()) <= 1e-9);
  }
}

TEST_CASE("sampling frequencies") {
  SUBCASE("uniform priorities") {
    ReplayConfig c;
    c.capacity = 10;
    PrioritizedBuffer b(c);
    for (int i = 0; i < 10; ++i) b.push(rec(i), 1.0);
    std::vector<long> counts(10, 0);
    Rng rng(3);
    for (int d = 0; d < 10000; ++d)
      for (auto i : b.sample(10, rng).indices) ++counts[i];
    CHECK(chi2_passes(counts, std::vector<double>(10, 0.1)));
    CHECK(b.sample(10, rng).weights.isOnes());
  }
  SUBCASE("priorities {9, 1} with exponent 1") {
    ReplayConfig c;
    c.capacity = 2;
    c.priority_exponent = 1.0;
    PrioritizedBuffer b(c);
    b.push(rec(0), 9.0);
    b.push(rec(1), 1.0);
    long first = 0;
    Rng rng(4);
    const int n = 100000;
    for (int d = 0; d < n; ++d) first += b.sample(1, rng).indices[0] == 0;
    CHECK(static_cast<double>(first) / n == doctest::Approx(0.9).epsilon(0.01 / 0.9));
  }
  SUBCASE("full-size stratified batch over equal priorities covers every record") {
    ReplayConfig c;
    c.capacity = 8;
    PrioritizedBuffer b(c);
    for (int i = 0; i < 8; ++i) b.push(rec(i), 1.0);
    Rng rng(5);
    auto s = b.sample(8, rng);
    std::sort(s.indices.begin(), s.indices.end());
    for (std::size_t i = 0; i < 8; ++i) CHECK(s.indices[i] == i);
  }
  SUBCASE("raising a leaf raises its frequency") {
    ReplayConfig c;
    c.capacity = 4;
    PrioritizedBuffer b(c);
    for (int i = 0; i < 4; ++i) b.push(rec(i), 1.0);
    Rng rng(6);
    auto freq = [&] {
      long k = 0;
      for (int d = 0; d < 20000; ++d) k += b.sample(1, rng).indices[0] == 2;
      return k;
    };
    const long before = freq();
    b.update_priorities({2}, {10.0});
    const double p = b.tree().get(2) / b.tree().total();
    const long after = freq();
    CHECK(after > before);
    CHECK(after / 20000.0 == doctest::Approx(p).epsilon(0.05));
  }
}

TEST_CASE("importance weights") {
  ReplayConfig c;
  c.capacity = 4;
  c.priority_exponent = 1.0;
  PrioritizedBuffer b(c);
  b.push(rec(0), 1.0);
  b.push(rec(1), 3.0);
  Rng rng(8);
  for (double beta : {0.4, 1.0}) {
    for (int t = 0; t < 50; ++t) {
      auto s = b.sample(2, rng, beta);
      std::vector<double> raw;
      for (auto i : s.indices) raw.push_back(std::pow(2.0 * b.tree().get(i) / b.tree().total(), -beta));
      const double top = *std::max_element(raw.begin(), raw.end());
      for (int i = 0; i < 2; ++i) CHECK(s.weights(i) == doctest::Approx(raw[static_cast<std::size_t>(i)] / top));
      CHECK(s.weights.maxCoeff() == 1.0);
      CHECK(s.weights.minCoeff() > 0.0);
    }
  }
  c.importance_weights = false;
  PrioritizedBuffer off(c);
  off.push(rec(0), 1.0);
  off.push(rec(1), 3.0);
  CHECK(off.sample(2, rng).weights.isOnes());
  PrioritizedBuffer empty(c);
  CHECK_THROWS_AS(empty.sample(1, rng), ContractViolation);
}

TEST_CASE("n-step accumulation") {
  const double g = 0.9;
  NStepAccumulator acc(3, g);
  CHECK(acc.push(rec(1)).empty());
  CHECK(acc.push(rec(2)).empty());
  auto out = acc.push(rec(3));
  REQUIRE(out.size() == 1);
  CHECK(out[0].reward == doctest::Approx(1 + g * 2 + g * g * 3));
  CHECK(out[0].steps == 3);
  CHECK_FALSE(out[0].done);
  CHECK(out[0].state(0) == 1.0);
  CHECK(out[0].next_state(0) == 4.0);

  out = acc.push(rec(4, true));
  REQUIRE(out.size() == 3);
  CHECK(out[0].reward == doctest::Approx(2 + g * 3 + g * g * 4));
  CHECK(out[1].reward == doctest::Approx(3 + g * 4));
  CHECK(out[2].reward == doctest::Approx(4));
  for (const auto& r : out) {
    CHECK(r.done);
    CHECK(r.next_state(0) == 5.0);
  }
  CHECK(out[2].steps == 1);

  acc.push(rec(7));
  auto tail = acc.flush();
  REQUIRE(tail.size() == 1);
  CHECK_FALSE(tail[0].done);
  CHECK(acc.flush().empty());
}

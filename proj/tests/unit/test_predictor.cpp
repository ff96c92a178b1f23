#include <doctest.h>

#include "fixtures.hpp"
#include "relax/predictor.hpp"

using namespace relax;

namespace {

struct Constant : Predictor {
  Task t;
  double value;
  Constant(Task t_, double v) : t(t_), value(v) {}
  Task task() const override { return t; }
  int n_features() const override { return 1; }
  int n_classes() const override { return t == Task::Classification ? 2 : 0; }
  double predict(const Vec&) override { return value; }
};

Dataset tiny(Task task, std::vector<double> labels) {
  Dataset d;
  d.schema = fixtures::numeric_schema(1, task);
  d.normalized = true;
  d.rows = Mat::Zero(static_cast<Eigen::Index>(labels.size()), 1);
  d.labels = Eigen::Map<Vec>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  return d;
}

Dataset load_normalized(const std::string& name, double fraction, std::uint64_t seed, Dataset* test) {
  const auto schema = FeatureSchema::load(fixtures::data_file(name + ".schema.json"));
  const auto raw = load_csv(fixtures::data_file(name + ".csv"), schema);
  auto [tr, te] = split(raw, fraction, seed);
  const auto stats = fit_normalizer(tr);
  *test = stats.normalize(te);
  return stats.normalize(tr);
}

}  // namespace

TEST_CASE("argmax takes the lowest index on ties") {
  Vec s(3);
  s << 0.4, 0.4, 0.2;
  CHECK(argmax_lowest(s) == 0);
  s << 0.1, 0.45, 0.45;
  CHECK(argmax_lowest(s) == 1);
}

TEST_CASE("evaluate: accuracy and RMSE") {
  Constant zero(Task::Classification, 0.0);
  CHECK(evaluate(zero, tiny(Task::Classification, {0, 0, 0, 1, 1})) == doctest::Approx(0.6));
  Constant reg(Task::Regression, 0.0);
  CHECK(evaluate(reg, tiny(Task::Regression, {0, 5})) == doctest::Approx(std::sqrt(12.5)));
  CHECK_THROWS_AS(evaluate(zero, tiny(Task::Classification, {})), ConfigError);
}

TEST_CASE("separable data is learned exactly") {
  fixtures::Threshold truth(2, 0, 0.5);
  auto d = fixtures::uniform_dataset(fixtures::numeric_schema(2), 200, truth, 3);
  // leave a margin around the cut
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (std::abs(d.rows(static_cast<Eigen::Index>(i), 0) - 0.5) > 0.05) keep.push_back(i);
  d = d.subset(keep);
  MlpTrainConfig cfg;
  cfg.hidden = {16};
  cfg.epochs = 300;
  cfg.learning_rate = 1e-2;
  auto model = train_mlp_classifier(d, cfg);
  CHECK(evaluate(*model, d) == 1.0);
}

// a single 210-row test split swings by about +-2 points, so average over splits
TEST_CASE("breast cancer MLP reaches 0.95 mean test accuracy") {
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Dataset test;
    const auto train = load_normalized("breast_cancer", 0.7, seed, &test);
    auto model = train_mlp_classifier(train, MlpTrainConfig{});
    sum += evaluate(*model, test);
  }
  MESSAGE("mean accuracy " << sum / 10);
  CHECK(sum / 10 >= 0.95);
}

TEST_CASE("regressor fits y = 3x") {
  fixtures::Linear lin(Vec::Constant(1, 3.0));
  auto d = fixtures::uniform_dataset(fixtures::numeric_schema(1, Task::Regression), 256, lin, 5);
  MlpTrainConfig cfg;
  cfg.hidden = {32};
  cfg.epochs = 300;
  auto model = train_mlp_regressor(d, cfg);
  CHECK(evaluate(*model, d) < 0.1);

  auto flat = tiny(Task::Regression, {2.0, 2.0, 2.0});
  auto c = train_mlp_regressor(flat, cfg);
  CHECK(std::isfinite(c->predict(Vec::Zero(1))));
}

TEST_CASE("training rejects bad inputs") {
  auto one = tiny(Task::Classification, {1, 1, 1});
  CHECK_THROWS_WITH_AS(train_mlp_classifier(one, {}), doctest::Contains("single class"), ConfigError);
  auto raw = tiny(Task::Classification, {0, 1});
  raw.normalized = false;
  CHECK_THROWS_AS(train_mlp_classifier(raw, {}), ConfigError);
  CHECK_THROWS_AS(train_mlp_regressor(tiny(Task::Classification, {0, 1}), {}), ConfigError);
}

TEST_CASE("save and load reproduce predictions") {
  fixtures::TempDir dir;
  fixtures::Threshold truth(3, 1, 0.3);
  const auto d = fixtures::uniform_dataset(fixtures::numeric_schema(3), 100, truth, 1);
  MlpTrainConfig cfg;
  cfg.epochs = 5;
  auto model = train_mlp_classifier(d, cfg);
  model->save(dir / "m.bin");
  auto back = MlpPredictor::load(dir / "m.bin");
  CHECK(back->net() == model->net());
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(back->scores(d.row(i)) == model->scores(d.row(i)));

  fixtures::write_file(dir / "junk.bin", "hello world");
  CHECK_THROWS_AS(MlpPredictor::load(dir / "junk.bin"), ParseError);
  CHECK_THROWS_AS(MlpPredictor::load(dir / "absent.bin"), ParseError);
  CHECK_THROWS_AS(model->predict(Vec::Zero(2)), ConfigError);
}

TEST_CASE("predict_batch agrees with predict") {
  fixtures::Threshold truth(4, 2, 0.6);
  const auto d = fixtures::uniform_dataset(fixtures::numeric_schema(4), 300, truth, 2);
  MlpTrainConfig cfg;
  cfg.epochs = 10;
  auto model = train_mlp_classifier(d, cfg);
  const auto batch = model->predict_batch(d.rows);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(batch[i] == model->predict(d.row(i)));
}

TEST_CASE("nearest_ct matches brute force") {
  fixtures::Threshold h(3, 0, 0.5);
  const auto train = fixtures::uniform_dataset(fixtures::numeric_schema(3), 200, h, 11);
  const auto idx = NearestCtIndex::build(train, h);
  Rng rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int q = 0; q < 200; ++q) {
    const Vec x = Vec::NullaryExpr(3, [&] { return u(rng); });
    const auto r = nearest_ct(idx, x, h);
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (h.predict(train.row(i)) == h.predict(x)) continue;
      const double d = (train.row(i) - x).cwiseAbs().sum();
      if (d < best) best = d, arg = i;
    }
    CHECK(r.valid);
    CHECK(*r.counterfactual == train.row(arg));
    CHECK(r.proximity == doctest::Approx(best));
    CHECK(h.predict(*r.counterfactual) != h.predict(x));
  }
}

TEST_CASE("nearest_ct ties go to the earlier row and an all-same corpus throws") {
  fixtures::Threshold h(2, 0, 0.5);
  Dataset d;
  d.schema = fixtures::numeric_schema(2);
  d.normalized = true;
  d.rows.resize(3, 2);
  d.rows << 0.875, 0.5, 0.25, 0.75, 0.25, 0.25;
  d.labels = Vec::Zero(3);
  const auto idx = NearestCtIndex::build(d, h);
  Vec x(2);
  x << 0.75, 0.5;
  CHECK(*nearest_ct(idx, x, h).counterfactual == d.row(1));
  NearestCtIndex swapped = idx;
  swapped.rows.row(1).swap(swapped.rows.row(2));
  CHECK(*nearest_ct(swapped, x, h).counterfactual == d.row(2));

  Dataset t = tiny(Task::Classification, {1, 1});
  t.rows << 0.6, 0.8;
  fixtures::Threshold low(1, 0, 0.0);
  const auto all_one = NearestCtIndex::build(t, low);
  CHECK_THROWS_AS(nearest_ct(all_one, Vec::Constant(1, 0.7), low), NoCounterfactual);
}

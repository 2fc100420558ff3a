#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "transferlab/errors.hpp"
#include "transferlab/model.hpp"

using namespace tlab;

namespace {

// Two well separated blobs in 4 dimensions.
Dataset toy_blobs(std::uint64_t seed, std::size_t per_class) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  Dataset ds;
  ds.num_identities = 2;
  for (Identity c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Vec x(4);
      for (int j = 0; j < 4; ++j) x[j] = (c == 0 ? -0.5 : 0.5) + noise(rng);
      ds.samples.push_back({x, c});
    }
  }
  return ds;
}

double cross_entropy_at(const EmbeddingModel& model, const Vec& x, Identity label) {
  return -std::log(model.probabilities(x)[label]);
}

}  // namespace

TEST_CASE("zero model gives a zero representation") {
  const auto m = EmbeddingModel::zeros(ModelConfig{6, {5}, 4, 3, 0});
  std::mt19937_64 rng(1);
  const Vec x = testing::random_vec(rng, 6);
  CHECK(m.representation(x).isZero(0.0));
  CHECK(m.logits(x).isZero(0.0));
}

TEST_CASE("logits equal the bias when the classifier weight is zero") {
  auto m = testing::small_model(2);
  m.classifier_weight().setZero();
  m.classifier_bias() << 0.5, -1.0, 2.0;
  std::mt19937_64 rng(2);
  CHECK(m.logits(testing::random_vec(rng, 6)) == m.classifier_bias());
}

TEST_CASE("logits match a naive matrix-multiply oracle") {
  const auto m = testing::small_model(3);
  std::mt19937_64 rng(3);
  const Vec x = testing::random_vec(rng, 6);
  std::vector<double> act(x.data(), x.data() + x.size());
  for (const auto& layer : m.feature_layers()) {
    std::vector<double> next(static_cast<std::size_t>(layer.weight.rows()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      double s = layer.bias[r];
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) s += layer.weight(r, c) * act[static_cast<std::size_t>(c)];
      next[static_cast<std::size_t>(r)] = std::tanh(s);
    }
    act = next;
  }
  const Vec z = m.logits(x);
  for (Eigen::Index r = 0; r < m.classifier_weight().rows(); ++r) {
    double s = m.classifier_bias()[r];
    for (Eigen::Index c = 0; c < m.classifier_weight().cols(); ++c) {
      s += m.classifier_weight()(r, c) * act[static_cast<std::size_t>(c)];
    }
    CHECK(z[r] == doctest::Approx(s).epsilon(1e-13));
  }
}

TEST_CASE("forward pass is deterministic and batched columns are independent") {
  const auto a = testing::small_model(4);
  const auto b = testing::small_model(4);
  std::mt19937_64 rng(4);
  const Vec x = testing::random_vec(rng, 6);
  const Vec y = testing::random_vec(rng, 6);
  CHECK(a.logits(x) == b.logits(x));
  Mat batch(6, 2);
  batch << x, y;
  const auto pass = a.forward(batch);
  CHECK((pass.logits.col(0) - a.logits(x)).norm() < 1e-14);
  CHECK((pass.logits.col(1) - a.logits(y)).norm() < 1e-14);
  CHECK_THROWS_AS(a.logits(Vec::Zero(5)), DimensionMismatch);
}

TEST_CASE("probabilities sum to one and agree with the logits argmax") {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = testing::small_model(seed, 6, 7);
    const Vec x = testing::random_vec(rng, 6);
    const Vec p = m.probabilities(x);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    CHECK(static_cast<Eigen::Index>(m.predict(x)) == argmax(m.logits(x)));
  }
}

TEST_CASE("input gradient of a constant objective is zero") {
  const auto m = testing::small_model(6);
  std::mt19937_64 rng(6);
  const Vec g = input_gradient(m, testing::random_vec(rng, 6), [](const Vec&, const Vec&) { return HeadTerms{3.0, {}, {}}; });
  CHECK(g.isZero(0.0));
}

TEST_CASE("input gradients match central differences") {
  std::mt19937_64 rng(7);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const auto m = testing::small_model(100 + trial);
    const Vec x = testing::random_vec(rng, 6);

    SUBCASE("softmax cross-entropy") {
      const Identity label = static_cast<Identity>(trial % 3);
      const Vec g = input_gradient(m, x, softmax_cross_entropy_objective(label));
      const Vec fd = testing::central_difference([&](const Vec& p) { return cross_entropy_at(m, p, label); }, x);
      CHECK(testing::relative_error(g, fd) < 1e-4);
    }
    SUBCASE("squared representation norm") {
      auto objective = [](const Vec& r, const Vec&) { return HeadTerms{r.squaredNorm(), 2.0 * r, {}}; };
      const Vec g = input_gradient(m, x, objective);
      const Vec fd = testing::central_difference([&](const Vec& p) { return m.representation(p).squaredNorm(); }, x);
      CHECK(testing::relative_error(g, fd) < 1e-4);
    }
  }
}

TEST_CASE("parameter gradients of cross-entropy match central differences") {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto m = testing::small_model(200 + trial);
    std::mt19937_64 rng(trial);
    const Vec x = testing::random_vec(rng, 6);
    const Identity label = static_cast<Identity>(trial % 3);

    const auto pass = m.forward(x);
    Vec grad_logits = softmax(pass.logits.col(0));
    grad_logits[label] -= 1.0;
    ModelGradients grads = m.zero_gradients();
    m.backward(pass, Mat(), grad_logits, &grads);
    const auto analytic = m.flatten(grads);

    const auto base = m.parameters();
    Vec theta = Eigen::Map<const Vec>(base.data(), static_cast<Eigen::Index>(base.size()));
    auto loss = [&](const Vec& p) {
      m.set_parameters(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
      return cross_entropy_at(m, x, label);
    };
    const Vec fd = testing::central_difference(loss, theta);
    m.set_parameters(base);
    const Vec a = Eigen::Map<const Vec>(analytic.data(), static_cast<Eigen::Index>(analytic.size()));
    CHECK(testing::relative_error(a, fd) < 1e-4);
  }
}

TEST_CASE("training separates a linearly separable toy set") {
  const Dataset ds = toy_blobs(1, 40);
  EmbeddingModel m(ModelConfig{4, {8}, 4, 2, 1});
  const auto out = train_softmax(m, ds, TrainHyper{0.2, 30, 8, 1});
  CHECK(accuracy(out.model, ds) == 1.0);
  REQUIRE(out.epoch_loss.size() == 30);
  // Epoch-level moving average of the loss decreases.
  for (std::size_t e = 3; e + 3 <= out.epoch_loss.size(); e += 3) {
    const double prev = out.epoch_loss[e - 3] + out.epoch_loss[e - 2] + out.epoch_loss[e - 1];
    const double next = out.epoch_loss[e] + out.epoch_loss[e + 1] + out.epoch_loss[e + 2];
    CHECK(next < prev);
  }
  CHECK(out.model.meta().m_train == ds.size());
}

TEST_CASE("zero epochs leave the model unchanged and training is reproducible") {
  const Dataset ds = toy_blobs(2, 10);
  EmbeddingModel m(ModelConfig{4, {8}, 4, 2, 3});
  CHECK(train_softmax(m, ds, TrainHyper{0.1, 0, 4, 9}).model.parameters() == m.parameters());
  const auto a = train_softmax(m, ds, TrainHyper{0.1, 5, 4, 9}).model.parameters();
  const auto b = train_softmax(m, ds, TrainHyper{0.1, 5, 4, 9}).model.parameters();
  CHECK(a == b);
  CHECK(train_softmax(m, ds, TrainHyper{0.1, 5, 4, 10}).model.parameters() != a);
}

TEST_CASE("training rejects bad inputs and reports divergence") {
  const Dataset ds = toy_blobs(3, 5);
  EmbeddingModel m(ModelConfig{4, {8}, 4, 2, 3});
  CHECK_THROWS_AS(train_softmax(m, Dataset{}, TrainHyper{}), InsufficientData);
  CHECK_THROWS_AS(train_softmax(m, ds, TrainHyper{0.1, 1, 0, 0}), InvalidArgument);
  EmbeddingModel one(ModelConfig{4, {8}, 4, 2, 3});
  Dataset bad = ds;
  bad.samples[0].identity = 5;
  CHECK_THROWS_AS(train_softmax(one, bad, TrainHyper{}), InvalidArgument);
  Dataset poisoned = ds;
  poisoned.samples[1].image[0] = std::nan("");
  try {
    train_softmax(m, poisoned, TrainHyper{0.1, 2, 4, 0});
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("lr=") != std::string::npos);
  }
}

TEST_CASE("model config validation") {
  CHECK_THROWS_AS(EmbeddingModel(ModelConfig{6, {5}, 4, 1, 0}), InvalidArgument);
  CHECK_THROWS_AS(EmbeddingModel(ModelConfig{0, {5}, 4, 3, 0}), InvalidArgument);
  CHECK_THROWS_AS(EmbeddingModel(ModelConfig{6, {0}, 4, 3, 0}), InvalidArgument);
  auto m = testing::small_model(1);
  CHECK_THROWS_AS(m.set_parameters(std::vector<double>(3, 0.0)), DimensionMismatch);
}

TEST_CASE("checkpoint round-trip is bit-exact after f32 rounding") {
  testing::TempDir dir("checkpoint");
  auto m = testing::small_model(8);
  m.meta().m_train = 1234;
  save_checkpoint(m, dir.path / "m.exmd");
  const auto loaded = load_checkpoint(dir.path / "m.exmd");
  CHECK(loaded.meta().m_train == 1234);
  CHECK(loaded.config().hidden_dims == m.config().hidden_dims);
  const auto p = m.parameters();
  const auto q = loaded.parameters();
  REQUIRE(p.size() == q.size());
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[i] == static_cast<double>(static_cast<float>(p[i])));

  std::stringstream once, twice;
  write_checkpoint(once, loaded);
  write_checkpoint(twice, read_checkpoint(once));
  std::stringstream again;
  write_checkpoint(again, loaded);
  CHECK(twice.str() == again.str());
}

TEST_CASE("corrupted checkpoints are rejected") {
  std::stringstream good;
  write_checkpoint(good, testing::small_model(9));
  std::string bytes = good.str();

  std::string bad_magic = bytes;
  bad_magic[1] = '?';
  std::stringstream a(bad_magic);
  CHECK_THROWS_AS(read_checkpoint(a), FormatError);

  std::stringstream b(bytes.substr(0, bytes.size() - 8));
  try {
    read_checkpoint(b);
    FAIL("expected truncation");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::Truncated);
  }
}

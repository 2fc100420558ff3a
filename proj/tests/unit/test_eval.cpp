#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "transferlab/errors.hpp"
#include "transferlab/eval.hpp"

using namespace tlab;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// Two classes split by the sign of the first pixel.
EmbeddingModel sign_model() {
  auto m = EmbeddingModel::zeros(ModelConfig{2, {2}, 2, 2, 0});
  for (auto& layer : m.feature_layers()) layer.weight.setIdentity();
  m.classifier_weight() << 1, 0,
                           -1, 0;
  return m;
}

EmbeddingModel fixed_logits(double z0, double z1) {
  auto m = EmbeddingModel::zeros(ModelConfig{2, {2}, 2, 2, 0});
  m.classifier_bias() << z0, z1;
  return m;
}

// Phi by composite Simpson on the density from -12.
double simpson_cdf(double z) {
  const int n = 20000;
  const double lo = -12.0, h = (z - lo) / n;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2 * std::numbers::pi); };
  double s = pdf(lo) + pdf(z);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(lo + i * h);
  return s * h / 3;
}

double monte_carlo(double observed, double shift, double sd, AttackMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(shift, sd);
  const int n = 1000000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const double v = observed + d(rng);
    hits += mode == AttackMode::Dodge ? v > 0.5 : v < 0.5;
  }
  return static_cast<double>(hits) / n;
}

AttackResult result_with(bool success, double l2, std::map<std::string, bool> targets) {
  AttackResult r;
  r.l2 = l2;
  r.target_success = std::move(targets);
  if (!success) r.failure_reason = "goal not reached";
  return r;
}

}  // namespace

TEST_CASE("dodging success") {
  const auto m = sign_model();
  const Vec x = v2(0.05, 0.3);
  SuccessCriteria crit;
  CHECK_FALSE(dodge_success(m, x, x, crit));
  CHECK(dodge_success(m, x, v2(-0.05, 0.3), crit));
  crit.theta = 0.05;
  CHECK_FALSE(dodge_success(m, x, v2(-0.05, 0.3), crit));
}

TEST_CASE("impersonation success is strict") {
  const Vec x = v2(0.1, 0.2);
  SuccessCriteria crit;
  const auto uniform = EmbeddingModel::zeros(ModelConfig{2, {2}, 2, 3, 0});
  CHECK_FALSE(impersonate_success(uniform, x, x, 1, crit));
  CHECK_FALSE(impersonate_success(fixed_logits(0, 0), x, x, 1, crit));  // F_t = 0.5 exactly
  CHECK(impersonate_success(fixed_logits(-30, 30), x, x, 1, crit));
  CHECK_FALSE(impersonate_success(fixed_logits(-30, 30), x, x, 0, crit));
  crit.theta = 0.01;
  CHECK_FALSE(impersonate_success(fixed_logits(-30, 30), x, v2(0.2, 0.2), 1, crit));
  CHECK_THROWS_AS(impersonate_success(fixed_logits(0, 1), x, x, 2, crit), InvalidArgument);
}

TEST_CASE("verifier score and thresholds") {
  const auto m = testing::small_model(3);
  std::mt19937_64 rng(3);
  const Vec a = testing::random_vec(rng, 6);
  const Vec b = testing::random_vec(rng, 6);
  CHECK(verifier_score(m, a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(verifier_score(m, a, b) == verifier_score(m, b, a));
  const VerifierThresholds th{0.75, 0.80};
  CHECK(verify_success(0.74, AttackMode::Dodge, th));
  CHECK_FALSE(verify_success(0.75, AttackMode::Dodge, th));
  CHECK(verify_success(0.81, AttackMode::Impersonate, th));
  CHECK_FALSE(verify_success(0.80, AttackMode::Impersonate, th));
  CHECK_THROWS_AS(verifier_score(EmbeddingModel::zeros(ModelConfig{6, {5}, 4, 3, 0}), a, b), DegenerateEmbedding);
}

TEST_CASE("equal-error-rate calibration") {
  SUBCASE("separable scores") {
    const std::vector<double> genuine{0.9, 0.8, 0.95};
    const std::vector<double> impostor{0.1, 0.3, 0.2};
    const auto cal = calibrate_eer(genuine, impostor);
    CHECK(cal.eer == 0.0);
    CHECK(cal.threshold >= 0.3);
    CHECK(cal.threshold < 0.8);
  }
  SUBCASE("desk-scale verifier on held-out pairs") {
    const Dataset all = gen_synthetic(17, 20, 30, 8);
    Dataset train, held;
    train.num_identities = held.num_identities = all.num_identities;
    for (std::size_t i = 0; i < all.size(); ++i) (i % 30 < 20 ? train : held).samples.push_back(all.samples[i]);
    EmbeddingModel m(ModelConfig{64, {64}, 32, 20, 1});
    const auto trained = train_softmax(m, train, TrainHyper{0.2, 20, 32, 1}).model;
    std::vector<double> genuine, impostor;
    for (const auto& p : sample_labeled_pairs(held, 1000, 5)) {
      (p.same_identity ? genuine : impostor).push_back(verifier_score(trained, p.a, p.b));
    }
    const auto cal = calibrate_eer(genuine, impostor);
    MESSAGE("EER " << cal.eer << " at threshold " << cal.threshold);
    CHECK(cal.eer <= 0.05);
  }
  CHECK_THROWS_AS(calibrate_eer(std::vector<double>{}, std::vector<double>{0.1}), InsufficientData);
}

TEST_CASE("transferability rates and independent recount") {
  const std::vector<std::string> targets{"target", "sub0"};
  SUBCASE("all failures") {
    const std::vector<AttackResult> rs(4, result_with(false, 1.0, {{"target", false}, {"sub0", false}}));
    const auto rep = transferability(rs, targets);
    CHECK(rep.rates.at("target") == 0.0);
    CHECK(rep.attack_successes == 0);
  }
  SUBCASE("half success") {
    std::vector<AttackResult> rs;
    for (int i = 0; i < 6; ++i) rs.push_back(result_with(true, 0.5 * i, {{"target", i % 2 == 0}, {"sub0", true}}));
    const auto rep = transferability(rs, targets, 1.0, 2);
    CHECK(rep.rates.at("target") == 0.5);
    CHECK(rep.rates.at("sub0") == 1.0);
    CHECK(rep.distance_histogram == std::vector<std::size_t>{2, 4});
  }
  SUBCASE("random results against a recount") {
    std::mt19937_64 rng(11);
    std::bernoulli_distribution coin(0.3);
    std::vector<AttackResult> rs;
    for (int i = 0; i < 200; ++i) {
      std::map<std::string, bool> flags;
      if (coin(rng)) flags["target"] = coin(rng);
      flags["sub0"] = coin(rng);
      rs.push_back(result_with(coin(rng), 3.0 * i / 200, flags));
    }
    const auto rep = transferability(rs, targets);
    for (const auto& name : targets) {
      std::size_t count = 0;
      for (const auto& r : rs) {
        auto it = r.target_success.find(name);
        count += it != r.target_success.end() && it->second;
      }
      CHECK(rep.successes.at(name) == count);
      CHECK(rep.rates.at(name) == doctest::Approx(count / 200.0));
      CHECK(rep.rates.at(name) >= 0.0);
      CHECK(rep.rates.at(name) <= 1.0);
    }
    std::size_t total = 0;
    for (auto c : rep.distance_histogram) total += c;
    CHECK(total == 200);
  }
  CHECK(transferability({}, targets).rates.at("target") == 0.0);
  CHECK_THROWS_AS(transferability({}, targets, 0.0), InvalidArgument);
}

TEST_CASE("cosine pair loss") {
  CHECK(cosine_pair_loss(1.0, true) == 0.0);
  CHECK(cosine_pair_loss(0.0, false) == 0.0);
  CHECK(cosine_pair_loss(0.5, false) == 0.5);
  CHECK(cosine_pair_loss(-0.5, false) == 0.5);
  CHECK(cosine_pair_loss(-1.0, true) == 0.0);
}

TEST_CASE("cosine loss statistics") {
  const Dataset ds = gen_synthetic(4, 5, 4, 4);
  auto small = EmbeddingModel(ModelConfig{16, {5}, 4, 3, 4});
  small.meta().m_train = 77;
  const auto pairs = sample_labeled_pairs(ds, 40, 2);
  REQUIRE(pairs.size() == 40);
  std::vector<double> losses;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].same_identity == (i % 2 == 0));
    losses.push_back(cosine_pair_loss(verifier_score(small, pairs[i].a, pairs[i].b), pairs[i].same_identity));
  }
  double mean = 0.0;
  for (double l : losses) mean += l / losses.size();
  double var = 0.0;
  for (double l : losses) var += (l - mean) * (l - mean) / losses.size();
  const auto stats = cosine_loss(small, pairs);
  CHECK(stats.m == 77);
  CHECK(stats.pairs == 40);
  CHECK(stats.mean == doctest::Approx(mean).epsilon(1e-12));
  CHECK(stats.stddev == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_loss(small, std::vector<LabeledPair>{}), InsufficientData);
  CHECK_THROWS_AS(sample_labeled_pairs(take_identities(ds, 1), 4, 1), InsufficientData);
}

TEST_CASE("log-linear loss curve fits") {
  std::vector<LossStats> stats;
  for (std::uint64_t m : {100u, 400u, 1600u, 6400u}) {
    const double lm = std::log(static_cast<double>(m));
    stats.push_back(LossStats{m, 0.7 - 0.05 * lm, 0.3 + 0.01 * lm, 10});
  }
  const auto fit = fit_loss_curves(stats);
  CHECK(std::abs(fit.mu.a - 0.7) < 1e-9);
  CHECK(std::abs(fit.mu.b + 0.05) < 1e-9);
  CHECK(std::abs(fit.sigma.a - 0.3) < 1e-9);
  CHECK(std::abs(fit.sigma.b - 0.01) < 1e-9);
  for (double r : fit.mu.residuals) CHECK(std::abs(r) < 1e-12);

  std::vector<LossStats> decreasing{{10, 0.9, 0.1, 1}, {20, 0.7, 0.1, 1}, {40, 0.65, 0.1, 1}, {80, 0.3, 0.1, 1}};
  CHECK(fit_loss_curves(decreasing).mu.b < 0.0);

  std::vector<LossStats> two_sizes{{10, 0.9, 0.1, 1}, {10, 0.8, 0.1, 1}, {20, 0.7, 0.1, 1}};
  CHECK_THROWS_AS(fit_loss_curves(two_sizes), InsufficientData);
  std::vector<LossStats> zero{{0, 0.9, 0.1, 1}, {10, 0.8, 0.1, 1}, {20, 0.7, 0.1, 1}};
  CHECK_THROWS_AS(fit_loss_curves(zero), InvalidArgument);
}

TEST_CASE("normal CDF agrees with numerical integration") {
  for (double z = -6.0; z <= 6.0; z += 0.25) CHECK(std::abs(normal_cdf(z) - simpson_cdf(z)) < 1e-7);
  CHECK(normal_cdf(0.0) == 0.5);
}

TEST_CASE("transferability prediction") {
  // Adjusted distribution N(0.4, 0.1^2): observed 0.4 with no shift.
  CHECK(std::abs(predict_transferability(0.4, 0.0, 0.01, AttackMode::Dodge) - 0.1587) < 1e-4);
  CHECK(std::abs(predict_transferability(0.4, 0.0, 0.01, AttackMode::Impersonate) - 0.8413) < 1e-4);
  CHECK(predict_transferability(0.6, 0.0, 0.0, AttackMode::Dodge) == 1.0);
  CHECK(predict_transferability(0.6, 0.0, 0.0, AttackMode::Impersonate) == 0.0);
  CHECK_THROWS_AS(predict_transferability(0.6, 0.0, -1.0, AttackMode::Dodge), InvalidArgument);

  SUBCASE("Monte-Carlo oracle") {
    // The difference statistics reported between a small and a large model.
    const double shift = 0.0188, sd = 0.1176;
    std::uint64_t seed = 1;
    for (double observed : {0.35, 0.5, 0.62}) {
      for (auto mode : {AttackMode::Dodge, AttackMode::Impersonate}) {
        const double p = predict_transferability(observed, shift, sd * sd, mode);
        CHECK(std::abs(p - monte_carlo(observed, shift, sd, mode, seed++)) < 0.01);
      }
    }
  }
  SUBCASE("monotone in the observed value") {
    double prev = 0.0;
    for (double v = 0.0; v <= 1.0; v += 0.05) {
      const double p = predict_transferability(v, 0.02, 0.01, AttackMode::Dodge);
      CHECK(p >= prev);
      prev = p;
    }
  }
  SUBCASE("from fitted curves") {
    std::vector<LossStats> stats;
    for (std::uint64_t m : {100u, 1000u, 10000u}) {
      const double lm = std::log(static_cast<double>(m));
      stats.push_back(LossStats{m, 0.6 - 0.02 * lm, 0.2 - 0.01 * lm, 10});
    }
    const auto fit = fit_loss_curves(stats);
    const double shift = fit.mu(10000) - fit.mu(100);
    const double var = std::pow(fit.sigma(100), 2) + std::pow(fit.sigma(10000), 2);
    CHECK(predict_transferability(fit, 100, 10000, 0.45, AttackMode::Dodge) ==
          doctest::Approx(predict_transferability(0.45, shift, var, AttackMode::Dodge)).epsilon(1e-12));
    CHECK_THROWS_AS(predict_transferability(fit, 0, 100, 0.4, AttackMode::Dodge), InvalidArgument);
  }
}

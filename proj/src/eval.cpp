#include "transferlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "transferlab/errors.hpp"

namespace tlab {

void SuccessCriteria::validate() const {
  if (!(theta > 0.0)) throw InvalidArgument("success criteria: theta must be > 0");
}

bool dodge_success(const EmbeddingModel& target, const Vec& x, const Vec& x_adv, const SuccessCriteria& criteria) {
  if ((x - x_adv).norm() > criteria.theta) return false;
  return argmax(target.logits(x_adv)) != argmax(target.logits(x));
}

bool impersonate_success(const EmbeddingModel& target, const Vec& x, const Vec& x_adv, Identity victim,
                         const SuccessCriteria& criteria) {
  if (victim >= target.num_classes()) throw InvalidArgument("impersonate_success: victim outside the classes");
  if ((x - x_adv).norm() > criteria.theta) return false;
  return target.probabilities(x_adv)(victim) > criteria.impersonation_probability;
}

double verifier_score(const EmbeddingModel& model, const Vec& x1, const Vec& x2) {
  return cosine(model.representation(x1), model.representation(x2));
}

bool verify_success(double score, AttackMode mode, const VerifierThresholds& thresholds) {
  return mode == AttackMode::Dodge ? score < thresholds.dodge : score > thresholds.impersonate;
}

EerCalibration calibrate_eer(std::span<const double> genuine, std::span<const double> impostor) {
  if (genuine.empty() || impostor.empty()) throw InsufficientData("calibrate_eer: need genuine and impostor scores");
  std::vector<double> candidates(genuine.begin(), genuine.end());
  candidates.insert(candidates.end(), impostor.begin(), impostor.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  std::vector<double> g(genuine.begin(), genuine.end());
  std::vector<double> im(impostor.begin(), impostor.end());
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  EerCalibration best{candidates.front(), 2.0};
  double best_gap = 2.0;
  for (double t : candidates) {
    // Reject iff score <= t.
    const double frr = static_cast<double>(std::upper_bound(g.begin(), g.end(), t) - g.begin()) / g.size();
    const double far = static_cast<double>(im.end() - std::upper_bound(im.begin(), im.end(), t)) / im.size();
    const double gap = std::abs(frr - far);
    if (gap < best_gap) {
      best_gap = gap;
      best = {t, 0.5 * (frr + far)};
    }
  }
  return best;
}

TransferReport transferability(std::span<const AttackResult> results, std::span<const std::string> targets,
                               double bin_width, std::size_t bins) {
  if (!(bin_width > 0.0) || bins == 0) throw InvalidArgument("transferability: histogram needs bins > 0");
  TransferReport report;
  report.instances = results.size();
  report.bin_width = bin_width;
  report.distance_histogram.assign(bins, 0);
  for (const auto& name : targets) report.successes[name] = 0;
  for (const auto& r : results) {
    if (r.succeeded()) ++report.attack_successes;
    for (const auto& name : targets) {
      const auto it = r.target_success.find(name);
      if (it != r.target_success.end() && it->second) ++report.successes[name];
    }
    const auto bin = static_cast<std::size_t>(std::max(r.l2, 0.0) / bin_width);
    ++report.distance_histogram[std::min(bin, bins - 1)];
  }
  for (const auto& name : targets) {
    report.rates[name] =
        results.empty() ? 0.0 : static_cast<double>(report.successes[name]) / static_cast<double>(results.size());
  }
  return report;
}

double cosine_pair_loss(double cos, bool same_identity) {
  return same_identity ? 1.0 - std::abs(cos) : std::abs(cos);
}

LossStats cosine_loss(const EmbeddingModel& model, std::span<const LabeledPair> pairs) {
  if (pairs.empty()) throw InsufficientData("cosine_loss: no pairs");
  std::vector<double> losses;
  losses.reserve(pairs.size());
  for (const auto& p : pairs) losses.push_back(cosine_pair_loss(verifier_score(model, p.a, p.b), p.same_identity));
  LossStats stats;
  stats.m = model.meta().m_train;
  stats.pairs = losses.size();
  double sum = 0.0;
  for (double l : losses) sum += l;
  stats.mean = sum / static_cast<double>(losses.size());
  double sq = 0.0;
  for (double l : losses) sq += (l - stats.mean) * (l - stats.mean);
  stats.stddev = std::sqrt(sq / static_cast<double>(losses.size()));
  return stats;
}

std::vector<LabeledPair> sample_labeled_pairs(const Dataset& dataset, std::size_t count, std::uint64_t seed) {
  if (dataset.num_identities < 2) throw InsufficientData("sample_labeled_pairs: need two identities");
  std::vector<std::vector<std::size_t>> members(dataset.num_identities);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) members[dataset.samples[i].identity].push_back(i);
  std::vector<Identity> rich;
  for (Identity id = 0; id < dataset.num_identities; ++id) {
    if (members[id].size() >= 2) rich.push_back(id);
  }
  if (rich.empty()) throw InsufficientData("sample_labeled_pairs: no identity has two images");
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::vector<LabeledPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (i % 2 == 0) {
      const auto& m = members[rich[pick(rich.size())]];
      const std::size_t a = pick(m.size());
      std::size_t b = pick(m.size() - 1);
      if (b >= a) ++b;
      out.push_back({dataset.samples[m[a]].image, dataset.samples[m[b]].image, true});
    } else {
      const std::size_t a = pick(dataset.samples.size());
      std::size_t b = pick(dataset.samples.size());
      while (dataset.samples[b].identity == dataset.samples[a].identity) b = pick(dataset.samples.size());
      out.push_back({dataset.samples[a].image, dataset.samples[b].image, false});
    }
  }
  return out;
}

double LogLinearFit::operator()(double m) const { return a + b * std::log(m); }

namespace {

LogLinearFit fit_log_linear(std::span<const double> log_m, std::span<const double> y) {
  const auto n = static_cast<double>(y.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    mx += log_m[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sxx += (log_m[i] - mx) * (log_m[i] - mx);
    sxy += (log_m[i] - mx) * (y[i] - my);
  }
  LogLinearFit fit;
  fit.b = sxy / sxx;
  fit.a = my - fit.b * mx;
  for (std::size_t i = 0; i < y.size(); ++i) fit.residuals.push_back(y[i] - (fit.a + fit.b * log_m[i]));
  return fit;
}

}  // namespace

LossCurveFit fit_loss_curves(std::span<const LossStats> stats) {
  std::set<std::uint64_t> sizes;
  for (const auto& s : stats) {
    if (s.m == 0) throw InvalidArgument("fit_loss_curves: training size must be > 0");
    sizes.insert(s.m);
  }
  if (sizes.size() < 3) throw InsufficientData("fit_loss_curves: need stats at three or more distinct sizes");
  std::vector<double> log_m, mu, sigma;
  for (const auto& s : stats) {
    log_m.push_back(std::log(static_cast<double>(s.m)));
    mu.push_back(s.mean);
    sigma.push_back(s.stddev);
  }
  return {fit_log_linear(log_m, mu), fit_log_linear(log_m, sigma)};
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double predict_transferability(double observed, double mean_shift, double variance, AttackMode mode) {
  if (!(variance >= 0.0)) throw InvalidArgument("predict_transferability: variance must be >= 0");
  const double center = observed + mean_shift;
  if (variance == 0.0) {
    const bool hit = mode == AttackMode::Dodge ? center > 0.5 : center < 0.5;
    return hit ? 1.0 : 0.0;
  }
  const double z = (0.5 - center) / std::sqrt(variance);
  return mode == AttackMode::Dodge ? normal_cdf(-z) : normal_cdf(z);
}

double predict_transferability(const LossCurveFit& fit, double m_alpha, double m_beta, double observed,
                               AttackMode mode) {
  if (!(m_alpha > 0.0) || !(m_beta > 0.0)) throw InvalidArgument("predict_transferability: sizes must be > 0");
  const double shift = fit.mu(m_beta) - fit.mu(m_alpha);
  const double s_a = std::max(fit.sigma(m_alpha), 0.0);
  const double s_b = std::max(fit.sigma(m_beta), 0.0);
  return predict_transferability(observed, shift, s_a * s_a + s_b * s_b, mode);
}

}  // namespace tlab

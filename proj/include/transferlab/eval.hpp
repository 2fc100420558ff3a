#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "transferlab/attack.hpp"
#include "transferlab/data.hpp"
#include "transferlab/model.hpp"

namespace tlab {

struct VerifierThresholds {
  double dodge = 0.75;
  double impersonate = 0.80;
};

/// Thresholds reported for three commercial verification services; kept for reference only.
inline constexpr std::array<VerifierThresholds, 3> kReferenceThresholds{{{0.75, 0.80}, {0.64, 0.74}, {0.623, 0.691}}};

struct SuccessCriteria {
  double theta = 20.0;
  double impersonation_probability = 0.5;
  std::optional<VerifierThresholds> verifier;

  void validate() const;
};

/// |x - x_adv| <= theta and argmax F(x_adv) != argmax F(x).
bool dodge_success(const EmbeddingModel& target, const Vec& x, const Vec& x_adv, const SuccessCriteria& criteria);

/// |x - x_adv| <= theta and F(x_adv)_t > 0.5 (strict).
bool impersonate_success(const EmbeddingModel& target, const Vec& x, const Vec& x_adv, Identity victim,
                         const SuccessCriteria& criteria);

/// cos(R(x1), R(x2)).
double verifier_score(const EmbeddingModel& model, const Vec& x1, const Vec& x2);

/// Dodging: score against the subject's own photo < dodge threshold.
/// Impersonation: score against the victim's photo > impersonation threshold.
bool verify_success(double score, AttackMode mode, const VerifierThresholds& thresholds);

struct EerCalibration {
  double threshold = 0.0;
  double eer = 0.0;
};

/// Threshold where the false-reject rate on genuine scores meets the false-accept rate on
/// impostor scores (accept iff score > threshold).
EerCalibration calibrate_eer(std::span<const double> genuine, std::span<const double> impostor);

struct TransferReport {
  std::size_t instances = 0;
  std::size_t attack_successes = 0;  // instances with no failure reason
  std::map<std::string, std::size_t> successes;
  std::map<std::string, double> rates;
  double bin_width = 0.0;
  std::vector<std::size_t> distance_histogram;  // last bin collects everything beyond
};

/// Per-target success rates. An instance counts for a target only if its result carries a
/// true flag for that target name.
TransferReport transferability(std::span<const AttackResult> results, std::span<const std::string> targets,
                               double bin_width = 1.0, std::size_t bins = 10);

/// One image pair with its ground truth.
struct LabeledPair {
  Vec a;
  Vec b;
  bool same_identity = false;
};

/// 1 - |cos| for same-identity pairs, |cos| otherwise.
double cosine_pair_loss(double cos, bool same_identity);

struct LossStats {
  std::uint64_t m = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over the pairs
  std::size_t pairs = 0;
};

LossStats cosine_loss(const EmbeddingModel& model, std::span<const LabeledPair> pairs);

/// Pairs drawn from `dataset`, alternating same-identity and different-identity.
std::vector<LabeledPair> sample_labeled_pairs(const Dataset& dataset, std::size_t count, std::uint64_t seed);

/// y = a + b log(m).
struct LogLinearFit {
  double a = 0.0;
  double b = 0.0;
  std::vector<double> residuals;

  double operator()(double m) const;
};

struct LossCurveFit {
  LogLinearFit mu;
  LogLinearFit sigma;
};

/// Least squares on log(m); needs stats at three or more distinct sizes.
LossCurveFit fit_loss_curves(std::span<const LossStats> stats);

/// Standard normal CDF.
double normal_cdf(double z);

/// Probability that observed + D crosses 0.5 with D ~ N(mean_shift, variance): above 0.5
/// for dodging, below for impersonation. Zero variance is a point mass.
double predict_transferability(double observed, double mean_shift, double variance, AttackMode mode);

/// Shift and variance taken from the fitted curves at the simulator size m_alpha and the
/// target size m_beta: N(mu(m_beta) - mu(m_alpha), sigma(m_alpha)^2 + sigma(m_beta)^2).
double predict_transferability(const LossCurveFit& fit, double m_alpha, double m_beta, double observed,
                               AttackMode mode);

}  // namespace tlab

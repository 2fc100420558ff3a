#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "transferlab/data.hpp"
#include "transferlab/model.hpp"

namespace tlab {

enum class AttackMethod { CarliniWagner, AssembledSearch, DistanceConstrained };

std::string_view to_string(AttackMethod method);
AttackMethod parse_attack_method(std::string_view text);

/// Inputs of one attack instance.
///
/// Dodging moves x_o away from class `owner`; impersonation moves it into class `victim`.
/// The assembled search additionally needs `target_image` (the victim's photo, or for
/// dodging a nearby image of some other identity).
struct AttackSpec {
  AttackMode mode = AttackMode::Dodge;
  AttackMethod method = AttackMethod::CarliniWagner;
  Vec subject_image;
  Vec target_image;
  Identity owner = 0;
  Identity victim = 0;

  double c = 20.0;
  double kappa = 20.0;
  double theta = 20.0;
  std::optional<double> gamma;
  std::optional<std::vector<bool>> region_mask;
  double lr = 0.01;
  std::uint32_t theta_iters = 1000;
  std::uint32_t delta_max = 50;
  double cosine_stop = 0.8;
  std::uint64_t seed = 0;

  void validate(std::size_t input_dim) const;
};

struct AttackResult {
  Vec adversarial;
  double l2 = 0.0;
  std::uint64_t steps = 0;
  std::uint32_t delta_final = 0;
  double mean_cosine = 0.0;
  std::vector<double> substitute_cosines;
  std::vector<bool> substitute_success;
  std::map<std::string, bool> target_success;
  std::optional<std::string> failure_reason;

  bool succeeded() const { return !failure_reason.has_value(); }
};

/// Hinge of the C&W loss on logits Z:
///   dodging        max(Z_o - max_{i != o} Z_i, -kappa)
///   impersonation  max(max_{i != t} Z_i - Z_t, -kappa)
double cw_objective_f(const Vec& logits, AttackMode mode, Identity label, double kappa);

/// d f / d Z (zero on the clamped floor).
Vec cw_objective_f_gradient(const Vec& logits, AttackMode mode, Identity label, double kappa);

/// Whether the classifier goal holds: argmax != o (dodging) or F_t > 0.5 (impersonation).
bool classifier_goal_met(const EmbeddingModel& model, const Vec& x, AttackMode mode, Identity label);

/// 1/2 |x' - x_o|^2 + c * sum_k f^(k)(x') and its gradient with respect to w, x' = tanh(w).
double cw_objective(std::span<const EmbeddingModel* const> models, const Vec& w, const AttackSpec& spec,
                    Vec* grad_w = nullptr);

/// Ensemble C&W by Adam in tanh space from w = arctanh(x_o). Returns the lowest-objective
/// iterate among those meeting the goal on every model; otherwise the final iterate with a
/// failure reason.
AttackResult cw_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec);

/// Per-model cosine weights, gradients and per-dimension agreement statistics.
struct GradientAssembly {
  Vec alpha;
  Mat per_model;  // dim x K, column k = g_k
  Vec p;
  Vec q;
  double max_p = 0.0;
  Vec assembled;
  std::size_t clipped = 0;
  bool aligned = false;
};

inline constexpr double kClipFraction = 0.3;
inline constexpr double kAlignedFloor = 1e-12;

/// Weighted mean of the columns of `gradients` by `alpha`, with dimensions whose agreement
/// score p_i^2 / q_i is at most 0.3 max_p zeroed. q_i = 0 never clips; max_p <= 0 never clips.
GradientAssembly assemble_from_gradients(const Mat& gradients, const Vec& alpha);

/// Gradients g_k = -|R^k(x')| d cos(R^k(x'), R^k(x_t)) / dw at x' = tanh(w), assembled.
GradientAssembly assemble_gradients(std::span<const EmbeddingModel* const> models, const Vec& w, const Vec& x_t);

/// Smooth search objective exp(Delta - delta) + e^2 exp(1 - c_bar) and its gradient in w,
/// where Delta = |tanh(w) - x_o| and c_bar is the mean cosine to x_t over the models.
double search_objective(std::span<const EmbeddingModel* const> models, const Vec& w, const Vec& x_o,
                        const Vec& x_t, double delta, Vec* grad_w = nullptr);

/// Multi-step search: raise the distance allowance delta = 1, 2, ... and for each run
/// theta_iters steps of w -= lr (exp(Delta - delta) dDelta/dw + exp(3 - c_bar) g_assembled)
/// until the mean cosine to x_t reaches cosine_stop.
AttackResult search_adversarial(std::span<const EmbeddingModel* const> models, const AttackSpec& spec);

/// exp(|tanh(w) - x_o| - gamma) + sum_k f^(k)(tanh(w)) and its gradient in w.
double distance_constrained_objective(std::span<const EmbeddingModel* const> models, const Vec& w,
                                      const AttackSpec& spec, Vec* grad_w = nullptr);

inline constexpr double kGammaSlack = 1.1;

/// Minimizes the distance-constrained objective; success also requires Delta <= 1.1 gamma.
AttackResult distance_constrained_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec);

/// Runs spec.method with gradients restricted to spec.region_mask. Pixels outside the mask
/// are copied from x_o.
AttackResult region_restricted_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec);

/// Dispatch on spec.method (honours region_mask when present).
AttackResult run_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec);

inline constexpr double kTanhClamp = 1e-6;

/// arctanh with inputs clamped to [-1 + 1e-6, 1 - 1e-6].
Vec to_tanh_space(const Vec& x);

}  // namespace tlab

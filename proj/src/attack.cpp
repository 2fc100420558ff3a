#include "transferlab/attack.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "transferlab/errors.hpp"

namespace tlab {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct Adam {
  Vec m;
  Vec v;
  std::uint64_t t = 0;

  explicit Adam(Eigen::Index n) : m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(Vec& w, const Vec& g, double lr) {
    ++t;
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kAdamEps);
  }
};

Identity goal_label(const AttackSpec& spec) { return spec.mode == AttackMode::Dodge ? spec.owner : spec.victim; }

void require_models(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  if (models.empty()) throw InvalidArgument("attack: need at least one model");
  const auto dim = models.front()->input_dim();
  for (const auto* m : models) {
    if (m == nullptr) throw InvalidArgument("attack: null model");
    if (m->input_dim() != dim) throw DimensionMismatch("attack: models disagree on input_dim");
    if (goal_label(spec) >= m->num_classes()) throw InvalidArgument("attack: goal label outside a model's classes");
  }
  spec.validate(dim);
}

Vec mask_vector(const AttackSpec& spec, Eigen::Index dim) {
  Vec mask = Vec::Ones(dim);
  if (spec.region_mask) {
    for (Eigen::Index i = 0; i < dim; ++i) mask(i) = (*spec.region_mask)[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  }
  return mask;
}

// d tanh(w) / dw evaluated through x' = tanh(w).
Vec tanh_jacobian(const Vec& x_adv) { return (1.0 - x_adv.array().square()).matrix(); }

Vec distance_gradient_w(const Vec& x_adv, const Vec& x_o, double dist) {
  if (dist < kNormFloor) return Vec::Zero(x_adv.size());
  return ((x_adv - x_o) / dist).cwiseProduct(tanh_jacobian(x_adv));
}

void check_finite(double value, const Vec& grad, const char* where, std::uint64_t step) {
  if (!std::isfinite(value) || !grad.allFinite()) {
    std::ostringstream msg;
    msg << where << ": non-finite objective or gradient at step " << step;
    throw DivergenceError(msg.str());
  }
}

// Sum over models of the hinge term and its gradient with respect to x'.
double hinge_terms(std::span<const EmbeddingModel* const> models, const Vec& x_adv, const AttackSpec& spec,
                   double weight, Vec* grad_x, bool* all_goals) {
  double total = 0.0;
  bool goals = true;
  const Identity label = goal_label(spec);
  for (const auto* model : models) {
    const auto pass = model->forward(x_adv);
    const Vec repr = pass.representation().col(0);
    if (repr.norm() < kNormFloor) throw DegenerateEmbedding("attack: degenerate embedding (|R| ~ 0)");
    const Vec z = pass.logits.col(0);
    total += cw_objective_f(z, spec.mode, label, spec.kappa);
    if (spec.mode == AttackMode::Dodge) {
      goals = goals && argmax(z) != static_cast<Eigen::Index>(label);
    } else {
      goals = goals && softmax(z)(label) > 0.5;
    }
    if (grad_x) {
      const Vec dz = weight * cw_objective_f_gradient(z, spec.mode, label, spec.kappa);
      if (dz.cwiseAbs().maxCoeff() > 0.0) *grad_x += model->backward(pass, Mat(), dz, nullptr).col(0);
    }
  }
  if (all_goals) *all_goals = goals;
  return weight * total;
}

Vec clean_output(const Vec& w, const Vec& x_o, const AttackSpec& spec) {
  Vec x_adv = w.array().tanh().matrix();
  if (spec.region_mask) {
    for (Eigen::Index i = 0; i < x_adv.size(); ++i) {
      if (!(*spec.region_mask)[static_cast<std::size_t>(i)]) x_adv(i) = x_o(i);
    }
  }
  return x_adv;
}

void fill_report(std::span<const EmbeddingModel* const> models, const AttackSpec& spec, AttackResult& result) {
  result.l2 = (result.adversarial - spec.subject_image).norm();
  const Vec& ref = spec.target_image.size() > 0 ? spec.target_image : spec.subject_image;
  result.substitute_cosines.clear();
  result.substitute_success.clear();
  double sum = 0.0;
  for (const auto* model : models) {
    const Vec r = model->representation(result.adversarial);
    const Vec r_ref = model->representation(ref);
    if (r.norm() < kNormFloor || r_ref.norm() < kNormFloor) {
      throw DegenerateEmbedding("attack: degenerate embedding (|R| ~ 0)");
    }
    const double c = cosine(r, r_ref);
    result.substitute_cosines.push_back(c);
    sum += c;
    result.substitute_success.push_back(classifier_goal_met(*model, result.adversarial, spec.mode, goal_label(spec)));
  }
  result.mean_cosine = sum / static_cast<double>(models.size());
}

using ObjectiveFn = double (*)(std::span<const EmbeddingModel* const>, const Vec&, const AttackSpec&, Vec*, bool*);

double cw_value(std::span<const EmbeddingModel* const> models, const Vec& w, const AttackSpec& spec, Vec* grad_w,
                bool* goals) {
  const Vec x_adv = w.array().tanh().matrix();
  const Vec diff = x_adv - spec.subject_image;
  Vec grad_x;
  if (grad_w) grad_x = diff;
  const double hinge = hinge_terms(models, x_adv, spec, spec.c, grad_w ? &grad_x : nullptr, goals);
  if (grad_w) *grad_w = grad_x.cwiseProduct(tanh_jacobian(x_adv));
  return 0.5 * diff.squaredNorm() + hinge;
}

double constrained_value(std::span<const EmbeddingModel* const> models, const Vec& w, const AttackSpec& spec,
                         Vec* grad_w, bool* goals) {
  const Vec x_adv = w.array().tanh().matrix();
  const double dist = (x_adv - spec.subject_image).norm();
  const double penalty = std::exp(dist - *spec.gamma);
  Vec grad_x;
  if (grad_w) grad_x = Vec::Zero(x_adv.size());
  const double hinge = hinge_terms(models, x_adv, spec, 1.0, grad_w ? &grad_x : nullptr, goals);
  if (grad_w) *grad_w = grad_x.cwiseProduct(tanh_jacobian(x_adv)) + penalty * distance_gradient_w(x_adv, spec.subject_image, dist);
  return penalty + hinge;
}

// Adam descent keeping the lowest-objective iterate that meets the goal and `admissible`.
template <typename Admissible>
AttackResult adam_descent(std::span<const EmbeddingModel* const> models, const AttackSpec& spec, ObjectiveFn objective,
                          Admissible admissible, const char* where, const char* miss_reason) {
  const Vec mask = mask_vector(spec, spec.subject_image.size());
  Vec w = to_tanh_space(spec.subject_image);
  Adam adam(w.size());
  Vec best_w;
  double best_value = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  Vec grad;
  std::uint64_t step = 0;
  for (;; ++step) {
    bool goals = false;
    const double value = objective(models, w, spec, &grad, &goals);
    check_finite(value, grad, where, step);
    if (goals && value < best_value && admissible(clean_output(w, spec.subject_image, spec))) {
      best_value = value;
      best_w = w;
      best_step = step;
    }
    if (step == spec.theta_iters) break;
    adam.step(w, grad.cwiseProduct(mask), spec.lr);
  }
  AttackResult result;
  if (best_w.size() > 0) {
    result.adversarial = clean_output(best_w, spec.subject_image, spec);
    result.steps = best_step;
  } else {
    result.adversarial = clean_output(w, spec.subject_image, spec);
    result.steps = step;
    result.failure_reason = miss_reason;
  }
  fill_report(models, spec, result);
  return result;
}

}  // namespace

std::string_view to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::CarliniWagner:
      return "cw";
    case AttackMethod::AssembledSearch:
      return "search";
    case AttackMethod::DistanceConstrained:
      return "constrained";
  }
  return "cw";
}

AttackMethod parse_attack_method(std::string_view text) {
  if (text == "cw") return AttackMethod::CarliniWagner;
  if (text == "search") return AttackMethod::AssembledSearch;
  if (text == "constrained") return AttackMethod::DistanceConstrained;
  throw InvalidArgument("unknown attack method '" + std::string(text) + "' (expected cw, search or constrained)");
}

void AttackSpec::validate(std::size_t input_dim) const {
  const auto dim = static_cast<Eigen::Index>(input_dim);
  if (subject_image.size() != dim) throw DimensionMismatch("attack: subject image does not match input_dim");
  if (target_image.size() != 0 && target_image.size() != dim) {
    throw DimensionMismatch("attack: target image does not match input_dim");
  }
  if (!(c > 0.0)) throw InvalidArgument("attack: c must be > 0");
  if (!(kappa >= 0.0)) throw InvalidArgument("attack: kappa must be >= 0");
  if (!(theta > 0.0)) throw InvalidArgument("attack: theta must be > 0");
  if (!(lr > 0.0)) throw InvalidArgument("attack: lr must be > 0");
  if (gamma && !(*gamma > 0.0)) throw InvalidArgument("attack: gamma must be > 0");
  if (theta_iters == 0) throw InvalidArgument("attack: theta_iters must be >= 1");
  if (delta_max == 0) throw InvalidArgument("attack: delta_max must be >= 1");
  if (region_mask && region_mask->size() != input_dim) {
    throw DimensionMismatch("attack: region mask length " + std::to_string(region_mask->size()) +
                            " != input_dim " + std::to_string(input_dim));
  }
  if (!subject_image.allFinite()) throw NonFiniteValue("attack: subject image is not finite");
}

double cw_objective_f(const Vec& logits, AttackMode mode, Identity label, double kappa) {
  if (logits.size() < 2) throw InvalidArgument("cw_objective_f: need at least two classes");
  const auto l = static_cast<Eigen::Index>(label);
  double other = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (i != l) other = std::max(other, logits(i));
  }
  const double margin = mode == AttackMode::Dodge ? logits(l) - other : other - logits(l);
  return std::max(margin, -kappa);
}

Vec cw_objective_f_gradient(const Vec& logits, AttackMode mode, Identity label, double kappa) {
  Vec g = Vec::Zero(logits.size());
  const auto l = static_cast<Eigen::Index>(label);
  Eigen::Index other = l == 0 ? 1 : 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (i != l && logits(i) > logits(other)) other = i;
  }
  const double margin = mode == AttackMode::Dodge ? logits(l) - logits(other) : logits(other) - logits(l);
  if (margin <= -kappa) return g;
  const double sign = mode == AttackMode::Dodge ? 1.0 : -1.0;
  g(l) = sign;
  g(other) = -sign;
  return g;
}

bool classifier_goal_met(const EmbeddingModel& model, const Vec& x, AttackMode mode, Identity label) {
  const Vec z = model.logits(x);
  if (mode == AttackMode::Dodge) return argmax(z) != static_cast<Eigen::Index>(label);
  return softmax(z)(label) > 0.5;
}

Vec to_tanh_space(const Vec& x) {
  constexpr double lim = 1.0 - kTanhClamp;
  return x.array().max(-lim).min(lim).atanh().matrix();
}

double cw_objective(std::span<const EmbeddingModel* const> models, const Vec& w, const AttackSpec& spec,
                    Vec* grad_w) {
  return cw_value(models, w, spec, grad_w, nullptr);
}

AttackResult cw_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  require_models(models, spec);
  return adam_descent(
      models, spec, &cw_value, [](const Vec&) { return true; }, "cw_attack", "goal not reached");
}

GradientAssembly assemble_from_gradients(const Mat& gradients, const Vec& alpha) {
  if (gradients.cols() == 0) throw InvalidArgument("assemble_gradients: need at least one model");
  if (alpha.size() != gradients.cols()) throw DimensionMismatch("assemble_gradients: one weight per model");
  GradientAssembly out;
  out.alpha = alpha;
  out.per_model = gradients;
  const auto k = static_cast<double>(gradients.cols());
  out.p = gradients.rowwise().sum() / k;
  out.q = ((gradients.colwise() - out.p).array().square().rowwise().sum() / k).sqrt().matrix();
  out.max_p = out.p.maxCoeff();
  const double weight_sum = alpha.sum();
  if (weight_sum < kAlignedFloor) {
    out.aligned = true;
    out.assembled = Vec::Zero(gradients.rows());
    return out;
  }
  out.assembled = gradients * alpha / weight_sum;
  if (out.max_p <= 0.0) return out;
  const double bar = kClipFraction * out.max_p;
  for (Eigen::Index i = 0; i < out.assembled.size(); ++i) {
    if (out.q(i) <= 0.0) continue;
    if (out.p(i) * out.p(i) / out.q(i) <= bar) {
      out.assembled(i) = 0.0;
      ++out.clipped;
    }
  }
  return out;
}

namespace {

// Cosine of each model's embedding of x' to its embedding of x_t and the gradient of
// that cosine with respect to x'; also reports |R(x')|.
struct CosineProbe {
  double cosine = 0.0;
  double norm = 0.0;
  Vec grad_x;
};

CosineProbe probe_cosine(const EmbeddingModel& model, const Vec& x_adv, const Vec& r_t) {
  const auto pass = model.forward(x_adv);
  const Vec r = pass.representation().col(0);
  CosineProbe probe;
  probe.norm = r.norm();
  if (probe.norm < kNormFloor) throw DegenerateEmbedding("attack: degenerate embedding (|R| ~ 0)");
  probe.cosine = cosine(r, r_t);
  probe.grad_x = model.backward(pass, cosine_gradient(r, r_t), Mat(), nullptr).col(0);
  return probe;
}

std::vector<Vec> target_embeddings(std::span<const EmbeddingModel* const> models, const Vec& x_t) {
  std::vector<Vec> out;
  for (const auto* m : models) {
    Vec r = m->representation(x_t);
    if (r.norm() < kNormFloor) throw DegenerateEmbedding("attack: degenerate target embedding (|R| ~ 0)");
    out.push_back(std::move(r));
  }
  return out;
}

GradientAssembly assemble_at(std::span<const EmbeddingModel* const> models, const Vec& w,
                             const std::vector<Vec>& r_t, double* mean_cos) {
  const Vec x_adv = w.array().tanh().matrix();
  const Vec jac = tanh_jacobian(x_adv);
  Mat g(w.size(), static_cast<Eigen::Index>(models.size()));
  Vec alpha(static_cast<Eigen::Index>(models.size()));
  double sum = 0.0;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const auto probe = probe_cosine(*models[k], x_adv, r_t[k]);
    alpha(static_cast<Eigen::Index>(k)) = 1.0 - probe.cosine;
    g.col(static_cast<Eigen::Index>(k)) = -probe.norm * probe.grad_x.cwiseProduct(jac);
    sum += probe.cosine;
  }
  if (mean_cos) *mean_cos = sum / static_cast<double>(models.size());
  return assemble_from_gradients(g, alpha);
}

double mean_cosine_at(std::span<const EmbeddingModel* const> models, const Vec& x_adv, const std::vector<Vec>& r_t) {
  double sum = 0.0;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const Vec r = models[k]->representation(x_adv);
    if (r.norm() < kNormFloor) throw DegenerateEmbedding("attack: degenerate embedding (|R| ~ 0)");
    sum += cosine(r, r_t[k]);
  }
  return sum / static_cast<double>(models.size());
}

}  // namespace

GradientAssembly assemble_gradients(std::span<const EmbeddingModel* const> models, const Vec& w, const Vec& x_t) {
  if (models.empty()) throw InvalidArgument("assemble_gradients: need at least one model");
  return assemble_at(models, w, target_embeddings(models, x_t), nullptr);
}

double search_objective(std::span<const EmbeddingModel* const> models, const Vec& w, const Vec& x_o,
                        const Vec& x_t, double delta, Vec* grad_w) {
  if (models.empty()) throw InvalidArgument("search_objective: need at least one model");
  const auto r_t = target_embeddings(models, x_t);
  const Vec x_adv = w.array().tanh().matrix();
  const double dist = (x_adv - x_o).norm();
  const Vec jac = tanh_jacobian(x_adv);
  double c_bar = 0.0;
  Vec grad_c = Vec::Zero(w.size());
  for (std::size_t k = 0; k < models.size(); ++k) {
    const auto probe = probe_cosine(*models[k], x_adv, r_t[k]);
    c_bar += probe.cosine;
    grad_c += probe.grad_x;
  }
  const double kk = static_cast<double>(models.size());
  c_bar /= kk;
  const double eta = std::exp(2.0);
  const double dist_term = std::exp(dist - delta);
  const double cos_term = eta * std::exp(1.0 - c_bar);
  if (grad_w) {
    *grad_w = dist_term * distance_gradient_w(x_adv, x_o, dist) - cos_term * (grad_c / kk).cwiseProduct(jac);
  }
  return dist_term + cos_term;
}

AttackResult search_adversarial(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  require_models(models, spec);
  if (spec.target_image.size() == 0) throw InvalidArgument("search_adversarial: target image required");
  const Vec& x_o = spec.subject_image;
  const Vec mask = mask_vector(spec, x_o.size());
  const auto r_t = target_embeddings(models, spec.target_image);
  Vec w = to_tanh_space(x_o);
  double c_bar = mean_cosine_at(models, clean_output(w, x_o, spec), r_t);

  AttackResult result;
  std::uint32_t delta = 1;
  std::uint64_t steps = 0;
  bool reached = c_bar >= spec.cosine_stop;
  while (!reached) {
    if (delta > spec.delta_max) break;
    for (std::uint32_t i = 0; i < spec.theta_iters && !reached; ++i) {
      const Vec x_adv = w.array().tanh().matrix();
      const double dist = (x_adv - x_o).norm();
      double c_now = 0.0;
      const auto assembly = assemble_at(models, w, r_t, &c_now);
      const Vec g = std::exp(dist - static_cast<double>(delta)) * distance_gradient_w(x_adv, x_o, dist) +
                    std::exp(3.0 - c_now) * assembly.assembled;
      check_finite(dist, g, "search_adversarial", steps);
      w -= spec.lr * g.cwiseProduct(mask);
      ++steps;
      c_bar = mean_cosine_at(models, clean_output(w, x_o, spec), r_t);
      if (!std::isfinite(c_bar)) throw DivergenceError("search_adversarial: non-finite mean cosine");
      reached = c_bar >= spec.cosine_stop;
    }
    if (!reached) ++delta;
  }
  result.adversarial = clean_output(w, x_o, spec);
  result.steps = steps;
  result.delta_final = std::min(delta, spec.delta_max);
  if (!reached) result.failure_reason = "budget exhausted";
  fill_report(models, spec, result);
  return result;
}

double distance_constrained_objective(std::span<const EmbeddingModel* const> models, const Vec& w,
                                      const AttackSpec& spec, Vec* grad_w) {
  if (!spec.gamma) throw InvalidArgument("distance_constrained_objective: gamma required");
  return constrained_value(models, w, spec, grad_w, nullptr);
}

AttackResult distance_constrained_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  require_models(models, spec);
  if (!spec.gamma) throw InvalidArgument("distance_constrained_attack: gamma required");
  const double limit = kGammaSlack * *spec.gamma;
  const Vec& x_o = spec.subject_image;
  return adam_descent(
      models, spec, &constrained_value, [&](const Vec& x_adv) { return (x_adv - x_o).norm() <= limit; },
      "distance_constrained_attack", "goal not reached within the distance constraint");
}

AttackResult region_restricted_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  if (!spec.region_mask) throw InvalidArgument("region_restricted_attack: region mask required");
  bool any = false;
  for (bool b : *spec.region_mask) any = any || b;
  if (!any) throw InvalidArgument("region_restricted_attack: region mask is empty");
  return run_attack(models, spec);
}

AttackResult run_attack(std::span<const EmbeddingModel* const> models, const AttackSpec& spec) {
  switch (spec.method) {
    case AttackMethod::CarliniWagner:
      return cw_attack(models, spec);
    case AttackMethod::AssembledSearch:
      return search_adversarial(models, spec);
    case AttackMethod::DistanceConstrained:
      return distance_constrained_attack(models, spec);
  }
  throw InvalidArgument("run_attack: unknown method");
}

}  // namespace tlab

#include "transferlab/nll.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "transferlab/errors.hpp"

namespace tlab {

namespace {

void require_embedding(const Vec& r, const char* where) {
  if (r.norm() < kNormFloor) throw DegenerateEmbedding(std::string(where) + ": degenerate embedding (|R| ~ 0)");
}

// Builds the curve once every interpolant of a pair has a representation.
template <typename BatchRepr>
NllCurve measure_curve(BatchRepr&& batch_repr, std::span<const ImagePair> pairs, int steps) {
  if (pairs.empty()) throw InsufficientData("measure_nll_curve: need at least one pair");
  if (steps < 1) throw InvalidArgument("measure_nll_curve: steps must be >= 1");
  NllCurve curve;
  curve.num_pairs = pairs.size();
  curve.k_grid.resize(steps + 1);
  std::iota(curve.k_grid.begin(), curve.k_grid.end(), 0);
  curve.mean_cosine.assign(steps + 1, 0.0);
  curve.l2_norm.assign(steps + 1, 0.0);
  for (const auto& pair : pairs) {
    if (pair.a.size() != pair.b.size()) throw DimensionMismatch("measure_nll_curve: pair sizes differ");
    const Vec diff = pair.b - pair.a;
    const double span = diff.norm();
    if (span < kNormFloor) throw InvalidArgument("measure_nll_curve: pair endpoints coincide");
    Mat points(pair.a.size(), steps + 1);
    for (int k = 0; k <= steps; ++k) {
      points.col(k) = pair.a + (static_cast<double>(k) / steps) * diff;
    }
    const Mat reprs = batch_repr(points);
    const Vec r_a = reprs.col(0);
    require_embedding(r_a, "measure_nll_curve");
    for (int k = 0; k <= steps; ++k) {
      const Vec r_k = reprs.col(k);
      require_embedding(r_k, "measure_nll_curve");
      curve.mean_cosine[k] += 1.0 - cosine(r_k, r_a);
      curve.l2_norm[k] += (points.col(k) - pair.a).norm() / span;
    }
  }
  const double n = static_cast<double>(pairs.size());
  for (int k = 0; k <= steps; ++k) {
    curve.mean_cosine[k] /= n;
    curve.l2_norm[k] /= n;
  }
  curve.xi = xi(curve);
  return curve;
}

double beta_sse(std::span<const double> lambdas, std::span<const double> observed, double beta) {
  double s = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double r = observed[i] - f_star_a(lambdas[i], beta);
    s += r * r;
  }
  return s;
}

double soft_target_a(double lambda, double beta) { return f_star_a(lambda, beta); }

}  // namespace

NllCurve measure_nll_curve(const EmbeddingModel& model, std::span<const ImagePair> pairs, int steps) {
  return measure_curve([&model](const Mat& pts) { return Mat(model.forward(pts).representation()); }, pairs,
                       steps);
}

NllCurve measure_nll_curve(const RepresentationFn& repr, std::span<const ImagePair> pairs, int steps) {
  return measure_curve(
      [&repr](const Mat& pts) {
        Mat out;
        for (Eigen::Index c = 0; c < pts.cols(); ++c) {
          const Vec r = repr(pts.col(c));
          if (c == 0) out.resize(r.size(), pts.cols());
          out.col(c) = r;
        }
        return out;
      },
      pairs, steps);
}

double xi(std::span<const double> mean_cosine, std::span<const double> l2_norm) {
  if (mean_cosine.size() != l2_norm.size() || mean_cosine.size() < 2) {
    throw InvalidArgument("xi: curve must have matching grids with at least two points");
  }
  const std::size_t steps = mean_cosine.size() - 1;
  double sum = 0.0;
  for (std::size_t k = 1; k <= steps; ++k) {
    const double d = mean_cosine[k] - l2_norm[k];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(steps));
}

double xi(const NllCurve& curve) { return xi(curve.mean_cosine, curve.l2_norm); }

std::vector<ImagePair> sample_identity_pairs(const Dataset& dataset, std::size_t count, std::uint64_t seed,
                                             std::span<const Identity> anchors) {
  if (dataset.num_identities < 2) throw InsufficientData("sample_identity_pairs: need two identities");
  std::vector<std::size_t> anchor_pool;
  if (!anchors.empty()) {
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
      if (std::find(anchors.begin(), anchors.end(), dataset.samples[i].identity) != anchors.end()) {
        anchor_pool.push_back(i);
      }
    }
    if (anchor_pool.empty()) throw InsufficientData("sample_identity_pairs: anchors have no images");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> any(0, dataset.samples.size() - 1);
  std::vector<ImagePair> pairs;
  pairs.reserve(count);
  std::size_t guard = 0;
  while (pairs.size() < count) {
    if (++guard > 1000 * (count + 10)) throw InsufficientData("sample_identity_pairs: cannot find distinct pairs");
    const std::size_t ia = anchor_pool.empty()
                               ? any(rng)
                               : anchor_pool[std::uniform_int_distribution<std::size_t>(0, anchor_pool.size() - 1)(rng)];
    const std::size_t ib = any(rng);
    if (dataset.samples[ia].identity == dataset.samples[ib].identity) continue;
    pairs.push_back({dataset.samples[ia].image, dataset.samples[ib].image});
  }
  return pairs;
}

double f_star_a(double lambda, double beta) { return 1.0 / (1.0 + std::exp(2.0 * beta * lambda - beta)); }

Vec f_star(double lambda, double beta, Identity a, Identity b, std::size_t num_classes) {
  if (a == b) throw InvalidArgument("f_star: identities a and b must differ");
  if (a >= num_classes || b >= num_classes) throw InvalidArgument("f_star: identity outside the class range");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("f_star: lambda must lie in [0, 1]");
  Vec out = Vec::Zero(static_cast<Eigen::Index>(num_classes));
  out(a) = f_star_a(lambda, beta);
  out(b) = 1.0 - out(a);
  return out;
}

double fit_beta(std::span<const double> lambdas, std::span<const double> observed) {
  if (lambdas.size() != observed.size() || lambdas.empty()) {
    throw InvalidArgument("fit_beta: need matching, non-empty observation arrays");
  }
  const auto [lo_it, hi_it] = std::minmax_element(observed.begin(), observed.end());
  if (*hi_it - *lo_it < 1e-12) throw InvalidArgument("fit_beta: degenerate fit (all observations equal)");

  // Coarse scan in log(beta), then golden-section refinement around the best grid point.
  constexpr double kLogLo = -7.0;  // beta ~ 1e-3
  constexpr double kLogHi = 5.5;   // beta ~ 245
  constexpr int kGrid = 500;
  auto sse_at = [&](double log_beta) { return beta_sse(lambdas, observed, std::exp(log_beta)); };
  int best = 0;
  double best_val = sse_at(kLogLo);
  for (int i = 1; i <= kGrid; ++i) {
    const double v = sse_at(kLogLo + (kLogHi - kLogLo) * i / kGrid);
    if (v < best_val) {
      best_val = v;
      best = i;
    }
  }
  const double step = (kLogHi - kLogLo) / kGrid;
  double lo = kLogLo + step * std::max(best - 1, 0);
  double hi = kLogLo + step * std::min(best + 1, kGrid);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = sse_at(x1);
  double f2 = sse_at(x2);
  for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = sse_at(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = sse_at(x2);
    }
  }
  return std::exp(0.5 * (lo + hi));
}

double fit_beta(const EmbeddingModel& model, const AugmentedDataset& augmented) {
  if (augmented.tuples.size() < 20) throw InsufficientData("fit_beta: need at least 20 tuples");
  std::vector<double> lambdas, observed;
  lambdas.reserve(augmented.tuples.size());
  observed.reserve(augmented.tuples.size());
  for (const auto& t : augmented.tuples) {
    lambdas.push_back(t.lambda);
    observed.push_back(model.probabilities(t.x_interp)(t.a));
  }
  return fit_beta(lambdas, observed);
}

double l_tri(const Vec& r_interp, const Vec& r_a, const Vec& r_b, double lambda) {
  const double c_a = 1.0 - cosine(r_interp, r_a);
  const double c_b = 1.0 - cosine(r_interp, r_b);
  const double da = c_a - lambda;
  const double db = 1.0 - lambda - c_b;
  return da * da + db * db;
}

double l_tri(const EmbeddingModel& model, const AugmentedDataset& augmented, const AugTuple& tuple) {
  const Vec r_l = model.representation(tuple.x_interp);
  const Vec r_a = model.representation(augmented.x_a(tuple));
  const Vec r_b = model.representation(augmented.x_b(tuple));
  require_embedding(r_l, "l_tri");
  require_embedding(r_a, "l_tri");
  require_embedding(r_b, "l_tri");
  return l_tri(r_l, r_a, r_b, tuple.lambda);
}

TripletGradient l_tri_gradient(const Vec& r_interp, const Vec& r_a, const Vec& r_b, double lambda) {
  const double da = (1.0 - cosine(r_interp, r_a)) - lambda;
  const double db = 1.0 - lambda - (1.0 - cosine(r_interp, r_b));
  // C = 1 - cos, so dC/dr = -dcos/dr.
  const double w_a = -2.0 * da;
  const double w_b = 2.0 * db;
  return {w_a * cosine_gradient(r_interp, r_a) + w_b * cosine_gradient(r_interp, r_b),
          w_a * cosine_gradient(r_a, r_interp), w_b * cosine_gradient(r_b, r_interp)};
}

double mean_l_tri(const EmbeddingModel& model, const AugmentedDataset& augmented) {
  if (augmented.tuples.empty()) throw InsufficientData("mean_l_tri: no tuples");
  double s = 0.0;
  for (const auto& t : augmented.tuples) s += l_tri(model, augmented, t);
  return s / static_cast<double>(augmented.tuples.size());
}

double l_soft(const Vec& probabilities, double lambda, Identity a, Identity b, double beta) {
  if (a >= probabilities.size() || b >= probabilities.size()) throw InvalidArgument("l_soft: identity out of range");
  const double q_a = soft_target_a(lambda, beta);
  const double q_b = 1.0 - q_a;
  return -(q_a * std::log(std::max(probabilities(a), kProbabilityFloor)) +
           q_b * std::log(std::max(probabilities(b), kProbabilityFloor)));
}

double l_soft(const EmbeddingModel& model, const Vec& x, double lambda, Identity a, Identity b, double beta) {
  return l_soft(model.probabilities(x), lambda, a, b, beta);
}

Vec l_soft_logit_gradient(const Vec& logits, double lambda, Identity a, Identity b, double beta) {
  if (a >= logits.size() || b >= logits.size()) throw InvalidArgument("l_soft: identity out of range");
  const double q_a = soft_target_a(lambda, beta);
  Vec g = softmax(logits);
  g(a) -= q_a;
  g(b) -= 1.0 - q_a;
  return g;
}

double nll_objective(const EmbeddingModel& model, const AugmentedDataset& augmented, const AugTuple& tuple,
                     double beta) {
  const Vec& xa = augmented.x_a(tuple);
  const Vec& xb = augmented.x_b(tuple);
  return l_tri(model, augmented, tuple) + l_soft(model, xa, 0.0, tuple.a, tuple.b, beta) +
         l_soft(model, tuple.x_interp, tuple.lambda, tuple.a, tuple.b, beta) +
         l_soft(model, xb, 1.0, tuple.a, tuple.b, beta);
}

double nll_objective_gradient(const EmbeddingModel& model, const AugmentedDataset& augmented,
                              std::span<const std::size_t> tuple_indices, double beta, ModelGradients& grads) {
  if (tuple_indices.empty()) return 0.0;
  const auto dim = static_cast<Eigen::Index>(model.input_dim());
  const auto b = static_cast<Eigen::Index>(tuple_indices.size());
  Mat xa(dim, b), xl(dim, b), xb(dim, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& t = augmented.tuples[tuple_indices[j]];
    xa.col(j) = augmented.x_a(t);
    xl.col(j) = t.x_interp;
    xb.col(j) = augmented.x_b(t);
  }
  const auto pa = model.forward(xa);
  const auto pl = model.forward(xl);
  const auto pb = model.forward(xb);
  const auto e = static_cast<Eigen::Index>(model.embed_dim());
  const auto nc = static_cast<Eigen::Index>(model.num_classes());
  Mat gr_a = Mat::Zero(e, b), gr_l = Mat::Zero(e, b), gr_b = Mat::Zero(e, b);
  Mat gz_a = Mat::Zero(nc, b), gz_l = Mat::Zero(nc, b), gz_b = Mat::Zero(nc, b);
  const double scale = 1.0 / static_cast<double>(b);
  double total = 0.0;

  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& t = augmented.tuples[tuple_indices[j]];
    const Vec r_a = pa.representation().col(j);
    const Vec r_l = pl.representation().col(j);
    const Vec r_b = pb.representation().col(j);
    require_embedding(r_a, "finetune_nll");
    require_embedding(r_l, "finetune_nll");
    require_embedding(r_b, "finetune_nll");
    total += l_tri(r_l, r_a, r_b, t.lambda);
    const auto tri = l_tri_gradient(r_l, r_a, r_b, t.lambda);
    gr_l.col(j) = scale * tri.r_interp;
    gr_a.col(j) = scale * tri.r_a;
    gr_b.col(j) = scale * tri.r_b;

    const Vec za = pa.logits.col(j), zl = pl.logits.col(j), zb = pb.logits.col(j);
    total += l_soft(softmax(za), 0.0, t.a, t.b, beta) + l_soft(softmax(zl), t.lambda, t.a, t.b, beta) +
             l_soft(softmax(zb), 1.0, t.a, t.b, beta);
    gz_a.col(j) = scale * l_soft_logit_gradient(za, 0.0, t.a, t.b, beta);
    gz_l.col(j) = scale * l_soft_logit_gradient(zl, t.lambda, t.a, t.b, beta);
    gz_b.col(j) = scale * l_soft_logit_gradient(zb, 1.0, t.a, t.b, beta);
  }
  model.backward(pa, gr_a, gz_a, &grads);
  model.backward(pl, gr_l, gz_l, &grads);
  model.backward(pb, gr_b, gz_b, &grads);
  return total * scale;
}

FinetuneOutcome finetune_nll(EmbeddingModel model, const AugmentedDataset& augmented, const NllConfig& cfg) {
  if (cfg.beta <= 0.0) throw InvalidArgument("finetune_nll: beta must be > 0");
  if (cfg.batch == 0) throw InvalidArgument("finetune_nll: batch must be >= 1");
  if (augmented.tuples.empty()) throw InsufficientData("finetune_nll: no tuples");
  if (augmented.originals.dim() != model.input_dim()) {
    throw DimensionMismatch("finetune_nll: augmented data does not match the model input dimension");
  }
  std::vector<std::size_t> order(augmented.tuples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  FinetuneOutcome outcome{std::move(model), {}};
  EmbeddingModel& m = outcome.model;
  ModelGradients grads = m.zero_gradients();
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t len = std::min(cfg.batch, order.size() - start);
      grads.set_zero();
      const double batch_mean =
          nll_objective_gradient(m, augmented, std::span(order).subspan(start, len), cfg.beta, grads);
      sum += batch_mean * static_cast<double>(len);
      m.apply_gradients(grads, cfg.lr, cfg.freeze_classifier);
    }
    const double mean = sum / static_cast<double>(order.size());
    if (!std::isfinite(mean) || !m.all_parameters_finite()) {
      std::ostringstream msg;
      msg << "finetune_nll diverged at epoch " << epoch << " (lr=" << cfg.lr << ", beta=" << cfg.beta
          << ", batch=" << cfg.batch << ", seed=" << cfg.seed << ")";
      throw DivergenceError(msg.str());
    }
    outcome.epoch_objective.push_back(mean);
  }
  return outcome;
}

}  // namespace tlab

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "transferlab/augment.hpp"
#include "transferlab/model.hpp"

namespace tlab {

/// Mean cosine-distance curve along straight segments between images of two identities.
struct NllCurve {
  std::vector<int> k_grid;           // 0..K
  std::vector<double> mean_cosine;   // mean over pairs of 1 - cos(R(x^(k)), R(x_a))
  std::vector<double> l2_norm;       // mean over pairs of |x^(k) - x_a| / |x_b - x_a|
  double xi = 0.0;
  std::size_t num_pairs = 0;
};

struct ImagePair {
  Vec a;
  Vec b;
};

using RepresentationFn = std::function<Vec(const Vec&)>;

NllCurve measure_nll_curve(const EmbeddingModel& model, std::span<const ImagePair> pairs, int steps = 100);
NllCurve measure_nll_curve(const RepresentationFn& repr, std::span<const ImagePair> pairs, int steps = 100);

/// Root-mean-square gap between the curve and the diagonal over k = 1..K.
double xi(const NllCurve& curve);
double xi(std::span<const double> mean_cosine, std::span<const double> l2_norm);

/// Pairs of images from distinct identities. With non-empty `anchors`, the first image is
/// always taken from an anchor identity.
std::vector<ImagePair> sample_identity_pairs(const Dataset& dataset, std::size_t count, std::uint64_t seed,
                                             std::span<const Identity> anchors = {});

/// Ideal output at x^(lambda): entry a = 1 / (1 + exp(2 beta lambda - beta)), entry b = 1 - entry a.
double f_star_a(double lambda, double beta);
Vec f_star(double lambda, double beta, Identity a, Identity b, std::size_t num_classes);

/// Least-squares beta for observations F(x^(lambda))_a ~ f_star_a(lambda, beta).
double fit_beta(std::span<const double> lambdas, std::span<const double> observed);
double fit_beta(const EmbeddingModel& model, const AugmentedDataset& augmented);

/// (C_a - lambda)^2 + (1 - lambda - C_b)^2 with C_a, C_b the cosine distances of R(x^(lambda))
/// to R(x_a) and R(x_b).
double l_tri(const Vec& r_interp, const Vec& r_a, const Vec& r_b, double lambda);
double l_tri(const EmbeddingModel& model, const AugmentedDataset& augmented, const AugTuple& tuple);

/// Gradients of l_tri with respect to each of its three representations.
struct TripletGradient {
  Vec r_interp;
  Vec r_a;
  Vec r_b;
};
TripletGradient l_tri_gradient(const Vec& r_interp, const Vec& r_a, const Vec& r_b, double lambda);
double mean_l_tri(const EmbeddingModel& model, const AugmentedDataset& augmented);

inline constexpr double kProbabilityFloor = 1e-12;

/// Cross-entropy of F against f_star, which is non-zero only at entries a and b.
double l_soft(const Vec& probabilities, double lambda, Identity a, Identity b, double beta);
double l_soft(const EmbeddingModel& model, const Vec& x, double lambda, Identity a, Identity b, double beta);

/// d l_soft(softmax(Z)) / dZ = softmax(Z) - f_star (exact while the probability floor is inactive).
Vec l_soft_logit_gradient(const Vec& logits, double lambda, Identity a, Identity b, double beta);

struct NllConfig {
  double beta = 4.5;
  std::uint32_t m_per_pair = 10;
  double lr = 0.01;
  std::uint32_t epochs = 5;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  bool freeze_classifier = false;
};

/// One term of the fine-tuning objective:
///   L_tri + L_soft(0) at x_a + L_soft(lambda) at x^(lambda) + L_soft(1) at x_b.
double nll_objective(const EmbeddingModel& model, const AugmentedDataset& augmented, const AugTuple& tuple,
                     double beta);

/// Mean objective over the selected tuples and its parameter gradient.
double nll_objective_gradient(const EmbeddingModel& model, const AugmentedDataset& augmented,
                              std::span<const std::size_t> tuple_indices, double beta, ModelGradients& grads);

struct FinetuneOutcome {
  EmbeddingModel model;
  std::vector<double> epoch_objective;
};

/// Mini-batch gradient descent on the NLL objective over all tuples.
FinetuneOutcome finetune_nll(EmbeddingModel model, const AugmentedDataset& augmented, const NllConfig& cfg);

}  // namespace tlab

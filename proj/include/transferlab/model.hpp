#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "transferlab/data.hpp"
#include "transferlab/linalg.hpp"

namespace tlab {

/// Shape of a fully connected embedding classifier:
/// input -> hidden_dims... -> embed (all tanh) -> num_classes (linear).
struct ModelConfig {
  std::size_t input_dim = 144;
  std::vector<std::size_t> hidden_dims{64};
  std::size_t embed_dim = 32;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;
};

/// Activations of a batched forward pass; column j belongs to input j.
struct ForwardPass {
  std::vector<Mat> activations;  // [0] = input, back() = representation R
  Mat logits;                    // Z = W_C R + B_C

  const Mat& representation() const { return activations.back(); }
};

/// Parameter-shaped gradient accumulator.
struct ModelGradients {
  std::vector<DenseLayer> features;
  Mat classifier_weight;
  Vec classifier_bias;

  void set_zero();
  double squared_norm() const;
};

struct TrainingMeta {
  std::uint64_t m_train = 0;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
};

/// Embedding classifier F(x) = softmax(W_C R(x) + B_C) with a tanh feature stack R.
///
/// All arithmetic is in double precision. The model is a value type; instances are
/// immutable once training returns, so concurrent reads are safe.
class EmbeddingModel {
 public:
  /// Glorot-uniform initialization from config.seed; biases start at zero.
  explicit EmbeddingModel(ModelConfig config);

  /// Every parameter zero (R(x) = 0 for all x).
  static EmbeddingModel zeros(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t input_dim() const { return config_.input_dim; }
  std::size_t embed_dim() const { return config_.embed_dim; }
  std::size_t num_classes() const { return config_.num_classes; }

  const std::vector<DenseLayer>& feature_layers() const { return features_; }
  std::vector<DenseLayer>& feature_layers() { return features_; }
  const Mat& classifier_weight() const { return classifier_weight_; }
  Mat& classifier_weight() { return classifier_weight_; }
  const Vec& classifier_bias() const { return classifier_bias_; }
  Vec& classifier_bias() { return classifier_bias_; }

  const TrainingMeta& meta() const { return meta_; }
  TrainingMeta& meta() { return meta_; }

  Vec representation(const Vec& x) const;
  Vec logits(const Vec& x) const;
  Vec probabilities(const Vec& x) const;
  Identity predict(const Vec& x) const;

  /// Batched forward pass; `inputs` holds one image per column.
  ForwardPass forward(const Mat& inputs) const;

  /// Back-propagate upstream gradients dL/dR and dL/dZ (one column per input; either may be
  /// empty to mean zero). Parameter gradients are accumulated into `param_grads` when non-null;
  /// the return value is dL/dx for every column.
  Mat backward(const ForwardPass& pass, const Mat& grad_repr, const Mat& grad_logits,
               ModelGradients* param_grads) const;

  ModelGradients zero_gradients() const;

  /// params -= lr * grads. The classifier head is left untouched when `freeze_classifier`.
  void apply_gradients(const ModelGradients& grads, double lr, bool freeze_classifier = false);

  /// Parameters flattened in checkpoint order: for each feature layer its row-major weight
  /// then bias, followed by the row-major W_C and B_C.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> values);
  std::size_t parameter_count() const;
  std::vector<double> flatten(const ModelGradients& grads) const;

  bool all_parameters_finite() const;

 private:
  void check_input(Eigen::Index rows) const;

  ModelConfig config_;
  std::vector<DenseLayer> features_;
  Mat classifier_weight_;
  Vec classifier_bias_;
  TrainingMeta meta_;
};

/// Value and head gradients of a scalar objective of (R(x), Z(x)). Empty gradient vectors
/// mean "does not depend on this head".
struct HeadTerms {
  double value = 0.0;
  Vec grad_repr;
  Vec grad_logits;
};
using HeadObjective = std::function<HeadTerms(const Vec& repr, const Vec& logits)>;

/// dObjective/dx by back-propagation. Throws NonFiniteValue if any intermediate is not finite.
Vec input_gradient(const EmbeddingModel& model, const Vec& x, const HeadObjective& objective,
                   double* value = nullptr);

/// Softmax cross-entropy of one labelled input as a head objective.
HeadObjective softmax_cross_entropy_objective(Identity label);

struct TrainHyper {
  double lr = 0.05;
  std::uint32_t epochs = 20;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

struct TrainOutcome {
  EmbeddingModel model;
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch, measured during the pass
};

/// Mini-batch gradient descent on softmax cross-entropy. Bit-reproducible for a fixed
/// (model, dataset, hyper). Throws DivergenceError naming the hyperparameters on NaN loss.
TrainOutcome train_softmax(EmbeddingModel model, const Dataset& dataset, const TrainHyper& hyper);

double mean_cross_entropy(const EmbeddingModel& model, const Dataset& dataset);
double accuracy(const EmbeddingModel& model, const Dataset& dataset);

/// "EXMD" checkpoint; parameters are stored as f32 so a load rounds them.
void save_checkpoint(const EmbeddingModel& model, const std::filesystem::path& path);
EmbeddingModel load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(std::ostream& out, const EmbeddingModel& model);
EmbeddingModel read_checkpoint(std::istream& in);

}  // namespace tlab

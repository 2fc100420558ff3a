#include "transferlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "transferlab/errors.hpp"

namespace tlab {

namespace {

constexpr std::string_view kCheckpointMagic = "EXMD";
constexpr std::uint32_t kCheckpointVersion = 1;

DenseLayer glorot_layer(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer layer{Mat(out, in), Vec::Zero(out)};
  for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = dist(rng);
  }
  return layer;
}

std::vector<std::size_t> layer_widths(const ModelConfig& cfg) {
  std::vector<std::size_t> widths{cfg.input_dim};
  widths.insert(widths.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  widths.push_back(cfg.embed_dim);
  return widths;
}

template <typename Fn>
void for_each_block(const std::vector<DenseLayer>& features, const Mat& wc, const Vec& bc, Fn&& fn) {
  for (const auto& layer : features) {
    fn(layer.weight);
    fn(layer.bias);
  }
  fn(wc);
  fn(bc);
}

// Row-major visit of a matrix or vector.
template <typename Derived, typename Fn>
void visit_row_major(const Eigen::MatrixBase<Derived>& m, Fn&& fn) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) fn(m(r, c));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dim < 1 || embed_dim < 1) throw InvalidArgument("ModelConfig: dimensions must be >= 1");
  for (auto h : hidden_dims) {
    if (h < 1) throw InvalidArgument("ModelConfig: hidden widths must be >= 1");
  }
  if (num_classes < 2) throw InvalidArgument("ModelConfig: num_classes must be >= 2");
}

void ModelGradients::set_zero() {
  for (auto& l : features) {
    l.weight.setZero();
    l.bias.setZero();
  }
  classifier_weight.setZero();
  classifier_bias.setZero();
}

double ModelGradients::squared_norm() const {
  double s = classifier_weight.squaredNorm() + classifier_bias.squaredNorm();
  for (const auto& l : features) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return s;
}

EmbeddingModel::EmbeddingModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto widths = layer_widths(config_);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    features_.push_back(glorot_layer(widths[i], widths[i + 1], rng));
  }
  auto head = glorot_layer(config_.embed_dim, config_.num_classes, rng);
  classifier_weight_ = std::move(head.weight);
  classifier_bias_ = std::move(head.bias);
  meta_.seed = config_.seed;
}

EmbeddingModel EmbeddingModel::zeros(ModelConfig config) {
  EmbeddingModel m(std::move(config));
  for (auto& l : m.features_) {
    l.weight.setZero();
    l.bias.setZero();
  }
  m.classifier_weight_.setZero();
  m.classifier_bias_.setZero();
  return m;
}

void EmbeddingModel::check_input(Eigen::Index rows) const {
  if (static_cast<std::size_t>(rows) != config_.input_dim) {
    throw DimensionMismatch("model expects input dimension " + std::to_string(config_.input_dim) +
                            ", got " + std::to_string(rows));
  }
}

ForwardPass EmbeddingModel::forward(const Mat& inputs) const {
  check_input(inputs.rows());
  ForwardPass pass;
  pass.activations.reserve(features_.size() + 1);
  pass.activations.push_back(inputs);
  for (const auto& layer : features_) {
    Mat pre = layer.weight * pass.activations.back();
    pre.colwise() += layer.bias;
    pass.activations.push_back(pre.array().tanh().matrix());
  }
  pass.logits = classifier_weight_ * pass.activations.back();
  pass.logits.colwise() += classifier_bias_;
  return pass;
}

Vec EmbeddingModel::representation(const Vec& x) const { return forward(x).representation().col(0); }

Vec EmbeddingModel::logits(const Vec& x) const { return forward(x).logits.col(0); }

Vec EmbeddingModel::probabilities(const Vec& x) const { return softmax(logits(x)); }

Identity EmbeddingModel::predict(const Vec& x) const { return static_cast<Identity>(argmax(logits(x))); }

Mat EmbeddingModel::backward(const ForwardPass& pass, const Mat& grad_repr, const Mat& grad_logits,
                             ModelGradients* param_grads) const {
  const Mat& repr = pass.representation();
  const Eigen::Index batch = repr.cols();
  Mat delta = Mat::Zero(repr.rows(), batch);
  if (grad_repr.size() != 0) delta += grad_repr;
  if (grad_logits.size() != 0) {
    delta.noalias() += classifier_weight_.transpose() * grad_logits;
    if (param_grads) {
      param_grads->classifier_weight.noalias() += grad_logits * repr.transpose();
      param_grads->classifier_bias += grad_logits.rowwise().sum();
    }
  }
  for (std::size_t l = features_.size(); l-- > 0;) {
    const Mat& out = pass.activations[l + 1];
    const Mat pre_grad = (delta.array() * (1.0 - out.array().square())).matrix();
    if (param_grads) {
      param_grads->features[l].weight.noalias() += pre_grad * pass.activations[l].transpose();
      param_grads->features[l].bias += pre_grad.rowwise().sum();
    }
    delta = features_[l].weight.transpose() * pre_grad;
  }
  return delta;
}

ModelGradients EmbeddingModel::zero_gradients() const {
  ModelGradients g;
  for (const auto& l : features_) {
    g.features.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
  }
  g.classifier_weight = Mat::Zero(classifier_weight_.rows(), classifier_weight_.cols());
  g.classifier_bias = Vec::Zero(classifier_bias_.size());
  return g;
}

void EmbeddingModel::apply_gradients(const ModelGradients& grads, double lr, bool freeze_classifier) {
  for (std::size_t l = 0; l < features_.size(); ++l) {
    features_[l].weight -= lr * grads.features[l].weight;
    features_[l].bias -= lr * grads.features[l].bias;
  }
  if (!freeze_classifier) {
    classifier_weight_ -= lr * grads.classifier_weight;
    classifier_bias_ -= lr * grads.classifier_bias;
  }
}

std::vector<double> EmbeddingModel::parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for_each_block(features_, classifier_weight_, classifier_bias_,
                 [&](const auto& block) { visit_row_major(block, [&](double v) { out.push_back(v); }); });
  return out;
}

std::vector<double> EmbeddingModel::flatten(const ModelGradients& grads) const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for_each_block(grads.features, grads.classifier_weight, grads.classifier_bias,
                 [&](const auto& block) { visit_row_major(block, [&](double v) { out.push_back(v); }); });
  return out;
}

void EmbeddingModel::set_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw DimensionMismatch("set_parameters: expected " + std::to_string(parameter_count()) +
                            " values, got " + std::to_string(values.size()));
  }
  std::size_t pos = 0;
  auto fill = [&](auto& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r) {
      for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = values[pos++];
    }
  };
  for (auto& l : features_) {
    fill(l.weight);
    fill(l.bias);
  }
  fill(classifier_weight_);
  fill(classifier_bias_);
}

std::size_t EmbeddingModel::parameter_count() const {
  std::size_t n = static_cast<std::size_t>(classifier_weight_.size() + classifier_bias_.size());
  for (const auto& l : features_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool EmbeddingModel::all_parameters_finite() const {
  bool ok = classifier_weight_.allFinite() && classifier_bias_.allFinite();
  for (const auto& l : features_) ok = ok && l.weight.allFinite() && l.bias.allFinite();
  return ok;
}

Vec input_gradient(const EmbeddingModel& model, const Vec& x, const HeadObjective& objective,
                   double* value) {
  const auto pass = model.forward(x);
  const Vec repr = pass.representation().col(0);
  const Vec logits = pass.logits.col(0);
  if (!repr.allFinite() || !logits.allFinite()) throw NonFiniteValue("input_gradient: non-finite forward pass");
  const HeadTerms terms = objective(repr, logits);
  if (!std::isfinite(terms.value)) throw NonFiniteValue("input_gradient: non-finite objective value");
  if (value) *value = terms.value;
  Vec grad = model.backward(pass, terms.grad_repr, terms.grad_logits, nullptr).col(0);
  if (!grad.allFinite()) throw NonFiniteValue("input_gradient: non-finite gradient");
  return grad;
}

HeadObjective softmax_cross_entropy_objective(Identity label) {
  return [label](const Vec&, const Vec& logits) {
    if (label >= logits.size()) throw InvalidArgument("cross-entropy label out of range");
    const Vec p = softmax(logits);
    HeadTerms t;
    t.value = -std::log(std::max(p(label), 1e-300));
    t.grad_logits = p;
    t.grad_logits(label) -= 1.0;
    return t;
  };
}

TrainOutcome train_softmax(EmbeddingModel model, const Dataset& dataset, const TrainHyper& hyper) {
  if (dataset.samples.empty()) throw InsufficientData("train_softmax: empty dataset");
  if (hyper.batch == 0) throw InvalidArgument("train_softmax: batch must be >= 1");
  for (const auto& s : dataset.samples) {
    if (s.identity >= model.num_classes()) {
      throw InvalidArgument("train_softmax: label " + std::to_string(s.identity) + " >= num_classes " +
                            std::to_string(model.num_classes()));
    }
  }
  const auto n = dataset.samples.size();
  const auto dim = static_cast<Eigen::Index>(model.input_dim());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(hyper.seed);
  ModelGradients grads = model.zero_gradients();

  TrainOutcome outcome{std::move(model), {}};
  EmbeddingModel& m = outcome.model;
  for (std::uint32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += hyper.batch) {
      const std::size_t b = std::min(hyper.batch, n - start);
      Mat inputs(dim, static_cast<Eigen::Index>(b));
      for (std::size_t j = 0; j < b; ++j) inputs.col(static_cast<Eigen::Index>(j)) = dataset.samples[order[start + j]].image;
      const auto pass = m.forward(inputs);
      Mat grad_logits(pass.logits.rows(), pass.logits.cols());
      for (std::size_t j = 0; j < b; ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        const Vec p = softmax(pass.logits.col(col));
        const auto label = dataset.samples[order[start + j]].identity;
        loss_sum += -std::log(std::max(p(label), 1e-300));
        grad_logits.col(col) = p;
        grad_logits(label, col) -= 1.0;
      }
      grad_logits /= static_cast<double>(b);
      grads.set_zero();
      m.backward(pass, Mat(), grad_logits, &grads);
      m.apply_gradients(grads, hyper.lr);
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss) || !m.all_parameters_finite()) {
      std::ostringstream msg;
      msg << "train_softmax diverged at epoch " << epoch << " (lr=" << hyper.lr << ", batch=" << hyper.batch
          << ", epochs=" << hyper.epochs << ", seed=" << hyper.seed << ")";
      throw DivergenceError(msg.str());
    }
    outcome.epoch_loss.push_back(mean_loss);
  }
  m.meta().m_train = n;
  m.meta().epochs += hyper.epochs;
  return outcome;
}

double mean_cross_entropy(const EmbeddingModel& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw InsufficientData("mean_cross_entropy: empty dataset");
  double total = 0.0;
  for (const auto& s : dataset.samples) {
    total += -std::log(std::max(model.probabilities(s.image)(s.identity), 1e-300));
  }
  return total / static_cast<double>(dataset.samples.size());
}

double accuracy(const EmbeddingModel& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw InsufficientData("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& s : dataset.samples) hits += model.predict(s.image) == s.identity ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(dataset.samples.size());
}

void write_checkpoint(std::ostream& out, const EmbeddingModel& model) {
  const auto& cfg = model.config();
  binio::write_magic(out, kCheckpointMagic);
  binio::write_u32(out, kCheckpointVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(cfg.input_dim));
  binio::write_u32(out, static_cast<std::uint32_t>(cfg.hidden_dims.size()));
  for (auto h : cfg.hidden_dims) binio::write_u32(out, static_cast<std::uint32_t>(h));
  binio::write_u32(out, static_cast<std::uint32_t>(cfg.embed_dim));
  binio::write_u32(out, static_cast<std::uint32_t>(cfg.num_classes));
  binio::write_u64(out, model.meta().m_train);
  binio::write_u64(out, model.meta().seed);
  for (double v : model.parameters()) binio::write_f32(out, static_cast<float>(v));
}

EmbeddingModel read_checkpoint(std::istream& in) {
  binio::expect_magic(in, kCheckpointMagic, "checkpoint");
  const auto version = binio::read_u32(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "checkpoint version " + std::to_string(version) + " is not supported");
  }
  ModelConfig cfg;
  cfg.input_dim = binio::read_u32(in, "input_dim");
  const auto hidden = binio::read_u32(in, "hidden count");
  if (hidden > 1024) throw FormatError(FormatError::Kind::Truncated, "implausible hidden layer count");
  cfg.hidden_dims.clear();
  for (std::uint32_t i = 0; i < hidden; ++i) cfg.hidden_dims.push_back(binio::read_u32(in, "hidden width"));
  cfg.embed_dim = binio::read_u32(in, "embed_dim");
  cfg.num_classes = binio::read_u32(in, "num_classes");
  const auto m_train = binio::read_u64(in, "m_train");
  cfg.seed = binio::read_u64(in, "seed");
  EmbeddingModel model = EmbeddingModel::zeros(cfg);
  const auto count = model.parameter_count();
  if (binio::remaining(in) < 4 * std::uint64_t{count}) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint parameter block is truncated");
  }
  std::vector<double> params(count);
  for (auto& p : params) p = binio::read_f32(in, "parameter");
  model.set_parameters(params);
  model.meta().m_train = m_train;
  model.meta().seed = cfg.seed;
  return model;
}

void save_checkpoint(const EmbeddingModel& model, const std::filesystem::path& path) {
  auto out = binio::open_for_write(path);
  write_checkpoint(out, model);
}

EmbeddingModel load_checkpoint(const std::filesystem::path& path) {
  auto in = binio::open_for_read(path);
  return read_checkpoint(in);
}

}  // namespace tlab

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "transferlab/attack.hpp"
#include "transferlab/augment.hpp"
#include "transferlab/config.hpp"
#include "transferlab/data.hpp"
#include "transferlab/errors.hpp"
#include "transferlab/eval.hpp"
#include "transferlab/model.hpp"
#include "transferlab/nll.hpp"
#include "transferlab/pipeline.hpp"

namespace py = pybind11;
using namespace tlab;

namespace {

// Images as rows, labels alongside.
std::pair<Mat, std::vector<Identity>> dataset_arrays(const Dataset& ds) {
  Mat images(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(ds.dim()));
  std::vector<Identity> labels;
  labels.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    images.row(static_cast<Eigen::Index>(i)) = ds.samples[i].image.transpose();
    labels.push_back(ds.samples[i].identity);
  }
  return {images, labels};
}

Dataset dataset_from_arrays(const Mat& images, const std::vector<Identity>& labels) {
  if (static_cast<std::size_t>(images.rows()) != labels.size()) {
    throw DimensionMismatch("one label per image row is required");
  }
  Dataset ds;
  for (Eigen::Index i = 0; i < images.rows(); ++i) {
    ds.samples.push_back({images.row(i).transpose(), labels[static_cast<std::size_t>(i)]});
    ds.num_identities = std::max(ds.num_identities, labels[static_cast<std::size_t>(i)] + 1);
  }
  return ds;
}

std::vector<const EmbeddingModel*> pointers(const std::vector<EmbeddingModel>& models) {
  std::vector<const EmbeddingModel*> out;
  for (const auto& m : models) out.push_back(&m);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Compiled core of transferlab";

  py::register_exception<Error>(m, "TransferlabError", PyExc_RuntimeError);

  m.def("cosine", &cosine, py::arg("u"), py::arg("v"));
  m.def("cosine_gradient", &cosine_gradient, py::arg("x"), py::arg("ref"));
  m.def("softmax", &softmax, py::arg("logits"));

  m.def(
      "gen_synthetic",
      [](std::uint64_t seed, std::uint32_t identities, std::uint32_t per_identity, std::uint32_t side) {
        return dataset_arrays(gen_synthetic(seed, identities, per_identity, side));
      },
      py::arg("seed"), py::arg("identities"), py::arg("per_identity"), py::arg("image_side") = 12,
      "Seeded synthetic gallery as (images[n, d], labels[n]).");

  py::class_<EmbeddingModel>(m, "Model")
      .def(py::init([](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t embed,
                       std::size_t classes, std::uint64_t seed) {
             return EmbeddingModel(ModelConfig{input_dim, std::move(hidden), embed, classes, seed});
           }),
           py::arg("input_dim"), py::arg("hidden"), py::arg("embed_dim"), py::arg("num_classes"),
           py::arg("seed") = 0)
      .def_property_readonly("input_dim", &EmbeddingModel::input_dim)
      .def_property_readonly("embed_dim", &EmbeddingModel::embed_dim)
      .def_property_readonly("num_classes", &EmbeddingModel::num_classes)
      .def_property_readonly("m_train", [](const EmbeddingModel& mo) { return mo.meta().m_train; })
      .def("representation", &EmbeddingModel::representation, py::arg("x"))
      .def("logits", &EmbeddingModel::logits, py::arg("x"))
      .def("probabilities", &EmbeddingModel::probabilities, py::arg("x"))
      .def("predict", &EmbeddingModel::predict, py::arg("x"))
      .def("parameters", &EmbeddingModel::parameters)
      .def(
          "train",
          [](const EmbeddingModel& mo, const Mat& images, const std::vector<Identity>& labels, double lr,
             std::uint32_t epochs, std::size_t batch, std::uint64_t seed) {
            auto out = train_softmax(mo, dataset_from_arrays(images, labels), TrainHyper{lr, epochs, batch, seed});
            return py::make_tuple(std::move(out.model), out.epoch_loss);
          },
          py::arg("images"), py::arg("labels"), py::arg("lr") = 0.05, py::arg("epochs") = 20,
          py::arg("batch") = 32, py::arg("seed") = 0, "Returns (trained model, per-epoch loss).")
      .def(
          "accuracy",
          [](const EmbeddingModel& mo, const Mat& images, const std::vector<Identity>& labels) {
            return accuracy(mo, dataset_from_arrays(images, labels));
          },
          py::arg("images"), py::arg("labels"))
      .def("save", [](const EmbeddingModel& mo, const std::filesystem::path& p) { save_checkpoint(mo, p); })
      .def_static("load", &load_checkpoint, py::arg("path"));

  m.def(
      "measure_nll_curve",
      [](const EmbeddingModel& model, const Mat& a, const Mat& b, int steps) {
        if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionMismatch("endpoint arrays differ in shape");
        std::vector<ImagePair> pairs;
        for (Eigen::Index i = 0; i < a.rows(); ++i) pairs.push_back({a.row(i).transpose(), b.row(i).transpose()});
        const auto c = measure_nll_curve(model, pairs, steps);
        py::dict d;
        d["k"] = c.k_grid;
        d["mean_cosine"] = c.mean_cosine;
        d["l2_norm"] = c.l2_norm;
        d["xi"] = c.xi;
        return d;
      },
      py::arg("model"), py::arg("a"), py::arg("b"), py::arg("steps") = 100);

  m.def("f_star_a", &f_star_a, py::arg("lam"), py::arg("beta") = 4.5);
  m.def(
      "fit_beta",
      [](const std::vector<double>& lambdas, const std::vector<double>& observed) {
        return fit_beta(std::span<const double>(lambdas), std::span<const double>(observed));
      },
      py::arg("lambdas"), py::arg("observed"));
  m.def("l_tri", py::overload_cast<const Vec&, const Vec&, const Vec&, double>(&l_tri), py::arg("r_interp"),
        py::arg("r_a"), py::arg("r_b"), py::arg("lam"));
  m.def("l_soft", py::overload_cast<const Vec&, double, Identity, Identity, double>(&l_soft),
        py::arg("probabilities"), py::arg("lam"), py::arg("a"), py::arg("b"), py::arg("beta") = 4.5);

  m.def(
      "augment",
      [](const Mat& images, const std::vector<Identity>& labels, Identity subject, Identity victim,
         std::uint32_t m_per_pair, std::uint64_t seed) {
        const auto aug = augment_dataset(dataset_from_arrays(images, labels), PoiPair{subject, victim},
                                         AugmentOptions{m_per_pair, seed, std::nullopt});
        std::vector<std::uint32_t> ia, ib;
        std::vector<double> lam;
        for (const auto& t : aug.tuples) {
          ia.push_back(t.index_a);
          ib.push_back(t.index_b);
          lam.push_back(t.lambda);
        }
        return py::make_tuple(ia, ib, lam);
      },
      py::arg("images"), py::arg("labels"), py::arg("subject"), py::arg("victim"), py::arg("m") = 10,
      py::arg("seed") = 0, "Returns (index_a, index_b, lambda) for every synthesized point.");

  m.def(
      "finetune_nll",
      [](const EmbeddingModel& model, const Mat& images, const std::vector<Identity>& labels, Identity subject,
         Identity victim, double beta, double lr, std::uint32_t epochs, std::uint64_t seed) {
        const auto aug = augment_dataset(dataset_from_arrays(images, labels), PoiPair{subject, victim},
                                         AugmentOptions{10, seed, std::nullopt});
        NllConfig cfg;
        cfg.beta = beta;
        cfg.lr = lr;
        cfg.epochs = epochs;
        cfg.seed = seed;
        auto out = finetune_nll(model, aug, cfg);
        return py::make_tuple(std::move(out.model), out.epoch_objective);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("subject"), py::arg("victim"),
      py::arg("beta") = 4.5, py::arg("lr") = 0.01, py::arg("epochs") = 5, py::arg("seed") = 0);

  m.def(
      "cw_objective_f",
      [](const Vec& logits, const std::string& mode, Identity label, double kappa) {
        return cw_objective_f(logits, parse_attack_mode(mode), label, kappa);
      },
      py::arg("logits"), py::arg("mode"), py::arg("label"), py::arg("kappa") = 20.0);

  m.def(
      "assemble_gradients",
      [](const Mat& gradients, const Vec& alpha) {
        const auto g = assemble_from_gradients(gradients, alpha);
        py::dict d;
        d["assembled"] = g.assembled;
        d["p"] = g.p;
        d["q"] = g.q;
        d["max_p"] = g.max_p;
        d["clipped"] = g.clipped;
        d["aligned"] = g.aligned;
        return d;
      },
      py::arg("gradients"), py::arg("alpha"), "Columns of `gradients` are per-model gradients.");

  m.def(
      "attack",
      [](const std::vector<EmbeddingModel>& models, const Vec& x, const std::string& mode, Identity label,
         const std::string& method, std::optional<Vec> target_image, double c, double kappa, double lr,
         std::uint32_t iterations, std::optional<double> gamma, std::optional<std::vector<bool>> mask) {
        AttackSpec spec;
        spec.mode = parse_attack_mode(mode);
        spec.method = parse_attack_method(method);
        spec.subject_image = x;
        spec.owner = label;
        spec.victim = label;
        if (target_image) spec.target_image = *target_image;
        spec.c = c;
        spec.kappa = kappa;
        spec.lr = lr;
        spec.theta_iters = iterations;
        spec.gamma = gamma;
        spec.region_mask = std::move(mask);
        const auto ptrs = pointers(models);
        const auto r = spec.region_mask ? region_restricted_attack(ptrs, spec) : run_attack(ptrs, spec);
        py::dict d;
        d["adversarial"] = r.adversarial;
        d["l2"] = r.l2;
        d["steps"] = r.steps;
        d["mean_cosine"] = r.mean_cosine;
        d["substitute_success"] = r.substitute_success;
        d["failure_reason"] = r.failure_reason;
        return d;
      },
      py::arg("models"), py::arg("x"), py::arg("mode"), py::arg("label"), py::arg("method") = "cw",
      py::arg("target_image") = py::none(), py::arg("c") = 20.0, py::arg("kappa") = 20.0, py::arg("lr") = 0.01,
      py::arg("iterations") = 1000, py::arg("gamma") = py::none(), py::arg("mask") = py::none(),
      "Dodging moves x away from `label`; impersonation moves it into `label`.");

  m.def("normal_cdf", &normal_cdf, py::arg("z"));
  m.def(
      "predict_transferability",
      [](double observed, double mean_shift, double variance, const std::string& mode) {
        return predict_transferability(observed, mean_shift, variance, parse_attack_mode(mode));
      },
      py::arg("observed"), py::arg("mean_shift"), py::arg("variance"), py::arg("mode"));

  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config_text, const std::filesystem::path& out,
         std::size_t workers) {
        const auto cfg = ExperimentConfig::from_config(Config::parse(config_text));
        const StageOptions opts{out, workers};
        py::gil_scoped_release release;
        if (stage == "gen-data") return cmd_gen_data(cfg, opts);
        if (stage == "train") return cmd_train(cfg, opts);
        if (stage == "finetune-nll") return cmd_finetune_nll(cfg, opts);
        if (stage == "measure-nll") return cmd_measure_nll(cfg, opts);
        if (stage == "attack") return cmd_attack(cfg, opts);
        if (stage == "evaluate") return cmd_evaluate(cfg, opts);
        if (stage == "predict-transfer") return cmd_predict_transfer(cfg, opts);
        throw InvalidArgument("unknown stage '" + stage + "'");
      },
      py::arg("stage"), py::arg("config_text"), py::arg("out"), py::arg("workers") = 1,
      "Run one pipeline stage with a `key = value` configuration.");
}

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "transferlab/errors.hpp"
#include "transferlab/pipeline.hpp"

using namespace tlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "seed = 5\n"
    "data.image_side = 6\n"
    "data.identities = 24\n"
    "data.per_identity = 20\n"
    "data.pois = 4\n"
    "data.substitutes = 2\n"
    "model.hidden = 16\n"
    "model.embed = 8\n"
    "train.target.epochs = 5\n"
    "train.substitute.epochs = 5\n"
    "nll.epochs = 1\n"
    "nll.total_synthesized = 40\n"
    "nll.pairs = 20\n"
    "attack.count = 6\n"
    "attack.iterations = 40\n"
    "attack.lr = 0.05\n"
    "eval.verifier_pairs = 200\n"
    "predict.levels = 5, 7, 9\n"
    "predict.pairs = 100\n";

ExperimentConfig tiny(const std::string& overrides = "") {
  auto cfg = Config::parse(kTiny);
  const auto extra = Config::parse(overrides);
  for (const auto& [key, value] : extra.entries()) cfg.set(key, value);
  return ExperimentConfig::from_config(cfg);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void run_all(const ExperimentConfig& cfg, const StageOptions& opts) {
  cmd_gen_data(cfg, opts);
  cmd_train(cfg, opts);
  cmd_finetune_nll(cfg, opts);
  cmd_measure_nll(cfg, opts);
  cmd_attack(cfg, opts);
  cmd_evaluate(cfg, opts);
  cmd_predict_transfer(cfg, opts);
}

}  // namespace

TEST_CASE("experiment config defaults, overrides and errors") {
  const auto def = ExperimentConfig::from_config(Config{});
  CHECK(def.attack.c == 20.0);
  CHECK(def.attack.kappa == 20.0);
  CHECK(def.attack.theta_iters == 1000);
  CHECK(def.attack.delta_max == 50);
  CHECK(def.attack.cosine_stop == 0.8);
  CHECK(def.criteria.theta == 20.0);
  CHECK_FALSE(def.attack.gamma.has_value());

  const auto cfg = tiny("attack.mode = impersonate\nattack.gamma = 1.5\n");
  CHECK(cfg.attack.mode == AttackMode::Impersonate);
  CHECK(*cfg.attack.gamma == 1.5);
  CHECK(cfg.hidden == std::vector<std::size_t>{16});
  CHECK(cfg.config_hash.size() == 16);

  CHECK_THROWS_AS(tiny("bogus.key = 1\n"), ConfigError);
  CHECK_THROWS_AS(tiny("attack.mode = steal\n"), ConfigError);
  CHECK_THROWS_AS(tiny("attack.method = constrained\n"), ConfigError);
  CHECK_THROWS_AS(tiny("attack.c = 0\n"), ConfigError);
  CHECK_THROWS_AS(tiny("nll.beta = -1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_config(Config::parse("data.pois = 30\ndata.identities = 30\n")), ConfigError);
  for (const auto& key : ExperimentConfig::known_keys()) CHECK(key.find(' ') == std::string::npos);
}

TEST_CASE("derived seeds and attack pairs") {
  CHECK(derive_seed(1, "gallery") == derive_seed(1, "gallery"));
  CHECK(derive_seed(1, "gallery") != derive_seed(2, "gallery"));
  CHECK(derive_seed(1, "gallery") != derive_seed(1, "split"));
  auto cfg = tiny();
  CHECK(attack_pairs(cfg).size() == 4);
  for (const auto& p : attack_pairs(cfg)) CHECK(p.subject == p.victim);
  cfg.attack.mode = AttackMode::Impersonate;
  const auto imp = attack_pairs(cfg);
  REQUIRE(imp.size() == 2);
  CHECK(imp[1].subject == 2);
  CHECK(imp[1].victim == 3);
}

TEST_CASE("stage tags and checkpoint names") {
  CHECK_NOTHROW(require_stage_tag("out/sub0.base.exmd", "base"));
  CHECK_THROWS_AS(require_stage_tag("out/sub0.nll.o1-t2.exmd", "base"), InvalidArgument);
  CHECK(nll_checkpoint_name(1, PoiPair{2, 3}) == "sub1.nll.o2-t3.exmd");
}

TEST_CASE("missing output directory is an error") {
  StageOptions opts{"/nonexistent/transferlab/out", 1};
  CHECK_THROWS_AS(cmd_gen_data(tiny(), opts), FormatError);
}

TEST_CASE("gen-data is reproducible to the byte") {
  testing::TempDir a("pipe_a"), b("pipe_b");
  const auto cfg = tiny();
  cmd_gen_data(cfg, {a.path, 1});
  cmd_gen_data(cfg, {b.path, 1});
  for (const char* f : {"gallery.exds", "target.exds", "substitute_0.exds", "substitute_1.exds"}) {
    CHECK(fnv1a64(slurp(a.path / f)) == fnv1a64(slurp(b.path / f)));
  }
  const auto manifest = read_json(a.path / "manifest.json");
  CHECK(manifest.dump().find(cfg.config_hash) != std::string::npos);
  CHECK(fs::exists(a.path / "timings.log"));
}

TEST_CASE("full run: outputs, recount and thread independence") {
  testing::TempDir one("pipe_one"), many("pipe_many");
  const auto cfg = tiny();
  run_all(cfg, {one.path, 1});
  run_all(cfg, {many.path, 3});

  CHECK(slurp(one.path / "attack_results.jsonl") == slurp(many.path / "attack_results.jsonl"));
  CHECK(fnv1a64(slurp(one.path / "adversarial.exds")) == fnv1a64(slurp(many.path / "adversarial.exds")));

  // Independent recount of the per-instance lines against both summaries.
  std::istringstream lines(slurp(one.path / "attack_results.jsonl"));
  std::map<std::string, std::size_t> counts;
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line);) {
    const auto j = json::parse(line);
    ++n;
    for (const auto& [name, ok] : j.at("per_target_success").items()) counts[name] += ok.get<bool>();
    if (!j.at("failure_reason").is_null()) {
      for (const auto& [name, ok] : j.at("per_target_success").items()) CHECK_FALSE(ok.get<bool>());
    }
  }
  CHECK(n == 6);
  const auto report = read_json(one.path / "transfer_report.json");
  const auto eval = read_json(one.path / "evaluation.json");
  for (const auto& [name, count] : counts) {
    CHECK(report.at("successes").at(name).get<std::size_t>() == count);
    CHECK(eval.at("recount_successes").at(name).get<std::size_t>() == count);
    CHECK(report.at("rates").at(name).get<double>() == doctest::Approx(static_cast<double>(count) / n));
  }
  CHECK(eval.at("target_rate_recomputed").get<double>() == doctest::Approx(report.at("rates").at("target").get<double>()));

  // NLL curve: header plus 101 grid rows, xi non-negative.
  const auto curve = slurp(one.path / "nll_curve_target.base.csv");
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 102);
  const auto summary = read_json(one.path / "nll_summary.json");
  CHECK(summary.size() == 5);
  for (const auto& [name, entry] : summary.items()) CHECK(entry.at("xi").get<double>() >= 0.0);
  CHECK(fs::exists(one.path / nll_checkpoint_name(1, PoiPair{3, 3})));

  // Prediction file delegates to the fitted curves.
  const auto pred = read_json(one.path / "predictions.json");
  CHECK(pred.at("instances").size() == 6);
  for (const auto& inst : pred.at("instances")) {
    const double p = inst.at("probability").get<double>();
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  const auto csv = slurp(one.path / "loss_curves.csv");
  CHECK(csv.rfind("m, mu, sigma, mu_fit, sigma_fit\n", 0) == 0);
}

TEST_CASE("fine-tuning refuses checkpoints without the base tag") {
  testing::TempDir dir("pipe_tag");
  auto cfg = tiny();
  cmd_gen_data(cfg, {dir.path, 1});
  cmd_train(cfg, {dir.path, 1});
  fs::copy_file(dir.path / "sub0.base.exmd", dir.path / "sub0.tuned.exmd");
  cfg.nll_checkpoints = {(dir.path / "sub0.tuned.exmd").string(), (dir.path / "sub1.base.exmd").string()};
  CHECK_THROWS_AS(cmd_finetune_nll(cfg, {dir.path, 1}), InvalidArgument);
}

TEST_CASE("an empty attack set gives zero rates") {
  testing::TempDir dir("pipe_empty");
  const auto cfg = tiny("attack.count = 0\n");
  cmd_gen_data(cfg, {dir.path, 1});
  cmd_train(cfg, {dir.path, 1});
  cmd_attack(cfg, {dir.path, 1});
  cmd_evaluate(cfg, {dir.path, 1});
  CHECK(slurp(dir.path / "attack_results.jsonl").empty());
  const auto report = read_json(dir.path / "transfer_report.json");
  CHECK(report.at("instances").get<std::size_t>() == 0);
  CHECK(report.at("rates").at("target").get<double>() == 0.0);
}

TEST_CASE("impersonation with the assembled search runs end to end") {
  testing::TempDir dir("pipe_imp");
  const auto cfg = tiny("attack.mode = impersonate\nattack.method = search\nattack.delta_max = 2\nattack.iterations = 10\n");
  cmd_gen_data(cfg, {dir.path, 1});
  cmd_train(cfg, {dir.path, 1});
  cmd_attack(cfg, {dir.path, 1});
  std::istringstream lines(slurp(dir.path / "attack_results.jsonl"));
  for (std::string line; std::getline(lines, line);) {
    const auto j = json::parse(line);
    CHECK(j.at("mode") == "impersonate");
    CHECK(j.at("subject_id") != j.at("victim_id"));
  }
}

#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "transferlab/config.hpp"
#include "transferlab/errors.hpp"
#include "transferlab/pipeline.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Flags {
  std::string config;
  std::string out;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
};

using Stage = std::function<void(const tlab::ExperimentConfig&, const tlab::StageOptions&)>;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transferlab: black-box transferability experiments on small embedding models"};
  app.require_subcommand(1);

  const std::map<std::string, std::pair<std::string, Stage>> stages{
      {"gen-data", {"generate the synthetic gallery and its target/substitute split", tlab::cmd_gen_data}},
      {"train", {"train the target and the substitute models", tlab::cmd_train}},
      {"finetune-nll", {"fine-tune substitutes on subject-oriented interpolations", tlab::cmd_finetune_nll}},
      {"measure-nll", {"measure interpolation curves, xi and the fitted beta", tlab::cmd_measure_nll}},
      {"attack", {"run the attack set against the substitutes and score every target", tlab::cmd_attack}},
      {"evaluate", {"recount results and score them with a calibrated verifier", tlab::cmd_evaluate}},
      {"predict-transfer", {"fit cosine-loss curves and predict transfer rates", tlab::cmd_predict_transfer}},
  };

  Flags flags;
  std::map<CLI::App*, const Stage*> dispatch;
  for (const auto& [name, entry] : stages) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", flags.config, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", flags.out, "output directory (must exist)")->required();
    sub->add_option("--workers", flags.workers, "attack worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", flags.seed, "base seed; overrides the `seed` key");
    dispatch[sub] = &entry.second;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  tlab::ExperimentConfig cfg;
  try {
    tlab::Config config = flags.config.empty() ? tlab::Config{} : tlab::Config::load(flags.config);
    if (flags.seed) config.set("seed", std::to_string(*flags.seed));
    cfg = tlab::ExperimentConfig::from_config(config);
  } catch (const tlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    for (const auto& [sub, stage] : dispatch) {
      if (sub->parsed()) (*stage)(cfg, tlab::StageOptions{flags.out, flags.workers});
    }
  } catch (const tlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "transferlab/attack.hpp"
#include "transferlab/config.hpp"
#include "transferlab/data.hpp"
#include "transferlab/eval.hpp"
#include "transferlab/model.hpp"
#include "transferlab/nll.hpp"

namespace tlab {

/// Typed view of a Config. Every key is listed in README.md; `seed` feeds every stage
/// through derive_seed().
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::uint32_t image_side = 12;
  std::uint32_t identities = 1280;
  std::uint32_t per_identity = 20;
  std::uint32_t pois = 10;
  double target_fraction = 0.5;
  std::uint32_t substitutes = 4;
  std::uint32_t target_identities = 0;      // 0 keeps the whole target part
  std::uint32_t substitute_identities = 0;  // 0 keeps each whole substitute part

  std::vector<std::size_t> hidden{64};
  std::size_t embed = 32;
  TrainHyper target_train{0.2, 20, 32, 0};
  TrainHyper substitute_train{0.2, 20, 32, 0};

  NllConfig nll;
  std::optional<std::size_t> nll_total;
  std::vector<std::string> nll_checkpoints;  // empty = sub{k}.base.exmd in the output directory
  std::size_t nll_pairs = 200;

  AttackSpec attack;  // budget template; images and labels are filled per instance
  std::size_t attack_count = 50;
  bool attack_use_nll = false;

  SuccessCriteria criteria;
  std::size_t verifier_pairs = 2000;

  std::vector<std::size_t> predict_levels{20, 40, 80};
  std::size_t predict_pairs = 2000;

  std::string config_hash;

  static ExperimentConfig from_config(const Config& config);
  static const std::set<std::string, std::less<>>& known_keys();
  ModelConfig model_config(const Dataset& dataset, std::uint64_t init_seed) const;
};

/// splitmix64 of base ^ fnv1a64(tag).
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

/// Gallery identities 0..pois-1 are the points of interest.
std::vector<Identity> poi_identities(const ExperimentConfig& cfg);

/// Dodging uses (o, o) for every PoI; impersonation pairs PoIs (2i, 2i+1).
std::vector<PoiPair> attack_pairs(const ExperimentConfig& cfg);

Dataset make_gallery(const ExperimentConfig& cfg);
DatasetSplit make_split(const ExperimentConfig& cfg, const Dataset& gallery);

EmbeddingModel train_role(const ExperimentConfig& cfg, const Dataset& dataset, const TrainHyper& hyper,
                          std::string_view role);

/// Subject-oriented augmentation of `dataset` for `pair`, then NLL fine-tuning of `base`.
EmbeddingModel finetune_for_pair(const ExperimentConfig& cfg, const EmbeddingModel& base, const Dataset& dataset,
                                 PoiPair pair, std::string_view role);

struct NamedModel {
  std::string name;
  const EmbeddingModel* model = nullptr;
};

/// Substitutes to attack with for a given PoI pair.
using SubstituteLookup = std::function<std::vector<const EmbeddingModel*>(PoiPair)>;

struct InstanceRecord {
  std::size_t index = 0;
  AttackInstance instance;
  AttackResult result;
};

/// Runs every instance on `workers` threads; instance i uses seed base_seed ^ i. Results come
/// back in instance order regardless of scheduling. Each result carries success flags for
/// every named target (false for failed attacks). `attacker_data` supplies the nearby
/// other-identity image used as the dodging goal of the assembled search.
std::vector<InstanceRecord> run_attack_set(const ExperimentConfig& cfg, const Dataset& attack_data,
                                           const Dataset& attacker_data,
                                           std::span<const AttackInstance> instances,
                                           const SubstituteLookup& substitutes,
                                           std::span<const NamedModel> targets, std::size_t workers,
                                           std::uint64_t base_seed);

/// JSON line for one instance.
std::string instance_json(const InstanceRecord& record, const Dataset& attack_data, AttackMode mode);

/// Stage entry points. Each writes into `out`, updates out/manifest.json and appends
/// wall-clock timings to out/timings.log.
struct StageOptions {
  std::filesystem::path out;
  std::size_t workers = 1;
};

void cmd_gen_data(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_train(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_finetune_nll(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_measure_nll(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_attack(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_evaluate(const ExperimentConfig& cfg, const StageOptions& opts);
void cmd_predict_transfer(const ExperimentConfig& cfg, const StageOptions& opts);

/// Throws InvalidArgument unless the checkpoint file name carries the given stage tag
/// (e.g. "sub0.base.exmd" has tag "base").
void require_stage_tag(const std::filesystem::path& checkpoint, std::string_view tag);

std::string nll_checkpoint_name(std::size_t substitute, PoiPair pair);

}  // namespace tlab

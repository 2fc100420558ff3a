#include "transferlab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "transferlab/augment.hpp"
#include "transferlab/errors.hpp"

namespace tlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    out.push_back(item.substr(first, last - first + 1));
  }
  return out;
}

std::uint32_t get_u32(const Config& c, std::string_view key, std::uint32_t fallback) {
  const auto v = c.get_u64(key, fallback);
  if (v > 0xffffffffULL) throw ConfigError("config key '" + std::string(key) + "' is out of range");
  return static_cast<std::uint32_t>(v);
}

TrainHyper read_hyper(const Config& c, const std::string& prefix, TrainHyper base) {
  base.lr = c.get_double(prefix + ".lr", base.lr);
  base.epochs = get_u32(c, prefix + ".epochs", base.epochs);
  base.batch = c.get_u64(prefix + ".batch", base.batch);
  if (!(base.lr > 0.0)) throw ConfigError(prefix + ".lr must be > 0");
  if (base.batch == 0) throw ConfigError(prefix + ".batch must be >= 1");
  return base;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + path.string());
}

void require_out_dir(const fs::path& out) {
  if (out.empty() || !fs::is_directory(out)) {
    throw FormatError(FormatError::Kind::Io, "output directory does not exist: " + out.string());
  }
}

// Records artifacts and seeds of one stage and appends its wall-clock time to timings.log.
class StageLog {
 public:
  StageLog(const ExperimentConfig& cfg, const StageOptions& opts, std::string name)
      : cfg_(cfg), out_(opts.out), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {
    require_out_dir(out_);
  }

  void artifact(const std::string& file) { artifacts_.push_back(file); }
  void seed(const std::string& tag, std::uint64_t value) { seeds_[tag] = value; }

  void finish() {
    json manifest = json::object();
    const auto path = out_ / "manifest.json";
    if (fs::exists(path)) manifest = json::parse(read_text(path));
    manifest["config_hash"] = cfg_.config_hash;
    manifest["seed"] = cfg_.seed;
    json stage;
    stage["config_hash"] = cfg_.config_hash;
    stage["seeds"] = seeds_;
    json files = json::array();
    for (const auto& f : artifacts_) {
      files.push_back({{"file", f}, {"fnv1a64", hex64(fnv1a64(read_text(out_ / f)))}});
    }
    stage["artifacts"] = files;
    manifest["stages"][name_] = stage;
    write_text(path, manifest.dump(2) + "\n");

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    std::ofstream log(out_ / "timings.log", std::ios::app);
    char line[160];
    std::snprintf(line, sizeof line, "%s stage=%s seconds=%.3f\n", stamp, name_.c_str(), seconds);
    log << line;
  }

 private:
  const ExperimentConfig& cfg_;
  fs::path out_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> artifacts_;
  std::map<std::string, std::uint64_t> seeds_;
};

std::string substitute_data_name(std::size_t k) { return "substitute_" + std::to_string(k) + ".exds"; }
std::string substitute_base_name(std::size_t k) { return "sub" + std::to_string(k) + ".base.exmd"; }

std::vector<fs::path> base_checkpoints(const ExperimentConfig& cfg, const fs::path& out) {
  std::vector<fs::path> paths;
  if (!cfg.nll_checkpoints.empty()) {
    for (const auto& p : cfg.nll_checkpoints) paths.push_back(fs::path(p).is_absolute() ? fs::path(p) : out / p);
  } else {
    for (std::size_t k = 0; k < cfg.substitutes; ++k) paths.push_back(out / substitute_base_name(k));
  }
  return paths;
}

json result_json(const AttackResult& r) {
  json flags = json::object();
  for (const auto& [name, ok] : r.target_success) flags[name] = ok;
  return flags;
}

std::vector<json> read_json_lines(const fs::path& path) {
  std::vector<json> out;
  std::stringstream ss(read_text(path));
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace

const std::set<std::string, std::less<>>& ExperimentConfig::known_keys() {
  static const std::set<std::string, std::less<>> keys{
      "seed",
      "data.image_side",
      "data.identities",
      "data.per_identity",
      "data.pois",
      "data.target_fraction",
      "data.substitutes",
      "data.target_identities",
      "data.substitute_identities",
      "model.hidden",
      "model.embed",
      "train.target.lr",
      "train.target.epochs",
      "train.target.batch",
      "train.substitute.lr",
      "train.substitute.epochs",
      "train.substitute.batch",
      "nll.beta",
      "nll.m",
      "nll.lr",
      "nll.epochs",
      "nll.batch",
      "nll.freeze_classifier",
      "nll.total_synthesized",
      "nll.checkpoints",
      "nll.pairs",
      "attack.mode",
      "attack.method",
      "attack.count",
      "attack.c",
      "attack.kappa",
      "attack.lr",
      "attack.iterations",
      "attack.delta_max",
      "attack.cosine_stop",
      "attack.gamma",
      "attack.use_nll",
      "eval.theta",
      "eval.verifier_pairs",
      "predict.levels",
      "predict.pairs",
  };
  return keys;
}

ExperimentConfig ExperimentConfig::from_config(const Config& c) {
  c.reject_unknown(known_keys());
  ExperimentConfig cfg;
  cfg.seed = c.get_u64("seed", cfg.seed);
  cfg.image_side = get_u32(c, "data.image_side", cfg.image_side);
  cfg.identities = get_u32(c, "data.identities", cfg.identities);
  cfg.per_identity = get_u32(c, "data.per_identity", cfg.per_identity);
  cfg.pois = get_u32(c, "data.pois", cfg.pois);
  cfg.target_fraction = c.get_double("data.target_fraction", cfg.target_fraction);
  cfg.substitutes = get_u32(c, "data.substitutes", cfg.substitutes);
  cfg.target_identities = get_u32(c, "data.target_identities", cfg.target_identities);
  cfg.substitute_identities = get_u32(c, "data.substitute_identities", cfg.substitute_identities);
  if (cfg.image_side < 4) throw ConfigError("data.image_side must be >= 4");
  if (cfg.substitutes == 0) throw ConfigError("data.substitutes must be >= 1");
  if (cfg.pois < 2) throw ConfigError("data.pois must be >= 2");
  if (cfg.pois >= cfg.identities) throw ConfigError("data.pois must be smaller than data.identities");

  cfg.hidden = c.get_size_list("model.hidden", cfg.hidden);
  cfg.embed = c.get_u64("model.embed", cfg.embed);
  if (cfg.embed == 0) throw ConfigError("model.embed must be >= 1");
  for (auto h : cfg.hidden) {
    if (h == 0) throw ConfigError("model.hidden entries must be >= 1");
  }
  cfg.target_train = read_hyper(c, "train.target", cfg.target_train);
  cfg.substitute_train = read_hyper(c, "train.substitute", cfg.substitute_train);

  cfg.nll.beta = c.get_double("nll.beta", cfg.nll.beta);
  cfg.nll.m_per_pair = get_u32(c, "nll.m", cfg.nll.m_per_pair);
  cfg.nll.lr = c.get_double("nll.lr", cfg.nll.lr);
  cfg.nll.epochs = get_u32(c, "nll.epochs", cfg.nll.epochs);
  cfg.nll.batch = c.get_u64("nll.batch", cfg.nll.batch);
  cfg.nll.freeze_classifier = c.get_bool("nll.freeze_classifier", cfg.nll.freeze_classifier);
  if (c.has("nll.total_synthesized")) cfg.nll_total = c.get_u64("nll.total_synthesized", 0);
  cfg.nll_checkpoints = split_list(c.get_string("nll.checkpoints", ""));
  cfg.nll_pairs = c.get_u64("nll.pairs", cfg.nll_pairs);
  if (!(cfg.nll.beta > 0.0)) throw ConfigError("nll.beta must be > 0");
  if (cfg.nll.m_per_pair == 0) throw ConfigError("nll.m must be >= 1");
  if (cfg.nll.batch == 0) throw ConfigError("nll.batch must be >= 1");

  try {
    cfg.attack.mode = parse_attack_mode(c.get_string("attack.mode", "dodge"));
    cfg.attack.method = parse_attack_method(c.get_string("attack.method", "cw"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  cfg.attack_count = c.get_u64("attack.count", cfg.attack_count);
  cfg.attack.c = c.get_double("attack.c", cfg.attack.c);
  cfg.attack.kappa = c.get_double("attack.kappa", cfg.attack.kappa);
  cfg.attack.lr = c.get_double("attack.lr", cfg.attack.lr);
  cfg.attack.theta_iters = get_u32(c, "attack.iterations", cfg.attack.theta_iters);
  cfg.attack.delta_max = get_u32(c, "attack.delta_max", cfg.attack.delta_max);
  cfg.attack.cosine_stop = c.get_double("attack.cosine_stop", cfg.attack.cosine_stop);
  cfg.attack.gamma = c.get_optional_double("attack.gamma");
  cfg.attack_use_nll = c.get_bool("attack.use_nll", cfg.attack_use_nll);
  if (!(cfg.attack.c > 0.0)) throw ConfigError("attack.c must be > 0");
  if (!(cfg.attack.kappa >= 0.0)) throw ConfigError("attack.kappa must be >= 0");
  if (!(cfg.attack.lr > 0.0)) throw ConfigError("attack.lr must be > 0");
  if (cfg.attack.theta_iters == 0) throw ConfigError("attack.iterations must be >= 1");
  if (cfg.attack.delta_max == 0) throw ConfigError("attack.delta_max must be >= 1");
  if (cfg.attack.gamma && !(*cfg.attack.gamma > 0.0)) throw ConfigError("attack.gamma must be > 0");
  if (cfg.attack.method == AttackMethod::DistanceConstrained && !cfg.attack.gamma) {
    throw ConfigError("attack.method = constrained needs attack.gamma");
  }

  cfg.criteria.theta = c.get_double("eval.theta", cfg.criteria.theta);
  if (!(cfg.criteria.theta > 0.0)) throw ConfigError("eval.theta must be > 0");
  cfg.attack.theta = cfg.criteria.theta;
  cfg.verifier_pairs = c.get_u64("eval.verifier_pairs", cfg.verifier_pairs);

  cfg.predict_levels = c.get_size_list("predict.levels", cfg.predict_levels);
  cfg.predict_pairs = c.get_u64("predict.pairs", cfg.predict_pairs);

  cfg.config_hash = c.hash();
  return cfg;
}

ModelConfig ExperimentConfig::model_config(const Dataset& dataset, std::uint64_t init_seed) const {
  ModelConfig mc;
  mc.input_dim = dataset.dim();
  mc.hidden_dims = hidden;
  mc.embed_dim = embed;
  mc.num_classes = dataset.num_identities;
  mc.seed = init_seed;
  return mc;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t z = base ^ fnv1a64(tag);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Identity> poi_identities(const ExperimentConfig& cfg) {
  std::vector<Identity> ids(cfg.pois);
  for (Identity i = 0; i < cfg.pois; ++i) ids[i] = i;
  return ids;
}

std::vector<PoiPair> attack_pairs(const ExperimentConfig& cfg) {
  std::vector<PoiPair> pairs;
  if (cfg.attack.mode == AttackMode::Dodge) {
    for (Identity o = 0; o < cfg.pois; ++o) pairs.push_back({o, o});
  } else {
    for (Identity i = 0; 2 * i + 1 < cfg.pois; ++i) pairs.push_back({2 * i, 2 * i + 1});
  }
  return pairs;
}

Dataset make_gallery(const ExperimentConfig& cfg) {
  return gen_synthetic(derive_seed(cfg.seed, "gallery"), cfg.identities, cfg.per_identity, cfg.image_side);
}

DatasetSplit make_split(const ExperimentConfig& cfg, const Dataset& gallery) {
  const auto pois = poi_identities(cfg);
  auto split = split_disjoint(gallery, cfg.substitutes, cfg.target_fraction, pois, derive_seed(cfg.seed, "split"));
  if (cfg.target_identities > 0) split.target = take_identities(split.target, cfg.target_identities);
  if (cfg.substitute_identities > 0) {
    for (auto& s : split.substitutes) s = take_identities(s, cfg.substitute_identities);
  }
  return split;
}

EmbeddingModel train_role(const ExperimentConfig& cfg, const Dataset& dataset, const TrainHyper& hyper,
                          std::string_view role) {
  const std::string r(role);
  EmbeddingModel model(cfg.model_config(dataset, derive_seed(cfg.seed, r + "-init")));
  TrainHyper h = hyper;
  h.seed = derive_seed(cfg.seed, r + "-train");
  auto outcome = train_softmax(std::move(model), dataset, h);
  outcome.model.meta().seed = h.seed;
  return std::move(outcome.model);
}

EmbeddingModel finetune_for_pair(const ExperimentConfig& cfg, const EmbeddingModel& base, const Dataset& dataset,
                                 PoiPair pair, std::string_view role) {
  const std::string tag = std::string(role) + "-o" + std::to_string(pair.subject) + "-t" + std::to_string(pair.victim);
  AugmentOptions opts;
  opts.m = cfg.nll.m_per_pair;
  opts.seed = derive_seed(cfg.seed, tag + "-augment");
  opts.total_synthesized = cfg.nll_total;
  const auto aug = augment_dataset(dataset, pair, opts);
  NllConfig n = cfg.nll;
  n.seed = derive_seed(cfg.seed, tag + "-nll");
  auto outcome = finetune_nll(base, aug, n);
  return std::move(outcome.model);
}

std::vector<InstanceRecord> run_attack_set(const ExperimentConfig& cfg, const Dataset& attack_data,
                                           const Dataset& attacker_data,
                                           std::span<const AttackInstance> instances,
                                           const SubstituteLookup& substitutes,
                                           std::span<const NamedModel> targets, std::size_t workers,
                                           std::uint64_t base_seed) {
  std::vector<InstanceRecord> records(instances.size());
  auto run_one = [&](std::size_t i) {
    const auto& inst = instances[i];
    InstanceRecord& rec = records[i];
    rec.index = i;
    rec.instance = inst;
    const Vec& x_o = attack_data.samples[inst.subject_index].image;
    AttackSpec spec = cfg.attack;
    spec.subject_image = x_o;
    spec.owner = inst.subject;
    spec.victim = inst.victim;
    spec.seed = base_seed ^ static_cast<std::uint64_t>(i);
    AttackResult result;
    try {
      const auto models = substitutes(PoiPair{inst.subject, inst.victim});
      if (spec.mode == AttackMode::Impersonate) {
        spec.target_image = attack_data.samples[inst.victim_index].image;
      } else if (spec.method == AttackMethod::AssembledSearch) {
        const Identity predicted = models.front()->predict(x_o);
        spec.target_image = attacker_data.samples[nearest_other_identity(attacker_data, x_o, predicted)].image;
      }
      result = run_attack(models, spec);
    } catch (const Error& e) {
      result = AttackResult{};
      result.adversarial = x_o;
      result.l2 = 0.0;
      result.failure_reason = e.what();
    }
    for (const auto& t : targets) {
      bool ok = false;
      if (result.succeeded()) {
        ok = spec.mode == AttackMode::Dodge
                 ? dodge_success(*t.model, x_o, result.adversarial, cfg.criteria)
                 : impersonate_success(*t.model, x_o, result.adversarial, inst.victim, cfg.criteria);
      }
      result.target_success[t.name] = ok;
    }
    rec.result = std::move(result);
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, instances.size()));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < instances.size(); ++i) run_one(i);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < instances.size(); i = next++) run_one(i);
    });
  }
  for (auto& th : pool) th.join();
  return records;
}

std::string instance_json(const InstanceRecord& record, const Dataset& attack_data, AttackMode mode) {
  const auto& r = record.result;
  json j;
  j["instance"] = record.index;
  j["mode"] = std::string(to_string(mode));
  j["subject_id"] = attack_data.gallery_identity(record.instance.subject);
  j["victim_id"] = attack_data.gallery_identity(record.instance.victim);
  j["subject_index"] = record.instance.subject_index;
  j["victim_index"] = record.instance.victim_index;
  j["l2"] = r.l2;
  j["steps"] = r.steps;
  j["delta_final"] = r.delta_final;
  j["mean_cosine"] = r.mean_cosine;
  j["per_target_success"] = result_json(r);
  j["failure_reason"] = r.failure_reason ? json(*r.failure_reason) : json(nullptr);
  return j.dump();
}

void require_stage_tag(const fs::path& checkpoint, std::string_view tag) {
  const auto name = checkpoint.filename().string();
  if (name.find("." + std::string(tag) + ".") == std::string::npos) {
    throw InvalidArgument("checkpoint " + name + " does not carry the '" + std::string(tag) + "' stage tag");
  }
}

std::string nll_checkpoint_name(std::size_t substitute, PoiPair pair) {
  return "sub" + std::to_string(substitute) + ".nll.o" + std::to_string(pair.subject) + "-t" +
         std::to_string(pair.victim) + ".exmd";
}

void cmd_gen_data(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "gen-data");
  const auto gallery = make_gallery(cfg);
  const auto split = make_split(cfg, gallery);
  log.seed("gallery", derive_seed(cfg.seed, "gallery"));
  log.seed("split", derive_seed(cfg.seed, "split"));
  save_dataset(gallery, opts.out / "gallery.exds");
  log.artifact("gallery.exds");
  save_dataset(split.target, opts.out / "target.exds");
  log.artifact("target.exds");
  for (std::size_t k = 0; k < split.substitutes.size(); ++k) {
    save_dataset(split.substitutes[k], opts.out / substitute_data_name(k));
    log.artifact(substitute_data_name(k));
  }
  log.finish();
}

void cmd_train(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "train");
  json summary = json::object();
  auto train_one = [&](const std::string& data_file, const std::string& role, const TrainHyper& hyper,
                       const std::string& ckpt) {
    const auto data = load_dataset(opts.out / data_file);
    const auto model = train_role(cfg, data, hyper, role);
    save_checkpoint(model, opts.out / ckpt);
    log.artifact(ckpt);
    log.seed(role + "-init", derive_seed(cfg.seed, role + "-init"));
    log.seed(role + "-train", derive_seed(cfg.seed, role + "-train"));
    summary[ckpt] = {{"m_train", model.meta().m_train},
                     {"epochs", model.meta().epochs},
                     {"train_loss", mean_cross_entropy(model, data)},
                     {"train_accuracy", accuracy(model, data)}};
  };
  train_one("target.exds", "target", cfg.target_train, "target.base.exmd");
  for (std::size_t k = 0; k < cfg.substitutes; ++k) {
    train_one(substitute_data_name(k), "sub" + std::to_string(k), cfg.substitute_train, substitute_base_name(k));
  }
  write_text(opts.out / "training.json", summary.dump(2) + "\n");
  log.artifact("training.json");
  log.finish();
}

void cmd_finetune_nll(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "finetune-nll");
  const auto checkpoints = base_checkpoints(cfg, opts.out);
  for (const auto& p : checkpoints) require_stage_tag(p, "base");
  json summary = json::object();
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    const auto base = load_checkpoint(checkpoints[k]);
    const auto data = load_dataset(opts.out / substitute_data_name(k));
    for (const auto pair : attack_pairs(cfg)) {
      const auto model = finetune_for_pair(cfg, base, data, pair, "sub" + std::to_string(k));
      const auto name = nll_checkpoint_name(k, pair);
      save_checkpoint(model, opts.out / name);
      log.artifact(name);
      summary[name] = {{"base", checkpoints[k].filename().string()}, {"m_train", model.meta().m_train}};
    }
  }
  write_text(opts.out / "nll_finetune.json", summary.dump(2) + "\n");
  log.artifact("nll_finetune.json");
  log.finish();
}

void cmd_measure_nll(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "measure-nll");
  const auto target_data = load_dataset(opts.out / "target.exds");
  const auto pair_seed = derive_seed(cfg.seed, "nll-pairs");
  log.seed("nll-pairs", pair_seed);
  const auto pairs = sample_identity_pairs(target_data, cfg.nll_pairs, pair_seed);

  std::vector<std::pair<std::string, std::string>> models{{"target.base.exmd", "target.exds"}};
  for (std::size_t k = 0; k < cfg.substitutes; ++k) {
    models.emplace_back(substitute_base_name(k), substitute_data_name(k));
    const auto first = attack_pairs(cfg).front();
    if (fs::exists(opts.out / nll_checkpoint_name(k, first))) {
      models.emplace_back(nll_checkpoint_name(k, first), substitute_data_name(k));
    }
  }

  json summary = json::object();
  for (const auto& [ckpt, data_file] : models) {
    const auto model = load_checkpoint(opts.out / ckpt);
    const auto curve = measure_nll_curve(model, pairs);
    const auto stem = fs::path(ckpt).stem().string();
    std::string csv = "k, mean_cosine, l2_norm\n";
    for (std::size_t i = 0; i < curve.k_grid.size(); ++i) {
      char row[96];
      std::snprintf(row, sizeof row, "%d, %.9f, %.9f\n", curve.k_grid[i], curve.mean_cosine[i], curve.l2_norm[i]);
      csv += row;
    }
    const auto csv_name = "nll_curve_" + stem + ".csv";
    write_text(opts.out / csv_name, csv);
    log.artifact(csv_name);

    json entry{{"xi", curve.xi}, {"pairs", curve.num_pairs}, {"m_train", model.meta().m_train}};
    try {
      AugmentOptions aug_opts;
      aug_opts.m = cfg.nll.m_per_pair;
      aug_opts.seed = derive_seed(cfg.seed, stem + "-beta");
      aug_opts.total_synthesized = 1000;
      const auto data = load_dataset(opts.out / data_file);
      const auto aug = augment_dataset(data, attack_pairs(cfg).front(), aug_opts);
      entry["beta_hat"] = fit_beta(model, aug);
    } catch (const InvalidArgument&) {
      entry["beta_hat"] = nullptr;
    }
    summary[ckpt] = entry;
  }
  write_text(opts.out / "nll_summary.json", summary.dump(2) + "\n");
  log.artifact("nll_summary.json");
  log.finish();
}

void cmd_attack(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "attack");
  const auto target_data = load_dataset(opts.out / "target.exds");
  const auto attacker_data = load_dataset(opts.out / substitute_data_name(0));
  const auto target = load_checkpoint(opts.out / "target.base.exmd");
  std::vector<EmbeddingModel> bases;
  for (std::size_t k = 0; k < cfg.substitutes; ++k) bases.push_back(load_checkpoint(opts.out / substitute_base_name(k)));

  const auto pairs = attack_pairs(cfg);
  std::map<std::pair<Identity, Identity>, std::vector<std::unique_ptr<EmbeddingModel>>> tuned;
  if (cfg.attack_use_nll) {
    for (const auto pair : pairs) {
      auto& slot = tuned[{pair.subject, pair.victim}];
      for (std::size_t k = 0; k < cfg.substitutes; ++k) {
        slot.push_back(std::make_unique<EmbeddingModel>(load_checkpoint(opts.out / nll_checkpoint_name(k, pair))));
      }
    }
  }
  SubstituteLookup lookup = [&](PoiPair pair) {
    std::vector<const EmbeddingModel*> out;
    if (cfg.attack_use_nll) {
      for (const auto& m : tuned.at({pair.subject, pair.victim})) out.push_back(m.get());
    } else {
      for (const auto& m : bases) out.push_back(&m);
    }
    return out;
  };

  std::vector<NamedModel> targets{{"target", &target}};
  for (std::size_t k = 0; k < bases.size(); ++k) targets.push_back({"sub" + std::to_string(k), &bases[k]});

  const auto set_seed = derive_seed(cfg.seed, "attack-set");
  const auto base_seed = derive_seed(cfg.seed, "attack");
  log.seed("attack-set", set_seed);
  log.seed("attack", base_seed);
  const auto instances = pick_attack_sets(target_data, cfg.attack.mode, pairs, cfg.attack_count, set_seed);
  const auto records = run_attack_set(cfg, target_data, attacker_data, instances, lookup, targets, opts.workers,
                                      base_seed);

  std::string lines;
  Dataset adversarial;
  adversarial.num_identities = target_data.num_identities;
  std::vector<AttackResult> results;
  for (const auto& rec : records) {
    lines += instance_json(rec, target_data, cfg.attack.mode) + "\n";
    Vec img = rec.result.adversarial.cast<float>().cast<double>();
    adversarial.samples.push_back({std::move(img), rec.instance.subject});
    results.push_back(rec.result);
  }
  write_text(opts.out / "attack_results.jsonl", lines);
  log.artifact("attack_results.jsonl");
  save_dataset(adversarial, opts.out / "adversarial.exds");
  log.artifact("adversarial.exds");

  std::vector<std::string> names;
  for (const auto& t : targets) names.push_back(t.name);
  const auto report = transferability(results, names);
  json j{{"mode", std::string(to_string(cfg.attack.mode))},
         {"method", std::string(to_string(cfg.attack.method))},
         {"use_nll", cfg.attack_use_nll},
         {"instances", report.instances},
         {"attack_successes", report.attack_successes},
         {"successes", report.successes},
         {"rates", report.rates},
         {"bin_width", report.bin_width},
         {"distance_histogram", report.distance_histogram}};
  write_text(opts.out / "transfer_report.json", j.dump(2) + "\n");
  log.artifact("transfer_report.json");
  log.finish();
}

void cmd_evaluate(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "evaluate");
  const auto records = read_json_lines(opts.out / "attack_results.jsonl");
  const auto adversarial = load_dataset(opts.out / "adversarial.exds");
  const auto target_data = load_dataset(opts.out / "target.exds");
  const auto target = load_checkpoint(opts.out / "target.base.exmd");
  if (adversarial.samples.size() != records.size()) {
    throw FormatError(FormatError::Kind::Truncated, "adversarial.exds does not match attack_results.jsonl");
  }

  std::map<std::string, std::size_t> recount;
  std::size_t recomputed = 0;
  for (const auto& r : records) {
    for (const auto& [name, ok] : r.at("per_target_success").items()) recount[name] += ok.get<bool>() ? 1 : 0;
  }

  const auto pair_seed = derive_seed(cfg.seed, "verifier-pairs");
  log.seed("verifier-pairs", pair_seed);
  std::vector<double> genuine, impostor;
  for (const auto& p : sample_labeled_pairs(target_data, cfg.verifier_pairs, pair_seed)) {
    (p.same_identity ? genuine : impostor).push_back(verifier_score(target, p.a, p.b));
  }
  const auto eer = calibrate_eer(genuine, impostor);
  const VerifierThresholds thresholds{eer.threshold, eer.threshold};

  std::size_t verified = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const bool failed = !r.at("failure_reason").is_null();
    const auto subject_index = r.at("subject_index").get<std::size_t>();
    const auto victim_index = r.at("victim_index").get<std::size_t>();
    const Vec& x_o = target_data.samples.at(subject_index).image;
    const Vec& x_adv = adversarial.samples[i].image;
    const auto mode = parse_attack_mode(r.at("mode").get<std::string>());
    if (failed) continue;
    const bool ok = mode == AttackMode::Dodge
                        ? dodge_success(target, x_o, x_adv, cfg.criteria)
                        : impersonate_success(target, x_o, x_adv, target_data.samples.at(victim_index).identity,
                                              cfg.criteria);
    recomputed += ok ? 1 : 0;
    const Vec& ref = mode == AttackMode::Dodge ? x_o : target_data.samples.at(victim_index).image;
    verified += verify_success(verifier_score(target, x_adv, ref), mode, thresholds) ? 1 : 0;
  }
  const double n = records.empty() ? 1.0 : static_cast<double>(records.size());
  json rates = json::object();
  for (const auto& [name, count] : recount) rates[name] = records.empty() ? 0.0 : count / n;
  json j{{"instances", records.size()},
         {"recount_successes", recount},
         {"recount_rates", rates},
         {"target_rate_recomputed", records.empty() ? 0.0 : recomputed / n},
         {"verifier_threshold", eer.threshold},
         {"verifier_eer", eer.eer},
         {"verifier_success_rate", records.empty() ? 0.0 : verified / n}};
  write_text(opts.out / "evaluation.json", j.dump(2) + "\n");
  log.artifact("evaluation.json");
  log.finish();
}

void cmd_predict_transfer(const ExperimentConfig& cfg, const StageOptions& opts) {
  StageLog log(cfg, opts, "predict-transfer");
  const auto target_data = load_dataset(opts.out / "target.exds");
  const auto sim_data = load_dataset(opts.out / substitute_data_name(0));
  const auto target = load_checkpoint(opts.out / "target.base.exmd");
  const auto simulator = load_checkpoint(opts.out / substitute_base_name(0));

  const auto pair_seed = derive_seed(cfg.seed, "loss-pairs");
  log.seed("loss-pairs", pair_seed);
  const auto pairs = sample_labeled_pairs(target_data, cfg.predict_pairs, pair_seed);

  std::vector<LossStats> stats;
  for (const auto level : cfg.predict_levels) {
    const auto data = take_identities(sim_data, static_cast<std::uint32_t>(level));
    const auto model = train_role(cfg, data, cfg.substitute_train, "level" + std::to_string(level));
    stats.push_back(cosine_loss(model, pairs));
  }
  const auto fit = fit_loss_curves(stats);
  std::string csv = "m, mu, sigma, mu_fit, sigma_fit\n";
  for (const auto& s : stats) {
    char row[160];
    const double m = static_cast<double>(s.m);
    std::snprintf(row, sizeof row, "%llu, %.9f, %.9f, %.9f, %.9f\n", static_cast<unsigned long long>(s.m), s.mean,
                  s.stddev, fit.mu(m), fit.sigma(m));
    csv += row;
  }
  write_text(opts.out / "loss_curves.csv", csv);
  log.artifact("loss_curves.csv");

  const auto m_alpha = static_cast<double>(simulator.meta().m_train);
  const auto m_beta = static_cast<double>(target.meta().m_train);
  json predictions = json::array();
  double predicted_sum = 0.0;
  std::size_t observed_hits = 0;
  const auto results_path = opts.out / "attack_results.jsonl";
  if (fs::exists(results_path)) {
    const auto records = read_json_lines(results_path);
    const auto adversarial = load_dataset(opts.out / "adversarial.exds");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const auto mode = parse_attack_mode(r.at("mode").get<std::string>());
      const auto ref_index = r.at(mode == AttackMode::Dodge ? "subject_index" : "victim_index").get<std::size_t>();
      const double cos = verifier_score(simulator, adversarial.samples[i].image, target_data.samples.at(ref_index).image);
      const double observed = cosine_pair_loss(cos, true);
      const double p = predict_transferability(fit, m_alpha, m_beta, observed, mode);
      predicted_sum += p;
      const auto& flags = r.at("per_target_success");
      if (flags.contains("target") && flags.at("target").get<bool>()) ++observed_hits;
      predictions.push_back({{"instance", i}, {"observed_loss", observed}, {"probability", p}});
    }
  }
  const double n = predictions.empty() ? 1.0 : static_cast<double>(predictions.size());
  json j{{"m_alpha", simulator.meta().m_train},
         {"m_beta", target.meta().m_train},
         {"mu_fit", {{"a", fit.mu.a}, {"b", fit.mu.b}}},
         {"sigma_fit", {{"a", fit.sigma.a}, {"b", fit.sigma.b}}},
         {"mean_shift", fit.mu(m_beta) - fit.mu(m_alpha)},
         {"predicted_rate", predictions.empty() ? 0.0 : predicted_sum / n},
         {"observed_target_rate", predictions.empty() ? 0.0 : observed_hits / n},
         {"instances", predictions}};
  write_text(opts.out / "predictions.json", j.dump(2) + "\n");
  log.artifact("predictions.json");
  log.finish();
}

}  // namespace tlab

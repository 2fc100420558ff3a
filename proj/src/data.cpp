#include "transferlab/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "binary_io.hpp"
#include "transferlab/errors.hpp"

namespace tlab {

namespace {

constexpr std::string_view kDatasetMagic = "EXDS";
constexpr std::uint32_t kDatasetVersion = 1;

// Identity coefficients are drawn from U(-amp, amp) on each basis function.
constexpr double kPrototypeAmplitude = 2.5;
constexpr int kBasisCount = 8;
constexpr std::uint64_t kNoiseStreamSalt = 0x9E3779B97F4A7C15ULL;

double dct_weight(int freq, int n) {
  return freq == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
}

// The eight lowest-frequency non-constant orthonormal 2-D DCT-II modes, ordered by u+v.
// The constant mode is left to the brightness offset.
std::vector<Vec> cosine_basis(std::uint32_t side) {
  static constexpr std::array<std::pair<int, int>, kBasisCount> kModes{
      {{0, 1}, {1, 0}, {0, 2}, {1, 1}, {2, 0}, {0, 3}, {1, 2}, {2, 1}}};
  const int n = static_cast<int>(side);
  std::vector<Vec> basis;
  basis.reserve(kModes.size());
  for (const auto& [u, v] : kModes) {
    Vec phi(n * n);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        phi(r * n + c) = dct_weight(u, n) * dct_weight(v, n) *
                         std::cos(std::numbers::pi * (2 * r + 1) * u / (2.0 * n)) *
                         std::cos(std::numbers::pi * (2 * c + 1) * v / (2.0 * n));
      }
    }
    basis.push_back(std::move(phi));
  }
  return basis;
}

double quantize(double v) {
  const double clamped = std::clamp(v, -kPixelLimit, kPixelLimit);
  return static_cast<double>(static_cast<float>(clamped));
}

}  // namespace

std::string_view to_string(AttackMode mode) {
  return mode == AttackMode::Dodge ? "dodge" : "impersonate";
}

AttackMode parse_attack_mode(std::string_view text) {
  if (text == "dodge" || text == "dodging") return AttackMode::Dodge;
  if (text == "impersonate" || text == "impersonation") return AttackMode::Impersonate;
  throw InvalidArgument("unknown attack mode '" + std::string(text) + "'");
}

std::vector<std::size_t> Dataset::indices_of(Identity id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].identity == id) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::count_per_identity() const {
  std::vector<std::size_t> counts(num_identities, 0);
  for (const auto& s : samples) {
    if (s.identity < counts.size()) ++counts[s.identity];
  }
  return counts;
}

Identity Dataset::gallery_identity(Identity local) const {
  return source_identity.empty() ? local : source_identity.at(local);
}

bool same_samples(const Dataset& a, const Dataset& b) {
  if (a.num_identities != b.num_identities || a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& sa = a.samples[i];
    const auto& sb = b.samples[i];
    if (sa.identity != sb.identity || sa.image.size() != sb.image.size()) return false;
    for (Eigen::Index j = 0; j < sa.image.size(); ++j) {
      if (std::bit_cast<std::uint64_t>(sa.image(j)) != std::bit_cast<std::uint64_t>(sb.image(j))) {
        return false;
      }
    }
  }
  return true;
}

LevelSpec level_spec(std::string_view name) {
  for (auto& level : all_levels()) {
    if (level.name == name) return level;
  }
  throw InvalidArgument("unknown dataset level '" + std::string(name) + "'");
}

std::vector<LevelSpec> all_levels() {
  return {{"D1", 40, 20}, {"D2", 160, 20}, {"D3", 640, 20}, {"D4", 1280, 20}};
}

std::vector<Vec> synthetic_prototypes(std::uint64_t seed, std::uint32_t num_identities,
                                      std::uint32_t image_side) {
  if (image_side < 4) throw InvalidArgument("gen_synthetic: image_side must be >= 4");
  const auto basis = cosine_basis(image_side);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coef(-kPrototypeAmplitude, kPrototypeAmplitude);
  std::vector<Vec> prototypes;
  prototypes.reserve(num_identities);
  for (std::uint32_t id = 0; id < num_identities; ++id) {
    Vec proto = Vec::Zero(basis.front().size());
    for (const auto& phi : basis) proto += coef(rng) * phi;
    prototypes.push_back(std::move(proto));
  }
  return prototypes;
}

Dataset gen_synthetic(std::uint64_t seed, std::uint32_t num_identities, std::uint32_t per_identity,
                      std::uint32_t image_side) {
  const auto prototypes = synthetic_prototypes(seed, num_identities, image_side);
  std::mt19937_64 rng(seed ^ kNoiseStreamSalt);
  std::normal_distribution<double> pixel_noise(0.0, kPixelNoiseSigma);
  std::uniform_real_distribution<double> brightness(-kBrightnessRange, kBrightnessRange);

  Dataset ds;
  ds.num_identities = num_identities;
  ds.seed = seed;
  ds.samples.reserve(std::size_t{num_identities} * per_identity);
  for (std::uint32_t id = 0; id < num_identities; ++id) {
    for (std::uint32_t k = 0; k < per_identity; ++k) {
      const double offset = brightness(rng);
      Vec img(prototypes[id].size());
      for (Eigen::Index j = 0; j < img.size(); ++j) {
        img(j) = quantize(prototypes[id](j) + pixel_noise(rng) + offset);
      }
      ds.samples.push_back({std::move(img), id});
    }
  }
  return ds;
}

DatasetSplit split_disjoint(const Dataset& dataset, std::size_t k_substitutes, double target_fraction,
                            std::span<const Identity> poi_ids, std::uint64_t seed) {
  if (k_substitutes == 0) throw InvalidArgument("split_disjoint: need at least one substitute part");
  if (!(target_fraction > 0.0 && target_fraction < 1.0)) {
    throw InvalidArgument("split_disjoint: target_fraction must lie in (0, 1)");
  }
  std::vector<Identity> pois;
  for (Identity p : poi_ids) {
    if (p >= dataset.num_identities) throw InvalidArgument("split_disjoint: PoI outside the gallery");
    if (std::find(pois.begin(), pois.end(), p) == pois.end()) pois.push_back(p);
  }
  std::vector<Identity> others;
  for (Identity id = 0; id < dataset.num_identities; ++id) {
    if (std::find(pois.begin(), pois.end(), id) == pois.end()) others.push_back(id);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(others.begin(), others.end(), rng);

  const auto n_target = static_cast<std::size_t>(std::llround(target_fraction * others.size()));
  const std::size_t n_each = n_target <= others.size() ? (others.size() - n_target) / k_substitutes : 0;
  if (n_target == 0 || n_each == 0) {
    throw InsufficientData("split_disjoint: " + std::to_string(others.size()) +
                           " non-PoI identities cannot fill a target and " +
                           std::to_string(k_substitutes) + " substitute parts");
  }

  auto build_part = [&](std::span<const Identity> members, std::string tag) {
    Dataset part;
    part.seed = dataset.seed;
    part.level_tag = std::move(tag);
    std::unordered_map<Identity, Identity> local;
    for (Identity p : pois) {
      local.emplace(p, static_cast<Identity>(part.source_identity.size()));
      part.source_identity.push_back(dataset.gallery_identity(p));
    }
    for (Identity id : members) {
      local.emplace(id, static_cast<Identity>(part.source_identity.size()));
      part.source_identity.push_back(dataset.gallery_identity(id));
    }
    part.num_identities = static_cast<std::uint32_t>(part.source_identity.size());
    // Group by local label so that identities stay contiguous.
    std::vector<std::vector<const Sample*>> grouped(part.num_identities);
    for (const auto& s : dataset.samples) {
      if (auto it = local.find(s.identity); it != local.end()) grouped[it->second].push_back(&s);
    }
    for (Identity l = 0; l < part.num_identities; ++l) {
      for (const Sample* s : grouped[l]) part.samples.push_back({s->image, l});
    }
    return part;
  };

  DatasetSplit split;
  split.target = build_part(std::span(others).first(n_target), "target");
  for (std::size_t k = 0; k < k_substitutes; ++k) {
    split.substitutes.push_back(
        build_part(std::span(others).subspan(n_target + k * n_each, n_each), "substitute" + std::to_string(k)));
  }
  return split;
}

Dataset take_identities(const Dataset& dataset, std::uint32_t num_identities) {
  if (num_identities == 0 || num_identities > dataset.num_identities) {
    throw InsufficientData("take_identities: requested " + std::to_string(num_identities) +
                           " identities from a dataset with " + std::to_string(dataset.num_identities));
  }
  Dataset out;
  out.seed = dataset.seed;
  out.level_tag = dataset.level_tag;
  out.num_identities = num_identities;
  if (!dataset.source_identity.empty()) {
    out.source_identity.assign(dataset.source_identity.begin(),
                               dataset.source_identity.begin() + num_identities);
  }
  for (const auto& s : dataset.samples) {
    if (s.identity < num_identities) out.samples.push_back(s);
  }
  return out;
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  const auto dim = dataset.dim();
  binio::write_magic(out, kDatasetMagic);
  binio::write_u32(out, kDatasetVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(dataset.samples.size()));
  binio::write_u32(out, static_cast<std::uint32_t>(dim));
  binio::write_u32(out, dataset.num_identities);
  for (const auto& s : dataset.samples) {
    if (static_cast<std::size_t>(s.image.size()) != dim) {
      throw DimensionMismatch("save_dataset: samples have differing dimensions");
    }
    binio::write_u32(out, s.identity);
    for (Eigen::Index j = 0; j < s.image.size(); ++j) binio::write_f32(out, static_cast<float>(s.image(j)));
  }
}

Dataset read_dataset(std::istream& in) {
  binio::expect_magic(in, kDatasetMagic, "dataset");
  const auto version = binio::read_u32(in, "dataset version");
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "dataset version " + std::to_string(version) + " is not supported");
  }
  const auto n = binio::read_u32(in, "sample count");
  const auto dim = binio::read_u32(in, "dimension");
  Dataset ds;
  ds.num_identities = binio::read_u32(in, "identity count");
  const std::uint64_t need = std::uint64_t{n} * (4 + 4 * std::uint64_t{dim});
  if (binio::remaining(in) < need) {
    throw FormatError(FormatError::Kind::Truncated, "dataset declares " + std::to_string(n) +
                                                        " samples but the payload is shorter");
  }
  ds.samples.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    s.identity = binio::read_u32(in, "sample identity");
    if (s.identity >= ds.num_identities) {
      throw FormatError(FormatError::Kind::Truncated, "sample identity out of range");
    }
    s.image.resize(dim);
    for (std::uint32_t j = 0; j < dim; ++j) s.image(j) = binio::read_f32(in, "pixel");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  auto out = binio::open_for_write(path);
  write_dataset(out, dataset);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto in = binio::open_for_read(path);
  return read_dataset(in);
}

std::vector<AttackInstance> pick_attack_sets(const Dataset& dataset, AttackMode mode,
                                             std::span<const PoiPair> pois, std::size_t count,
                                             std::uint64_t seed, std::uint32_t min_poi_samples) {
  if (count == 0) return {};
  if (pois.empty()) throw InvalidArgument("pick_attack_sets: no points of interest given");
  std::unordered_map<Identity, std::vector<std::size_t>> members;
  auto samples_of = [&](Identity id) -> const std::vector<std::size_t>& {
    auto [it, fresh] = members.try_emplace(id);
    if (fresh) it->second = dataset.indices_of(id);
    if (it->second.size() < min_poi_samples) {
      throw InsufficientData("pick_attack_sets: identity " + std::to_string(id) + " has " +
                             std::to_string(it->second.size()) + " samples, need " +
                             std::to_string(min_poi_samples));
    }
    return it->second;
  };
  for (const auto& p : pois) {
    if (mode == AttackMode::Impersonate && p.subject == p.victim) {
      throw InvalidArgument("pick_attack_sets: impersonation pair with subject == victim");
    }
    samples_of(p.subject);
    samples_of(p.victim);
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pair(0, pois.size() - 1);
  auto pick_from = [&rng](const std::vector<std::size_t>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };

  std::vector<AttackInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& p = pois[pick_pair(rng)];
    AttackInstance inst;
    inst.subject = p.subject;
    inst.subject_index = pick_from(samples_of(p.subject));
    if (mode == AttackMode::Dodge) {
      inst.victim = p.subject;
      inst.victim_index = inst.subject_index;
    } else {
      inst.victim = p.victim;
      inst.victim_index = pick_from(samples_of(p.victim));
    }
    out.push_back(inst);
  }
  return out;
}

std::size_t nearest_other_identity(const Dataset& dataset, const Vec& x, Identity owner) {
  std::size_t best = dataset.samples.size();
  double best_d = 0.0;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (s.identity == owner) continue;
    const double d = (s.image - x).squaredNorm();
    if (best == dataset.samples.size() || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  if (best == dataset.samples.size()) throw InsufficientData("no image of another identity");
  return best;
}

}  // namespace tlab

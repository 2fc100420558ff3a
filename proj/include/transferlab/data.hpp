#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "transferlab/linalg.hpp"

namespace tlab {

using Identity = std::uint32_t;

enum class AttackMode { Dodge, Impersonate };

std::string_view to_string(AttackMode mode);
AttackMode parse_attack_mode(std::string_view text);

/// One flattened image with its owner. Pixels lie strictly inside (-1, 1).
struct Sample {
  Vec image;
  Identity identity = 0;
};

/// Labelled gallery. Labels are contiguous in [0, num_identities).
///
/// Parts produced by split_disjoint are relabelled so that the points of interest
/// occupy labels 0..P-1 in every part; `source_identity` maps a local label back to
/// the gallery identity it came from (empty means the identity mapping).
struct Dataset {
  std::vector<Sample> samples;
  std::uint32_t num_identities = 0;
  std::uint64_t seed = 0;
  std::optional<std::string> level_tag;
  std::vector<Identity> source_identity;

  std::size_t size() const { return samples.size(); }
  std::size_t dim() const { return samples.empty() ? 0 : static_cast<std::size_t>(samples.front().image.size()); }
  std::vector<std::size_t> indices_of(Identity id) const;
  std::vector<std::size_t> count_per_identity() const;
  Identity gallery_identity(Identity local) const;
};

/// Sample-level equality: same labels, same pixel bits, same identity count.
bool same_samples(const Dataset& a, const Dataset& b);

/// Desk-scale stand-ins for the four dataset levels.
struct LevelSpec {
  std::string name;
  std::uint32_t num_identities = 0;
  std::uint32_t images_per_identity = 0;
  std::size_t total_images() const { return std::size_t{num_identities} * images_per_identity; }
};

/// D1 = 40 x 20, D2 = 160 x 20, D3 = 640 x 20, D4 = 1280 x 20.
LevelSpec level_spec(std::string_view name);
std::vector<LevelSpec> all_levels();

inline constexpr std::uint32_t kMinPoiSamples = 20;
inline constexpr double kPixelNoiseSigma = 0.05;
inline constexpr double kBrightnessRange = 0.1;
inline constexpr double kPixelLimit = 0.999;

/// Identity prototypes shared by every dataset generated from `seed`. Identity i has the
/// same prototype regardless of how many identities are requested.
std::vector<Vec> synthetic_prototypes(std::uint64_t seed, std::uint32_t num_identities,
                                      std::uint32_t image_side);

/// Seeded synthetic gallery: prototype + Gaussian pixel noise + brightness offset, clamped
/// to (-0.999, 0.999) and rounded to f32 so that serialization is exact.
Dataset gen_synthetic(std::uint64_t seed, std::uint32_t num_identities, std::uint32_t per_identity,
                      std::uint32_t image_side);

struct DatasetSplit {
  Dataset target;
  std::vector<Dataset> substitutes;
};

/// Partition identities into a target part and k substitute parts. Non-PoI identities are
/// pairwise disjoint across parts; every PoI appears with all its samples in every part.
DatasetSplit split_disjoint(const Dataset& dataset, std::size_t k_substitutes, double target_fraction,
                            std::span<const Identity> poi_ids, std::uint64_t seed);

/// Keep only local labels < num_identities (PoIs always come first after a split).
Dataset take_identities(const Dataset& dataset, std::uint32_t num_identities);

void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Subject/victim pair of points of interest; dodging is encoded as subject == victim.
struct PoiPair {
  Identity subject = 0;
  Identity victim = 0;
  bool dodging() const { return subject == victim; }
  bool operator==(const PoiPair&) const = default;
};

/// One attack instance: indices into the dataset of the subject image and, for
/// impersonation, the victim image (equal to subject_index when dodging).
struct AttackInstance {
  std::size_t subject_index = 0;
  std::size_t victim_index = 0;
  Identity subject = 0;
  Identity victim = 0;
};

std::vector<AttackInstance> pick_attack_sets(const Dataset& dataset, AttackMode mode,
                                             std::span<const PoiPair> pois, std::size_t count,
                                             std::uint64_t seed,
                                             std::uint32_t min_poi_samples = kMinPoiSamples);

/// Nearest image (pixel L2) of any identity other than `owner`.
std::size_t nearest_other_identity(const Dataset& dataset, const Vec& x, Identity owner);

}  // namespace tlab

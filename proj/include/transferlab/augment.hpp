#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "transferlab/data.hpp"

namespace tlab {

/// How lambda weights the endpoints of an interpolation.
///  FromA:      x = (1 - lambda) x_a + lambda x_b, so lambda is the normalized distance from x_a.
///  WeightOnA:  x = lambda x_a + (1 - lambda) x_b, the literal algorithm-listing form.
enum class InterpolationConvention : std::uint32_t { FromA = 0, WeightOnA = 1 };

Vec interpolate(const Vec& x_a, const Vec& x_b, double lambda,
                InterpolationConvention convention = InterpolationConvention::FromA);

/// One synthesized point. Endpoints are referenced by index into the original dataset.
struct AugTuple {
  std::uint32_t index_a = 0;
  std::uint32_t index_b = 0;
  double lambda = 0.0;
  Vec x_interp;
  Identity a = 0;
  Identity b = 0;
};

/// Which of the algorithm's pools a pair came from.
enum class PairPool : std::uint8_t { SubjectVictim, PoiRest };

struct AugPair {
  std::uint32_t index_a = 0;
  std::uint32_t index_b = 0;
  PairPool pool = PairPool::PoiRest;
};

struct AugmentOptions {
  std::uint32_t m = 10;  // synthesized points per pair
  std::uint64_t seed = 0;
  /// When set, the number of pairs is ceil(total / m) instead of |D|, keeping the
  /// subject-victim share at 1/m of the pairs.
  std::optional<std::size_t> total_synthesized;
  InterpolationConvention convention = InterpolationConvention::FromA;
};

struct AugmentedDataset {
  Dataset originals;
  PoiPair poi;
  std::vector<AugPair> pairs;
  std::vector<AugTuple> tuples;  // pair-major: tuples[p * m + j] come from pairs[p]
  std::uint32_t m = 0;
  InterpolationConvention convention = InterpolationConvention::FromA;

  const Vec& x_a(const AugTuple& t) const { return originals.samples[t.index_a].image; }
  const Vec& x_b(const AugTuple& t) const { return originals.samples[t.index_b].image; }
};

/// Subject-oriented augmentation. A = subject images, B = victim images, C = the rest.
/// Impersonation draws |D|/m pairs from A x B and the remainder from (A u B) x C; dodging
/// (subject == victim) draws every pair from A x C. Each pair yields exactly m points with
/// lambda ~ U(0, 1).
AugmentedDataset augment_dataset(const Dataset& dataset, PoiPair poi, const AugmentOptions& options);

/// Dataset block followed by an "EXAG" tuple table (pair indices, lambda as f64).
void save_augmented(const AugmentedDataset& aug, const std::filesystem::path& path);
AugmentedDataset load_augmented(const std::filesystem::path& path);

}  // namespace tlab

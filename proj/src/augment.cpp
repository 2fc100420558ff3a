#include "transferlab/augment.hpp"

#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "transferlab/errors.hpp"

namespace tlab {

namespace {

constexpr std::string_view kTupleMagic = "EXAG";
constexpr std::uint32_t kTupleVersion = 1;

}  // namespace

Vec interpolate(const Vec& x_a, const Vec& x_b, double lambda, InterpolationConvention convention) {
  if (x_a.size() != x_b.size()) {
    throw DimensionMismatch("interpolate: endpoint sizes differ (" + std::to_string(x_a.size()) + " vs " +
                            std::to_string(x_b.size()) + ")");
  }
  const double w_b = convention == InterpolationConvention::FromA ? lambda : 1.0 - lambda;
  return (1.0 - w_b) * x_a + w_b * x_b;
}

AugmentedDataset augment_dataset(const Dataset& dataset, PoiPair poi, const AugmentOptions& options) {
  if (options.m < 1) throw InvalidArgument("augment_dataset: m must be >= 1");
  std::vector<std::uint32_t> set_a, set_b, set_c;
  for (std::uint32_t i = 0; i < dataset.samples.size(); ++i) {
    const auto id = dataset.samples[i].identity;
    if (id == poi.subject) {
      set_a.push_back(i);
    } else if (id == poi.victim) {
      set_b.push_back(i);
    } else {
      set_c.push_back(i);
    }
  }
  if (poi.dodging()) set_b = set_a;
  if (set_a.empty()) throw InsufficientData("augment_dataset: subject has no images");
  if (set_b.empty()) throw InsufficientData("augment_dataset: victim has no images");
  if (set_c.empty()) throw InsufficientData("augment_dataset: no images outside the PoIs");

  std::vector<std::uint32_t> set_ab = set_a;
  if (!poi.dodging()) set_ab.insert(set_ab.end(), set_b.begin(), set_b.end());

  const std::size_t total_pairs = options.total_synthesized
                                      ? (*options.total_synthesized + options.m - 1) / options.m
                                      : dataset.samples.size();
  const std::size_t n_cross = poi.dodging() ? 0 : total_pairs / options.m;

  AugmentedDataset aug;
  aug.originals = dataset;
  aug.poi = poi;
  aug.m = options.m;
  aug.convention = options.convention;
  aug.pairs.reserve(total_pairs);

  std::mt19937_64 rng(options.seed);
  auto pick = [&rng](const std::vector<std::uint32_t>& pool) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  for (std::size_t i = 0; i < n_cross; ++i) {
    const auto a = pick(set_a);
    const auto b = pick(set_b);
    aug.pairs.push_back({a, b, PairPool::SubjectVictim});
  }
  for (std::size_t i = n_cross; i < total_pairs; ++i) {
    const auto a = pick(set_ab);
    const auto b = pick(set_c);
    aug.pairs.push_back({a, b, PairPool::PoiRest});
  }

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  aug.tuples.reserve(aug.pairs.size() * options.m);
  for (const auto& pair : aug.pairs) {
    for (std::uint32_t j = 0; j < options.m; ++j) {
      AugTuple t;
      t.index_a = pair.index_a;
      t.index_b = pair.index_b;
      t.lambda = uniform(rng);
      t.x_interp = interpolate(dataset.samples[pair.index_a].image, dataset.samples[pair.index_b].image,
                               t.lambda, options.convention);
      t.a = dataset.samples[pair.index_a].identity;
      t.b = dataset.samples[pair.index_b].identity;
      aug.tuples.push_back(std::move(t));
    }
  }
  return aug;
}

void save_augmented(const AugmentedDataset& aug, const std::filesystem::path& path) {
  auto out = binio::open_for_write(path);
  write_dataset(out, aug.originals);
  binio::write_magic(out, kTupleMagic);
  binio::write_u32(out, kTupleVersion);
  binio::write_u32(out, aug.poi.subject);
  binio::write_u32(out, aug.poi.victim);
  binio::write_u32(out, aug.m);
  binio::write_u32(out, static_cast<std::uint32_t>(aug.convention));
  binio::write_u32(out, static_cast<std::uint32_t>(aug.pairs.size()));
  for (const auto& p : aug.pairs) {
    binio::write_u32(out, p.index_a);
    binio::write_u32(out, p.index_b);
    binio::write_u32(out, static_cast<std::uint32_t>(p.pool));
  }
  binio::write_u32(out, static_cast<std::uint32_t>(aug.tuples.size()));
  for (const auto& t : aug.tuples) {
    binio::write_u32(out, t.index_a);
    binio::write_u32(out, t.index_b);
    binio::write_f64(out, t.lambda);
  }
}

AugmentedDataset load_augmented(const std::filesystem::path& path) {
  auto in = binio::open_for_read(path);
  AugmentedDataset aug;
  aug.originals = read_dataset(in);
  binio::expect_magic(in, kTupleMagic, "augmented tuple table");
  const auto version = binio::read_u32(in, "tuple table version");
  if (version != kTupleVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "tuple table version " + std::to_string(version) + " is not supported");
  }
  aug.poi.subject = binio::read_u32(in, "subject");
  aug.poi.victim = binio::read_u32(in, "victim");
  aug.m = binio::read_u32(in, "m");
  const auto convention = binio::read_u32(in, "convention");
  if (convention > 1) throw FormatError(FormatError::Kind::VersionMismatch, "unknown interpolation convention");
  aug.convention = static_cast<InterpolationConvention>(convention);
  const auto n = aug.originals.samples.size();
  auto check_index = [n](std::uint32_t i) {
    if (i >= n) throw FormatError(FormatError::Kind::Truncated, "tuple index outside the dataset");
    return i;
  };
  const auto n_pairs = binio::read_u32(in, "pair count");
  if (binio::remaining(in) < std::uint64_t{n_pairs} * 12) {
    throw FormatError(FormatError::Kind::Truncated, "pair table is truncated");
  }
  for (std::uint32_t i = 0; i < n_pairs; ++i) {
    AugPair p;
    p.index_a = check_index(binio::read_u32(in, "pair index"));
    p.index_b = check_index(binio::read_u32(in, "pair index"));
    p.pool = binio::read_u32(in, "pair pool") == 0 ? PairPool::SubjectVictim : PairPool::PoiRest;
    aug.pairs.push_back(p);
  }
  const auto n_tuples = binio::read_u32(in, "tuple count");
  if (binio::remaining(in) < std::uint64_t{n_tuples} * 16) {
    throw FormatError(FormatError::Kind::Truncated, "tuple table is truncated");
  }
  aug.tuples.reserve(n_tuples);
  for (std::uint32_t i = 0; i < n_tuples; ++i) {
    AugTuple t;
    t.index_a = check_index(binio::read_u32(in, "tuple index"));
    t.index_b = check_index(binio::read_u32(in, "tuple index"));
    t.lambda = binio::read_f64(in, "lambda");
    t.a = aug.originals.samples[t.index_a].identity;
    t.b = aug.originals.samples[t.index_b].identity;
    t.x_interp = interpolate(aug.x_a(t), aug.x_b(t), t.lambda, aug.convention);
    aug.tuples.push_back(std::move(t));
  }
  return aug;
}

}  // namespace tlab

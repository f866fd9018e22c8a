#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exitweave/backbone.hpp"
#include "exitweave/numkit.hpp"
#include "exitweave/rng.hpp"

namespace exitweave::datahub {

using backbone::Batch;
using numkit::Matrix;

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

std::string_view to_string(Split split);

struct Dataset {
  Matrix features;          // N x D
  std::vector<int> labels;  // N, each in [0, num_classes)
  std::size_t num_classes = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  // Throws FormatError on an empty set, label out of range, or NaN feature.
  void validate() const;

  Batch gather(std::span<const std::size_t> indices) const;
  Batch all() const;
  std::vector<std::size_t> class_counts() const;

  bool operator==(const Dataset&) const = default;
};

// Class means at the scaled simplex vertices e_c when D >= C, otherwise
// evenly spaced on the unit circle in the first two coordinates. Isotropic
// Gaussian noise with standard deviation `spread`; features are not rescaled.
// Samples are emitted class by class.
Dataset gen_synthetic_gaussians(std::size_t num_classes, std::size_t dim, std::size_t per_class_n,
                                double spread, RngStream& rng, Split split = Split::Train);

// IDX pair (MNIST layout): unsigned-byte images of any rank >= 1 per item and
// a rank-1 unsigned-byte label file. Pixels scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split = Split::Train);

enum class CifarFormat { Cifar10, Cifar100 };

// CIFAR binary batch: per record, 1 label byte (CIFAR-10) or coarse + fine
// label bytes (CIFAR-100, fine label used), then 3072 pixel bytes.
Dataset load_cifar_bin(const std::filesystem::path& path, CifarFormat format,
                       Split split = Split::Train);

// Versioned binary container used for fixtures and cached splits.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// mu = F^(-1 / (C - 1)); 1 when C == 1.
double longtail_mu(double imbalance_factor, std::size_t num_classes);

struct LongTailResult {
  Dataset dataset;
  std::vector<std::size_t> class_counts;
  std::vector<std::string> warnings;
};

// Class c keeps round(N_c * mu^c) samples (minimum 1), drawn without
// replacement; kept samples retain their original relative order.
LongTailResult longtail_subsample(const Dataset& dataset, double imbalance_factor, RngStream& rng);

enum class Remainder { Drop, Keep };

// Per-epoch permutation of [0, n) keyed by (seed, epoch), cut into batches of
// `batch_size`. Training drops the short tail; evaluation keeps it.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::size_t epoch, std::uint64_t seed,
                                                   Remainder remainder = Remainder::Drop);

// Deterministic disjoint split of a dataset: the first `holdout` entries of a
// seeded permutation go to the second result (tagged `holdout_split`).
std::pair<Dataset, Dataset> split_holdout(const Dataset& dataset, std::size_t holdout,
                                          RngStream& rng, Split holdout_split = Split::Val);

}  // namespace exitweave::datahub

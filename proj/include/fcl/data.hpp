#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <utility>
#include <vector>

#include "fcl/numerics.hpp"

namespace fcl {

using Rng = std::mt19937_64;

/// Seeds an independent stream from a base seed and a list of stream labels.
Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

struct DataConfig {
  int n_clients = 10;
  int volumes_per_client = 4;
  int depth = 16;
  int height = 16;
  int width = 16;
  int partitions = 4;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

struct Volume {
  int depth = 0;
  int height = 0;
  int width = 0;
  int subject_id = 0;
  int client_id = 0;
  /// depth * height * width values in [0, 1], slice-major.
  std::vector<double> voxels;

  /// Copy of slice `z` as an [height, width] tensor.
  Tensor slice(int z) const;
};

/// Per-client volumes, indexed by client id.
using Cohort = std::vector<std::vector<Volume>>;

struct SliceSample {
  Tensor image;
  int client_id = 0;
  int volume_id = 0;
  int slice_index = 0;
  int partition = 0;
};

/// Partition of a slice: floor(z * S / D).
int partition_of(int slice_index, int depth, int partitions);

/// Deterministic synthetic cohort. Every partition carries a shared structural
/// motif so that same-partition slices of different subjects correlate more
/// than slices of different partitions.
Cohort generate_cohort(const DataConfig& cfg);

/// Uniformly random slice of partition `s` from volume `volume_index`.
SliceSample sample_slice(const std::vector<Volume>& volumes, int volume_index, int s, int partitions,
                         Rng& rng);

/// Draws x_s^i and x_s^j from two distinct volumes, both in partition `s`.
std::pair<SliceSample, SliceSample> sample_partition_pair(const std::vector<Volume>& volumes, int s,
                                                          int partitions, Rng& rng);

struct AugmentConfig {
  double min_crop_scale = 0.6;  ///< crop area fraction lower bound
  double max_crop_scale = 1.0;
  double flip_probability = 0.5;
  double noise_sigma = 0.05;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

/// Smallest crop side, in pixels, that augment() will produce.
inline constexpr int kMinCropSide = 2;

/// Random crop-and-resize, horizontal flip, additive Gaussian noise, clamp to [0,1].
Tensor augment_view(const Tensor& image, const AugmentConfig& cfg, Rng& rng);

/// Two independent views of the same image.
std::pair<Tensor, Tensor> augment(const Tensor& image, Rng& rng, const AugmentConfig& cfg = {});

/// Pearson correlation of two equally sized images.
double pixel_correlation(std::span<const double> a, std::span<const double> b);

/// Flat binary dump: magic, dims, seed, then float32 voxels per client/volume.
void write_cohort(std::ostream& out, const DataConfig& cfg, const Cohort& cohort);

}  // namespace fcl

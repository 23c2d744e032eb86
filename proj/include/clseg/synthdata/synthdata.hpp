// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clseg/numerics/random.hpp"
#include "clseg/numerics/tensor.hpp"

namespace clseg {

/// Acquisition characteristics of one synthetic source.
struct DomainSpec {
  int domain_id = 0;
  std::string name = "A";
  double radius_min = 4.0;  ///< ellipse semi-axis range, pixels
  double radius_max = 6.0;
  double center_concentration = 1.0;  ///< 1 = blob always centred
  double intensity_gain = 1.0;
  double intensity_offset = 0.0;
  double noise_sigma = 0.0;
  double bias_field_amplitude = 0.0;
  double foreground_intensity = 0.7;  ///< base intensity inside the mask
  double background_intensity = 0.2;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the spec is inconsistent or the blob cannot fit an h×w slice.
  void validate(Index height, Index width) const;
  /// Largest distance from the blob centre any ellipse pixel can reach.
  double blob_extent() const { return radius_max + 0.5 * radius_min; }
};

struct Volume {
  TensorF slices;  ///< [K,1,H,W] in [0,1]
  TensorF mask;    ///< [K,1,H,W] in {0,1}
  int domain_id = 0;
  int volume_id = 0;

  Index slice_count() const { return slices.dim(0); }
  Index height() const { return slices.dim(2); }
  Index width() const { return slices.dim(3); }
};

struct DomainDataset {
  DomainSpec spec;
  std::vector<Volume> train;  ///< used for gradient steps
  std::vector<Volume> val;    ///< carved from the training share, model selection only
  std::vector<Volume> test;
};

/// Slice k of volume v is a pure function of (spec, v, k).
Volume generate_volume(const DomainSpec& spec, int volume_id, Index slices, Index height, Index width);
std::vector<Volume> generate_domain(const DomainSpec& spec, int n_volumes, Index slices_per_volume, Index height,
                                    Index width);

/// Deterministic shuffle by `seed`, then the first floor(frac·n) volumes train.
/// Both halves are returned sorted by volume id.
std::pair<std::vector<Volume>, std::vector<Volume>> split_dataset(std::vector<Volume> volumes, double train_frac,
                                                                  std::uint64_t seed);

struct DatasetSizes {
  int volumes_per_domain = 16;
  Index slices_per_volume = 6;
  Index height = 32;
  Index width = 32;
  double train_fraction = 0.65;  ///< train + validation share
  double val_fraction = 0.2;     ///< of the training share
};

/// Generates one domain and splits it into train / val / test.
DomainDataset make_domain_dataset(const DomainSpec& spec, const DatasetSizes& sizes, std::uint64_t split_seed);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.0;  ///< per axis
  double affine_prob = 0.0;
  double max_rotation_deg = 10.0;
  double max_translation = 2.0;  ///< pixels
  double noise_prob = 0.0;
  double noise_sigma = 0.02;
  double bias_prob = 0.0;
  double bias_amplitude = 0.08;

  bool any() const { return flip_prob > 0 || affine_prob > 0 || noise_prob > 0 || bias_prob > 0; }
  void validate() const;
};

/// Augments one [1,1,H,W] slice and its mask in place. Geometric transforms hit
/// both (mask via nearest neighbour); intensity transforms only the image.
void augment(TensorF& slice, TensorF& mask, const AugmentConfig& config, Rng& rng);

void flip_horizontal(TensorF& plane);
void flip_vertical(TensorF& plane);
/// Rotation (degrees) about the centre plus translation, inverse-mapped.
/// `nearest` selects nearest-neighbour with zero fill; otherwise bilinear with edge clamp.
TensorF affine_resample(const TensorF& plane, double rotation_deg, double tx, double ty, bool nearest);

// ---------------------------------------------------------------------------
// Orderings and presets

/// All |ids|! permutations in lexicographic order. At most 5 domains.
std::vector<std::vector<int>> orderings(std::vector<int> ids);

/// Named presets: "three_domain" (three shifted domains A, B, C) and "mini2" (A, B).
std::vector<DomainSpec> domain_preset(const std::string& name, std::uint64_t seed);

/// Per-slice mean intensity.
double slice_mean_intensity(const TensorF& volume_slices, Index k);
/// Per-slice noise level: std of horizontal neighbour differences inside
/// constant-label regions, divided by sqrt(2).
double slice_noise_estimate(const TensorF& volume_slices, const TensorF& mask, Index k);

// ---------------------------------------------------------------------------
// Persistence: one checkpoint-format file per volume plus dataset.manifest.

void save_datasets(const std::filesystem::path& dir, const std::vector<DomainDataset>& datasets);
std::vector<DomainDataset> load_datasets(const std::filesystem::path& dir);

}  // namespace clseg

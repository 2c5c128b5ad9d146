#pragma once

// Thick (source) / thin (target) digit-zero benchmark with style corruption.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <json.hpp>

#include "dirda/types.hpp"

namespace dirda::synth {

namespace fs = std::filesystem;

/// Reads an IDX3 unsigned-byte image file (the MNIST distribution format).
/// Returns [N, H, W] float32 scaled to [0, 1].
torch::Tensor load_idx_images(const fs::path& path);
/// IDX1 unsigned-byte labels, [N] int64.
torch::Tensor load_idx_labels(const fs::path& path);

/// Bundled digit-zero subset. DIRDA_DATA_DIR overrides the compiled-in location.
fs::path default_digits_path();
torch::Tensor load_default_zeros();

/// Grayscale morphology with a disk structuring element of the given radius.
torch::Tensor dilate(const torch::Tensor& img, int radius);
torch::Tensor erode(const torch::Tensor& img, int radius);

struct MorphologySpec {
  int thick_radius = 1;  // dilation applied to source digits
  int thin_radius = 1;   // erosion applied to target digits
  int canvas = 32;       // zero-pad the 28x28 digit to canvas x canvas (centred)
  int upsample = 1;      // morphology runs at upsample x resolution, then area-downsampled

  void validate() const;
};

/// Structured clutter patches in [0, 1]. Stands in for natural-image crops.
class TextureBank {
 public:
  static std::shared_ptr<const TextureBank> procedural(int count, int side, std::uint64_t seed);
  static std::shared_ptr<const TextureBank> from_images(std::vector<torch::Tensor> images);

  [[nodiscard]] std::size_t size() const { return textures_.size(); }
  [[nodiscard]] int side() const { return side_; }
  /// size x size crop of texture `index` at (y, x).
  [[nodiscard]] torch::Tensor crop(std::size_t index, int y, int x, int size) const;

 private:
  std::vector<torch::Tensor> textures_;
  int side_ = 0;
};

struct CorruptionSpec {
  int bg_patch_size = 5;
  int fg_patch_size = 15;
  double fg_alpha = 0.5;
  double noise_mean = 0.0;
  double noise_std = 0.05;
  std::shared_ptr<const TextureBank> patch_bank;
  std::uint64_t seed = 0;

  void validate(std::int64_t height, std::int64_t width) const;
  [[nodiscard]] nlohmann::json to_json() const;  // parameters only, not the bank
};

/// One bright background patch composited (screen blend) where the digit is
/// absent, one texture patch multiplied into the digit support as
/// img * (1 - alpha * patch), then additive Gaussian noise, clipped to [0,1].
Image corrupt_style(const Image& img, const CorruptionSpec& spec);

struct MorphoSet {
  std::vector<Sample> source;                 // thick digits with masks
  std::vector<Sample> target;                 // thin digits, no masks attached
  std::vector<LabelMask> target_ground_truth;  // parallel to `target`, evaluation only
  std::vector<torch::Tensor> source_clean;    // pre-corruption images (figures, checks)
  std::vector<torch::Tensor> target_clean;
};

struct GenerateOptions {
  MorphologySpec morphology;
  CorruptionSpec corruption;  // patch_bank may be null: a procedural bank is built
  bool corrupt = true;
  double mask_threshold = 0.5;
};

/// Source and target draw disjoint digit instances from `digits` ([M,28,28]).
MorphoSet generate_morpho_pairs(const torch::Tensor& digits, std::int64_t n_per_domain,
                                const GenerateOptions& opts, std::uint64_t seed);

struct DomainIndices {
  std::vector<std::int64_t> train, val, test;
};

struct DatasetSplit {
  int fold_index = 0;
  DomainIndices source, target;
};

std::array<DatasetSplit, 3> make_splits(std::int64_t n_source, std::int64_t n_target,
                                        std::uint64_t seed, double val_fraction = 0.1);

nlohmann::json to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const nlohmann::json& j);

/// Mean foreground/skeleton pixel ratio: a stroke-width proxy.
double mean_stroke_width(const std::vector<LabelMask>& masks);
/// Zhang-Suen thinning of a binary 2D mask.
torch::Tensor skeletonize(const torch::Tensor& mask);

}  // namespace dirda::synth

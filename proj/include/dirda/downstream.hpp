#pragma once

// Downstream segmenter F and the comparison arms: plain training, random
// intensity / affine / deformable augmentation, feature-space adversarial UDA.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dirda/dataset.hpp"
#include "dirda/metrics.hpp"
#include "dirda/models.hpp"
#include "dirda/seeding.hpp"

namespace dirda::downstream {

struct LabelledSet {
  std::vector<torch::Tensor> images;  // [*S] float32
  std::vector<torch::Tensor> masks;   // [*S] uint8
  [[nodiscard]] std::size_t size() const { return images.size(); }
};

struct IntensityAugParams {
  double gamma_min = 0.7, gamma_max = 1.5;  // gamma drawn log-uniformly
  double brightness = 0.1;  // additive shift, fraction of intensity range
  double contrast = 0.1;    // multiplicative factor in [1-c, 1+c]
  double noise_std = 0.05;  // std drawn in [0, noise_std], fraction of range
  [[nodiscard]] bool is_null() const {
    return gamma_min == 1 && gamma_max == 1 && brightness == 0 && contrast == 0 && noise_std == 0;
  }
};

struct AffineAugParams {
  double rotation_deg = 15.0;
  double scale = 0.1;       // isotropic factor in [1-s, 1+s]
  double translate = 0.1;   // fraction of the side length
  [[nodiscard]] bool is_null() const { return rotation_deg == 0 && scale == 0 && translate == 0; }
};

struct DeformableAugParams {
  double max_displacement = 3.0;  // pixels, max |v| before integration
  double smoothing_sigma = 3.0;   // Gaussian smoothing of the noise, pixels
  int integration_steps = warp::kDefaultSteps;
};

enum class Augmentation { none, intensity, affine, deformable };
std::string to_string(Augmentation a);
Augmentation augmentation_from_string(const std::string& s);

struct SegTrainConfig {
  double lr = 1e-3;
  std::int64_t iterations = 600;
  std::int64_t batch_size = 8;
  std::int64_t val_every = 50;
  bool cross_entropy = false;  // add pixelwise CE to the Dice loss
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double aug_probability = 1.0;
  Augmentation augmentation = Augmentation::none;
  IntensityAugParams intensity;
  AffineAugParams affine;
  DeformableAugParams deformable;
  models::UNetOptions net;
  double confusion_weight = 1.0;  // feature-UDA only
  double lr_domain = 1e-3;        // feature-UDA domain classifier

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static SegTrainConfig from_json(const nlohmann::json& j);
};

struct AugmentedPair {
  torch::Tensor image;
  torch::Tensor mask;
  warp::DeformationField field;  // the spatial map applied to both (identity for intensity)
};

torch::Tensor augment_intensity(const torch::Tensor& img, Rng& rng, const IntensityAugParams& p);

/// Random rotation/scale/translation about the grid centre (2D).
warp::DeformationField sample_affine_field(at::IntArrayRef spatial, Rng& rng,
                                           const AffineAugParams& p);
AugmentedPair augment_affine(const torch::Tensor& img, const torch::Tensor& mask, Rng& rng,
                             const AffineAugParams& p);

/// Gaussian-smoothed noise velocity, scaled to max |v| = max_displacement,
/// integrated to a diffeomorphism.
warp::DeformationField sample_deformable_field(at::IntArrayRef spatial, Rng& rng,
                                               const DeformableAugParams& p);
AugmentedPair augment_deformable(const torch::Tensor& img, const torch::Tensor& mask, Rng& rng,
                                 const DeformableAugParams& p);

/// Separable Gaussian smoothing of [N, C, *S] over the spatial axes.
torch::Tensor gaussian_smooth(const torch::Tensor& x, double sigma);

struct TrainedSegmenter {
  models::SegmenterNet net{nullptr};
  std::string checkpoint_hash;
  double best_val_dice = 0;
  std::int64_t best_step = 0;
  std::vector<double> loss_curve;
};

/// Dice (+ optional CE) training with the configured augmentation; the
/// parameters with the best mean validation Dice are returned.
TrainedSegmenter train_segmenter(const LabelledSet& train, const LabelledSet& val,
                                 const SegTrainConfig& cfg);

/// Segmenter plus a domain classifier on bottleneck features. Per iteration:
/// segmentation step on source labels, classifier step on detached features,
/// then a confusion step pushing the classifier output towards 1/2 on both
/// domains. Target images are used without labels.
TrainedSegmenter train_feature_uda(const LabelledSet& source, const std::vector<torch::Tensor>& target,
                                   const LabelledSet& val, const SegTrainConfig& cfg);

/// Accuracy of a fresh domain classifier trained on frozen bottleneck features
/// (first half of each list) and scored on the second half.
double domain_probe_accuracy(models::SegmenterNet& seg, const std::vector<torch::Tensor>& source,
                             const std::vector<torch::Tensor>& target, std::uint64_t seed,
                             std::int64_t iterations = 300);

/// Hard argmax prediction, [*S] uint8.
torch::Tensor predict(models::SegmenterNet& seg, const torch::Tensor& img);

double mean_dice(models::SegmenterNet& seg, const LabelledSet& set);

/// Scores predictions on target test images against vault ground truth.
metrics::MetricsReport evaluate_segmenter(models::SegmenterNet& seg,
                                          const std::vector<torch::Tensor>& images,
                                          const std::vector<std::int64_t>& target_ids,
                                          const data::LabelVault& labels,
                                          double sdsc_tolerance = 1.0,
                                          metrics::HdConvention convention =
                                              metrics::HdConvention::per_direction_max);

}  // namespace dirda::downstream

#pragma once

// Joint content-alignment training: registration R with bidirectional warping,
// discriminator D and segmenter S, updated S -> D -> R once per iteration.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dirda/dataset.hpp"
#include "dirda/losses.hpp"
#include "dirda/metrics.hpp"
#include "dirda/models.hpp"

namespace dirda::train {

namespace fs = std::filesystem;

enum class Ablation { dir_only, disc, seg, full };

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);
bool uses_disc(Ablation a);
bool uses_seg(Ablation a);

struct TrainConfig {
  double lr_reg = 1e-4;
  double lr_disc = 3e-4;
  double lr_seg = 1e-3;
  losses::LossWeights weights;
  std::int64_t iterations = 2000;
  std::int64_t batch_size = 1;
  int fold = 0;
  std::uint64_t seed = 0;
  int integration_steps = warp::kDefaultSteps;
  double grad_clip = 1.0;
  models::UNetOptions reg_net;
  models::UNetOptions seg_net;
  models::DiscriminatorOptions disc_net;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Style-aligned tensors for one fold, each image [*S] float32, masks [*S] uint8.
struct AlignmentData {
  std::vector<torch::Tensor> source_images;
  std::vector<torch::Tensor> source_masks;
  std::vector<std::int64_t> source_ids;
  std::vector<torch::Tensor> target_images;
  std::vector<std::int64_t> target_ids;
};

struct StepLosses {
  std::int64_t step = 0;
  double sim = 0, smooth = 0, disc = 0, seg = 0, total = 0;
  double d_loss = 0, s_loss = 0;
};

struct AlignmentOutput {
  models::RegistrationNet reg{nullptr};
  models::SegmenterNet seg{nullptr};
  models::DiscriminatorNet disc{nullptr};
  std::string checkpoint_hash;
  std::vector<StepLosses> curve;
};

/// Thrown when a loss turns non-finite; what() names the step, the run
/// directory receives divergence.json with per-tensor statistics.
struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

/// Runs cfg.iterations joint iterations. When `run_dir` is set, writes
/// loss_log.csv and the final R checkpoint (stem "reg") there.
AlignmentOutput train_content_alignment(const AlignmentData& data, const TrainConfig& cfg,
                                        Ablation ablation,
                                        const std::optional<fs::path>& run_dir = std::nullopt);

void write_loss_log(const fs::path& path, const std::vector<StepLosses>& curve);

struct WarpedSet {
  std::vector<Sample> samples;               // X_s->t with hard Y_s->t
  std::vector<nlohmann::json> provenance;    // parallel: source id, target id, checkpoint hash
};

/// Warps every source sample towards `pairings` randomly drawn targets.
WarpedSet warp_training_set(models::RegistrationNet& reg, const AlignmentData& data,
                            std::int64_t pairings, std::uint64_t seed, int integration_steps,
                            const std::string& checkpoint_hash);

/// Writes the warped pairs in the dataset cache format.
void export_warped_dataset(const WarpedSet& set, const fs::path& dir, const nlohmann::json& params);

/// Registration quality: each test target paired with a random test source;
/// the warped source mask is scored against the target ground truth.
metrics::MetricsReport evaluate_registration(models::RegistrationNet& reg,
                                             const AlignmentData& test_data,
                                             const data::LabelVault& target_labels,
                                             std::uint64_t seed, int integration_steps,
                                             double sdsc_tolerance = 1.0,
                                             metrics::HdConvention convention =
                                                 metrics::HdConvention::per_direction_max);

/// Sum of squared gradient norms is clipped to `max_norm` (L2 over all params).
void clip_gradients(const std::vector<torch::Tensor>& params, double max_norm);

}  // namespace dirda::train

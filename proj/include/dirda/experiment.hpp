#pragma once

// Config-driven experiment runner: data cache -> style alignment -> arm
// (content alignment, augmentation, feature UDA or nothing) -> segmenter F ->
// evaluation, plus table and figure emission over finished run directories.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dirda/downstream.hpp"
#include "dirda/io.hpp"
#include "dirda/metrics.hpp"
#include "dirda/synth_data.hpp"
#include "dirda/trainer.hpp"

namespace dirda::exp {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kCodeVersion = "0.1.0";

enum class Arm { oracle, ood, intensity, affine, deformable, feature_uda, dir };
std::string to_string(Arm a);
Arm arm_from_string(const std::string& s);

struct DataConfig {
  std::int64_t n_per_domain = 250;
  synth::MorphologySpec morphology;
  bool corrupt = true;
  int bg_patch_size = 5;
  int fg_patch_size = 15;
  double fg_alpha = 0.5;
  double noise_mean = 0.0;
  double noise_std = 0.05;
  int texture_count = 16;
  int texture_side = 64;
  double mask_threshold = 0.5;
  double val_fraction = 0.1;
  std::string digits_path;  // empty: bundled digit zeros

  [[nodiscard]] json to_json() const;
};

enum class StyleMethod { none, znorm, histogram };

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name = "run";
  std::uint64_t seed = 0;
  std::vector<int> folds{0, 1, 2};
  DataConfig data;
  StyleMethod style = StyleMethod::znorm;
  Arm arm = Arm::dir;
  train::Ablation ablation = train::Ablation::full;
  train::TrainConfig align;
  std::int64_t warp_pairings = 1;  // warped copies per source training image
  downstream::SegTrainConfig segmenter;
  double sdsc_tolerance = 1.0;
  metrics::HdConvention hd_convention = metrics::HdConvention::per_direction_max;

  /// Display name: the ablation name for the content-alignment arm.
  [[nodiscard]] std::string arm_label() const;
  [[nodiscard]] json to_json() const;
  [[nodiscard]] std::string hash() const;  // sha256 of the canonical JSON, 16 hex chars
};

/// Strict parse: unknown keys, wrong types and out-of-range values throw
/// ConfigError naming the offending field (e.g. "align.weights.seg: must be >= 0").
ExperimentConfig parse_config(const json& j);
ExperimentConfig load_config(const fs::path& path);

/// Root of the dataset cache: $DIRDA_CACHE_ROOT, else ./.dirda-cache.
fs::path cache_root();

/// Generates (or reuses) the dataset for `cfg.data` and `cfg.seed` under the
/// cache root; returns its directory.
fs::path prepare_dataset(const ExperimentConfig& cfg);

/// Per-fold training outcome, also recorded in the run manifest.
struct FoldRecord {
  int fold = 0;
  std::string seg_checkpoint_hash;
  std::string reg_checkpoint_hash;  // empty unless arm == dir
  std::size_t target_label_reads_during_training = 0;
  double best_val_dice = 0;
  std::int64_t best_step = 0;
};

struct RunResult {
  fs::path run_dir;
  std::vector<FoldRecord> folds;
  std::optional<metrics::MetricsReport> ds;  // pooled over folds
  std::optional<metrics::MetricsReport> ca;
};

enum class Stage { align, train, full };

/// Executes the pipeline into `run_dir`:
///   align  - content alignment and warped-set export only (dir arm)
///   train  - everything up to trained F checkpoints
///   full   - train, then evaluate (metrics_DS.json / metrics_CA.json)
RunResult run_experiment(const ExperimentConfig& cfg, const fs::path& run_dir,
                         Stage stage = Stage::full);

/// Evaluates checkpoints in a run directory written by the train stage.
RunResult evaluate_run(const fs::path& run_dir);

struct TableRow {
  std::string task;  // "CA" or "DS"
  std::string arm;
  std::optional<metrics::Summary> dsc, sdsc, hd95, ravd;
};

enum class TableLayout { found, baselines, ablation };
TableLayout table_layout_from_string(const std::string& s);

/// Rows from the pooled reports in each run directory. With a fixed layout,
/// every expected arm gets a row and missing ones render as "—".
std::vector<TableRow> collect_rows(const std::vector<fs::path>& run_dirs, TableLayout layout);
std::string format_csv(const std::vector<TableRow>& rows);
std::string format_text(const std::vector<TableRow>& rows);
void emit_tables(const std::vector<fs::path>& run_dirs, const fs::path& out_dir,
                 TableLayout layout = TableLayout::found);

struct PanelRecord {
  fs::path path;
  std::string kind;           // "alignment" or "segmentation"
  std::int64_t target_id = 0;
  std::vector<std::string> arms;     // segmentation columns after GT
  std::vector<double> dice;          // annotated Dice per arm column
};

/// Alignment panels (source | target | warped source | |u| heat map) from the
/// first run holding a registration checkpoint, and segmentation panels
/// (image | GT | one prediction per run, Dice annotated) for `count` target
/// test samples of fold 0.
std::vector<PanelRecord> emit_figures(const std::vector<fs::path>& run_dirs, const fs::path& out_dir,
                                      std::int64_t count = 4);

/// Magnitude heat map of a 2D displacement, fixed colour scale [0, hi].
io::Raster deformation_heatmap(const warp::DeformationField& field, double hi, int scale = 4);

}  // namespace dirda::exp

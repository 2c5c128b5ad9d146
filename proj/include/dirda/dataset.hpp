#pragma once

// On-disk dataset cache and the target-label access guard.
//
// Cache layout (schema_version 1):
//   <dir>/manifest.json          checksums, split membership, generation params
//   <dir>/samples/<domain>_<id>.smp   image (+ mask for source / warped samples)
//   <dir>/labels/target_<id>.smp      target ground truth, evaluation only
//
// A .smp file is the 10-byte magic "DIRDA-SMP\n", a little-endian uint64 header
// length, a JSON header, then the raw image (float32, C order) followed by the
// mask (uint8) when header.has_mask is true.

#include <array>
#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dirda/synth_data.hpp"

namespace dirda::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Marks a training phase. While any phase that forbids target labels is
/// active, every LabelVault read throws LabelLeakError.
class TrainingPhase {
 public:
  TrainingPhase(std::string arm, bool target_labels_allowed);
  ~TrainingPhase();
  TrainingPhase(const TrainingPhase&) = delete;
  TrainingPhase& operator=(const TrainingPhase&) = delete;

  static bool target_labels_locked();
  static const std::string& current_arm();

 private:
  bool locked_;
  std::string previous_arm_;
};

/// Target ground truth, either in memory or as files under labels/.
class LabelVault {
 public:
  LabelVault() = default;
  explicit LabelVault(std::vector<LabelMask> masks);
  static LabelVault on_disk(fs::path labels_dir, std::size_t count);

  [[nodiscard]] LabelMask read(std::int64_t id) const;
  [[nodiscard]] std::size_t size() const { return count_; }
  [[nodiscard]] std::size_t access_count() const { return accesses_.load(); }
  /// Reads attempted while locked (each also threw).
  [[nodiscard]] std::size_t denied_count() const { return denied_.load(); }

  LabelVault(LabelVault&& other) noexcept;
  LabelVault& operator=(LabelVault&& other) noexcept;

 private:
  std::vector<LabelMask> masks_;
  fs::path dir_;
  std::size_t count_ = 0;
  mutable std::atomic<std::size_t> accesses_{0};
  mutable std::atomic<std::size_t> denied_{0};
};

void write_sample(const fs::path& path, const Sample& sample, const json& extra = json::object());
Sample read_sample(const fs::path& path, json* header = nullptr);

struct Dataset {
  std::vector<Sample> source;
  std::vector<Sample> target;
  LabelVault target_labels;
  std::array<synth::DatasetSplit, 3> splits;
  json manifest;
};

/// Writes the cache; `params` is recorded verbatim in the manifest.
void write_dataset(const fs::path& dir, const synth::MorphoSet& set,
                   const std::array<synth::DatasetSplit, 3>& splits, const json& params);

/// Loads a cache written by write_dataset. Target labels stay on disk behind
/// the vault. Checksums are verified unless `verify` is false.
Dataset load_dataset(const fs::path& dir, bool verify = true);

/// Flat set of labelled samples (e.g. an exported warped training set).
void write_labelled_set(const fs::path& dir, const std::vector<Sample>& samples,
                        const std::vector<json>& provenance, const json& params);
std::vector<Sample> load_labelled_set(const fs::path& dir, json* manifest = nullptr);

}  // namespace dirda::data

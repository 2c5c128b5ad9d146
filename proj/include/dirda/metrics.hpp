#pragma once

// Segmentation quality metrics on binary masks (2D or 3D, any integer dtype;
// nonzero = foreground). Distances are Euclidean, in pixels.
//
// Boundary convention: a foreground pixel is on the boundary when any of its
// 2*rank face neighbours is background; neighbours outside the grid count as
// background.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dirda/types.hpp"

namespace dirda::metrics {

enum class HdConvention {
  per_direction_max,  // max of the two directed 95th percentiles
  pooled,             // 95th percentile of both directions' distances together
};

double dsc(const torch::Tensor& a, const torch::Tensor& b);

/// Pooled surface Dice: boundary points of either mask within `tolerance` of
/// the other's boundary, over all boundary points. 1 if both masks are empty,
/// 0 if exactly one is.
double sdsc(const torch::Tensor& a, const torch::Tensor& b, double tolerance = 1.0);

/// Empty when exactly one mask is empty (undefined); 0 when both are.
std::optional<double> hd95(const torch::Tensor& a, const torch::Tensor& b,
                           HdConvention convention = HdConvention::per_direction_max);

/// 100 * | |pred| - |ref| | / |ref|. Empty when the reference is empty.
std::optional<double> ravd(const torch::Tensor& pred, const torch::Tensor& ref);

/// Boundary pixels as a 0/1 uint8 tensor.
torch::Tensor boundary(const torch::Tensor& mask);

/// Distance from every boundary point of `from` to the nearest boundary point
/// of `to`, in row-major order of `from`'s boundary points.
std::vector<double> boundary_distances(const torch::Tensor& from, const torch::Tensor& to);

/// Squared Euclidean distance transform to the nonzero pixels of `seeds`.
/// Pixels with no seed anywhere get +infinity.
torch::Tensor squared_distance_transform(const torch::Tensor& seeds);

/// Linear-interpolation percentile of an unsorted sample.
double percentile(std::vector<double> values, double pct);

struct SampleMetrics {
  std::string id;
  double dsc = 0;
  double sdsc = 0;
  std::optional<double> hd95;
  std::optional<double> ravd;
};

SampleMetrics evaluate_pair(std::string id, const torch::Tensor& pred, const torch::Tensor& ref,
                            double sdsc_tolerance = 1.0,
                            HdConvention convention = HdConvention::per_direction_max);

struct Summary {
  double mean = 0;
  double std = 0;  // population standard deviation
  std::size_t count = 0;
  std::size_t missing = 0;
};

struct MetricsReport {
  std::string arm;
  std::string task = "DS";  // "CA" (content alignment) or "DS" (downstream segmentation)
  int fold = -1;            // -1: pooled over folds
  std::string checkpoint_hash;
  double sdsc_tolerance = 1.0;
  HdConvention hd_convention = HdConvention::per_direction_max;
  std::vector<SampleMetrics> per_sample;

  [[nodiscard]] Summary summary(const std::string& metric) const;
  [[nodiscard]] nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Concatenate per-sample entries of several reports (e.g. folds) into one.
MetricsReport pool(const std::vector<MetricsReport>& reports, const std::string& arm);

}  // namespace dirda::metrics

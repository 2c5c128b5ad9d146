#pragma once

#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dirda/types.hpp"

namespace dirda::style {

/// z-score over the whole image, or over the pixels where `region` is nonzero.
/// Statistics are computed in double precision; output keeps the input dtype.
/// Throws DegenerateInputError for zero variance or fewer than 2 region pixels.
Image znorm(const Image& img, const std::optional<torch::Tensor>& region = std::nullopt);

/// Percentile with linear interpolation between order statistics.
double percentile(const torch::Tensor& values, double pct);

/// 1st, 10th, 20th, ..., 90th, 99th.
std::vector<double> default_landmarks();

struct HistogramStandard {
  std::vector<double> landmark_percentiles;
  std::vector<double> landmark_values;
  std::pair<double, double> intensity_range{0.0, 1.0};

  [[nodiscard]] nlohmann::json to_json() const;
  static HistogramStandard from_json(const nlohmann::json& j);
};

HistogramStandard fit_histogram_standard(const std::vector<Image>& images,
                                         const std::vector<double>& percentiles = default_landmarks());

struct StandardisedImage {
  Image image;
  bool used_fallback = false;  // landmarks collapsed: linear min-max map used instead
};

/// Monotone piecewise-linear map of the image's own landmarks onto the
/// standard's; the end segments extend linearly past the outer landmarks.
StandardisedImage apply_histogram_standard(const Image& img, const HistogramStandard& standard);

}  // namespace dirda::style

#include "dirda/style_align.hpp"

#include <algorithm>
#include <cmath>

namespace dirda::style {

Image znorm(const Image& img, const std::optional<torch::Tensor>& region) {
  const auto x = img.pixels.to(torch::kFloat64);
  torch::Tensor values = x.flatten();
  if (region) {
    require(region->sizes() == img.pixels.sizes(), "znorm region shape differs from image");
    values = x.masked_select(region->ne(0));
  }
  if (values.numel() < 2) throw DegenerateInputError("znorm region has fewer than 2 pixels");
  const double mean = values.mean().item<double>();
  const double sd = (values - mean).pow(2).mean().sqrt().item<double>();
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw DegenerateInputError("znorm on a constant region (zero variance)");
  }
  return Image{((x - mean) / sd).to(img.pixels.scalar_type()), img.domain};
}

double percentile(const torch::Tensor& values, double pct) {
  require(values.numel() > 0, "percentile of an empty tensor");
  require(pct >= 0.0 && pct <= 100.0, "percentile outside [0,100]");
  const auto sorted = std::get<0>(values.to(torch::kFloat64).flatten().sort());
  const auto n = sorted.numel();
  const double pos = pct / 100.0 * static_cast<double>(n - 1);
  const auto lo = static_cast<std::int64_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, n - 1);
  const double t = pos - static_cast<double>(lo);
  const auto a = sorted[lo].item<double>(), b = sorted[hi].item<double>();
  return a + t * (b - a);
}

namespace {

std::vector<double> landmarks_of(const torch::Tensor& pixels, const std::vector<double>& pcts) {
  const auto sorted = std::get<0>(pixels.to(torch::kFloat64).flatten().sort()).contiguous();
  const auto n = sorted.numel();
  const double* v = sorted.data_ptr<double>();
  std::vector<double> out;
  out.reserve(pcts.size());
  for (double p : pcts) {
    const double pos = p / 100.0 * static_cast<double>(n - 1);
    const auto lo = static_cast<std::int64_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, n - 1);
    out.push_back(v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]));
  }
  return out;
}

void validate_percentiles(const std::vector<double>& pcts) {
  if (pcts.size() < 2) throw ConfigError("need at least two landmark percentiles");
  for (std::size_t i = 0; i < pcts.size(); ++i) {
    if (!(pcts[i] > 0.0 && pcts[i] < 100.0)) throw ConfigError("percentiles must lie in (0,100)");
    if (i > 0 && !(pcts[i] > pcts[i - 1])) throw ConfigError("percentiles must increase strictly");
  }
}

}  // namespace

std::vector<double> default_landmarks() { return {1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99}; }

nlohmann::json HistogramStandard::to_json() const {
  return {{"schema_version", 1},
          {"percentiles", landmark_percentiles},
          {"values", landmark_values},
          {"intensity_range", {intensity_range.first, intensity_range.second}}};
}

HistogramStandard HistogramStandard::from_json(const nlohmann::json& j) {
  HistogramStandard s;
  s.landmark_percentiles = j.at("percentiles").get<std::vector<double>>();
  s.landmark_values = j.at("values").get<std::vector<double>>();
  const auto r = j.at("intensity_range").get<std::vector<double>>();
  if (r.size() != 2) throw ConfigError("intensity_range must have two entries");
  s.intensity_range = {r[0], r[1]};
  validate_percentiles(s.landmark_percentiles);
  if (s.landmark_values.size() != s.landmark_percentiles.size()) {
    throw ConfigError("landmark values and percentiles differ in length");
  }
  return s;
}

HistogramStandard fit_histogram_standard(const std::vector<Image>& images,
                                         const std::vector<double>& percentiles) {
  if (images.empty()) throw ConfigError("fit_histogram_standard needs at least one image");
  validate_percentiles(percentiles);
  HistogramStandard s;
  s.landmark_percentiles = percentiles;
  s.landmark_values.assign(percentiles.size(), 0.0);
  double lo = 0, hi = 0;
  for (const auto& img : images) {
    const auto lm = landmarks_of(img.pixels, percentiles);
    for (std::size_t i = 0; i < lm.size(); ++i) s.landmark_values[i] += lm[i];
    lo += img.pixels.min().item<double>();
    hi += img.pixels.max().item<double>();
  }
  const auto n = static_cast<double>(images.size());
  for (auto& v : s.landmark_values) v /= n;
  // averaging sorted vectors keeps them sorted; guard rounding anyway
  for (std::size_t i = 1; i < s.landmark_values.size(); ++i) {
    s.landmark_values[i] = std::max(s.landmark_values[i], s.landmark_values[i - 1]);
  }
  s.intensity_range = {lo / n, hi / n};
  return s;
}

StandardisedImage apply_histogram_standard(const Image& img, const HistogramStandard& standard) {
  const auto& dst = standard.landmark_values;
  require(!dst.empty() && dst.size() == standard.landmark_percentiles.size(),
          "histogram standard is not trained");
  const auto src = landmarks_of(img.pixels, standard.landmark_percentiles);
  const auto x = img.pixels.to(torch::kFloat64).contiguous();

  bool collapsed = false;
  for (std::size_t i = 1; i < src.size(); ++i) collapsed = collapsed || !(src[i] > src[i - 1]);

  if (collapsed) {
    const double lo = x.min().item<double>(), hi = x.max().item<double>();
    const auto [dlo, dhi] = standard.intensity_range;
    auto y = hi > lo ? dlo + (x - lo) * ((dhi - dlo) / (hi - lo)) : torch::full_like(x, dlo);
    return {Image{y.to(img.pixels.scalar_type()), img.domain}, true};
  }

  auto y = torch::empty_like(x);
  const double* in = x.data_ptr<double>();
  double* out = y.data_ptr<double>();
  const auto k = src.size();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = in[i];
    // segment index: first landmark >= v, clamped to the end segments
    auto it = std::lower_bound(src.begin(), src.end(), v);
    std::size_t seg = static_cast<std::size_t>(it - src.begin());
    seg = std::clamp<std::size_t>(seg, 1, k - 1);
    const double t = (v - src[seg - 1]) / (src[seg] - src[seg - 1]);
    out[i] = dst[seg - 1] + t * (dst[seg] - dst[seg - 1]);
  }
  return {Image{y.to(img.pixels.scalar_type()), img.domain}, false};
}

}  // namespace dirda::style

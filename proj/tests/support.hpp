#pragma once

// Test-only helpers: reference implementations written with plain loops, and
// random input generators. Nothing here calls the code under test.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace testing {

/// Bilinear sample of a 2D double grid at (y, x), coordinates clamped to the
/// grid. Reference for warp::warp.
inline double bilinear(const std::vector<double>& img, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = std::min(int(std::floor(y)), std::max(h - 2, 0));
  const int x0 = std::min(int(std::floor(x)), std::max(w - 2, 0));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](int yy, int xx) { return img[std::size_t(yy) * w + xx]; };
  return (1 - fy) * (1 - fx) * at(y0, x0) + (1 - fy) * fx * at(y0, x1) + fy * (1 - fx) * at(y1, x0) +
         fy * fx * at(y1, x1);
}

inline std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

/// Displacement [2, H, W] as two flat channel vectors.
struct Field2 {
  int h = 0, w = 0;
  std::vector<double> dy, dx;
};

inline Field2 field_from(const torch::Tensor& disp) {  // disp [1, 2, H, W]
  Field2 f;
  f.h = int(disp.size(2));
  f.w = int(disp.size(3));
  f.dy = to_vec(disp[0][0]);
  f.dx = to_vec(disp[0][1]);
  return f;
}

inline std::vector<double> warp_ref(const std::vector<double>& img, const Field2& f) {
  std::vector<double> out(img.size());
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const auto i = std::size_t(y) * f.w + x;
      out[i] = bilinear(img, f.h, f.w, y + f.dy[i], x + f.dx[i]);
    }
  }
  return out;
}

/// (a ∘ b): b + a(identity + b).
inline Field2 compose_ref(const Field2& a, const Field2& b) {
  Field2 out = b;
  const auto ay = warp_ref(a.dy, b), ax = warp_ref(a.dx, b);
  for (std::size_t i = 0; i < out.dy.size(); ++i) {
    out.dy[i] += ay[i];
    out.dx[i] += ax[i];
  }
  return out;
}

inline Field2 integrate_ref(Field2 v, int steps) {
  const double scale = std::ldexp(1.0, -steps);
  for (auto* c : {&v.dy, &v.dx}) {
    for (auto& x : *c) x *= scale;
  }
  for (int i = 0; i < steps; ++i) v = compose_ref(v, v);
  return v;
}

/// Smooth random velocity [1, D, *S] in double precision: white noise blurred
/// by repeated 3-tap box filtering, scaled to a peak magnitude.
inline torch::Tensor smooth_field(std::vector<std::int64_t> spatial, double peak, std::uint64_t seed,
                                  int passes = 6, torch::Dtype dtype = torch::kFloat64) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<std::int64_t> shape{1, std::int64_t(spatial.size())};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  auto v = torch::empty(shape, torch::kFloat64);
  auto* p = v.data_ptr<double>();
  for (std::int64_t i = 0; i < v.numel(); ++i) p[i] = n01(rng);
  for (int k = 0; k < passes; ++k) {
    for (std::int64_t axis = 2; axis < v.dim(); ++axis) {
      const auto n = v.size(axis);
      auto prev = torch::cat({v.narrow(axis, 0, 1), v.narrow(axis, 0, n - 1)}, axis);
      auto next = torch::cat({v.narrow(axis, 1, n - 1), v.narrow(axis, n - 1, 1)}, axis);
      v = (prev + v + next) / 3.0;
    }
  }
  const double m = v.pow(2).sum(1).sqrt().max().item<double>();
  return (v * (peak / m)).to(dtype);
}

/// Random binary mask [h, w] uint8 of blobs: each pixel on with probability
/// `density`, then optionally one smoothing pass for larger components.
inline torch::Tensor random_mask(int h, int w, std::mt19937_64& rng, double density) {
  std::bernoulli_distribution on(density);
  auto m = torch::zeros({h, w}, torch::kUInt8);
  auto* p = m.data_ptr<std::uint8_t>();
  for (int i = 0; i < h * w; ++i) p[i] = on(rng) ? 1 : 0;
  return m;
}

}  // namespace testing

#pragma once

// Differentiable geometry engine.
//
// Every field is stored channel-first as displacements in pixel units:
// shape [N, D, *spatial] with D = number of spatial axes (2 or 3). Channel d
// displaces along spatial axis d (axis 0 = rows for 2D). The absolute map is
// identity + displacement, added on demand, so a zero tensor is the identity.
//
// All operations are composed from differentiable tensor primitives and take
// part in autograd.

#include <cstdint>
#include <filesystem>

#include "dirda/types.hpp"

namespace dirda::warp {

inline constexpr int kDefaultSteps = 7;

enum class Interp { linear, nearest };

struct VelocityField {
  torch::Tensor vectors;  // [N, D, *S]
};

struct DeformationField {
  torch::Tensor displacement;  // [N, D, *S]

  [[nodiscard]] std::int64_t rank() const { return displacement.size(1); }
  [[nodiscard]] torch::Tensor absolute() const;  // identity + displacement
};

/// Identity sample coordinates, [1, D, *S], same dtype/device as `like`.
torch::Tensor identity_grid(at::IntArrayRef spatial, const torch::TensorOptions& opts);

DeformationField identity_field(std::int64_t batch, at::IntArrayRef spatial,
                                const torch::TensorOptions& opts = torch::kFloat32);

/// Resample `img` ([N, C, *S]) at identity + displacement. Samples falling
/// outside the grid take the nearest border value.
torch::Tensor warp(const torch::Tensor& img, const DeformationField& field,
                   Interp interp = Interp::linear);

/// (outer ∘ inner)(x) = outer(inner(x)).
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

/// exp(v) by scaling and squaring: start from v / 2^steps, then self-compose
/// `steps` times.
DeformationField integrate(const VelocityField& v, int steps = kDefaultSteps);

/// exp(-v).
DeformationField inverse_field(const VelocityField& v, int steps = kDefaultSteps);

/// Central-difference Jacobian determinant of the absolute map at interior
/// points. Result shape [N, *(S - 2)].
torch::Tensor jacobian_determinant(const DeformationField& field);

/// Hard labels ([N, *S] integer) to one-hot float ([N, K, *S]).
torch::Tensor one_hot(const torch::Tensor& labels, std::int64_t num_classes);

/// Warp a hard label map through its one-hot encoding with linear
/// interpolation. Returns the soft one-hot result; argmax over dim 1 recovers
/// hard labels.
torch::Tensor warp_labels_soft(const torch::Tensor& labels, const DeformationField& field,
                               std::int64_t num_classes = 2);
torch::Tensor warp_labels(const torch::Tensor& labels, const DeformationField& field,
                          std::int64_t num_classes = 2);

/// Per-pixel displacement magnitude, [N, *S].
torch::Tensor displacement_magnitude(const DeformationField& field);

/// Dense export: the displacement as a .npy array, plus a magnitude heat map
/// (2D fields only) as binary PPM next to it.
void export_field(const DeformationField& field, const std::filesystem::path& npy_path,
                  const std::filesystem::path& heatmap_path = {});

}  // namespace dirda::warp

#include "dirda/warp.hpp"

#include <vector>

#include "dirda/io.hpp"

namespace dirda::warp {

namespace {

std::vector<std::int64_t> spatial_of(const torch::Tensor& t) {
  return {t.sizes().begin() + 2, t.sizes().end()};
}

void check_field(const torch::Tensor& disp) {
  require(disp.defined(), "deformation field is undefined");
  require(disp.dim() >= 4 && disp.dim() <= 5, "field must be [N, D, *S] with D in {2,3}");
  require(disp.size(1) == disp.dim() - 2, "field channel count must equal its spatial rank");
}

void check_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

torch::Tensor identity_grid(at::IntArrayRef spatial, const torch::TensorOptions& opts) {
  std::vector<torch::Tensor> axes;
  axes.reserve(spatial.size());
  for (auto n : spatial) axes.push_back(torch::arange(n, opts));
  auto mesh = torch::meshgrid(axes, "ij");
  return torch::stack(mesh, 0).unsqueeze(0);
}

torch::Tensor DeformationField::absolute() const {
  check_field(displacement);
  return displacement + identity_grid(spatial_of(displacement), displacement.options());
}

DeformationField identity_field(std::int64_t batch, at::IntArrayRef spatial,
                                const torch::TensorOptions& opts) {
  std::vector<std::int64_t> shape{batch, static_cast<std::int64_t>(spatial.size())};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return {torch::zeros(shape, opts)};
}

torch::Tensor warp(const torch::Tensor& img, const DeformationField& field, Interp interp) {
  const auto& disp = field.displacement;
  check_field(disp);
  require(img.dim() == disp.dim(), "image and field rank differ");
  const auto spatial = spatial_of(disp);
  require(spatial_of(img) == spatial, "image and field spatial shapes differ");
  require(img.size(0) == disp.size(0) || disp.size(0) == 1,
          "image and field batch sizes differ");

  const auto rank = static_cast<std::int64_t>(spatial.size());
  const auto batch = img.size(0);
  const auto channels = img.size(1);
  std::int64_t numel = 1;
  for (auto s : spatial) numel *= s;

  std::vector<std::int64_t> strides(rank, 1);
  for (auto d = rank - 2; d >= 0; --d) strides[d] = strides[d + 1] * spatial[d + 1];

  std::vector<std::int64_t> full{batch, rank};
  full.insert(full.end(), spatial.begin(), spatial.end());
  const auto coords = (disp + identity_grid(spatial, disp.options())).expand(full);

  const auto flat = img.reshape({batch, channels, numel});
  auto gather = [&](const torch::Tensor& index) {
    auto idx = index.reshape({batch, 1, numel}).expand({batch, channels, numel});
    std::vector<std::int64_t> out_shape{batch, channels};
    out_shape.insert(out_shape.end(), spatial.begin(), spatial.end());
    return flat.gather(2, idx).reshape(out_shape);
  };

  if (interp == Interp::nearest) {
    torch::Tensor acc;
    for (std::int64_t d = 0; d < rank; ++d) {
      auto c = coords.select(1, d).detach().clamp(0, spatial[d] - 1).round().to(torch::kLong);
      acc = acc.defined() ? acc + c * strides[d] : c * strides[d];
    }
    return gather(acc);
  }

  std::vector<torch::Tensor> lo(rank), hi(rank), frac(rank);
  for (std::int64_t d = 0; d < rank; ++d) {
    auto c = coords.select(1, d).clamp(0, spatial[d] - 1);
    auto f = c.detach().floor().clamp(0, std::max<std::int64_t>(spatial[d] - 2, 0));
    frac[d] = c - f;
    lo[d] = f.to(torch::kLong);
    hi[d] = (lo[d] + 1).clamp_max(spatial[d] - 1);
  }

  torch::Tensor out;
  for (std::int64_t corner = 0; corner < (std::int64_t{1} << rank); ++corner) {
    torch::Tensor index;
    torch::Tensor weight;
    for (std::int64_t d = 0; d < rank; ++d) {
      const bool upper = (corner >> d) & 1;
      auto term = (upper ? hi[d] : lo[d]) * strides[d];
      auto w = upper ? frac[d] : 1 - frac[d];
      index = index.defined() ? index + term : term;
      weight = weight.defined() ? weight * w : w;
    }
    auto contribution = weight.unsqueeze(1) * gather(index);
    out = out.defined() ? out + contribution : contribution;
  }
  return out;
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
  return {inner.displacement + warp(outer.displacement, inner, Interp::linear)};
}

DeformationField integrate(const VelocityField& v, int steps) {
  if (steps < 1) throw ConfigError("integration steps must be >= 1");
  check_field(v.vectors);
  check_finite(v.vectors, "velocity field");
  DeformationField phi{v.vectors / static_cast<double>(std::int64_t{1} << steps)};
  for (int i = 0; i < steps; ++i) phi = compose(phi, phi);
  return phi;
}

DeformationField inverse_field(const VelocityField& v, int steps) {
  return integrate(VelocityField{-v.vectors}, steps);
}

torch::Tensor jacobian_determinant(const DeformationField& field) {
  check_field(field.displacement);
  const auto phi = field.absolute();
  const auto rank = field.rank();
  const auto spatial = spatial_of(phi);
  for (auto s : spatial) require(s >= 3, "jacobian needs at least 3 samples per axis");

  // interior crop along every spatial axis except `skip`
  auto interior = [&](torch::Tensor t, std::int64_t skip) {
    for (std::int64_t a = 0; a < rank; ++a) {
      if (a != skip) t = t.narrow(a + 1, 1, spatial[a] - 2);
    }
    return t;
  };

  std::vector<std::vector<torch::Tensor>> jac(rank, std::vector<torch::Tensor>(rank));
  for (std::int64_t i = 0; i < rank; ++i) {
    auto comp = phi.select(1, i);  // [N, *S]
    for (std::int64_t j = 0; j < rank; ++j) {
      auto fwd = comp.narrow(j + 1, 2, spatial[j] - 2);
      auto bwd = comp.narrow(j + 1, 0, spatial[j] - 2);
      jac[i][j] = interior((fwd - bwd) / 2, j);
    }
  }
  if (rank == 2) return jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
  return jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1]) -
         jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0]) +
         jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
}

torch::Tensor one_hot(const torch::Tensor& labels, std::int64_t num_classes) {
  auto oh = torch::one_hot(labels.to(torch::kLong), num_classes);  // [N, *S, K]
  std::vector<std::int64_t> perm{0, oh.dim() - 1};
  for (std::int64_t d = 1; d < oh.dim() - 1; ++d) perm.push_back(d);
  return oh.permute(perm).to(torch::kFloat32).contiguous();
}

torch::Tensor warp_labels_soft(const torch::Tensor& labels, const DeformationField& field,
                               std::int64_t num_classes) {
  auto oh = warp::one_hot(labels, num_classes).to(field.displacement.scalar_type());
  return warp(oh, field, Interp::linear);
}

torch::Tensor warp_labels(const torch::Tensor& labels, const DeformationField& field,
                          std::int64_t num_classes) {
  return warp_labels_soft(labels, field, num_classes).argmax(1).to(torch::kUInt8);
}

torch::Tensor displacement_magnitude(const DeformationField& field) {
  check_field(field.displacement);
  return field.displacement.pow(2).sum(1).sqrt();
}

void export_field(const DeformationField& field, const std::filesystem::path& npy_path,
                  const std::filesystem::path& heatmap_path) {
  auto disp = field.displacement.detach().to(torch::kFloat32).contiguous();
  io::write_npy(npy_path, disp);
  if (!heatmap_path.empty() && field.rank() == 2) {
    auto mag = displacement_magnitude(DeformationField{disp})[0];
    const double hi = std::max(mag.max().item<double>(), 1e-6);
    io::write_ppm(heatmap_path, io::render_heat(mag, hi, 4));
  }
}

}  // namespace dirda::warp

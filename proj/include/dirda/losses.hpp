#pragma once

#include <json.hpp>

#include "dirda/models.hpp"
#include "dirda/warp.hpp"

namespace dirda::losses {

inline constexpr double kDiceEpsilon = 1e-5;

struct LossWeights {
  double sim = 1.0;
  double smooth = 0.001;
  double disc = 0.0001;
  double seg = 0.01;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

/// MSE(x_s2t, x_t) + MSE(x_t2s, x_s), each mean-reduced over all elements.
torch::Tensor sim(const torch::Tensor& x_s2t, const torch::Tensor& x_t,
                  const torch::Tensor& x_t2s, const torch::Tensor& x_s);

/// Squared forward differences of one displacement field: for every spatial
/// axis, the mean over (batch, components, positions) of (u[x+1] - u[x])^2,
/// summed over axes. A ramp u_i = a * x_i gives a^2.
torch::Tensor gradient_l2(const torch::Tensor& displacement);

/// gradient_l2(phi) + gradient_l2(phi_inv).
torch::Tensor smooth(const warp::DeformationField& phi, const warp::DeformationField& phi_inv);

/// Non-saturating generator term: BCE of D(x_s2t) against the real label,
/// mean of -log sigmoid(z).
torch::Tensor disc_generator(const torch::Tensor& logit_fake);

/// (BCE(real -> 1) + BCE(fake -> 0)) / 2.
torch::Tensor disc_discriminator(const torch::Tensor& logit_real, const torch::Tensor& logit_fake);

/// Soft Dice loss: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per sample
/// and per foreground class (k >= 1), averaged. Inputs [N, K, *S].
torch::Tensor dice(const torch::Tensor& pred, const torch::Tensor& target,
                   double eps = kDiceEpsilon);

/// Dice of the segmenter on the backward-warped target against the source
/// labels. The segmenter is frozen for this term: its parameters receive no
/// gradient; only x_t2s (and through it R) does.
torch::Tensor seg_feedback(models::SegmenterNet& seg, const torch::Tensor& x_t2s,
                           const torch::Tensor& y_s_onehot);

struct LossParts {
  torch::Tensor sim, smooth, disc, seg;
};

/// Weighted sum; undefined parts are skipped.
torch::Tensor combined(const LossParts& parts, const LossWeights& w);

}  // namespace dirda::losses

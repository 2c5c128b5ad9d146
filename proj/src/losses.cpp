#include "dirda/losses.hpp"

#include <cmath>

namespace dirda::losses {

void LossWeights::validate() const {
  for (double w : {sim, smooth, disc, seg}) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
}

nlohmann::json LossWeights::to_json() const {
  return {{"sim", sim}, {"smooth", smooth}, {"disc", disc}, {"seg", seg}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.sim = j.value("sim", w.sim);
  w.smooth = j.value("smooth", w.smooth);
  w.disc = j.value("disc", w.disc);
  w.seg = j.value("seg", w.seg);
  w.validate();
  return w;
}

torch::Tensor sim(const torch::Tensor& x_s2t, const torch::Tensor& x_t,
                  const torch::Tensor& x_t2s, const torch::Tensor& x_s) {
  require(x_s2t.sizes() == x_t.sizes(), "sim: forward pair shapes differ");
  require(x_t2s.sizes() == x_s.sizes(), "sim: backward pair shapes differ");
  return (x_s2t - x_t).pow(2).mean() + (x_t2s - x_s).pow(2).mean();
}

torch::Tensor gradient_l2(const torch::Tensor& displacement) {
  require(displacement.dim() >= 3, "displacement must be [N, D, *S]");
  torch::Tensor total = torch::zeros({}, displacement.options());
  for (std::int64_t axis = 2; axis < displacement.dim(); ++axis) {
    const auto n = displacement.size(axis);
    if (n < 2) continue;
    const auto diff = displacement.narrow(axis, 1, n - 1) - displacement.narrow(axis, 0, n - 1);
    total = total + diff.pow(2).mean();
  }
  return total;
}

torch::Tensor smooth(const warp::DeformationField& phi, const warp::DeformationField& phi_inv) {
  return gradient_l2(phi.displacement) + gradient_l2(phi_inv.displacement);
}

torch::Tensor disc_generator(const torch::Tensor& logit_fake) {
  return torch::softplus(-logit_fake).mean();
}

torch::Tensor disc_discriminator(const torch::Tensor& logit_real, const torch::Tensor& logit_fake) {
  return 0.5 * (torch::softplus(-logit_real).mean() + torch::softplus(logit_fake).mean());
}

torch::Tensor dice(const torch::Tensor& pred, const torch::Tensor& target, double eps) {
  require(pred.sizes() == target.sizes(), "dice: prediction and target shapes differ");
  require(pred.dim() >= 3 && pred.size(1) >= 2, "dice expects [N, K>=2, *S]");
  const auto p = pred.narrow(1, 1, pred.size(1) - 1).flatten(2);
  const auto t = target.narrow(1, 1, target.size(1) - 1).to(pred.scalar_type()).flatten(2);
  const auto inter = (p * t).sum(2);
  const auto denom = p.sum(2) + t.sum(2);
  return (1 - (2 * inter + eps) / (denom + eps)).mean();
}

torch::Tensor seg_feedback(models::SegmenterNet& seg, const torch::Tensor& x_t2s,
                           const torch::Tensor& y_s_onehot) {
  models::Freeze frozen(*seg);
  return dice(seg->forward(x_t2s), y_s_onehot);
}

torch::Tensor combined(const LossParts& parts, const LossWeights& w) {
  torch::Tensor total;
  auto add = [&](const torch::Tensor& part, double weight) {
    if (!part.defined()) return;
    auto term = part * weight;
    total = total.defined() ? total + term : term;
  };
  add(parts.sim, w.sim);
  add(parts.smooth, w.smooth);
  add(parts.disc, w.disc);
  add(parts.seg, w.seg);
  return total.defined() ? total : torch::zeros({});
}

}  // namespace dirda::losses

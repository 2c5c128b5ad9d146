#include "dirda/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dirda/losses.hpp"
#include "dirda/trainer.hpp"

namespace dirda::downstream {

std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::intensity: return "intensity";
    case Augmentation::affine: return "affine";
    case Augmentation::deformable: return "deformable";
  }
  return "?";
}

Augmentation augmentation_from_string(const std::string& s) {
  if (s == "none") return Augmentation::none;
  if (s == "intensity") return Augmentation::intensity;
  if (s == "affine") return Augmentation::affine;
  if (s == "deformable") return Augmentation::deformable;
  throw ConfigError("unknown augmentation: " + s);
}

void SegTrainConfig::validate() const {
  require_config(lr > 0 && lr_domain > 0, "learning rates must be > 0");
  require_config(iterations >= 0, "iterations must be >= 0");
  require_config(batch_size >= 1, "batch_size must be >= 1");
  require_config(val_every >= 1, "val_every must be >= 1");
  require_config(grad_clip > 0, "grad_clip must be > 0");
  require_config(aug_probability >= 0 && aug_probability <= 1, "aug_probability must be in [0, 1]");
  require_config(confusion_weight >= 0, "confusion_weight must be >= 0");
  require_config(intensity.gamma_min > 0 && intensity.gamma_min <= intensity.gamma_max,
                 "intensity gamma range must satisfy 0 < min <= max");
  require_config(intensity.brightness >= 0 && intensity.contrast >= 0 && intensity.contrast < 1 &&
                     intensity.noise_std >= 0,
                 "intensity magnitudes must be >= 0 (contrast < 1)");
  require_config(affine.rotation_deg >= 0 && affine.scale >= 0 && affine.scale < 1 &&
                     affine.translate >= 0,
                 "affine magnitudes must be >= 0 (scale < 1)");
  require_config(deformable.max_displacement >= 0 && deformable.smoothing_sigma > 0 &&
                     deformable.integration_steps >= 1,
                 "deformable parameters out of range");
}

nlohmann::json SegTrainConfig::to_json() const {
  return {{"lr", lr},
          {"iterations", iterations},
          {"batch_size", batch_size},
          {"val_every", val_every},
          {"cross_entropy", cross_entropy},
          {"seed", seed},
          {"grad_clip", grad_clip},
          {"aug_probability", aug_probability},
          {"augmentation", to_string(augmentation)},
          {"intensity",
           {{"gamma_min", intensity.gamma_min},
            {"gamma_max", intensity.gamma_max},
            {"brightness", intensity.brightness},
            {"contrast", intensity.contrast},
            {"noise_std", intensity.noise_std}}},
          {"affine",
           {{"rotation_deg", affine.rotation_deg},
            {"scale", affine.scale},
            {"translate", affine.translate}}},
          {"deformable",
           {{"max_displacement", deformable.max_displacement},
            {"smoothing_sigma", deformable.smoothing_sigma},
            {"integration_steps", deformable.integration_steps}}},
          {"net", net.to_json()},
          {"confusion_weight", confusion_weight},
          {"lr_domain", lr_domain}};
}

SegTrainConfig SegTrainConfig::from_json(const nlohmann::json& j) {
  SegTrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.val_every = j.value("val_every", c.val_every);
  c.cross_entropy = j.value("cross_entropy", c.cross_entropy);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.aug_probability = j.value("aug_probability", c.aug_probability);
  if (j.contains("augmentation")) c.augmentation = augmentation_from_string(j.at("augmentation"));
  if (j.contains("intensity")) {
    const auto& a = j.at("intensity");
    c.intensity.gamma_min = a.value("gamma_min", c.intensity.gamma_min);
    c.intensity.gamma_max = a.value("gamma_max", c.intensity.gamma_max);
    c.intensity.brightness = a.value("brightness", c.intensity.brightness);
    c.intensity.contrast = a.value("contrast", c.intensity.contrast);
    c.intensity.noise_std = a.value("noise_std", c.intensity.noise_std);
  }
  if (j.contains("affine")) {
    const auto& a = j.at("affine");
    c.affine.rotation_deg = a.value("rotation_deg", c.affine.rotation_deg);
    c.affine.scale = a.value("scale", c.affine.scale);
    c.affine.translate = a.value("translate", c.affine.translate);
  }
  if (j.contains("deformable")) {
    const auto& a = j.at("deformable");
    c.deformable.max_displacement = a.value("max_displacement", c.deformable.max_displacement);
    c.deformable.smoothing_sigma = a.value("smoothing_sigma", c.deformable.smoothing_sigma);
    c.deformable.integration_steps = a.value("integration_steps", c.deformable.integration_steps);
  }
  if (j.contains("net")) c.net = models::UNetOptions::from_json(j.at("net"));
  c.confusion_weight = j.value("confusion_weight", c.confusion_weight);
  c.lr_domain = j.value("lr_domain", c.lr_domain);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- augmentation

torch::Tensor augment_intensity(const torch::Tensor& img, Rng& rng, const IntensityAugParams& p) {
  if (p.is_null()) return img.clone();
  const double lo = img.min().item<double>();
  const double hi = img.max().item<double>();
  const double range = hi - lo;
  const double gamma = std::exp(uniform(rng, std::log(p.gamma_min), std::log(p.gamma_max)));
  const double contrast = 1.0 + uniform(rng, -p.contrast, p.contrast);
  const double shift = uniform(rng, -p.brightness, p.brightness);
  const double noise_std = uniform(rng, 0.0, p.noise_std);
  if (range <= 0) return img.clone();

  auto x = ((img - lo) / range).clamp(0.0, 1.0).pow(gamma);
  x = (x - 0.5) * contrast + 0.5 + shift;
  if (noise_std > 0) {
    std::vector<float> noise(static_cast<std::size_t>(img.numel()));
    for (auto& n : noise) n = static_cast<float>(normal(rng, 0.0, noise_std));
    x = x + torch::from_blob(noise.data(), img.sizes(), torch::kFloat32).clone().to(img.dtype());
  }
  return x * range + lo;
}

warp::DeformationField sample_affine_field(at::IntArrayRef spatial, Rng& rng,
                                           const AffineAugParams& p) {
  const auto rank = static_cast<std::int64_t>(spatial.size());
  require(rank >= 2, "affine augmentation needs at least two spatial axes");
  const double theta = uniform(rng, -p.rotation_deg, p.rotation_deg) * std::numbers::pi / 180.0;
  const double scale = 1.0 + uniform(rng, -p.scale, p.scale);
  std::vector<double> shift(static_cast<std::size_t>(rank));
  for (std::int64_t d = 0; d < rank; ++d) {
    shift[static_cast<std::size_t>(d)] =
        uniform(rng, -p.translate, p.translate) * static_cast<double>(spatial[static_cast<std::size_t>(d)]);
  }

  // Output position x samples the input at (1/s) R (x - c) + c + t; the
  // rotation acts in the plane of the last two axes.
  const auto grid = warp::identity_grid(spatial, torch::kFloat64)[0];
  std::vector<torch::Tensor> centred, sampled;
  for (std::int64_t d = 0; d < rank; ++d) {
    const double c = (static_cast<double>(spatial[static_cast<std::size_t>(d)]) - 1.0) / 2.0;
    centred.push_back(grid[d] - c);
  }
  sampled = centred;
  const auto a = rank - 2, b = rank - 1;
  const double cs = std::cos(theta), sn = std::sin(theta);
  sampled[a] = cs * centred[a] - sn * centred[b];
  sampled[b] = sn * centred[a] + cs * centred[b];
  std::vector<torch::Tensor> disp;
  for (std::int64_t d = 0; d < rank; ++d) {
    disp.push_back(sampled[d] / scale + shift[static_cast<std::size_t>(d)] - centred[d]);
  }
  return {torch::stack(disp, 0).unsqueeze(0).to(torch::kFloat32)};
}

namespace {

AugmentedPair apply_spatial(const torch::Tensor& img, const torch::Tensor& mask,
                            warp::DeformationField field) {
  AugmentedPair out;
  out.image = warp::warp(models::as_batch(img), field)[0][0];
  out.mask = warp::warp_labels(mask.unsqueeze(0), field)[0];
  out.field = std::move(field);
  return out;
}

torch::Tensor gaussian_kernel(double sigma, std::int64_t radius) {
  auto x = torch::arange(-radius, radius + 1, torch::kFloat32);
  auto k = torch::exp(-x.pow(2) / (2 * sigma * sigma));
  return k / k.sum();
}

}  // namespace

AugmentedPair augment_affine(const torch::Tensor& img, const torch::Tensor& mask, Rng& rng,
                             const AffineAugParams& p) {
  require(img.sizes() == mask.sizes(), "image and mask shapes differ");
  return apply_spatial(img, mask, sample_affine_field(img.sizes(), rng, p));
}

torch::Tensor gaussian_smooth(const torch::Tensor& x, double sigma) {
  require(x.dim() >= 3, "gaussian_smooth expects [N, C, *S]");
  require(sigma > 0, "sigma must be > 0");
  const auto channels = x.size(1);
  const auto rank = x.dim() - 2;
  auto out = x;
  for (std::int64_t axis = 0; axis < rank; ++axis) {
    const auto side = x.size(axis + 2);
    const auto radius = std::min<std::int64_t>(static_cast<std::int64_t>(std::ceil(3 * sigma)), side - 1);
    const auto k1 = gaussian_kernel(sigma, radius).to(x.dtype());
    std::vector<std::int64_t> shape{channels, 1};
    std::vector<std::int64_t> zeros(static_cast<std::size_t>(rank), 0);
    std::vector<std::int64_t> ones(static_cast<std::size_t>(rank), 1);
    for (std::int64_t d = 0; d < rank; ++d) shape.push_back(d == axis ? 2 * radius + 1 : 1);
    std::vector<std::int64_t> single = shape;
    single[0] = 1;
    const auto weight = k1.reshape(single).expand(shape).contiguous();
    // edge-replicated border
    const auto dim = axis + 2;
    auto expand_edge = [&](std::int64_t start) {
      auto sizes = out.sizes().vec();
      sizes[static_cast<std::size_t>(dim)] = radius;
      return out.narrow(dim, start, 1).expand(sizes);
    };
    const auto padded = torch::cat({expand_edge(0), out, expand_edge(side - 1)}, dim);
    out = torch::convolution(padded, weight, {}, ones, zeros, ones, false, zeros, channels);
  }
  return out;
}

warp::DeformationField sample_deformable_field(at::IntArrayRef spatial, Rng& rng,
                                               const DeformableAugParams& p) {
  const auto rank = static_cast<std::int64_t>(spatial.size());
  std::vector<std::int64_t> shape{1, rank};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  if (p.max_displacement == 0) return warp::identity_field(1, spatial);

  std::int64_t count = 1;
  for (auto s : shape) count *= s;
  std::vector<float> noise(static_cast<std::size_t>(count));
  for (auto& n : noise) n = static_cast<float>(normal(rng, 0.0, 1.0));
  auto v = gaussian_smooth(torch::from_blob(noise.data(), shape, torch::kFloat32).clone(),
                           p.smoothing_sigma);
  const double peak = v.pow(2).sum(1).sqrt().max().item<double>();
  if (peak > 0) v = v * (p.max_displacement / peak);
  return warp::integrate(warp::VelocityField{v}, p.integration_steps);
}

AugmentedPair augment_deformable(const torch::Tensor& img, const torch::Tensor& mask, Rng& rng,
                                 const DeformableAugParams& p) {
  require(img.sizes() == mask.sizes(), "image and mask shapes differ");
  return apply_spatial(img, mask, sample_deformable_field(img.sizes(), rng, p));
}

// ---------------------------------------------------------------- training

namespace {

struct Batch {
  torch::Tensor x, y;  // [B, 1, *S] float, [B, *S] uint8
};

Batch draw_batch(const LabelledSet& set, const SegTrainConfig& cfg, Rng& pick, Rng& aug) {
  std::vector<torch::Tensor> xs, ys;
  const auto n = static_cast<std::int64_t>(set.size());
  for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
    const auto i = static_cast<std::size_t>(uniform_int(pick, 0, n - 1));
    torch::Tensor x = set.images[i], y = set.masks[i];
    const bool apply = cfg.augmentation != Augmentation::none && uniform01(aug) < cfg.aug_probability;
    if (apply) {
      switch (cfg.augmentation) {
        case Augmentation::intensity: x = augment_intensity(x, aug, cfg.intensity); break;
        case Augmentation::affine: {
          auto r = augment_affine(x, y, aug, cfg.affine);
          x = r.image;
          y = r.mask;
          break;
        }
        case Augmentation::deformable: {
          auto r = augment_deformable(x, y, aug, cfg.deformable);
          x = r.image;
          y = r.mask;
          break;
        }
        case Augmentation::none: break;
      }
    }
    xs.push_back(x);
    ys.push_back(y);
  }
  return {torch::stack(xs, 0).unsqueeze(1), torch::stack(ys, 0)};
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& y, bool ce) {
  auto loss = losses::dice(torch::softmax(logits, 1), warp::one_hot(y, logits.size(1)));
  if (ce) loss = loss + torch::nn::functional::cross_entropy(logits, y.to(torch::kLong));
  return loss;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& saved) {
  torch::NoGradGuard no_grad;
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(saved[i]);
}

models::SegmenterNet make_segmenter(const LabelledSet& train, const SegTrainConfig& cfg) {
  if (train.size() == 0) throw ConfigError("training set is empty");
  require(train.images.size() == train.masks.size(), "image and mask counts differ");
  torch::manual_seed(derive_seed(cfg.seed, "seg/init"));
  auto opts = cfg.net;
  opts.rank = train.images.front().dim();
  return models::SegmenterNet(opts, 2);
}

/// Tracks the best validation Dice and the parameters that produced it.
struct BestTracker {
  double best = -1;
  std::int64_t step = 0;
  std::vector<torch::Tensor> params;

  void offer(models::SegmenterNet& net, const LabelledSet& val, std::int64_t at) {
    const double score = val.size() > 0 ? mean_dice(net, val) : 0.0;
    if (val.size() == 0 || score > best) {
      best = score;
      step = at;
      params = snapshot(*net);
    }
  }
};

TrainedSegmenter finish(models::SegmenterNet net, BestTracker& best, std::vector<double> curve) {
  restore(*net, best.params);
  TrainedSegmenter out;
  out.net = std::move(net);
  out.checkpoint_hash = models::parameter_hash(*out.net);
  out.best_val_dice = best.best;
  out.best_step = best.step;
  out.loss_curve = std::move(curve);
  return out;
}

void check_finite(double loss, std::int64_t step) {
  if (!std::isfinite(loss)) {
    throw NumericError("segmenter training diverged at step " + std::to_string(step));
  }
}

}  // namespace

TrainedSegmenter train_segmenter(const LabelledSet& train, const LabelledSet& val,
                                 const SegTrainConfig& cfg) {
  cfg.validate();
  auto net = make_segmenter(train, cfg);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  Rng pick(derive_seed(cfg.seed, "seg/batch"));
  Rng aug(derive_seed(cfg.seed, "seg/augment"));
  BestTracker best;
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(cfg.iterations));

  for (std::int64_t step = 0; step < cfg.iterations; ++step) {
    const auto batch = draw_batch(train, cfg, pick, aug);
    opt.zero_grad();
    auto loss = segmentation_loss(net->logits(batch.x), batch.y, cfg.cross_entropy);
    const double value = loss.item<double>();
    check_finite(value, step);
    loss.backward();
    train::clip_gradients(net->parameters(), cfg.grad_clip);
    opt.step();
    curve.push_back(value);
    if ((step + 1) % cfg.val_every == 0) best.offer(net, val, step + 1);
  }
  if (best.params.empty() || cfg.iterations % cfg.val_every != 0) best.offer(net, val, cfg.iterations);
  return finish(std::move(net), best, std::move(curve));
}

namespace {

torch::Tensor confusion(const torch::Tensor& logits) {
  // BCE against the uninformative label 1/2; minimal at logit 0.
  return 0.5 * (torch::softplus(logits) + torch::softplus(-logits)).mean();
}

torch::Tensor stack_images(const std::vector<torch::Tensor>& images, std::size_t from, std::size_t to) {
  std::vector<torch::Tensor> xs(images.begin() + static_cast<std::ptrdiff_t>(from),
                                images.begin() + static_cast<std::ptrdiff_t>(to));
  return torch::stack(xs, 0).unsqueeze(1);
}

}  // namespace

TrainedSegmenter train_feature_uda(const LabelledSet& source, const std::vector<torch::Tensor>& target,
                                   const LabelledSet& val, const SegTrainConfig& cfg) {
  cfg.validate();
  if (target.empty()) throw ConfigError("feature adaptation needs target images");
  auto net = make_segmenter(source, cfg);
  models::DomainClassifier domain(net->bottleneck_channels());
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  torch::optim::Adam opt_domain(domain->parameters(), torch::optim::AdamOptions(cfg.lr_domain));
  Rng pick(derive_seed(cfg.seed, "seg/batch"));
  Rng aug(derive_seed(cfg.seed, "seg/augment"));
  Rng pick_target(derive_seed(cfg.seed, "uda/target-batch"));
  const auto nt = static_cast<std::int64_t>(target.size());
  const auto zeros = torch::zeros({cfg.batch_size});
  const auto ones = torch::ones({cfg.batch_size});
  BestTracker best;
  std::vector<double> curve;

  for (std::int64_t step = 0; step < cfg.iterations; ++step) {
    const auto batch = draw_batch(source, cfg, pick, aug);
    std::vector<torch::Tensor> xt;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      xt.push_back(target[static_cast<std::size_t>(uniform_int(pick_target, 0, nt - 1))]);
    }
    const auto x_t = torch::stack(xt, 0).unsqueeze(1);

    const auto logits_s = net->logits(batch.x);
    const auto f_s = net->bottleneck();
    net->logits(x_t);
    const auto f_t = net->bottleneck();

    // domain classifier on detached features: source -> 0, target -> 1
    opt_domain.zero_grad();
    auto l_domain = 0.5 * (torch::binary_cross_entropy_with_logits(domain->forward(f_s.detach()), zeros) +
                           torch::binary_cross_entropy_with_logits(domain->forward(f_t.detach()), ones));
    l_domain.backward();
    opt_domain.step();

    opt.zero_grad();
    auto loss = segmentation_loss(logits_s, batch.y, cfg.cross_entropy);
    if (cfg.confusion_weight > 0) {
      models::Freeze frozen(*domain);
      loss = loss + cfg.confusion_weight *
                        0.5 * (confusion(domain->forward(f_s)) + confusion(domain->forward(f_t)));
    }
    const double value = loss.item<double>();
    check_finite(value, step);
    loss.backward();
    train::clip_gradients(net->parameters(), cfg.grad_clip);
    opt.step();
    curve.push_back(value);
    if ((step + 1) % cfg.val_every == 0) best.offer(net, val, step + 1);
  }
  if (best.params.empty() || cfg.iterations % cfg.val_every != 0) best.offer(net, val, cfg.iterations);
  return finish(std::move(net), best, std::move(curve));
}

double domain_probe_accuracy(models::SegmenterNet& seg, const std::vector<torch::Tensor>& source,
                             const std::vector<torch::Tensor>& target, std::uint64_t seed,
                             std::int64_t iterations) {
  require(source.size() >= 2 && target.size() >= 2, "probe needs at least two images per domain");
  torch::Tensor fs, ft;
  {
    torch::NoGradGuard no_grad;
    seg->logits(stack_images(source, 0, source.size()));
    fs = seg->bottleneck().flatten(2).mean(2).unsqueeze(2);
    seg->logits(stack_images(target, 0, target.size()));
    ft = seg->bottleneck().flatten(2).mean(2).unsqueeze(2);
  }
  // standardise features with training statistics so the probe is scale-free
  const auto hs = static_cast<std::int64_t>(source.size() / 2);
  const auto ht = static_cast<std::int64_t>(target.size() / 2);
  const auto train_x = torch::cat({fs.narrow(0, 0, hs), ft.narrow(0, 0, ht)});
  const auto mu = train_x.mean(0, true);
  const auto sd = train_x.std(0, false, true) + 1e-6;
  auto norm = [&](const torch::Tensor& f) { return (f - mu) / sd; };
  const auto train_y = torch::cat({torch::zeros({hs}), torch::ones({ht})});
  const auto test_x = torch::cat({fs.narrow(0, hs, fs.size(0) - hs), ft.narrow(0, ht, ft.size(0) - ht)});
  const auto test_y = torch::cat({torch::zeros({fs.size(0) - hs}), torch::ones({ft.size(0) - ht})});

  torch::manual_seed(derive_seed(seed, "probe/init"));
  models::DomainClassifier probe(fs.size(1));
  torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(1e-2));
  for (std::int64_t i = 0; i < iterations; ++i) {
    opt.zero_grad();
    auto l = torch::binary_cross_entropy_with_logits(probe->forward(norm(train_x)), train_y);
    l.backward();
    opt.step();
  }
  torch::NoGradGuard no_grad;
  const auto pred = (probe->forward(norm(test_x)) > 0).to(torch::kFloat32);
  return (pred == test_y).to(torch::kFloat64).mean().item<double>();
}

torch::Tensor predict(models::SegmenterNet& seg, const torch::Tensor& img) {
  torch::NoGradGuard no_grad;
  return seg->logits(models::as_batch(img)).argmax(1)[0].to(torch::kUInt8);
}

double mean_dice(models::SegmenterNet& seg, const LabelledSet& set) {
  require(set.size() > 0, "mean_dice of an empty set");
  torch::NoGradGuard no_grad;
  double total = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t from = 0; from < set.size(); from += kChunk) {
    const auto to = std::min(set.size(), from + kChunk);
    const auto pred = seg->logits(stack_images(set.images, from, to)).argmax(1).to(torch::kUInt8);
    for (std::size_t i = from; i < to; ++i) {
      total += metrics::dsc(pred[static_cast<std::int64_t>(i - from)], set.masks[i]);
    }
  }
  return total / static_cast<double>(set.size());
}

metrics::MetricsReport evaluate_segmenter(models::SegmenterNet& seg,
                                          const std::vector<torch::Tensor>& images,
                                          const std::vector<std::int64_t>& target_ids,
                                          const data::LabelVault& labels, double sdsc_tolerance,
                                          metrics::HdConvention convention) {
  require(images.size() == target_ids.size(), "image and id counts differ");
  metrics::MetricsReport report;
  report.task = "DS";
  report.sdsc_tolerance = sdsc_tolerance;
  report.hd_convention = convention;
  report.checkpoint_hash = models::parameter_hash(*seg);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto pred = predict(seg, images[i]);
    const auto gt = labels.read(target_ids[i]);
    report.per_sample.push_back(metrics::evaluate_pair("t" + std::to_string(target_ids[i]), pred,
                                                       gt.classes, sdsc_tolerance, convention));
  }
  return report;
}

}  // namespace dirda::downstream

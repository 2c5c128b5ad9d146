#include "dirda/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dirda/io.hpp"
#include "dirda/seeding.hpp"

namespace dirda::train {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::dir_only: return "dir_only";
    case Ablation::disc: return "+disc";
    case Ablation::seg: return "+seg";
    case Ablation::full: return "full";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "dir_only" || s == "dir") return Ablation::dir_only;
  if (s == "+disc" || s == "disc") return Ablation::disc;
  if (s == "+seg" || s == "seg") return Ablation::seg;
  if (s == "full") return Ablation::full;
  throw ConfigError("unknown ablation: " + s);
}

bool uses_disc(Ablation a) { return a == Ablation::disc || a == Ablation::full; }
bool uses_seg(Ablation a) { return a == Ablation::seg || a == Ablation::full; }

void TrainConfig::validate() const {
  if (!(lr_reg > 0 && lr_disc > 0 && lr_seg > 0)) throw ConfigError("learning rates must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (integration_steps < 1) throw ConfigError("integration_steps must be >= 1");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
  weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr_reg", lr_reg},
          {"lr_disc", lr_disc},
          {"lr_seg", lr_seg},
          {"weights", weights.to_json()},
          {"iterations", iterations},
          {"batch_size", batch_size},
          {"fold", fold},
          {"seed", seed},
          {"integration_steps", integration_steps},
          {"grad_clip", grad_clip},
          {"reg_net", reg_net.to_json()},
          {"seg_net", seg_net.to_json()},
          {"disc_net", disc_net.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr_reg = j.value("lr_reg", c.lr_reg);
  c.lr_disc = j.value("lr_disc", c.lr_disc);
  c.lr_seg = j.value("lr_seg", c.lr_seg);
  if (j.contains("weights")) c.weights = losses::LossWeights::from_json(j.at("weights"));
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.fold = j.value("fold", c.fold);
  c.seed = j.value("seed", c.seed);
  c.integration_steps = j.value("integration_steps", c.integration_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("reg_net")) c.reg_net = models::UNetOptions::from_json(j.at("reg_net"));
  if (j.contains("seg_net")) c.seg_net = models::UNetOptions::from_json(j.at("seg_net"));
  if (j.contains("disc_net")) c.disc_net = models::DiscriminatorOptions::from_json(j.at("disc_net"));
  c.validate();
  return c;
}

void clip_gradients(const std::vector<torch::Tensor>& params, double max_norm) {
  double total = 0;
  for (const auto& p : params) {
    if (p.grad().defined()) total += p.grad().pow(2).sum().item<double>();
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      if (p.grad().defined()) p.grad().mul_(scale);
    }
  }
}

namespace {

nlohmann::json tensor_stats(const torch::Tensor& t) {
  if (!t.defined()) return nullptr;
  auto d = t.detach().to(torch::kFloat64);
  const auto finite = torch::isfinite(d);
  nlohmann::json j{{"shape", d.sizes().vec()},
                   {"nonfinite", (d.numel() - finite.sum().item<std::int64_t>())}};
  if (finite.any().item<bool>()) {
    auto f = d.masked_select(finite);
    j["min"] = f.min().item<double>();
    j["max"] = f.max().item<double>();
    j["mean"] = f.mean().item<double>();
  }
  return j;
}

torch::Tensor stack_batch(const std::vector<torch::Tensor>& pool,
                          const std::vector<std::int64_t>& picks) {
  std::vector<torch::Tensor> items;
  items.reserve(picks.size());
  for (auto i : picks) items.push_back(pool[static_cast<std::size_t>(i)]);
  return torch::stack(items, 0);
}

}  // namespace

AlignmentOutput train_content_alignment(const AlignmentData& data, const TrainConfig& cfg,
                                        Ablation ablation, const std::optional<fs::path>& run_dir) {
  cfg.validate();
  require(!data.source_images.empty() && !data.target_images.empty(),
          "alignment needs source and target images");
  require(data.source_images.size() == data.source_masks.size(),
          "source images and masks differ in count");

  torch::manual_seed(derive_seed(cfg.seed, "align/init"));
  const auto rank = data.source_images.front().dim();
  auto reg_opts = cfg.reg_net;
  reg_opts.rank = rank;
  auto seg_opts = cfg.seg_net;
  seg_opts.rank = rank;
  auto disc_opts = cfg.disc_net;
  disc_opts.rank = rank;

  AlignmentOutput out;
  out.reg = models::RegistrationNet(reg_opts);
  out.seg = models::SegmenterNet(seg_opts, 2);
  out.disc = models::DiscriminatorNet(disc_opts);

  torch::optim::Adam opt_reg(out.reg->parameters(), torch::optim::AdamOptions(cfg.lr_reg));
  torch::optim::Adam opt_seg(out.seg->parameters(), torch::optim::AdamOptions(cfg.lr_seg));
  torch::optim::Adam opt_disc(out.disc->parameters(), torch::optim::AdamOptions(cfg.lr_disc));

  const bool with_disc = uses_disc(ablation);
  const bool with_seg = uses_seg(ablation);

  Rng pairing(derive_seed(cfg.seed, "align/pairing"));
  const auto ns = static_cast<std::int64_t>(data.source_images.size());
  const auto nt = static_cast<std::int64_t>(data.target_images.size());

  out.curve.reserve(static_cast<std::size_t>(cfg.iterations));
  for (std::int64_t step = 0; step < cfg.iterations; ++step) {
    std::vector<std::int64_t> si, ti;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      si.push_back(uniform_int(pairing, 0, ns - 1));
      ti.push_back(uniform_int(pairing, 0, nt - 1));
    }
    const auto x_s = stack_batch(data.source_images, si).unsqueeze(1);
    const auto y_s = stack_batch(data.source_masks, si);
    const auto x_t = stack_batch(data.target_images, ti).unsqueeze(1);
    const auto y_s_onehot = warp::one_hot(y_s, 2);

    StepLosses rec;
    rec.step = step;

    // (4) S on labelled source data
    if (with_seg) {
      opt_seg.zero_grad();
      auto l = losses::dice(out.seg->forward(x_s), y_s_onehot);
      l.backward();
      clip_gradients(out.seg->parameters(), cfg.grad_clip);
      opt_seg.step();
      rec.s_loss = l.item<double>();
    }

    auto diverged = [&](const std::string& why, nlohmann::json dump) {
      dump["step"] = step;
      dump["reason"] = why;
      if (run_dir) {
        fs::create_directories(*run_dir);
        io::write_json(*run_dir / "divergence.json", dump);
      }
      return DivergenceError("training diverged at step " + std::to_string(step) + ": " + why);
    };

    // (2)-(3) registration forward, bidirectional warps
    const auto v = out.reg->forward(x_s, x_t);
    warp::DeformationField phi, phi_inv;
    try {
      phi = warp::integrate(v, cfg.integration_steps);
      phi_inv = warp::inverse_field(v, cfg.integration_steps);
    } catch (const NumericError& e) {
      throw diverged(e.what(), {{"velocity", tensor_stats(v.vectors)},
                                {"x_s", tensor_stats(x_s)},
                                {"x_t", tensor_stats(x_t)},
                                {"S", rec.s_loss}});
    }
    const auto x_s2t = warp::warp(x_s, phi);
    const auto x_t2s = warp::warp(x_t, phi_inv);

    // (5) D on real targets vs detached warped sources
    if (with_disc) {
      opt_disc.zero_grad();
      auto l = losses::disc_discriminator(out.disc->forward(x_t), out.disc->forward(x_s2t.detach()));
      l.backward();
      clip_gradients(out.disc->parameters(), cfg.grad_clip);
      opt_disc.step();
      rec.d_loss = l.item<double>();
    }

    // (6) R on the combined objective; D and S are frozen for this update
    losses::LossParts parts;
    parts.sim = losses::sim(x_s2t, x_t, x_t2s, x_s);
    parts.smooth = losses::smooth(phi, phi_inv);
    if (with_disc) {
      models::Freeze frozen(*out.disc);
      parts.disc = losses::disc_generator(out.disc->forward(x_s2t));
    }
    if (with_seg) parts.seg = losses::seg_feedback(out.seg, x_t2s, y_s_onehot);
    const auto total = losses::combined(parts, cfg.weights);

    rec.sim = parts.sim.item<double>();
    rec.smooth = parts.smooth.item<double>();
    rec.disc = parts.disc.defined() ? parts.disc.item<double>() : 0.0;
    rec.seg = parts.seg.defined() ? parts.seg.item<double>() : 0.0;
    rec.total = total.item<double>();
    if (!std::isfinite(rec.total) || !std::isfinite(rec.d_loss) || !std::isfinite(rec.s_loss)) {
      throw diverged("non-finite loss",
                     {{"losses", {{"sim", rec.sim}, {"smooth", rec.smooth}, {"disc", rec.disc},
                                  {"seg", rec.seg}, {"D", rec.d_loss}, {"S", rec.s_loss}}},
                      {"velocity", tensor_stats(v.vectors)},
                      {"phi", tensor_stats(phi.displacement)},
                      {"x_s2t", tensor_stats(x_s2t)},
                      {"x_t2s", tensor_stats(x_t2s)}});
    }

    opt_reg.zero_grad();
    total.backward();
    clip_gradients(out.reg->parameters(), cfg.grad_clip);
    opt_reg.step();
    out.curve.push_back(rec);
  }

  out.checkpoint_hash = models::parameter_hash(*out.reg);
  if (run_dir) {
    fs::create_directories(*run_dir);
    write_loss_log(*run_dir / "loss_log.csv", out.curve);
    const auto config_hash = io::sha256_hex(cfg.to_json().dump()).substr(0, 16);
    models::save_checkpoint(*out.reg, *run_dir / "reg",
                            {{"kind", "registration"},
                             {"architecture", reg_opts.to_json()},
                             {"step", cfg.iterations},
                             {"ablation", to_string(ablation)},
                             {"config_hash", config_hash}});
  }
  return out;
}

void write_loss_log(const fs::path& path, const std::vector<StepLosses>& curve) {
  std::ostringstream ss;
  ss.precision(9);
  ss << "step,L_sim,L_smooth,L_disc,L_seg,L_D\n";
  for (const auto& r : curve) {
    ss << r.step << ',' << r.sim << ',' << r.smooth << ',' << r.disc << ',' << r.seg << ','
       << r.d_loss << '\n';
  }
  io::write_atomic(path, ss.str());
}

WarpedSet warp_training_set(models::RegistrationNet& reg, const AlignmentData& data,
                            std::int64_t pairings, std::uint64_t seed, int integration_steps,
                            const std::string& checkpoint_hash) {
  require(pairings >= 1, "pairings must be >= 1");
  require(!data.target_images.empty(), "warping needs target images");
  torch::NoGradGuard no_grad;
  Rng rng(derive_seed(seed, "export/pairing"));
  WarpedSet out;
  const auto nt = static_cast<std::int64_t>(data.target_images.size());
  std::int64_t next_id = 0;
  for (std::size_t i = 0; i < data.source_images.size(); ++i) {
    for (std::int64_t k = 0; k < pairings; ++k) {
      const auto j = static_cast<std::size_t>(uniform_int(rng, 0, nt - 1));
      const auto x_s = models::as_batch(data.source_images[i]);
      const auto x_t = models::as_batch(data.target_images[j]);
      const auto phi = warp::integrate(reg->forward(x_s, x_t), integration_steps);
      const auto x_s2t = warp::warp(x_s, phi)[0][0];
      const auto y_s2t = warp::warp_labels(data.source_masks[i].unsqueeze(0), phi)[0];
      Sample s;
      s.id = next_id++;
      s.image = Image{x_s2t.contiguous(), Domain::source};
      s.mask = LabelMask{y_s2t.contiguous()};
      s.seed = seed;
      out.samples.push_back(std::move(s));
      out.provenance.push_back({{"source_id", data.source_ids.empty() ? std::int64_t(i) : data.source_ids[i]},
                                {"target_id", data.target_ids.empty() ? std::int64_t(j) : data.target_ids[j]},
                                {"checkpoint_hash", checkpoint_hash}});
    }
  }
  return out;
}

void export_warped_dataset(const WarpedSet& set, const fs::path& dir, const nlohmann::json& params) {
  data::write_labelled_set(dir, set.samples, set.provenance, params);
}

metrics::MetricsReport evaluate_registration(models::RegistrationNet& reg,
                                             const AlignmentData& test_data,
                                             const data::LabelVault& target_labels,
                                             std::uint64_t seed, int integration_steps,
                                             double sdsc_tolerance,
                                             metrics::HdConvention convention) {
  require(!test_data.source_images.empty(), "registration evaluation needs source images");
  torch::NoGradGuard no_grad;
  Rng rng(derive_seed(seed, "eval/registration-pairing"));
  metrics::MetricsReport report;
  report.task = "CA";
  report.sdsc_tolerance = sdsc_tolerance;
  report.hd_convention = convention;
  report.checkpoint_hash = models::parameter_hash(*reg);
  const auto ns = static_cast<std::int64_t>(test_data.source_images.size());
  for (std::size_t j = 0; j < test_data.target_images.size(); ++j) {
    const auto i = static_cast<std::size_t>(uniform_int(rng, 0, ns - 1));
    const auto phi = warp::integrate(reg->forward(models::as_batch(test_data.source_images[i]),
                                                  models::as_batch(test_data.target_images[j])),
                                     integration_steps);
    const auto warped = warp::warp_labels(test_data.source_masks[i].unsqueeze(0), phi)[0];
    const auto target_id = test_data.target_ids[j];
    const auto gt = target_labels.read(target_id);
    report.per_sample.push_back(metrics::evaluate_pair(
        "t" + std::to_string(target_id), warped, gt.classes, sdsc_tolerance, convention));
  }
  return report;
}

}  // namespace dirda::train

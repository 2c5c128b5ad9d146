#include "test_prelude.hpp"

#include <functional>

#include "dirda/losses.hpp"
#include "support.hpp"

using namespace dirda;

namespace {

torch::Tensor rand64(std::vector<std::int64_t> shape, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand(shape, torch::kFloat64);
}

double mse_ref(const torch::Tensor& a, const torch::Tensor& b) {
  const auto va = testing::to_vec(a), vb = testing::to_vec(b);
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += (va[i] - vb[i]) * (va[i] - vb[i]);
  return s / double(va.size());
}

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// -log sigmoid(z) averaged
double bce_real_ref(const torch::Tensor& z) {
  double s = 0;
  for (double v : testing::to_vec(z)) s += log1pexp(-v);
  return s / double(z.numel());
}

// -log(1 - sigmoid(z)) averaged
double bce_fake_ref(const torch::Tensor& z) {
  double s = 0;
  for (double v : testing::to_vec(z)) s += log1pexp(v);
  return s / double(z.numel());
}

// pred/target [N, K, H, W]
double dice_ref(const torch::Tensor& pred, const torch::Tensor& target, double eps) {
  const auto n = pred.size(0), k = pred.size(1), hw = pred.size(2) * pred.size(3);
  const auto p = testing::to_vec(pred), t = testing::to_vec(target);
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 1; c < k; ++c) {
      double inter = 0, sp = 0, st = 0;
      for (std::int64_t j = 0; j < hw; ++j) {
        const auto idx = std::size_t((i * k + c) * hw + j);
        inter += p[idx] * t[idx];
        sp += p[idx];
        st += t[idx];
      }
      total += 1 - (2 * inter + eps) / (sp + st + eps);
    }
  }
  return total / double(n * (k - 1));
}

// [1, 2, H, W]: per axis, mean over components and positions of squared forward differences
double gradient_l2_ref(const torch::Tensor& u) {
  const int h = int(u.size(2)), w = int(u.size(3));
  const auto a = testing::to_vec(u);
  auto at = [&](int c, int y, int x) { return a[std::size_t((c * h + y) * w + x)]; };
  double dy = 0, dx = 0;
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y + 1 < h; ++y) {
      for (int x = 0; x < w; ++x) dy += std::pow(at(c, y + 1, x) - at(c, y, x), 2);
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x + 1 < w; ++x) dx += std::pow(at(c, y, x + 1) - at(c, y, x), 2);
    }
  }
  return dy / (2.0 * (h - 1) * w) + dx / (2.0 * h * (w - 1));
}

// ||analytic - central difference|| / max(norms), double precision
double grad_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x) {
  x = x.detach().clone().requires_grad_(true);
  f(x).backward();
  const auto analytic = x.grad().detach().clone();
  auto numeric = torch::zeros_like(analytic);
  const double h = 1e-6;
  auto flat = x.detach().view(-1);
  auto num = numeric.view(-1);
  torch::NoGradGuard g;
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = f(x.detach()).item<double>();
    flat[i] = keep - h;
    const double down = f(x.detach()).item<double>();
    flat[i] = keep;
    num[i] = (up - down) / (2 * h);
  }
  const double scale = std::max(analytic.norm().item<double>(), numeric.norm().item<double>());
  return (analytic - numeric).norm().item<double>() / std::max(scale, 1e-12);
}

models::UNetOptions tiny_net() {
  models::UNetOptions o;
  o.base_channels = 4;
  o.levels = 2;
  return o;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("every loss vanishes at its ideal input") {
  const auto x = rand64({2, 1, 8, 8}, 1), y = rand64({2, 1, 8, 8}, 2);
  CHECK(losses::sim(x, x, y, y).item<double>() == 0.0);

  const auto id = warp::identity_field(2, {8, 8}, torch::kFloat64);
  CHECK(losses::smooth(id, id).item<double>() == 0.0);
  auto constant = torch::full({1, 2, 8, 8}, 2.5, torch::kFloat64);
  CHECK(losses::gradient_l2(constant).item<double>() == 0.0);

  const auto big = torch::full({4}, 60.0, torch::kFloat64);
  CHECK(losses::disc_generator(big).item<double>() < 1e-20);
  CHECK(losses::disc_discriminator(big, -big).item<double>() < 1e-20);

  auto labels = torch::zeros({2, 8, 8}, torch::kUInt8);
  labels.narrow(1, 2, 4).narrow(2, 1, 5).fill_(1);
  const auto onehot = warp::one_hot(labels, 2).to(torch::kFloat64);
  CHECK(std::abs(losses::dice(onehot, onehot).item<double>()) < 1e-12);
}

TEST_CASE("similarity equals the two mean squared errors") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = rand64({2, 1, 7, 9}, 10 * s), b = rand64({2, 1, 7, 9}, 10 * s + 1);
    const auto c = rand64({2, 1, 7, 9}, 10 * s + 2), d = rand64({2, 1, 7, 9}, 10 * s + 3);
    const double got = losses::sim(a, b, c, d).item<double>();
    CHECK(got == doctest::Approx(mse_ref(a, b) + mse_ref(c, d)).epsilon(1e-6));
  }
}

TEST_CASE("adversarial terms equal binary cross-entropy") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto real = (rand64({16}, 100 + s) - 0.5) * 20;
    const auto fake = (rand64({16}, 200 + s) - 0.5) * 20;
    CHECK(losses::disc_generator(fake).item<double>() ==
          doctest::Approx(bce_real_ref(fake)).epsilon(1e-6));
    CHECK(losses::disc_discriminator(real, fake).item<double>() ==
          doctest::Approx(0.5 * (bce_real_ref(real) + bce_fake_ref(fake))).epsilon(1e-6));
  }
}

TEST_CASE("soft Dice equals the per-class formula") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto logits = rand64({3, 3, 6, 6}, 300 + s) * 4;
    const auto pred = torch::softmax(logits, 1);
    auto labels = (rand64({3, 6, 6}, 400 + s) * 3).floor().to(torch::kLong);
    const auto target = warp::one_hot(labels, 3).to(torch::kFloat64);
    CHECK(losses::dice(pred, target).item<double>() ==
          doctest::Approx(dice_ref(pred, target, losses::kDiceEpsilon)).epsilon(1e-6));
  }
  // empty target and empty prediction: the epsilon makes the loss 0
  const auto zeros = torch::zeros({1, 2, 4, 4}, torch::kFloat64);
  auto bg = zeros.clone();
  bg.select(1, 0).fill_(1);
  CHECK(losses::dice(bg, bg).item<double>() == doctest::Approx(0.0));
}

TEST_CASE("smoothness matches forward differences, a ramp gives its slope squared") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto u = (rand64({1, 2, 9, 7}, 500 + s) - 0.5) * 3;
    CHECK(losses::gradient_l2(u).item<double>() == doctest::Approx(gradient_l2_ref(u)).epsilon(1e-6));
  }
  const double alpha = 0.37;
  const auto ramp = alpha * warp::identity_grid({10, 10}, torch::kFloat64);
  // u_d = alpha * x_d: each component changes only along its own axis
  CHECK(losses::gradient_l2(ramp).item<double>() == doctest::Approx(alpha * alpha).epsilon(1e-12));
  const auto a = (rand64({1, 2, 6, 6}, 600) - 0.5);
  const auto b = (rand64({1, 2, 6, 6}, 601) - 0.5);
  CHECK(losses::smooth(warp::DeformationField{a}, warp::DeformationField{b}).item<double>() ==
        doctest::Approx(gradient_l2_ref(a) + gradient_l2_ref(b)).epsilon(1e-9));
}

TEST_CASE("hand-computed values") {
  const auto z = torch::zeros({1, 1, 6, 6}, torch::kFloat64);
  CHECK(losses::sim(z + 1, z, z, z).item<double>() == doctest::Approx(1.0));
  const auto half = torch::zeros({5}, torch::kFloat64);
  CHECK(losses::disc_generator(half).item<double>() == doctest::Approx(std::log(2.0)));
  CHECK(losses::disc_discriminator(half, half).item<double>() == doctest::Approx(std::log(2.0)));

  // pred: 2x4 strip, target: 4x2 strip, overlapping in a 2x2 block
  auto p = torch::zeros({1, 2, 8, 8}, torch::kFloat64), t = torch::zeros({1, 2, 8, 8}, torch::kFloat64);
  p[0][1].narrow(0, 0, 2).narrow(1, 0, 4).fill_(1);
  t[0][1].narrow(0, 0, 4).narrow(1, 0, 2).fill_(1);
  p[0][0] = 1 - p[0][1];
  t[0][0] = 1 - t[0][1];
  CHECK(losses::dice(p, t).item<double>() == doctest::Approx(0.5).epsilon(1e-6));
  auto far = torch::zeros_like(p);
  far[0][1].narrow(0, 6, 2).narrow(1, 6, 2).fill_(1);
  CHECK(losses::dice(far, t).item<double>() == doctest::Approx(1.0).epsilon(1e-6));

  // a pure translation has zero gradient
  const auto shift = torch::full({1, 2, 8, 8}, 1.5, torch::kFloat64);
  CHECK(losses::smooth(warp::DeformationField{shift}, warp::DeformationField{-shift}).item<double>() == 0.0);
}

TEST_CASE("losses are never negative") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = rand64({1, 1, 6, 6}, 700 + s), b = rand64({1, 1, 6, 6}, 800 + s);
    CHECK(losses::sim(a, b, b, a).item<double>() >= 0);
    CHECK(losses::gradient_l2(a - b).item<double>() >= 0);
    CHECK(losses::disc_generator((a - 0.5) * 50).item<double>() >= 0);
    CHECK(losses::disc_discriminator((a - 0.5) * 50, (b - 0.5) * 50).item<double>() >= 0);
    auto lb = (b * 2).floor().to(torch::kLong).squeeze(1);
    CHECK(losses::dice(torch::softmax(torch::cat({a, b}, 1), 1), warp::one_hot(lb, 2).to(torch::kFloat64))
              .item<double>() >= 0);
  }
}

TEST_CASE("analytic gradients match central differences on 6x6 inputs") {
  const auto b = rand64({1, 1, 6, 6}, 900), c = rand64({1, 1, 6, 6}, 901), d = rand64({1, 1, 6, 6}, 902);
  CHECK(grad_rel_error([&](const torch::Tensor& x) { return losses::sim(x, b, c, d); },
                       rand64({1, 1, 6, 6}, 903)) < 1e-3);
  CHECK(grad_rel_error([&](const torch::Tensor& x) { return losses::sim(b, c, x, d); },
                       rand64({1, 1, 6, 6}, 904)) < 1e-3);
  const auto other = rand64({1, 2, 6, 6}, 905);
  CHECK(grad_rel_error(
            [&](const torch::Tensor& u) {
              return losses::smooth(warp::DeformationField{u}, warp::DeformationField{other});
            },
            rand64({1, 2, 6, 6}, 906) - 0.5) < 1e-3);
  auto labels = (rand64({1, 6, 6}, 907) * 3).floor().to(torch::kLong);
  const auto target = warp::one_hot(labels, 3).to(torch::kFloat64);
  CHECK(grad_rel_error([&](const torch::Tensor& logits) { return losses::dice(torch::softmax(logits, 1), target); },
                       rand64({1, 3, 6, 6}, 908) * 3) < 1e-3);
}

TEST_CASE("combined objective is the weighted sum and skips absent terms") {
  losses::LossParts parts;
  parts.sim = torch::tensor(2.0);
  parts.smooth = torch::tensor(3.0);
  parts.disc = torch::tensor(5.0);
  parts.seg = torch::tensor(7.0);
  const losses::LossWeights w;
  CHECK(losses::combined(parts, w).item<double>() ==
        doctest::Approx(2.0 * w.sim + 3.0 * w.smooth + 5.0 * w.disc + 7.0 * w.seg));
  parts.disc = torch::Tensor();
  CHECK(losses::combined(parts, w).item<double>() ==
        doctest::Approx(2.0 * w.sim + 3.0 * w.smooth + 7.0 * w.seg));
  const losses::LossWeights unit{1, 1, 1, 1};
  parts.disc = torch::tensor(3.0);
  parts.sim = torch::tensor(1.0);
  parts.smooth = torch::tensor(2.0);
  parts.seg = torch::tensor(4.0);
  CHECK(losses::combined(parts, unit).item<double>() == doctest::Approx(10.0));
  CHECK(losses::combined(parts, losses::LossWeights{0, 0, 0, 0}).item<double>() == 0.0);
  CHECK(w.sim == 1.0);
  CHECK(w.smooth == 0.001);
  CHECK(w.disc == 0.0001);
  CHECK(w.seg == 0.01);
}

TEST_CASE("negative or non-finite weights are rejected") {
  losses::LossWeights w;
  w.seg = -0.01;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  CHECK_THROWS_AS(losses::LossWeights::from_json({{"smooth", -1.0}}), ConfigError);
  w = {};
  w.disc = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("segmentation feedback sends no gradient to the segmenter") {
  torch::manual_seed(7);
  models::RegistrationNet reg(tiny_net());
  models::SegmenterNet seg(tiny_net(), 2);
  // give R a non-zero head so the warp actually depends on its parameters
  {
    torch::NoGradGuard g;
    for (auto& p : reg->parameters()) p.add_(torch::randn_like(p) * 0.05);
  }
  const auto x_s = torch::rand({1, 1, 16, 16});
  const auto x_t = torch::rand({1, 1, 16, 16});
  auto y = torch::zeros({1, 16, 16}, torch::kUInt8);
  y.narrow(1, 4, 8).narrow(2, 4, 8).fill_(1);

  const auto v = reg->forward(x_s, x_t);
  const auto x_t2s = warp::warp(x_t, warp::inverse_field(v));
  auto loss = losses::seg_feedback(seg, x_t2s, warp::one_hot(y, 2));
  loss.backward();

  for (const auto& p : seg->parameters()) {
    CHECK(p.requires_grad());  // restored after the frozen forward
    CHECK((!p.grad().defined() || p.grad().abs().max().item<double>() == 0.0));
  }
  double reg_grad = 0;
  for (const auto& p : reg->parameters()) {
    if (p.grad().defined()) reg_grad += p.grad().abs().sum().item<double>();
  }
  CHECK(reg_grad > 0);
}

TEST_CASE("segmentation feedback moves a misaligned velocity field downhill") {
  torch::manual_seed(8);
  models::SegmenterNet seg(tiny_net(), 2);
  auto y = torch::zeros({1, 16, 16}, torch::kUInt8);
  y.narrow(1, 4, 8).narrow(2, 4, 8).fill_(1);
  const auto image = y.to(torch::kFloat32).unsqueeze(1);
  // fit S to the square, then ask it about a shifted copy
  torch::optim::Adam opt(seg->parameters(), torch::optim::AdamOptions(1e-2));
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    auto l = losses::dice(seg->forward(image), warp::one_hot(y, 2));
    l.backward();
    opt.step();
  }
  const auto shifted = torch::roll(image, {2}, {3});
  auto loss_at = [&](const torch::Tensor& v) {
    return losses::seg_feedback(seg, warp::warp(shifted, warp::integrate(warp::VelocityField{v})),
                                warp::one_hot(y, 2));
  };
  auto v = torch::zeros({1, 2, 16, 16}, torch::kFloat32).requires_grad_(true);
  const auto l0 = loss_at(v);
  l0.backward();
  const auto g = v.grad().detach();
  CHECK(g.abs().max().item<double>() > 0);
  torch::NoGradGuard ng;
  const double step = 0.5 / g.abs().max().item<double>();
  CHECK(loss_at(-step * g).item<double>() < l0.item<double>());
}

}  // TEST_SUITE

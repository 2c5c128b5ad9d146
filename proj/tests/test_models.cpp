#include "test_prelude.hpp"

#include "dirda/losses.hpp"
#include "dirda/models.hpp"
#include "support.hpp"

using namespace dirda;

namespace {

models::UNetOptions small(std::int64_t levels = 3) {
  models::UNetOptions o;
  o.base_channels = 8;
  o.levels = levels;
  return o;
}

torch::Tensor blob(int h, int w, int y, int x, int size) {
  auto t = torch::zeros({1, 1, h, w});
  t.narrow(2, y, size).narrow(3, x, size).fill_(1.0);
  return t;
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("registration net starts at the identity map") {
  torch::manual_seed(1);
  models::RegistrationNet reg(small());
  const auto a = torch::rand({2, 1, 16, 16}), b = torch::rand({2, 1, 16, 16});
  const auto v = reg->forward(a, b);
  CHECK(v.vectors.sizes().vec() == std::vector<std::int64_t>{2, 2, 16, 16});
  CHECK(v.vectors.abs().max().item<double>() < 0.1);
  const auto phi = warp::integrate(v);
  CHECK(phi.displacement.abs().max().item<double>() == 0.0);
  CHECK(torch::equal(warp::warp(a, phi), a));
  CHECK_THROWS(reg->forward(a, torch::rand({2, 1, 16, 8})));
}

TEST_CASE("networks take 3D inputs and any side divisible by the depth") {
  torch::manual_seed(2);
  auto o = small();
  for (std::int64_t side : {8, 16, 24}) {
    models::SegmenterNet seg(o, 2);
    CHECK(seg->forward(torch::rand({1, 1, side, side})).sizes().vec() ==
          std::vector<std::int64_t>{1, 2, side, side});
  }
  o.rank = 3;
  models::RegistrationNet reg3(o);
  CHECK(reg3->forward(torch::rand({1, 1, 8, 8, 8}), torch::rand({1, 1, 8, 8, 8})).vectors.size(1) == 3);
  models::DiscriminatorOptions d;
  d.rank = 3;
  d.blocks = 2;
  models::DiscriminatorNet disc3(d);
  CHECK(disc3->forward(torch::rand({2, 1, 8, 8, 8})).numel() == 2);
}

TEST_CASE("segmenter outputs probabilities and is batch independent") {
  torch::manual_seed(3);
  models::SegmenterNet seg(small(), 3);
  const auto x = torch::randn({4, 1, 16, 16});
  const auto p = seg->forward(x);
  CHECK((p.sum(1) - 1).abs().max().item<double>() < 1e-5);
  CHECK(p.min().item<double>() >= 0);

  const auto perm = torch::tensor({2, 0, 3, 1});
  const auto q = seg->forward(x.index_select(0, perm));
  CHECK(torch::allclose(q, p.index_select(0, perm), 1e-5, 1e-6));
  const auto single = seg->forward(x.narrow(0, 2, 1));
  CHECK(torch::allclose(single, p.narrow(0, 2, 1), 1e-5, 1e-6));
}

TEST_CASE("segmenter overfits one pair") {
  torch::manual_seed(4);
  models::SegmenterNet seg(small(), 2);
  auto mask = torch::zeros({1, 16, 16}, torch::kUInt8);
  mask.narrow(1, 3, 9).narrow(2, 5, 6).fill_(1);
  mask[0][8][2] = 1;
  const auto image = mask.to(torch::kFloat32).unsqueeze(1) * 0.8 + torch::rand({1, 1, 16, 16}) * 0.2;
  const auto target = warp::one_hot(mask, 2);
  torch::optim::Adam opt(seg->parameters(), torch::optim::AdamOptions(1e-3));
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    auto l = losses::dice(seg->forward(image), target);
    l.backward();
    opt.step();
  }
  torch::NoGradGuard g;
  const auto pred = seg->forward(image).argmax(1);
  const double inter = (pred * mask).sum().item<double>();
  const double dice = 2 * inter / (pred.sum().item<double>() + mask.sum().item<double>());
  CHECK(dice > 0.95);
}

TEST_CASE("registration net fitted to one pair beats random fields") {
  torch::manual_seed(5);
  models::RegistrationNet reg(small());
  const auto src = blob(16, 16, 4, 4, 6), dst = blob(16, 16, 6, 5, 6);
  torch::optim::Adam opt(reg->parameters(), torch::optim::AdamOptions(1e-3));
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    const auto phi = warp::integrate(reg->forward(src, dst));
    auto l = torch::mse_loss(warp::warp(src, phi), dst) + 0.001 * losses::gradient_l2(phi.displacement);
    l.backward();
    opt.step();
  }
  torch::NoGradGuard g;
  const double fitted = torch::mse_loss(warp::warp(src, warp::integrate(reg->forward(src, dst))), dst).item<double>();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto v = testing::smooth_field({16, 16}, 3.0, s, 6, torch::kFloat32);
    const double baseline = torch::mse_loss(warp::warp(src, warp::integrate(warp::VelocityField{v})), dst).item<double>();
    CHECK(fitted < baseline);
  }
  // identical pair: stays at (or returns to) the identity warp quality
  const double same = torch::mse_loss(warp::warp(src, warp::integrate(reg->forward(src, src))), src).item<double>();
  CHECK(same < torch::mse_loss(src, dst).item<double>());
}

TEST_CASE("discriminator: deterministic, finite, learns a separable toy task") {
  torch::manual_seed(6);
  models::DiscriminatorNet disc(models::DiscriminatorOptions{});
  disc->eval();
  const auto x = torch::rand({3, 1, 32, 32});
  CHECK(torch::equal(disc->forward(x), disc->forward(x)));
  CHECK(torch::isfinite(disc->forward(torch::zeros({1, 1, 32, 32}))).all().item<bool>());
  CHECK(torch::isfinite(disc->forward(torch::ones({1, 1, 32, 32}))).all().item<bool>());
  CHECK(torch::isfinite(disc->forward(torch::full({1, 1, 32, 32}, 1e4))).all().item<bool>());

  disc->train();
  torch::optim::Adam opt(disc->parameters(), torch::optim::AdamOptions(3e-4));
  auto bright = [] { return 0.6 + 0.4 * torch::rand({8, 1, 32, 32}); };
  auto dark = [] { return 0.4 * torch::rand({8, 1, 32, 32}); };
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    auto l = losses::disc_discriminator(disc->forward(bright()), disc->forward(dark()));
    l.backward();
    opt.step();
  }
  torch::NoGradGuard g;
  const auto correct = (disc->forward(bright()) > 0).sum().item<int>() + (disc->forward(dark()) < 0).sum().item<int>();
  CHECK(correct / 16.0 > 0.95);

  models::DiscriminatorOptions po;
  po.patch = true;
  models::DiscriminatorNet patch(po);
  CHECK(patch->forward(x).numel() > 3);
}

TEST_CASE("freeze blocks gradients and restores flags") {
  torch::manual_seed(7);
  models::SegmenterNet seg(small(), 2);
  const auto x = torch::rand({1, 1, 16, 16}, torch::requires_grad());
  {
    models::Freeze f(*seg);
    for (const auto& p : seg->parameters()) CHECK_FALSE(p.requires_grad());
    seg->forward(x).sum().backward();
  }
  for (const auto& p : seg->parameters()) {
    CHECK(p.requires_grad());
    CHECK_FALSE(p.grad().defined());
  }
  CHECK(x.grad().defined());
}

TEST_CASE("checkpoints round-trip and hash parameters") {
  torch::manual_seed(8);
  models::SegmenterNet a(small(), 2), b(small(), 2);
  CHECK(models::parameter_hash(*a) != models::parameter_hash(*b));
  const auto stem = std::filesystem::temp_directory_path() / "dirda_test_ckpt";
  models::save_checkpoint(*a, stem, {{"step", 12}});
  const auto meta = models::load_checkpoint(*b, stem);
  CHECK(meta.at("step") == 12);
  CHECK(models::parameter_hash(*a) == models::parameter_hash(*b));
  const auto x = torch::rand({1, 1, 16, 16});
  CHECK(torch::equal(a->forward(x), b->forward(x)));
  std::filesystem::remove(stem.string() + ".pt");
  std::filesystem::remove(stem.string() + ".json");
  CHECK_THROWS_AS(models::load_checkpoint(*b, stem), MissingInputError);
}

}  // TEST_SUITE

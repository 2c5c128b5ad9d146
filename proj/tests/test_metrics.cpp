#include "test_prelude.hpp"

#include <optional>

#include "dirda/metrics.hpp"
#include "support.hpp"

using namespace dirda;

namespace {

struct Grid {
  int h = 0, w = 0;
  std::vector<int> v;
  [[nodiscard]] int at(int y, int x) const {
    return (y < 0 || x < 0 || y >= h || x >= w) ? 0 : v[std::size_t(y) * w + x];
  }
};

Grid grid(const torch::Tensor& m) {
  Grid g{int(m.size(0)), int(m.size(1)), {}};
  auto c = m.to(torch::kInt32).contiguous();
  g.v.assign(c.data_ptr<int>(), c.data_ptr<int>() + c.numel());
  return g;
}

std::vector<std::pair<int, int>> boundary_ref(const Grid& g) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      if (!g.at(y, x)) continue;
      if (!g.at(y - 1, x) || !g.at(y + 1, x) || !g.at(y, x - 1) || !g.at(y, x + 1)) out.emplace_back(y, x);
    }
  }
  return out;
}

// every boundary point of `a` to its nearest boundary point of `b`, by exhaustive search
std::vector<double> directed_ref(const std::vector<std::pair<int, int>>& a,
                                 const std::vector<std::pair<int, int>>& b) {
  std::vector<double> out;
  for (auto [ya, xa] : a) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [yb, xb] : b) best = std::min(best, std::sqrt(double((ya - yb) * (ya - yb) + (xa - xb) * (xa - xb))));
    out.push_back(best);
  }
  return out;
}

double pct_ref(std::vector<double> d, double p) {
  std::sort(d.begin(), d.end());
  const double rank = p / 100.0 * double(d.size() - 1);
  const auto i = std::size_t(rank);
  if (i + 1 >= d.size()) return d.back();
  return d[i] + (rank - double(i)) * (d[i + 1] - d[i]);
}

double dsc_ref(const Grid& a, const Grid& b) {
  int sa = 0, sb = 0, both = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    sa += a.v[i] != 0;
    sb += b.v[i] != 0;
    both += a.v[i] != 0 && b.v[i] != 0;
  }
  return sa + sb == 0 ? 1.0 : 2.0 * both / double(sa + sb);
}

double sdsc_ref(const Grid& a, const Grid& b, double tol) {
  const auto ba = boundary_ref(a), bb = boundary_ref(b);
  if (ba.empty() && bb.empty()) return 1.0;
  if (ba.empty() || bb.empty()) return 0.0;
  int within = 0;
  for (double d : directed_ref(ba, bb)) within += d <= tol;
  for (double d : directed_ref(bb, ba)) within += d <= tol;
  return double(within) / double(ba.size() + bb.size());
}

std::optional<double> hd95_ref(const Grid& a, const Grid& b, bool pooled) {
  const auto ba = boundary_ref(a), bb = boundary_ref(b);
  if (ba.empty() && bb.empty()) return 0.0;
  if (ba.empty() || bb.empty()) return std::nullopt;
  const auto ab = directed_ref(ba, bb), ba_d = directed_ref(bb, ba);
  if (pooled) {
    auto all = ab;
    all.insert(all.end(), ba_d.begin(), ba_d.end());
    return pct_ref(all, 95);
  }
  return std::max(pct_ref(ab, 95), pct_ref(ba_d, 95));
}

std::optional<double> ravd_ref(const Grid& pred, const Grid& ref) {
  int sp = 0, sr = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    sp += pred.v[i] != 0;
    sr += ref.v[i] != 0;
  }
  if (sr == 0) return std::nullopt;
  return 100.0 * std::abs(sp - sr) / double(sr);
}

torch::Tensor box(int h, int w, int y, int x, int bh, int bw) {
  auto m = torch::zeros({h, w}, torch::kUInt8);
  m.narrow(0, y, bh).narrow(1, x, bw).fill_(1);
  return m;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("all metrics equal exhaustive oracles on 100 random mask pairs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> side(1, 12);
  std::uniform_real_distribution<double> dens(0.0, 0.9);
  int with_empty = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = side(rng), w = side(rng);
    const auto a = testing::random_mask(h, w, rng, trial % 10 == 0 ? 0.0 : dens(rng));
    const auto b = testing::random_mask(h, w, rng, dens(rng));
    const auto ga = grid(a), gb = grid(b);
    with_empty += a.sum().item<int>() == 0 || b.sum().item<int>() == 0;
    CAPTURE(trial);

    CHECK(metrics::dsc(a, b) == dsc_ref(ga, gb));
    for (double tol : {0.0, 1.0, 1.5, 2.0}) CHECK(metrics::sdsc(a, b, tol) == sdsc_ref(ga, gb, tol));
    const auto hd = metrics::hd95(a, b);
    const auto hd_ref = hd95_ref(ga, gb, false);
    REQUIRE(hd.has_value() == hd_ref.has_value());
    if (hd) CHECK(*hd == *hd_ref);
    const auto hdp = metrics::hd95(a, b, metrics::HdConvention::pooled);
    const auto hdp_ref = hd95_ref(ga, gb, true);
    REQUIRE(hdp.has_value() == hdp_ref.has_value());
    if (hdp) CHECK(*hdp == *hdp_ref);
    const auto rv = metrics::ravd(a, b);
    const auto rv_ref = ravd_ref(ga, gb);
    REQUIRE(rv.has_value() == rv_ref.has_value());
    if (rv) CHECK(*rv == *rv_ref);

    // boundary extraction and distance transform against the loop versions
    const auto bnd = metrics::boundary(a);
    CHECK(bnd.sum().item<int>() == int(boundary_ref(ga).size()));
    for (auto [y, x] : boundary_ref(ga)) CHECK(bnd[y][x].item<int>() == 1);
  }
  CHECK(with_empty >= 10);
}

TEST_CASE("squared distance transform equals brute force") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto seeds = testing::random_mask(9, 11, rng, 0.08);
    if (seeds.sum().item<int>() == 0) continue;
    const auto dt = metrics::squared_distance_transform(seeds);
    const auto g = grid(seeds);
    for (int y = 0; y < 9; ++y) {
      for (int x = 0; x < 11; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (int yy = 0; yy < 9; ++yy) {
          for (int xx = 0; xx < 11; ++xx) {
            if (g.at(yy, xx)) best = std::min(best, double((y - yy) * (y - yy) + (x - xx) * (x - xx)));
          }
        }
        CHECK(dt[y][x].item<double>() == best);
      }
    }
  }
}

TEST_CASE("3D metrics use face neighbours and agree with a direct count") {
  auto a = torch::zeros({5, 5, 5}, torch::kUInt8);
  a.narrow(0, 1, 3).narrow(1, 1, 3).narrow(2, 1, 3).fill_(1);
  const auto bnd = metrics::boundary(a);
  CHECK(bnd.sum().item<int>() == 26);  // 27 voxels minus the enclosed centre
  CHECK(bnd[2][2][2].item<int>() == 0);
  CHECK(metrics::dsc(a, a) == 1.0);
  auto b = torch::zeros_like(a);
  b.narrow(0, 1, 3).narrow(1, 1, 3).narrow(2, 2, 3).fill_(1);
  CHECK(metrics::dsc(a, b) == doctest::Approx(2.0 * 18 / 54));
  CHECK(*metrics::hd95(a, b) == doctest::Approx(1.0));
}

TEST_CASE("hand-checked values") {
  // |A| = 8, |B| = 8, overlap 4
  const auto a = box(6, 6, 0, 0, 2, 4);
  const auto b = box(6, 6, 0, 2, 2, 4);
  CHECK(metrics::dsc(a, b) == 0.5);
  CHECK(metrics::dsc(a, a) == 1.0);
  CHECK(metrics::dsc(box(6, 6, 0, 0, 2, 2), box(6, 6, 4, 4, 2, 2)) == 0.0);
  CHECK(metrics::dsc(torch::zeros({4, 4}, torch::kUInt8), torch::zeros({4, 4}, torch::kUInt8)) == 1.0);

  CHECK(metrics::sdsc(a, a) == 1.0);
  CHECK(metrics::sdsc(box(20, 20, 0, 0, 3, 3), box(20, 20, 12, 12, 3, 3), 1.0) == 0.0);
  // 1-px shifted 5x5 squares at tolerance 1
  const auto s1 = box(9, 9, 2, 2, 5, 5), s2 = box(9, 9, 2, 3, 5, 5);
  CHECK(metrics::sdsc(s1, s2, 1.0) == sdsc_ref(grid(s1), grid(s2), 1.0));

  // single pixels at distance 5
  auto p = torch::zeros({10, 10}, torch::kUInt8), q = torch::zeros({10, 10}, torch::kUInt8);
  p[1][1] = 1;
  q[4][5] = 1;
  CHECK(*metrics::hd95(p, q) == 5.0);
  CHECK(*metrics::hd95(a, a) == 0.0);

  // |A| = 12 predicted, |B| = 10 reference
  CHECK(*metrics::ravd(box(8, 8, 0, 0, 3, 4), box(8, 8, 0, 0, 2, 5)) == 20.0);
  CHECK(*metrics::ravd(a, a) == 0.0);
  CHECK_FALSE(metrics::ravd(a, torch::zeros_like(a)).has_value());
}

TEST_CASE("symmetry, direction and translation invariance") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = torch::zeros({16, 16}, torch::kUInt8), b = torch::zeros({16, 16}, torch::kUInt8);
    a.narrow(0, 3, 8).narrow(1, 3, 8).copy_(testing::random_mask(8, 8, rng, 0.6));
    b.narrow(0, 3, 8).narrow(1, 3, 8).copy_(testing::random_mask(8, 8, rng, 0.6));
    CHECK(metrics::dsc(a, b) == metrics::dsc(b, a));
    CHECK(metrics::sdsc(a, b) == metrics::sdsc(b, a));
    const auto h1 = metrics::hd95(a, b), h2 = metrics::hd95(b, a);
    REQUIRE(h1.has_value() == h2.has_value());
    if (h1) CHECK(*h1 == *h2);

    const auto ta = torch::roll(a, {2, -1}, {0, 1}), tb = torch::roll(b, {2, -1}, {0, 1});
    CHECK(metrics::dsc(ta, tb) == metrics::dsc(a, b));
    CHECK(metrics::sdsc(ta, tb) == metrics::sdsc(a, b));
    const auto h3 = metrics::hd95(ta, tb);
    if (h1) CHECK(*h3 == *h1);
  }
  // ravd is directional
  const auto small = box(8, 8, 0, 0, 2, 2), large = box(8, 8, 0, 0, 4, 4);
  CHECK(*metrics::ravd(small, large) == 75.0);
  CHECK(*metrics::ravd(large, small) == 300.0);
}

TEST_CASE("reports summarise, flag missing values and round-trip") {
  metrics::MetricsReport r;
  r.arm = "full";
  r.fold = 1;
  r.checkpoint_hash = "abc";
  r.sdsc_tolerance = 1.5;
  r.per_sample.push_back({"a", 0.8, 0.9, 2.0, 10.0});
  r.per_sample.push_back({"b", 0.6, 0.7, std::nullopt, std::nullopt});
  const auto d = r.summary("dsc");
  CHECK(d.mean == doctest::Approx(0.7));
  CHECK(d.std == doctest::Approx(0.1));
  CHECK(d.count == 2);
  const auto h = r.summary("hd95");
  CHECK(h.count == 1);
  CHECK(h.missing == 1);

  const auto back = metrics::MetricsReport::from_json(r.to_json());
  CHECK(back.arm == "full");
  CHECK(back.fold == 1);
  CHECK(back.sdsc_tolerance == 1.5);
  CHECK(back.per_sample.size() == 2);
  CHECK_FALSE(back.per_sample[1].hd95.has_value());
  CHECK(back.summary("dsc").mean == d.mean);

  auto r2 = r;
  r2.fold = 2;
  const auto pooled = metrics::pool({r, r2}, "full");
  CHECK(pooled.per_sample.size() == 4);
  CHECK(pooled.fold == -1);
}

}  // TEST_SUITE

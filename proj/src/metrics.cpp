#include "dirda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dirda::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

torch::Tensor binary(const torch::Tensor& m) {
  require(m.dim() == 2 || m.dim() == 3, "masks must be 2D or 3D");
  return m.ne(0).to(torch::kUInt8).contiguous();
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  require(a.sizes() == b.sizes(), "mask shapes differ");
}

// 1D squared distance transform (lower envelope of parabolas) over a strided
// line of length n. f holds squared distances in, results out.
void edt_line(double* f, std::int64_t n, std::int64_t stride, std::vector<double>& buf,
              std::vector<std::int64_t>& v, std::vector<double>& z) {
  buf.resize(static_cast<std::size_t>(n));
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n + 1));
  for (std::int64_t i = 0; i < n; ++i) buf[i] = f[i * stride];

  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (buf[q] == kInf) continue;
    double s = 0;
    // z[0] is -inf, so the envelope never empties once it has a parabola
    while (k >= 0) {
      const auto p = v[k];
      s = ((buf[q] + double(q) * q) - (buf[p] + double(p) * p)) / (2.0 * double(q - p));
      if (s <= z[k]) --k;
      else break;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    for (std::int64_t i = 0; i < n; ++i) f[i * stride] = kInf;
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < double(q)) ++j;
    const double d = double(q - v[j]);
    f[q * stride] = d * d + buf[v[j]];
  }
}

std::optional<double> directed_or_pooled(const torch::Tensor& a, const torch::Tensor& b,
                                         HdConvention convention) {
  const auto ab = boundary_distances(a, b);
  const auto ba = boundary_distances(b, a);
  if (ab.empty() && ba.empty()) return 0.0;
  if (ab.empty() || ba.empty()) return std::nullopt;
  if (convention == HdConvention::pooled) {
    std::vector<double> all(ab);
    all.insert(all.end(), ba.begin(), ba.end());
    return percentile(std::move(all), 95.0);
  }
  return std::max(percentile(ab, 95.0), percentile(ba, 95.0));
}

}  // namespace

double dsc(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b);
  const auto ba = binary(a), bb = binary(b);
  const double sa = ba.sum().item<double>(), sb = bb.sum().item<double>();
  if (sa + sb == 0) return 1.0;
  const double inter = (ba * bb).sum().item<double>();
  return 2.0 * inter / (sa + sb);
}

torch::Tensor boundary(const torch::Tensor& mask) {
  const auto m = binary(mask);
  const auto rank = m.dim();
  // pad with background so grid-edge foreground counts as boundary
  std::vector<std::int64_t> pad(static_cast<std::size_t>(2 * rank), 1);
  const auto padded = torch::constant_pad_nd(m, pad, 0);
  auto all_fg = torch::ones_like(m);
  for (std::int64_t d = 0; d < rank; ++d) {
    for (int off : {0, 2}) {
      auto nb = padded;
      for (std::int64_t a = 0; a < rank; ++a) nb = nb.narrow(a, a == d ? off : 1, m.size(a));
      all_fg = all_fg * nb;
    }
  }
  return (m * (1 - all_fg)).to(torch::kUInt8).contiguous();
}

torch::Tensor squared_distance_transform(const torch::Tensor& seeds) {
  const auto s = binary(seeds);
  auto f = torch::where(s.to(torch::kBool), torch::zeros({}, torch::kFloat64),
                        torch::full({}, kInf, torch::kFloat64))
               .contiguous();
  const auto rank = f.dim();
  const auto sizes = f.sizes().vec();
  const auto strides = f.strides().vec();
  double* data = f.data_ptr<double>();
  std::vector<double> buf, z;
  std::vector<std::int64_t> v;
  for (std::int64_t axis = 0; axis < rank; ++axis) {
    const auto n = sizes[axis];
    const auto stride = strides[axis];
    const auto lines = f.numel() / n;
    // enumerate every line along `axis` by its starting offset
    for (std::int64_t line = 0; line < lines; ++line) {
      std::int64_t rem = line, offset = 0;
      for (std::int64_t a = rank - 1; a >= 0; --a) {
        if (a == axis) continue;
        offset += (rem % sizes[a]) * strides[a];
        rem /= sizes[a];
      }
      edt_line(data + offset, n, stride, buf, v, z);
    }
  }
  return f;
}

std::vector<double> boundary_distances(const torch::Tensor& from, const torch::Tensor& to) {
  check_pair(from, to);
  const auto bf = boundary(from);
  const auto bt = boundary(to);
  std::vector<double> out;
  const auto count = bf.sum().item<std::int64_t>();
  if (count == 0) return out;
  if (bt.sum().item<std::int64_t>() == 0) return std::vector<double>(count, kInf);
  const auto dt = squared_distance_transform(bt);
  const auto* mask = bf.data_ptr<std::uint8_t>();
  const auto* d2 = dt.data_ptr<double>();
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < bf.numel(); ++i) {
    if (mask[i]) out.push_back(std::sqrt(d2[i]));
  }
  return out;
}

double percentile(std::vector<double> values, double pct) {
  require(!values.empty(), "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double sdsc(const torch::Tensor& a, const torch::Tensor& b, double tolerance) {
  const auto ab = boundary_distances(a, b);
  const auto ba = boundary_distances(b, a);
  if (ab.empty() && ba.empty()) return 1.0;
  if (ab.empty() || ba.empty()) return 0.0;
  const auto within = [&](const std::vector<double>& d) {
    return std::count_if(d.begin(), d.end(), [&](double x) { return x <= tolerance; });
  };
  return static_cast<double>(within(ab) + within(ba)) / static_cast<double>(ab.size() + ba.size());
}

std::optional<double> hd95(const torch::Tensor& a, const torch::Tensor& b, HdConvention convention) {
  return directed_or_pooled(a, b, convention);
}

std::optional<double> ravd(const torch::Tensor& pred, const torch::Tensor& ref) {
  check_pair(pred, ref);
  const double vp = binary(pred).sum().item<double>();
  const double vr = binary(ref).sum().item<double>();
  if (vr == 0) return std::nullopt;
  return 100.0 * std::abs(vp - vr) / vr;
}

SampleMetrics evaluate_pair(std::string id, const torch::Tensor& pred, const torch::Tensor& ref,
                            double sdsc_tolerance, HdConvention convention) {
  return {std::move(id), dsc(pred, ref), sdsc(pred, ref, sdsc_tolerance),
          hd95(pred, ref, convention), ravd(pred, ref)};
}

Summary MetricsReport::summary(const std::string& metric) const {
  std::vector<double> xs;
  Summary s;
  for (const auto& m : per_sample) {
    std::optional<double> v;
    if (metric == "dsc") v = m.dsc;
    else if (metric == "sdsc") v = m.sdsc;
    else if (metric == "hd95") v = m.hd95;
    else if (metric == "ravd") v = m.ravd;
    else throw ContractError("unknown metric: " + metric);
    if (v && std::isfinite(*v)) xs.push_back(*v);
    else ++s.missing;
  }
  s.count = xs.size();
  if (xs.empty()) return s;
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / double(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / double(xs.size()));
  return s;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_from(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& m : per_sample) {
    samples.push_back({{"id", m.id},
                       {"dsc", m.dsc},
                       {"sdsc", m.sdsc},
                       {"hd95", opt(m.hd95)},
                       {"ravd", opt(m.ravd)}});
  }
  nlohmann::json aggregate = nlohmann::json::object();
  for (const char* name : {"dsc", "sdsc", "hd95", "ravd"}) {
    const auto s = summary(name);
    aggregate[name] = {{"mean", s.mean}, {"std", s.std}, {"count", s.count}, {"missing", s.missing}};
  }
  return {{"schema_version", 1},
          {"arm", arm},
          {"task", task},
          {"fold", fold},
          {"checkpoint_hash", checkpoint_hash},
          {"sdsc_tolerance", sdsc_tolerance},
          {"hd_convention",
           hd_convention == HdConvention::pooled ? "pooled" : "per_direction_max"},
          {"per_sample", samples},
          {"aggregate", aggregate}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.arm = j.at("arm").get<std::string>();
  r.task = j.value("task", "DS");
  r.fold = j.at("fold").get<int>();
  r.checkpoint_hash = j.value("checkpoint_hash", "");
  r.sdsc_tolerance = j.value("sdsc_tolerance", 1.0);
  r.hd_convention = j.value("hd_convention", "per_direction_max") == "pooled"
                        ? HdConvention::pooled
                        : HdConvention::per_direction_max;
  for (const auto& s : j.at("per_sample")) {
    r.per_sample.push_back({s.at("id").get<std::string>(), s.at("dsc").get<double>(),
                            s.at("sdsc").get<double>(), opt_from(s.at("hd95")),
                            opt_from(s.at("ravd"))});
  }
  return r;
}

MetricsReport pool(const std::vector<MetricsReport>& reports, const std::string& arm) {
  MetricsReport out;
  out.arm = arm;
  out.fold = -1;
  if (!reports.empty()) {
    out.task = reports.front().task;
    out.sdsc_tolerance = reports.front().sdsc_tolerance;
    out.hd_convention = reports.front().hd_convention;
  }
  for (const auto& r : reports) {
    for (auto m : r.per_sample) {
      m.id = "f" + std::to_string(r.fold) + "/" + m.id;
      out.per_sample.push_back(std::move(m));
    }
  }
  return out;
}

}  // namespace dirda::metrics

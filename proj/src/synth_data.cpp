#include "dirda/synth_data.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <cstdlib>
#include <numbers>

#include "dirda/io.hpp"
#include "dirda/seeding.hpp"

#ifndef DIRDA_DATA_DIR
#define DIRDA_DATA_DIR "data"
#endif

namespace dirda::synth {

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 3]));
}

torch::Tensor morph(const torch::Tensor& img, int radius, bool dilation) {
  require(img.dim() == 2, "morphology expects a 2D image");
  if (radius < 0) throw ConfigError("morphology radius must be >= 0");
  auto src = img.to(torch::kFloat32).contiguous();
  if (radius == 0) return src.clone();
  const auto h = src.size(0), w = src.size(1);
  auto out = torch::empty_like(src);
  const float* in = src.data_ptr<float>();
  float* o = out.data_ptr<float>();
  const int r2 = radius * radius;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      float acc = in[y * w + x];
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dy * dy + dx * dx > r2) continue;
          const auto yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const float v = in[yy * w + xx];
          acc = dilation ? std::max(acc, v) : std::min(acc, v);
        }
      }
      o[y * w + x] = acc;
    }
  }
  return out;
}

torch::Tensor resample_morph(const torch::Tensor& digit, int radius, bool dilation, int upsample) {
  if (upsample <= 1 || radius == 0) return morph(digit, radius, dilation);
  namespace F = torch::nn::functional;
  auto big = F::interpolate(digit.unsqueeze(0).unsqueeze(0),
                            F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{double(upsample), double(upsample)})
                                .mode(torch::kBilinear)
                                .align_corners(false));
  big = morph(big[0][0], radius, dilation).unsqueeze(0).unsqueeze(0);
  auto small = F::avg_pool2d(big, F::AvgPool2dFuncOptions(upsample));
  return small[0][0].clamp(0.0, 1.0).contiguous();
}

torch::Tensor pad_to_canvas(const torch::Tensor& img, int canvas) {
  const auto h = img.size(0), w = img.size(1);
  if (canvas == h && canvas == w) return img.contiguous();
  const auto top = (canvas - h) / 2, left = (canvas - w) / 2;
  auto out = torch::zeros({canvas, canvas}, img.options());
  out.narrow(0, top, h).narrow(1, left, w).copy_(img);
  return out;
}

}  // namespace

torch::Tensor load_idx_images(const fs::path& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 16 || read_be32(bytes, 0) != 0x00000803) {
    throw ConfigError("not an IDX3 ubyte image file: " + path.string());
  }
  const std::int64_t n = read_be32(bytes, 4), h = read_be32(bytes, 8), w = read_be32(bytes, 12);
  if (bytes.size() < 16 + static_cast<std::size_t>(n * h * w)) {
    throw ConfigError("truncated IDX file: " + path.string());
  }
  auto t = torch::empty({n, h, w}, torch::kUInt8);
  std::memcpy(t.data_ptr(), bytes.data() + 16, static_cast<std::size_t>(n * h * w));
  return t.to(torch::kFloat32) / 255.0;
}

torch::Tensor load_idx_labels(const fs::path& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 8 || read_be32(bytes, 0) != 0x00000801) {
    throw ConfigError("not an IDX1 ubyte label file: " + path.string());
  }
  const std::int64_t n = read_be32(bytes, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(n)) throw ConfigError("truncated IDX file");
  auto t = torch::empty({n}, torch::kUInt8);
  std::memcpy(t.data_ptr(), bytes.data() + 8, static_cast<std::size_t>(n));
  return t.to(torch::kInt64);
}

fs::path default_digits_path() {
  if (const char* dir = std::getenv("DIRDA_DATA_DIR"); dir != nullptr && *dir != '\0') {
    return fs::path(dir) / "mnist-zeros-idx3-ubyte";
  }
  return fs::path(DIRDA_DATA_DIR) / "mnist-zeros-idx3-ubyte";
}

torch::Tensor load_default_zeros() { return load_idx_images(default_digits_path()); }

torch::Tensor dilate(const torch::Tensor& img, int radius) { return morph(img, radius, true); }
torch::Tensor erode(const torch::Tensor& img, int radius) { return morph(img, radius, false); }

void MorphologySpec::validate() const {
  if (thick_radius < 0 || thin_radius < 0) throw ConfigError("morphology radii must be >= 0");
  if (canvas < 28) throw ConfigError("canvas must be at least 28 pixels");
  if (upsample < 1) throw ConfigError("morphology upsample factor must be >= 1");
}

std::shared_ptr<const TextureBank> TextureBank::procedural(int count, int side,
                                                           std::uint64_t seed) {
  if (count <= 0 || side <= 0) throw ConfigError("texture bank needs count, side > 0");
  auto bank = std::make_shared<TextureBank>();
  bank->side_ = side;
  Rng rng(seed);
  for (int k = 0; k < count; ++k) {
    // a few oriented gratings plus box-smoothed noise
    auto tex = torch::zeros({side, side}, torch::kFloat32);
    auto acc = tex.accessor<float, 2>();
    const int waves = static_cast<int>(uniform_int(rng, 1, 3));
    for (int wv = 0; wv < waves; ++wv) {
      const double theta = uniform(rng, 0.0, std::numbers::pi);
      const double freq = uniform(rng, 0.08, 0.6);
      const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
      const double amp = uniform(rng, 0.3, 1.0);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          acc[y][x] += static_cast<float>(
              amp * std::sin(freq * (std::cos(theta) * x + std::sin(theta) * y) + phase));
    }
    std::vector<double> noise(static_cast<std::size_t>(side * side));
    for (auto& n : noise) n = normal(rng, 0.0, 1.0);
    const int smooth = static_cast<int>(uniform_int(rng, 0, 2));
    const double noise_amp = uniform(rng, 0.2, 0.8);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        double s = 0;
        int c = 0;
        for (int dy = -smooth; dy <= smooth; ++dy)
          for (int dx = -smooth; dx <= smooth; ++dx) {
            const int yy = std::clamp(y + dy, 0, side - 1), xx = std::clamp(x + dx, 0, side - 1);
            s += noise[static_cast<std::size_t>(yy * side + xx)];
            ++c;
          }
        acc[y][x] += static_cast<float>(noise_amp * s / c);
      }
    const auto lo = tex.min(), hi = tex.max();
    tex = (tex - lo) / (hi - lo).clamp_min(1e-6);
    bank->textures_.push_back(tex.contiguous());
  }
  return bank;
}

std::shared_ptr<const TextureBank> TextureBank::from_images(std::vector<torch::Tensor> images) {
  if (images.empty()) throw ConfigError("texture bank is empty");
  auto bank = std::make_shared<TextureBank>();
  bank->side_ = static_cast<int>(std::min(images.front().size(0), images.front().size(1)));
  for (auto& im : images) {
    require(im.dim() == 2, "texture images must be 2D");
    bank->side_ = std::min<int>(bank->side_, static_cast<int>(std::min(im.size(0), im.size(1))));
    bank->textures_.push_back(im.to(torch::kFloat32).clamp(0.0, 1.0).contiguous());
  }
  return bank;
}

torch::Tensor TextureBank::crop(std::size_t index, int y, int x, int size) const {
  require(index < textures_.size(), "texture index out of range");
  require(y >= 0 && x >= 0 && y + size <= side_ && x + size <= side_, "texture crop out of range");
  return textures_[index].narrow(0, y, size).narrow(1, x, size);
}

void CorruptionSpec::validate(std::int64_t height, std::int64_t width) const {
  if (!patch_bank || patch_bank->size() == 0) throw ConfigError("patch bank is empty");
  if (bg_patch_size <= 0 || fg_patch_size <= 0) throw ConfigError("patch sizes must be > 0");
  if (bg_patch_size > std::min(height, width) || fg_patch_size > std::min(height, width)) {
    throw ConfigError("patch larger than image");
  }
  if (std::max(bg_patch_size, fg_patch_size) > patch_bank->side()) {
    throw ConfigError("patch larger than the texture bank's textures");
  }
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(fg_alpha >= 0.0 && fg_alpha <= 1.0)) throw ConfigError("fg_alpha must lie in [0,1]");
}

nlohmann::json CorruptionSpec::to_json() const {
  return {{"bg_patch_size", bg_patch_size}, {"fg_patch_size", fg_patch_size},
          {"fg_alpha", fg_alpha},           {"noise_mean", noise_mean},
          {"noise_std", noise_std},         {"seed", seed}};
}

Image corrupt_style(const Image& img, const CorruptionSpec& spec) {
  require(img.pixels.dim() == 2, "corrupt_style expects a 2D image");
  const auto h = img.pixels.size(0), w = img.pixels.size(1);
  spec.validate(h, w);
  Rng rng(spec.seed);
  const auto& bank = *spec.patch_bank;

  const auto clean = img.pixels.to(torch::kFloat32).contiguous();
  auto out = clean.clone();
  auto o = out.accessor<float, 2>();
  const auto c = clean.accessor<float, 2>();
  auto is_digit = [&](std::int64_t y, std::int64_t x) { return c[y][x] >= 0.5f; };

  auto random_crop = [&](int size) {
    const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(bank.size()) - 1));
    const auto cy = static_cast<int>(uniform_int(rng, 0, bank.side() - size));
    const auto cx = static_cast<int>(uniform_int(rng, 0, bank.side() - size));
    return bank.crop(idx, cy, cx, size).contiguous();
  };

  // background patch: screen blend off the digit
  {
    const int b = spec.bg_patch_size;
    auto patch = random_crop(b);
    auto p = patch.accessor<float, 2>();
    std::int64_t top = 0, left = 0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      top = uniform_int(rng, 0, h - b);
      left = uniform_int(rng, 0, w - b);
      if (!is_digit(top + b / 2, left + b / 2)) break;
    }
    for (int y = 0; y < b; ++y)
      for (int x = 0; x < b; ++x) {
        const auto yy = top + y, xx = left + x;
        if (!is_digit(yy, xx)) o[yy][xx] = o[yy][xx] + p[y][x] * (1.0f - o[yy][xx]);
      }
  }

  // foreground patch: multiplicative texture on the digit support
  {
    const int f = spec.fg_patch_size;
    auto patch = random_crop(f);
    auto p = patch.accessor<float, 2>();
    std::vector<std::pair<std::int64_t, std::int64_t>> support;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        if (is_digit(y, x)) support.emplace_back(y, x);
    if (!support.empty()) {
      const auto [cy, cx] =
          support[static_cast<std::size_t>(uniform_int(rng, 0, std::int64_t(support.size()) - 1))];
      const auto top = std::clamp<std::int64_t>(cy - f / 2, 0, h - f);
      const auto left = std::clamp<std::int64_t>(cx - f / 2, 0, w - f);
      const auto alpha = static_cast<float>(spec.fg_alpha);
      for (int y = 0; y < f; ++y)
        for (int x = 0; x < f; ++x) {
          const auto yy = top + y, xx = left + x;
          if (is_digit(yy, xx)) o[yy][xx] = o[yy][xx] * (1.0f - alpha * p[y][x]);
        }
    }
  }

  if (spec.noise_std > 0.0 || spec.noise_mean != 0.0) {
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        o[y][x] += static_cast<float>(normal(rng, spec.noise_mean, spec.noise_std));
  }
  out.clamp_(0.0, 1.0);
  return Image{out, img.domain};
}

MorphoSet generate_morpho_pairs(const torch::Tensor& digits, std::int64_t n_per_domain,
                                const GenerateOptions& opts, std::uint64_t seed) {
  if (n_per_domain <= 0) throw ConfigError("n_per_domain must be > 0");
  opts.morphology.validate();
  require(digits.dim() == 3, "digits must be [M, H, W]");
  if (2 * n_per_domain > digits.size(0)) {
    throw ConfigError("need " + std::to_string(2 * n_per_domain) + " digit instances, have " +
                      std::to_string(digits.size(0)));
  }

  std::vector<std::int64_t> order(static_cast<std::size_t>(digits.size(0)));
  std::iota(order.begin(), order.end(), 0);
  Rng assign(derive_seed(seed, "synth/assign"));
  shuffle(order.begin(), order.end(), assign);

  CorruptionSpec corruption = opts.corruption;
  if (!corruption.patch_bank) {
    corruption.patch_bank = TextureBank::procedural(64, 32, derive_seed(seed, "synth/textures"));
  }

  MorphoSet set;
  const auto& m = opts.morphology;
  for (std::int64_t i = 0; i < 2 * n_per_domain; ++i) {
    const bool is_source = i < n_per_domain;
    const auto id = is_source ? i : i - n_per_domain;
    const auto digit = digits[order[static_cast<std::size_t>(i)]].to(torch::kFloat32);
    auto clean = is_source ? resample_morph(digit, m.thick_radius, true, m.upsample)
                           : resample_morph(digit, m.thin_radius, false, m.upsample);
    clean = pad_to_canvas(clean, m.canvas);
    LabelMask mask{(clean >= opts.mask_threshold).to(torch::kUInt8)};

    const auto domain = is_source ? Domain::source : Domain::target;
    const auto sample_seed =
        derive_seed(seed, is_source ? "synth/corrupt/source" : "synth/corrupt/target",
                    static_cast<std::uint64_t>(id));
    Image image{clean, domain};
    if (opts.corrupt) {
      corruption.seed = sample_seed;
      image = corrupt_style(image, corruption);
    }
    Sample s{id, image, std::nullopt, sample_seed};
    if (is_source) {
      s.mask = mask;
      set.source.push_back(std::move(s));
      set.source_clean.push_back(clean);
    } else {
      set.target.push_back(std::move(s));
      set.target_ground_truth.push_back(mask);
      set.target_clean.push_back(clean);
    }
  }
  return set;
}

std::array<DatasetSplit, 3> make_splits(std::int64_t n_source, std::int64_t n_target,
                                        std::uint64_t seed, double val_fraction) {
  if (n_source < 3 || n_target < 3) throw ConfigError("need at least 3 samples per domain");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction in [0,1)");

  std::array<DatasetSplit, 3> folds;
  auto fill = [&](std::int64_t n, std::string_view label, auto member) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, label));
    shuffle(order.begin(), order.end(), rng);
    std::array<std::vector<std::int64_t>, 3> chunks;
    std::size_t pos = 0;
    for (std::int64_t k = 0; k < 3; ++k) {
      const auto len = static_cast<std::size_t>(n / 3 + (k < n % 3 ? 1 : 0));
      chunks[k].assign(order.begin() + pos, order.begin() + pos + len);
      pos += len;
    }
    for (int k = 0; k < 3; ++k) {
      DomainIndices& d = folds[k].*member;
      folds[k].fold_index = k;
      d.test = chunks[k];
      std::vector<std::int64_t> rest;
      for (int j = 0; j < 3; ++j)
        if (j != k) rest.insert(rest.end(), chunks[j].begin(), chunks[j].end());
      auto n_val = static_cast<std::size_t>(std::llround(val_fraction * double(rest.size())));
      if (val_fraction > 0.0) n_val = std::clamp<std::size_t>(n_val, 1, rest.size() - 1);
      d.val.assign(rest.begin(), rest.begin() + n_val);
      d.train.assign(rest.begin() + n_val, rest.end());
    }
  };
  fill(n_source, "splits/source", &DatasetSplit::source);
  fill(n_target, "splits/target", &DatasetSplit::target);
  return folds;
}

nlohmann::json to_json(const DatasetSplit& split) {
  auto dom = [](const DomainIndices& d) {
    return nlohmann::json{{"train", d.train}, {"val", d.val}, {"test", d.test}};
  };
  return {{"fold", split.fold_index}, {"source", dom(split.source)}, {"target", dom(split.target)}};
}

DatasetSplit split_from_json(const nlohmann::json& j) {
  auto dom = [](const nlohmann::json& d) {
    return DomainIndices{d.at("train").get<std::vector<std::int64_t>>(),
                         d.at("val").get<std::vector<std::int64_t>>(),
                         d.at("test").get<std::vector<std::int64_t>>()};
  };
  return {j.at("fold").get<int>(), dom(j.at("source")), dom(j.at("target"))};
}

torch::Tensor skeletonize(const torch::Tensor& mask) {
  require(mask.dim() == 2, "skeletonize expects a 2D mask");
  const auto h = mask.size(0), w = mask.size(1);
  auto img = (mask > 0).to(torch::kUInt8).contiguous();
  auto a = img.accessor<std::uint8_t, 2>();
  auto at = [&](std::int64_t y, std::int64_t x) -> int {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0 : a[y][x];
  };
  bool changed = true;
  std::vector<std::pair<std::int64_t, std::int64_t>> remove;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      remove.clear();
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          if (!a[y][x]) continue;
          // P2..P9 clockwise from north
          const int p[8] = {at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                            at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
          int neighbours = 0, transitions = 0;
          for (int k = 0; k < 8; ++k) {
            neighbours += p[k];
            transitions += (p[k] == 0 && p[(k + 1) % 8] == 1);
          }
          if (neighbours < 2 || neighbours > 6 || transitions != 1) continue;
          const bool ok = pass == 0 ? (p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0)
                                    : (p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0);
          if (ok) remove.emplace_back(y, x);
        }
      for (auto [y, x] : remove) a[y][x] = 0;
      changed = changed || !remove.empty();
    }
  }
  return img;
}

double mean_stroke_width(const std::vector<LabelMask>& masks) {
  double fg = 0, skel = 0;
  for (const auto& m : masks) {
    fg += m.classes.gt(0).sum().item<double>();
    skel += skeletonize(m.classes).sum().item<double>();
  }
  return skel > 0 ? fg / skel : 0.0;
}

}  // namespace dirda::synth

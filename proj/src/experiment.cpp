#include "dirda/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <set>
#include <sstream>
#include <unistd.h>

#include "dirda/dataset.hpp"
#include "dirda/seeding.hpp"
#include "dirda/style_align.hpp"

namespace dirda::exp {

std::string to_string(Arm a) {
  switch (a) {
    case Arm::oracle: return "oracle";
    case Arm::ood: return "ood";
    case Arm::intensity: return "intensity";
    case Arm::affine: return "affine";
    case Arm::deformable: return "deformable";
    case Arm::feature_uda: return "feature_uda";
    case Arm::dir: return "dir";
  }
  return "?";
}

Arm arm_from_string(const std::string& s) {
  if (s == "oracle") return Arm::oracle;
  if (s == "ood") return Arm::ood;
  if (s == "intensity") return Arm::intensity;
  if (s == "affine") return Arm::affine;
  if (s == "deformable") return Arm::deformable;
  if (s == "feature_uda") return Arm::feature_uda;
  if (s == "dir") return Arm::dir;
  throw ConfigError("unknown arm: " + s);
}

namespace {

std::string style_name(StyleMethod m) {
  switch (m) {
    case StyleMethod::none: return "none";
    case StyleMethod::znorm: return "znorm";
    case StyleMethod::histogram: return "histogram";
  }
  return "?";
}

std::string hd_name(metrics::HdConvention c) {
  return c == metrics::HdConvention::pooled ? "pooled" : "per_direction_max";
}

json train_config_json(const train::TrainConfig& c) {
  auto j = c.to_json();
  j.erase("seed");  // per-fold seeds derive from the master seed
  j.erase("fold");
  return j;
}

json seg_config_json(const downstream::SegTrainConfig& c) {
  auto j = c.to_json();
  j.erase("seed");
  return j;
}

}  // namespace

json DataConfig::to_json() const {
  return {{"n_per_domain", n_per_domain},
          {"morphology",
           {{"thick_radius", morphology.thick_radius},
            {"thin_radius", morphology.thin_radius},
            {"canvas", morphology.canvas},
            {"upsample", morphology.upsample}}},
          {"corrupt", corrupt},
          {"bg_patch_size", bg_patch_size},
          {"fg_patch_size", fg_patch_size},
          {"fg_alpha", fg_alpha},
          {"noise_mean", noise_mean},
          {"noise_std", noise_std},
          {"texture_count", texture_count},
          {"texture_side", texture_side},
          {"mask_threshold", mask_threshold},
          {"val_fraction", val_fraction},
          {"digits_path", digits_path}};
}

std::string ExperimentConfig::arm_label() const {
  return arm == Arm::dir ? train::to_string(ablation) : to_string(arm);
}

json ExperimentConfig::to_json() const {
  return {{"schema_version", schema_version},
          {"name", name},
          {"seed", seed},
          {"folds", folds},
          {"data", data.to_json()},
          {"style", style_name(style)},
          {"arm", to_string(arm)},
          {"ablation", train::to_string(ablation)},
          {"align", train_config_json(align)},
          {"warp_pairings", warp_pairings},
          {"segmenter", seg_config_json(segmenter)},
          {"metrics", {{"sdsc_tolerance", sdsc_tolerance}, {"hd_convention", hd_name(hd_convention)}}}};
}

std::string ExperimentConfig::hash() const { return io::sha256_hex(to_json().dump()).substr(0, 16); }

// ---------------------------------------------------------------- strict parsing

namespace {

/// Reads the fields of one JSON object, tracking which keys were consumed so
/// leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
            throw ConfigError("");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(field(key) + ": expected " + type_name<T>());
    }
  }

  Fields sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Fields(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

  void check(bool ok, const std::string& key, const std::string& message) const {
    if (!ok) throw ConfigError(field(key) + ": " + message);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(field(item.key()) + ": unknown field");
    }
  }

  [[nodiscard]] std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  [[nodiscard]] std::string label() const { return path_.empty() ? "config" : path_; }

  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

models::UNetOptions parse_unet(Fields f, models::UNetOptions o) {
  f.get("in_channels", o.in_channels);
  f.get("base_channels", o.base_channels);
  f.get("levels", o.levels);
  f.get("rank", o.rank);
  f.get("instance_norm", o.instance_norm);
  f.get("leaky_slope", o.leaky_slope);
  f.check(o.in_channels >= 1, "in_channels", "must be >= 1");
  f.check(o.base_channels >= 1, "base_channels", "must be >= 1");
  f.check(o.levels >= 1 && o.levels <= 6, "levels", "must be in [1, 6]");
  f.check(o.rank == 2 || o.rank == 3, "rank", "must be 2 or 3");
  f.check(o.leaky_slope >= 0 && o.leaky_slope < 1, "leaky_slope", "must be in [0, 1)");
  f.finish();
  return o;
}

models::DiscriminatorOptions parse_disc(Fields f, models::DiscriminatorOptions o) {
  f.get("in_channels", o.in_channels);
  f.get("base_channels", o.base_channels);
  f.get("blocks", o.blocks);
  f.get("rank", o.rank);
  f.get("patch", o.patch);
  f.get("leaky_slope", o.leaky_slope);
  f.check(o.in_channels >= 1, "in_channels", "must be >= 1");
  f.check(o.base_channels >= 1, "base_channels", "must be >= 1");
  f.check(o.blocks >= 1, "blocks", "must be >= 1");
  f.check(o.rank == 2 || o.rank == 3, "rank", "must be 2 or 3");
  f.check(o.leaky_slope >= 0 && o.leaky_slope < 1, "leaky_slope", "must be in [0, 1)");
  f.finish();
  return o;
}

void parse_data(Fields f, DataConfig& d) {
  f.get("n_per_domain", d.n_per_domain);
  {
    auto m = f.sub("morphology");
    m.get("thick_radius", d.morphology.thick_radius);
    m.get("thin_radius", d.morphology.thin_radius);
    m.get("canvas", d.morphology.canvas);
    m.get("upsample", d.morphology.upsample);
    m.check(d.morphology.thick_radius >= 0, "thick_radius", "must be >= 0");
    m.check(d.morphology.thin_radius >= 0, "thin_radius", "must be >= 0");
    m.check(d.morphology.canvas >= 28, "canvas", "must be >= 28");
    m.check(d.morphology.upsample >= 1, "upsample", "must be >= 1");
    m.finish();
  }
  f.get("corrupt", d.corrupt);
  f.get("bg_patch_size", d.bg_patch_size);
  f.get("fg_patch_size", d.fg_patch_size);
  f.get("fg_alpha", d.fg_alpha);
  f.get("noise_mean", d.noise_mean);
  f.get("noise_std", d.noise_std);
  f.get("texture_count", d.texture_count);
  f.get("texture_side", d.texture_side);
  f.get("mask_threshold", d.mask_threshold);
  f.get("val_fraction", d.val_fraction);
  f.get("digits_path", d.digits_path);
  f.check(d.n_per_domain >= 3, "n_per_domain", "must be >= 3");
  f.check(d.bg_patch_size >= 0, "bg_patch_size", "must be >= 0");
  f.check(d.fg_patch_size >= 0, "fg_patch_size", "must be >= 0");
  f.check(d.fg_alpha >= 0 && d.fg_alpha <= 1, "fg_alpha", "must be in [0, 1]");
  f.check(d.noise_std >= 0, "noise_std", "must be >= 0");
  f.check(d.texture_count >= 1, "texture_count", "must be >= 1");
  f.check(d.texture_side >= std::max(d.bg_patch_size, d.fg_patch_size), "texture_side",
          "must be >= the largest patch size");
  f.check(d.mask_threshold > 0 && d.mask_threshold < 1, "mask_threshold", "must be in (0, 1)");
  f.check(d.val_fraction > 0 && d.val_fraction < 1, "val_fraction", "must be in (0, 1)");
  f.finish();
}

void parse_align(Fields f, train::TrainConfig& c) {
  f.get("lr_reg", c.lr_reg);
  f.get("lr_disc", c.lr_disc);
  f.get("lr_seg", c.lr_seg);
  {
    auto w = f.sub("weights");
    w.get("sim", c.weights.sim);
    w.get("smooth", c.weights.smooth);
    w.get("disc", c.weights.disc);
    w.get("seg", c.weights.seg);
    for (auto [key, value] : {std::pair{"sim", c.weights.sim}, std::pair{"smooth", c.weights.smooth},
                              std::pair{"disc", c.weights.disc}, std::pair{"seg", c.weights.seg}}) {
      w.check(std::isfinite(value) && value >= 0, key, "must be >= 0");
    }
    w.finish();
  }
  f.get("iterations", c.iterations);
  f.get("batch_size", c.batch_size);
  f.get("integration_steps", c.integration_steps);
  f.get("grad_clip", c.grad_clip);
  for (auto [key, value] : {std::pair{"lr_reg", c.lr_reg}, std::pair{"lr_disc", c.lr_disc},
                            std::pair{"lr_seg", c.lr_seg}, std::pair{"grad_clip", c.grad_clip}}) {
    f.check(value > 0, key, "must be > 0");
  }
  f.check(c.iterations >= 0, "iterations", "must be >= 0");
  f.check(c.batch_size >= 1, "batch_size", "must be >= 1");
  f.check(c.integration_steps >= 1, "integration_steps", "must be >= 1");
  if (f.has("reg_net")) c.reg_net = parse_unet(f.sub("reg_net"), c.reg_net);
  if (f.has("seg_net")) c.seg_net = parse_unet(f.sub("seg_net"), c.seg_net);
  if (f.has("disc_net")) c.disc_net = parse_disc(f.sub("disc_net"), c.disc_net);
  f.finish();
}

void parse_segmenter(Fields f, downstream::SegTrainConfig& c) {
  f.get("lr", c.lr);
  f.get("iterations", c.iterations);
  f.get("batch_size", c.batch_size);
  f.get("val_every", c.val_every);
  f.get("cross_entropy", c.cross_entropy);
  f.get("grad_clip", c.grad_clip);
  f.get("aug_probability", c.aug_probability);
  if (f.has("augmentation")) {
    std::string a;
    f.get("augmentation", a);
    try {
      c.augmentation = downstream::augmentation_from_string(a);
    } catch (const ConfigError&) {
      f.check(false, "augmentation", "unknown augmentation '" + a + "'");
    }
  }
  {
    auto a = f.sub("intensity");
    a.get("gamma_min", c.intensity.gamma_min);
    a.get("gamma_max", c.intensity.gamma_max);
    a.get("brightness", c.intensity.brightness);
    a.get("contrast", c.intensity.contrast);
    a.get("noise_std", c.intensity.noise_std);
    a.check(c.intensity.gamma_min > 0, "gamma_min", "must be > 0");
    a.check(c.intensity.gamma_max >= c.intensity.gamma_min, "gamma_max", "must be >= gamma_min");
    a.check(c.intensity.brightness >= 0, "brightness", "must be >= 0");
    a.check(c.intensity.contrast >= 0 && c.intensity.contrast < 1, "contrast", "must be in [0, 1)");
    a.check(c.intensity.noise_std >= 0, "noise_std", "must be >= 0");
    a.finish();
  }
  {
    auto a = f.sub("affine");
    a.get("rotation_deg", c.affine.rotation_deg);
    a.get("scale", c.affine.scale);
    a.get("translate", c.affine.translate);
    a.check(c.affine.rotation_deg >= 0, "rotation_deg", "must be >= 0");
    a.check(c.affine.scale >= 0 && c.affine.scale < 1, "scale", "must be in [0, 1)");
    a.check(c.affine.translate >= 0, "translate", "must be >= 0");
    a.finish();
  }
  {
    auto a = f.sub("deformable");
    a.get("max_displacement", c.deformable.max_displacement);
    a.get("smoothing_sigma", c.deformable.smoothing_sigma);
    a.get("integration_steps", c.deformable.integration_steps);
    a.check(c.deformable.max_displacement >= 0, "max_displacement", "must be >= 0");
    a.check(c.deformable.smoothing_sigma > 0, "smoothing_sigma", "must be > 0");
    a.check(c.deformable.integration_steps >= 1, "integration_steps", "must be >= 1");
    a.finish();
  }
  if (f.has("net")) c.net = parse_unet(f.sub("net"), c.net);
  f.get("confusion_weight", c.confusion_weight);
  f.get("lr_domain", c.lr_domain);
  f.check(c.lr > 0, "lr", "must be > 0");
  f.check(c.lr_domain > 0, "lr_domain", "must be > 0");
  f.check(c.iterations >= 0, "iterations", "must be >= 0");
  f.check(c.batch_size >= 1, "batch_size", "must be >= 1");
  f.check(c.val_every >= 1, "val_every", "must be >= 1");
  f.check(c.grad_clip > 0, "grad_clip", "must be > 0");
  f.check(c.aug_probability >= 0 && c.aug_probability <= 1, "aug_probability", "must be in [0, 1]");
  f.check(c.confusion_weight >= 0, "confusion_weight", "must be >= 0");
  f.finish();
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Fields f(j, "");
  f.check(j.contains("schema_version"), "schema_version", "required");
  f.get("schema_version", c.schema_version);
  f.check(c.schema_version == kConfigSchemaVersion, "schema_version",
          "unsupported version " + std::to_string(c.schema_version) + " (expected " +
              std::to_string(kConfigSchemaVersion) + ")");
  f.get("name", c.name);
  f.get("seed", c.seed);
  if (f.has("folds")) {
    f.get("folds", c.folds);
    f.check(!c.folds.empty(), "folds", "must not be empty");
    std::set<int> unique(c.folds.begin(), c.folds.end());
    f.check(unique.size() == c.folds.size(), "folds", "must not repeat");
    for (int k : c.folds) f.check(k >= 0 && k <= 2, "folds", "entries must be 0, 1 or 2");
  }
  parse_data(f.sub("data"), c.data);
  if (f.has("style")) {
    std::string s;
    f.get("style", s);
    if (s == "none") c.style = StyleMethod::none;
    else if (s == "znorm") c.style = StyleMethod::znorm;
    else if (s == "histogram") c.style = StyleMethod::histogram;
    else f.check(false, "style", "must be none, znorm or histogram");
  }
  if (f.has("arm")) {
    std::string s;
    f.get("arm", s);
    try {
      c.arm = arm_from_string(s);
    } catch (const ConfigError&) {
      f.check(false, "arm", "unknown arm '" + s + "'");
    }
  }
  if (f.has("ablation")) {
    std::string s;
    f.get("ablation", s);
    try {
      c.ablation = train::ablation_from_string(s);
    } catch (const ConfigError&) {
      f.check(false, "ablation", "unknown ablation '" + s + "'");
    }
  }
  parse_align(f.sub("align"), c.align);
  f.get("warp_pairings", c.warp_pairings);
  f.check(c.warp_pairings >= 1, "warp_pairings", "must be >= 1");
  parse_segmenter(f.sub("segmenter"), c.segmenter);
  {
    auto m = f.sub("metrics");
    m.get("sdsc_tolerance", c.sdsc_tolerance);
    m.check(c.sdsc_tolerance >= 0, "sdsc_tolerance", "must be >= 0");
    if (m.has("hd_convention")) {
      std::string s;
      m.get("hd_convention", s);
      if (s == "pooled") c.hd_convention = metrics::HdConvention::pooled;
      else if (s == "per_direction_max") c.hd_convention = metrics::HdConvention::per_direction_max;
      else m.check(false, "hd_convention", "must be per_direction_max or pooled");
    }
    m.finish();
  }
  f.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInputError("config not found: " + path.string());
  return parse_config(io::read_json(path));
}

// ---------------------------------------------------------------- dataset

fs::path cache_root() {
  if (const char* env = std::getenv("DIRDA_CACHE_ROOT"); env != nullptr && *env != '\0') return env;
  return fs::current_path() / ".dirda-cache";
}

namespace {

json data_key(const ExperimentConfig& cfg) {
  return {{"data", cfg.data.to_json()}, {"seed", cfg.seed}};
}

}  // namespace

fs::path prepare_dataset(const ExperimentConfig& cfg) {
  const auto key = data_key(cfg);
  const auto dir = cache_root() / ("morpho-" + io::sha256_hex(key.dump()).substr(0, 16));
  if (fs::exists(dir / "manifest.json")) return dir;

  const auto& d = cfg.data;
  const auto digits = d.digits_path.empty() ? synth::load_default_zeros()
                                            : synth::load_idx_images(d.digits_path);
  synth::GenerateOptions opts;
  opts.morphology = d.morphology;
  opts.corrupt = d.corrupt;
  opts.mask_threshold = d.mask_threshold;
  opts.corruption.bg_patch_size = d.bg_patch_size;
  opts.corruption.fg_patch_size = d.fg_patch_size;
  opts.corruption.fg_alpha = d.fg_alpha;
  opts.corruption.noise_mean = d.noise_mean;
  opts.corruption.noise_std = d.noise_std;
  opts.corruption.seed = derive_seed(cfg.seed, "data/corruption");
  opts.corruption.patch_bank =
      synth::TextureBank::procedural(d.texture_count, d.texture_side, derive_seed(cfg.seed, "data/textures"));
  const auto set = synth::generate_morpho_pairs(digits, d.n_per_domain, opts,
                                                derive_seed(cfg.seed, "data/generate"));
  const auto splits = synth::make_splits(d.n_per_domain, d.n_per_domain,
                                         derive_seed(cfg.seed, "data/splits"), d.val_fraction);

  // build next to the final location, then publish with one rename
  auto params = key;
  params["corruption"] = opts.corruption.to_json();
  const auto tmp = dir.string() + ".tmp-" + std::to_string(::getpid());
  fs::remove_all(tmp);
  data::write_dataset(tmp, set, splits, params);
  std::error_code ec;
  fs::rename(tmp, dir, ec);
  if (ec) {
    fs::remove_all(tmp);  // another writer published first
    if (!fs::exists(dir / "manifest.json")) throw std::runtime_error("could not publish dataset " + dir.string());
  }
  return dir;
}

// ---------------------------------------------------------------- pipeline

namespace {

struct Styled {
  std::vector<torch::Tensor> source, target;
};

std::vector<torch::Tensor> pick(const std::vector<torch::Tensor>& pool, const std::vector<std::int64_t>& idx) {
  std::vector<torch::Tensor> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(pool[static_cast<std::size_t>(i)]);
  return out;
}

Styled style_images(const data::Dataset& ds, const ExperimentConfig& cfg, const synth::DatasetSplit& split) {
  Styled out;
  if (cfg.style == StyleMethod::histogram) {
    std::vector<Image> fit;
    for (auto i : split.source.train) fit.push_back(ds.source[static_cast<std::size_t>(i)].image);
    for (auto i : split.target.train) fit.push_back(ds.target[static_cast<std::size_t>(i)].image);
    const auto standard = style::fit_histogram_standard(fit);
    for (const auto& s : ds.source) out.source.push_back(style::apply_histogram_standard(s.image, standard).image.pixels);
    for (const auto& s : ds.target) out.target.push_back(style::apply_histogram_standard(s.image, standard).image.pixels);
    return out;
  }
  for (const auto* group : {&ds.source, &ds.target}) {
    auto& dst = group == &ds.source ? out.source : out.target;
    for (const auto& s : *group) {
      dst.push_back(cfg.style == StyleMethod::znorm ? style::znorm(s.image).pixels : s.image.pixels);
    }
  }
  return out;
}

downstream::LabelledSet source_set(const data::Dataset& ds, const Styled& st,
                                   const std::vector<std::int64_t>& idx) {
  downstream::LabelledSet out;
  for (auto i : idx) {
    const auto k = static_cast<std::size_t>(i);
    out.images.push_back(st.source[k]);
    out.masks.push_back(ds.source[k].mask->classes);
  }
  return out;
}

downstream::LabelledSet from_samples(const std::vector<Sample>& samples) {
  downstream::LabelledSet out;
  for (const auto& s : samples) {
    out.images.push_back(s.image.pixels);
    out.masks.push_back(s.mask->classes);
  }
  return out;
}

json fold_seeds(const ExperimentConfig& cfg, int fold) {
  const auto k = static_cast<std::uint64_t>(fold);
  return {{"align", derive_seed(cfg.seed, "align", k)},
          {"warp", derive_seed(cfg.seed, "warp", k)},
          {"segmenter", derive_seed(cfg.seed, "segmenter", k)},
          {"eval", derive_seed(cfg.seed, "eval", k)}};
}

fs::path fold_dir(const fs::path& run_dir, int fold) { return run_dir / ("fold" + std::to_string(fold)); }

FoldRecord train_fold(const ExperimentConfig& cfg, const data::Dataset& ds, int fold,
                      const fs::path& dir, Stage stage) {
  const auto& split = ds.splits[static_cast<std::size_t>(fold)];
  const auto styled = style_images(ds, cfg, split);
  const auto seeds = fold_seeds(cfg, fold);
  fs::create_directories(dir);

  FoldRecord rec;
  rec.fold = fold;
  auto seg_cfg = cfg.segmenter;
  seg_cfg.seed = seeds.at("segmenter").get<std::uint64_t>();
  if (cfg.arm == Arm::intensity) seg_cfg.augmentation = downstream::Augmentation::intensity;
  if (cfg.arm == Arm::affine) seg_cfg.augmentation = downstream::Augmentation::affine;
  if (cfg.arm == Arm::deformable) seg_cfg.augmentation = downstream::Augmentation::deformable;

  const bool oracle = cfg.arm == Arm::oracle;
  const auto reads_before = ds.target_labels.access_count();
  downstream::TrainedSegmenter trained;
  {
    data::TrainingPhase phase(cfg.arm_label(), oracle);
    if (oracle) {
      downstream::LabelledSet train, val;
      auto fill = [&](const std::vector<std::int64_t>& idx, downstream::LabelledSet& set) {
        for (auto i : idx) {
          set.images.push_back(styled.target[static_cast<std::size_t>(i)]);
          set.masks.push_back(ds.target_labels.read(i).classes);
        }
      };
      fill(split.target.train, train);
      fill(split.target.val, val);
      trained = downstream::train_segmenter(train, val, seg_cfg);
    } else if (cfg.arm == Arm::feature_uda) {
      trained = downstream::train_feature_uda(source_set(ds, styled, split.source.train),
                                              pick(styled.target, split.target.train),
                                              source_set(ds, styled, split.source.val), seg_cfg);
    } else if (cfg.arm == Arm::dir) {
      auto align_cfg = cfg.align;
      align_cfg.seed = seeds.at("align").get<std::uint64_t>();
      align_cfg.fold = fold;
      const auto src = source_set(ds, styled, split.source.train);
      train::AlignmentData ad{src.images, src.masks, split.source.train,
                              pick(styled.target, split.target.train), split.target.train};
      auto aligned = train::train_content_alignment(ad, align_cfg, cfg.ablation, dir);
      rec.reg_checkpoint_hash = aligned.checkpoint_hash;

      const auto warp_seed = seeds.at("warp").get<std::uint64_t>();
      const auto warped = train::warp_training_set(aligned.reg, ad, cfg.warp_pairings, warp_seed,
                                                   align_cfg.integration_steps, aligned.checkpoint_hash);
      train::export_warped_dataset(warped, dir / "warped",
                                   {{"config_hash", cfg.hash()}, {"fold", fold}, {"seed", warp_seed}});
      // validation for F: the source validation images pushed through the same R
      const auto src_val = source_set(ds, styled, split.source.val);
      train::AlignmentData val_ad{src_val.images, src_val.masks, split.source.val, ad.target_images,
                                  ad.target_ids};
      const auto warped_val = train::warp_training_set(aligned.reg, val_ad, 1, derive_seed(warp_seed, "val"),
                                                       align_cfg.integration_steps, aligned.checkpoint_hash);
      if (stage == Stage::align) {
        rec.target_label_reads_during_training = ds.target_labels.access_count() - reads_before;
        return rec;
      }
      trained = downstream::train_segmenter(from_samples(warped.samples), from_samples(warped_val.samples),
                                            seg_cfg);
    } else {
      trained = downstream::train_segmenter(source_set(ds, styled, split.source.train),
                                            source_set(ds, styled, split.source.val), seg_cfg);
    }
  }
  rec.target_label_reads_during_training =
      oracle ? 0 : ds.target_labels.access_count() - reads_before;
  rec.seg_checkpoint_hash = trained.checkpoint_hash;
  rec.best_val_dice = trained.best_val_dice;
  rec.best_step = trained.best_step;

  std::ostringstream curve;
  curve.precision(9);
  curve << "step,loss\n";
  for (std::size_t i = 0; i < trained.loss_curve.size(); ++i) curve << i << ',' << trained.loss_curve[i] << '\n';
  io::write_atomic(dir / "seg_loss_log.csv", curve.str());
  models::save_checkpoint(*trained.net, dir / "seg",
                          {{"kind", "segmenter"},
                           {"architecture", trained.net->options().to_json()},
                           {"arm", cfg.arm_label()},
                           {"fold", fold},
                           {"step", trained.best_step},
                           {"best_val_dice", trained.best_val_dice},
                           {"config_hash", cfg.hash()}});
  return rec;
}

json record_json(const FoldRecord& r) {
  return {{"fold", r.fold},
          {"seg_checkpoint_hash", r.seg_checkpoint_hash},
          {"reg_checkpoint_hash", r.reg_checkpoint_hash},
          {"target_label_reads_during_training", r.target_label_reads_during_training},
          {"best_val_dice", r.best_val_dice},
          {"best_step", r.best_step}};
}

FoldRecord record_from_json(const json& j) {
  FoldRecord r;
  r.fold = j.at("fold").get<int>();
  r.seg_checkpoint_hash = j.at("seg_checkpoint_hash").get<std::string>();
  r.reg_checkpoint_hash = j.at("reg_checkpoint_hash").get<std::string>();
  r.target_label_reads_during_training = j.at("target_label_reads_during_training").get<std::size_t>();
  r.best_val_dice = j.at("best_val_dice").get<double>();
  r.best_step = j.at("best_step").get<std::int64_t>();
  return r;
}

json summary_json(const metrics::MetricsReport& r) {
  json out;
  for (const char* m : {"dsc", "sdsc", "hd95", "ravd"}) {
    const auto s = r.summary(m);
    out[m] = {{"mean", s.mean}, {"std", s.std}, {"count", s.count}, {"missing", s.missing}};
  }
  return out;
}

/// Loads an R or F checkpoint written by the train stage, rebuilding the
/// architecture from its metadata.
template <typename Net, typename... Extra>
Net load_net(const fs::path& stem, Extra... extra) {
  auto js = stem;
  js += ".json";
  if (!fs::exists(js)) throw MissingInputError("checkpoint not found: " + stem.string());
  const auto meta = io::read_json(js);
  Net net(models::UNetOptions::from_json(meta.at("architecture")), extra...);
  models::load_checkpoint(*net, stem);
  return net;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const fs::path& run_dir, Stage stage) {
  torch::set_num_threads(1);  // fixed reduction order: replays are bit-identical
  if (stage != Stage::train && stage != Stage::full && cfg.arm != Arm::dir) {
    throw ConfigError("arm: the align stage needs arm 'dir'");
  }
  fs::create_directories(run_dir);
  io::write_json(run_dir / "config.json", cfg.to_json());
  const auto data_dir = prepare_dataset(cfg);
  const auto ds = data::load_dataset(data_dir);

  RunResult result;
  result.run_dir = run_dir;
  json seeds{{"master", cfg.seed},
             {"data_generate", derive_seed(cfg.seed, "data/generate")},
             {"data_corruption", derive_seed(cfg.seed, "data/corruption")},
             {"data_textures", derive_seed(cfg.seed, "data/textures")},
             {"data_splits", derive_seed(cfg.seed, "data/splits")}};
  json folds = json::array();
  for (int fold : cfg.folds) {
    result.folds.push_back(train_fold(cfg, ds, fold, fold_dir(run_dir, fold), stage));
    seeds["fold" + std::to_string(fold)] = fold_seeds(cfg, fold);
    folds.push_back(record_json(result.folds.back()));
  }
  io::write_json(run_dir / "manifest.json",
                 {{"schema_version", kConfigSchemaVersion},
                  {"code_version", kCodeVersion},
                  {"config_hash", cfg.hash()},
                  {"arm", cfg.arm_label()},
                  {"stage", stage == Stage::align ? "align" : "train"},
                  {"dataset", data_dir.string()},
                  {"dataset_manifest_sha256", io::sha256_file(data_dir / "manifest.json")},
                  {"seeds", seeds},
                  {"folds", folds},
                  {"threads", 1},
                  {"determinism",
                   "single-threaded CPU kernels with fixed seeds; replays reproduce metrics bit-identically"}});
  if (stage != Stage::full) return result;
  auto evaluated = evaluate_run(run_dir);
  evaluated.folds = result.folds;
  return evaluated;
}

RunResult evaluate_run(const fs::path& run_dir) {
  torch::set_num_threads(1);
  if (!fs::exists(run_dir / "manifest.json")) throw MissingInputError("no run manifest in " + run_dir.string());
  const auto cfg = parse_config(io::read_json(run_dir / "config.json"));
  auto manifest = io::read_json(run_dir / "manifest.json");
  if (manifest.value("stage", "") == "align") throw MissingInputError("run has no trained segmenter: " + run_dir.string());
  const auto data_dir = prepare_dataset(cfg);
  const auto ds = data::load_dataset(data_dir);

  RunResult result;
  result.run_dir = run_dir;
  std::vector<metrics::MetricsReport> ds_reports, ca_reports;
  for (const auto& f : manifest.at("folds")) {
    const auto rec = record_from_json(f);
    result.folds.push_back(rec);
    const auto& split = ds.splits[static_cast<std::size_t>(rec.fold)];
    const auto styled = style_images(ds, cfg, split);
    const auto dir = fold_dir(run_dir, rec.fold);
    const auto eval_seed = fold_seeds(cfg, rec.fold).at("eval").get<std::uint64_t>();

    auto seg = load_net<models::SegmenterNet>(dir / "seg", std::int64_t{2});
    auto report = downstream::evaluate_segmenter(seg, pick(styled.target, split.target.test), split.target.test,
                                                 ds.target_labels, cfg.sdsc_tolerance, cfg.hd_convention);
    report.arm = cfg.arm_label();
    report.fold = rec.fold;
    io::write_json(dir / "metrics_DS.json", report.to_json());
    ds_reports.push_back(std::move(report));

    if (cfg.arm == Arm::dir) {
      auto reg = load_net<models::RegistrationNet>(dir / "reg");
      const auto src = source_set(ds, styled, split.source.test);
      train::AlignmentData test{src.images, src.masks, split.source.test,
                                pick(styled.target, split.target.test), split.target.test};
      auto ca = train::evaluate_registration(reg, test, ds.target_labels, eval_seed,
                                             cfg.align.integration_steps, cfg.sdsc_tolerance,
                                             cfg.hd_convention);
      ca.arm = cfg.arm_label();
      ca.fold = rec.fold;
      io::write_json(dir / "metrics_CA.json", ca.to_json());
      ca_reports.push_back(std::move(ca));
    }
  }
  result.ds = metrics::pool(ds_reports, cfg.arm_label());
  io::write_json(run_dir / "metrics_DS.json", result.ds->to_json());
  json summary{{"arm", cfg.arm_label()}, {"DS", summary_json(*result.ds)}};
  if (!ca_reports.empty()) {
    result.ca = metrics::pool(ca_reports, cfg.arm_label());
    result.ca->task = "CA";
    io::write_json(run_dir / "metrics_CA.json", result.ca->to_json());
    summary["CA"] = summary_json(*result.ca);
  }
  io::write_json(run_dir / "summary.json", summary);
  manifest["stage"] = "evaluated";
  io::write_json(run_dir / "manifest.json", manifest);
  return result;
}

// ---------------------------------------------------------------- tables

TableLayout table_layout_from_string(const std::string& s) {
  if (s == "found") return TableLayout::found;
  if (s == "baselines") return TableLayout::baselines;
  if (s == "ablation") return TableLayout::ablation;
  throw ConfigError("unknown table layout: " + s);
}

std::vector<TableRow> collect_rows(const std::vector<fs::path>& run_dirs, TableLayout layout) {
  std::vector<TableRow> found;
  for (const auto& dir : run_dirs) {
    for (const char* task : {"CA", "DS"}) {
      const auto path = dir / (std::string("metrics_") + task + ".json");
      if (!fs::exists(path)) continue;
      const auto report = metrics::MetricsReport::from_json(io::read_json(path));
      TableRow row{task, report.arm, report.summary("dsc"), report.summary("sdsc"),
                   report.summary("hd95"), report.summary("ravd")};
      for (auto* s : {&row.hd95, &row.ravd}) {
        if ((*s)->count == 0) s->reset();
      }
      found.push_back(std::move(row));
    }
  }
  std::stable_sort(found.begin(), found.end(),
                   [](const TableRow& a, const TableRow& b) { return a.task < b.task; });
  if (layout == TableLayout::found) return found;

  std::vector<std::pair<std::string, std::string>> expected;
  if (layout == TableLayout::baselines) {
    for (const char* arm : {"oracle", "ood", "intensity", "affine", "deformable", "feature_uda", "full"}) {
      expected.emplace_back("DS", arm);
    }
  } else {
    for (const char* task : {"CA", "DS"}) {
      for (const char* arm : {"dir_only", "+disc", "+seg", "full"}) expected.emplace_back(task, arm);
    }
  }
  std::vector<TableRow> rows;
  for (const auto& [task, arm] : expected) {
    auto it = std::find_if(found.begin(), found.end(),
                           [&](const TableRow& r) { return r.task == task && r.arm == arm; });
    rows.push_back(it != found.end() ? *it : TableRow{task, arm, {}, {}, {}, {}});
  }
  return rows;
}

namespace {

const std::vector<std::string> kHeaders{"Task", "Arm", "Avg DSC ↑", "Avg SDSC ↑", "95 % HD ↓", "RAVD ↓"};

std::string cell(const std::optional<metrics::Summary>& s) {
  if (!s || s->count == 0) return "—";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(3) << s->mean << " ± " << s->std;
  return ss.str();
}

std::vector<std::string> row_cells(const TableRow& r) {
  return {r.task, r.arm, cell(r.dsc), cell(r.sdsc), cell(r.hd95), cell(r.ravd)};
}

std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;  // count UTF-8 code points
  return n;
}

}  // namespace

std::string format_csv(const std::vector<TableRow>& rows) {
  std::ostringstream ss;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) ss << (i ? "," : "") << cells[i];
    ss << '\n';
  };
  line(kHeaders);
  for (const auto& r : rows) line(row_cells(r));
  return ss.str();
}

std::string format_text(const std::vector<TableRow>& rows) {
  std::vector<std::vector<std::string>> table{kHeaders};
  for (const auto& r : rows) table.push_back(row_cells(r));
  std::vector<std::size_t> width(kHeaders.size(), 0);
  for (const auto& row : table) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], display_width(row[i]));
  }
  std::ostringstream ss;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t i = 0; i < table[r].size(); ++i) {
      ss << (i ? "  " : "") << table[r][i] << std::string(width[i] - display_width(table[r][i]), ' ');
    }
    ss << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      ss << std::string(total - 2, '-') << '\n';
    }
  }
  return ss.str();
}

void emit_tables(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, TableLayout layout) {
  const auto rows = collect_rows(run_dirs, layout);
  fs::create_directories(out_dir);
  io::write_atomic(out_dir / "table.csv", format_csv(rows));
  io::write_atomic(out_dir / "table.txt", format_text(rows));
}

// ---------------------------------------------------------------- figures

io::Raster deformation_heatmap(const warp::DeformationField& field, double hi, int scale) {
  return io::render_heat(warp::displacement_magnitude(field)[0], hi, scale);
}

namespace {

struct LoadedRun {
  ExperimentConfig cfg;
  int fold = 0;
  Styled styled;
  synth::DatasetSplit split;
  models::SegmenterNet seg{nullptr};
  models::RegistrationNet reg{nullptr};
};

std::string dice_text(double d) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(3) << d;
  return ss.str();
}

}  // namespace

std::vector<PanelRecord> emit_figures(const std::vector<fs::path>& run_dirs, const fs::path& out_dir,
                                      std::int64_t count) {
  torch::set_num_threads(1);
  require_config(count >= 0, "panel count must be >= 0");
  std::vector<PanelRecord> records;
  if (run_dirs.empty() || count == 0) return records;
  fs::create_directories(out_dir);

  std::vector<LoadedRun> runs;
  std::optional<data::Dataset> ds;
  for (const auto& dir : run_dirs) {
    if (!fs::exists(dir / "manifest.json")) throw MissingInputError("no run manifest in " + dir.string());
    LoadedRun run;
    run.cfg = parse_config(io::read_json(dir / "config.json"));
    const auto manifest = io::read_json(dir / "manifest.json");
    run.fold = manifest.at("folds").at(0).at("fold").get<int>();
    auto loaded = data::load_dataset(prepare_dataset(run.cfg));
    run.split = loaded.splits[static_cast<std::size_t>(run.fold)];
    run.styled = style_images(loaded, run.cfg, run.split);
    if (!ds) ds.emplace(std::move(loaded));
    const auto fdir = fold_dir(dir, run.fold);
    run.seg = load_net<models::SegmenterNet>(fdir / "seg", std::int64_t{2});
    if (fs::exists(fdir / "reg.json")) run.reg = load_net<models::RegistrationNet>(fdir / "reg");
    runs.push_back(std::move(run));
  }

  const auto& base = runs.front();
  const auto& test = base.split.target.test;
  const auto n = std::min<std::int64_t>(count, static_cast<std::int64_t>(test.size()));
  constexpr int kScale = 4;
  const io::Rgb white{255, 255, 255}, yellow{255, 220, 0};

  auto gray = [&](const torch::Tensor& img) {
    return io::render_gray(img, img.min().item<double>(), img.max().item<double>(), kScale);
  };

  // segmentation comparison: image | GT | one prediction per run
  for (std::int64_t k = 0; k < n; ++k) {
    const auto id = test[static_cast<std::size_t>(k)];
    const auto gt = ds->target_labels.read(id).classes;
    PanelRecord rec{out_dir / ("seg_" + std::to_string(k) + ".ppm"), "segmentation", id, {}, {}};
    std::vector<io::Raster> cols{gray(base.styled.target[static_cast<std::size_t>(id)]),
                                 io::render_mask(gt, white, kScale)};
    for (auto& run : runs) {
      const auto pred = downstream::predict(run.seg, run.styled.target[static_cast<std::size_t>(id)]);
      const double d = metrics::dsc(pred, gt);
      auto panel = io::render_mask(pred, white, kScale);
      io::draw_text(panel, 2, 2, dice_text(d), yellow, 2);
      rec.arms.push_back(run.cfg.arm_label());
      rec.dice.push_back(d);
      cols.push_back(std::move(panel));
    }
    io::write_ppm(rec.path, io::hstack(cols));
    records.push_back(std::move(rec));
  }

  // content alignment: source | target | warped source | displacement magnitude
  auto with_reg = std::find_if(runs.begin(), runs.end(), [](const LoadedRun& r) { return !r.reg.is_empty(); });
  if (with_reg != runs.end()) {
    auto& run = *with_reg;
    Rng rng(derive_seed(run.cfg.seed, "figures/pairing"));
    const auto& src_test = run.split.source.test;
    const auto& tgt_test = run.split.target.test;
    for (std::int64_t k = 0; k < std::min<std::int64_t>(n, static_cast<std::int64_t>(tgt_test.size())); ++k) {
      const auto tid = tgt_test[static_cast<std::size_t>(k)];
      const auto sid = src_test[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(src_test.size()) - 1))];
      torch::NoGradGuard no_grad;
      const auto x_s = models::as_batch(run.styled.source[static_cast<std::size_t>(sid)]);
      const auto x_t = models::as_batch(run.styled.target[static_cast<std::size_t>(tid)]);
      const auto phi = warp::integrate(run.reg->forward(x_s, x_t), run.cfg.align.integration_steps);
      const auto warped = warp::warp(x_s, phi)[0][0];
      std::vector<io::Raster> cols{gray(x_s[0][0]), gray(x_t[0][0]), gray(warped),
                                   deformation_heatmap(phi, 3.0, kScale)};
      PanelRecord rec{out_dir / ("align_" + std::to_string(k) + ".ppm"), "alignment", tid, {}, {}};
      io::write_ppm(rec.path, io::hstack(cols));
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace dirda::exp

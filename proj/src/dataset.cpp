#include "dirda/dataset.hpp"

#include <cstring>
#include <mutex>

#include "dirda/io.hpp"

namespace dirda::data {

namespace {

constexpr std::string_view kMagic = "DIRDA-SMP\n";

struct PhaseState {
  std::mutex mutex;
  int locked_depth = 0;
  std::string arm;
};

PhaseState& phase_state() {
  static PhaseState state;
  return state;
}

std::string sample_name(Domain d, std::int64_t id) {
  return std::string(to_string(d)) + "_" + std::to_string(id) + ".smp";
}

void check_schema(const json& j, const fs::path& where) {
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError(where.string() + ": unsupported schema_version");
  }
}

}  // namespace

TrainingPhase::TrainingPhase(std::string arm, bool target_labels_allowed)
    : locked_(!target_labels_allowed) {
  auto& st = phase_state();
  std::lock_guard lock(st.mutex);
  previous_arm_ = std::exchange(st.arm, std::move(arm));
  if (locked_) ++st.locked_depth;
}

TrainingPhase::~TrainingPhase() {
  auto& st = phase_state();
  std::lock_guard lock(st.mutex);
  st.arm = std::move(previous_arm_);
  if (locked_) --st.locked_depth;
}

bool TrainingPhase::target_labels_locked() {
  auto& st = phase_state();
  std::lock_guard lock(st.mutex);
  return st.locked_depth > 0;
}

const std::string& TrainingPhase::current_arm() { return phase_state().arm; }

LabelVault::LabelVault(std::vector<LabelMask> masks)
    : masks_(std::move(masks)), count_(masks_.size()) {}

LabelVault LabelVault::on_disk(fs::path labels_dir, std::size_t count) {
  LabelVault v;
  v.dir_ = std::move(labels_dir);
  v.count_ = count;
  return v;
}

LabelVault::LabelVault(LabelVault&& other) noexcept
    : masks_(std::move(other.masks_)),
      dir_(std::move(other.dir_)),
      count_(other.count_),
      accesses_(other.accesses_.load()),
      denied_(other.denied_.load()) {}

LabelVault& LabelVault::operator=(LabelVault&& other) noexcept {
  masks_ = std::move(other.masks_);
  dir_ = std::move(other.dir_);
  count_ = other.count_;
  accesses_ = other.accesses_.load();
  denied_ = other.denied_.load();
  return *this;
}

LabelMask LabelVault::read(std::int64_t id) const {
  if (TrainingPhase::target_labels_locked()) {
    ++denied_;
    throw LabelLeakError("target label " + std::to_string(id) + " requested during training arm '" +
                         TrainingPhase::current_arm() + "'");
  }
  require(id >= 0 && static_cast<std::size_t>(id) < count_, "target label id out of range");
  ++accesses_;
  if (!dir_.empty()) {
    auto s = read_sample(dir_ / ("target_" + std::to_string(id) + ".smp"));
    require(s.mask.has_value(), "label file without mask");
    return *s.mask;
  }
  return masks_[static_cast<std::size_t>(id)];
}

void write_sample(const fs::path& path, const Sample& sample, const json& extra) {
  const auto img = sample.image.pixels.detach().to(torch::kFloat32).contiguous();
  json header = extra;
  header["schema_version"] = kSchemaVersion;
  header["id"] = sample.id;
  header["domain"] = std::string(to_string(sample.image.domain));
  header["shape"] = std::vector<std::int64_t>(img.sizes().begin(), img.sizes().end());
  header["seed"] = sample.seed;
  header["has_mask"] = sample.mask.has_value();
  const auto text = header.dump();

  std::string bytes(kMagic);
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  bytes += text;
  bytes.append(static_cast<const char*>(img.data_ptr()), img.numel() * sizeof(float));
  if (sample.mask) {
    const auto m = sample.mask->classes.to(torch::kUInt8).contiguous();
    require(m.sizes() == img.sizes(), "mask shape differs from image shape");
    bytes.append(static_cast<const char*>(m.data_ptr()), m.numel());
  }
  io::write_atomic(path, bytes);
}

Sample read_sample(const fs::path& path, json* header_out) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < kMagic.size() + 8 || bytes.compare(0, kMagic.size(), kMagic) != 0) {
    throw ConfigError("not a sample file: " + path.string());
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[kMagic.size() + i]))
           << (8 * i);
  }
  const auto body = kMagic.size() + 8;
  const auto header = json::parse(bytes.substr(body, len));
  check_schema(header, path);

  const auto shape = header.at("shape").get<std::vector<std::int64_t>>();
  auto img = torch::empty(shape, torch::kFloat32);
  auto m = torch::empty(shape, torch::kUInt8);
  const std::size_t img_bytes = img.numel() * sizeof(float);
  const bool has_mask = header.at("has_mask").get<bool>();
  const std::size_t need = body + len + img_bytes + (has_mask ? m.numel() : 0);
  if (bytes.size() < need) throw ConfigError("truncated sample file: " + path.string());
  std::memcpy(img.data_ptr(), bytes.data() + body + len, img_bytes);

  Sample s;
  s.id = header.at("id").get<std::int64_t>();
  s.seed = header.at("seed").get<std::uint64_t>();
  s.image = Image{img, domain_from_string(header.at("domain").get<std::string>())};
  if (has_mask) {
    std::memcpy(m.data_ptr(), bytes.data() + body + len + img_bytes, m.numel());
    s.mask = LabelMask{m};
  }
  if (header_out != nullptr) *header_out = header;
  return s;
}

void write_dataset(const fs::path& dir, const synth::MorphoSet& set,
                   const std::array<synth::DatasetSplit, 3>& splits, const json& params) {
  fs::create_directories(dir / "samples");
  fs::create_directories(dir / "labels");
  json samples = json::array(), labels = json::array();
  for (const auto* group : {&set.source, &set.target}) {
    for (const auto& s : *group) {
      const auto rel = fs::path("samples") / sample_name(s.image.domain, s.id);
      write_sample(dir / rel, s, {{"corruption", params.value("corruption", json::object())}});
      samples.push_back({{"file", rel.string()},
                         {"sha256", io::sha256_file(dir / rel)},
                         {"domain", to_string(s.image.domain)},
                         {"id", s.id}});
    }
  }
  for (std::size_t i = 0; i < set.target_ground_truth.size(); ++i) {
    const auto id = set.target[i].id;
    const auto rel = fs::path("labels") / ("target_" + std::to_string(id) + ".smp");
    Sample label{id, Image{set.target_ground_truth[i].classes.to(torch::kFloat32), Domain::target},
                 set.target_ground_truth[i], set.target[i].seed};
    write_sample(dir / rel, label);
    labels.push_back({{"file", rel.string()}, {"sha256", io::sha256_file(dir / rel)}, {"id", id}});
  }
  json split_json = json::array();
  for (const auto& s : splits) split_json.push_back(synth::to_json(s));
  io::write_json(dir / "manifest.json", {{"schema_version", kSchemaVersion},
                                         {"kind", "morpho"},
                                         {"params", params},
                                         {"n_source", set.source.size()},
                                         {"n_target", set.target.size()},
                                         {"samples", samples},
                                         {"labels", labels},
                                         {"splits", split_json}});
}

Dataset load_dataset(const fs::path& dir, bool verify) {
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingInputError("no dataset manifest in " + dir.string());
  }
  Dataset ds;
  ds.manifest = io::read_json(dir / "manifest.json");
  check_schema(ds.manifest, dir / "manifest.json");
  for (const auto& entry : ds.manifest.at("samples")) {
    const auto path = dir / entry.at("file").get<std::string>();
    if (verify && io::sha256_file(path) != entry.at("sha256").get<std::string>()) {
      throw ConfigError("checksum mismatch: " + path.string());
    }
    auto s = read_sample(path);
    (s.image.domain == Domain::source ? ds.source : ds.target).push_back(std::move(s));
  }
  auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
  std::sort(ds.source.begin(), ds.source.end(), by_id);
  std::sort(ds.target.begin(), ds.target.end(), by_id);
  // label files are deliberately not read (or hashed) here
  ds.target_labels = LabelVault::on_disk(dir / "labels", ds.manifest.at("labels").size());
  const auto& sp = ds.manifest.at("splits");
  for (std::size_t k = 0; k < 3; ++k) ds.splits[k] = synth::split_from_json(sp.at(k));
  return ds;
}

void write_labelled_set(const fs::path& dir, const std::vector<Sample>& samples,
                        const std::vector<json>& provenance, const json& params) {
  require(provenance.empty() || provenance.size() == samples.size(),
          "provenance must be empty or parallel to samples");
  fs::create_directories(dir / "samples");
  json entries = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto rel = fs::path("samples") / ("warped_" + std::to_string(i) + ".smp");
    json extra = json::object();
    if (!provenance.empty()) extra["provenance"] = provenance[i];
    write_sample(dir / rel, s, extra);
    entries.push_back({{"file", rel.string()}, {"sha256", io::sha256_file(dir / rel)}, {"id", s.id}});
  }
  io::write_json(dir / "manifest.json", {{"schema_version", kSchemaVersion},
                                         {"kind", "labelled"},
                                         {"params", params},
                                         {"samples", entries}});
}

std::vector<Sample> load_labelled_set(const fs::path& dir, json* manifest) {
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingInputError("no dataset manifest in " + dir.string());
  }
  const auto m = io::read_json(dir / "manifest.json");
  check_schema(m, dir / "manifest.json");
  std::vector<Sample> out;
  for (const auto& entry : m.at("samples")) {
    out.push_back(read_sample(dir / entry.at("file").get<std::string>()));
  }
  if (manifest != nullptr) *manifest = m;
  return out;
}

}  // namespace dirda::data

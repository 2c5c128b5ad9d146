#include "test_prelude.hpp"

#include <cstdlib>
#include <fstream>

#include "dirda/dataset.hpp"
#include "dirda/experiment.hpp"
#include "dirda/io.hpp"

using namespace dirda;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dirda_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

synth::MorphoSet small_set(std::int64_t n) {
  synth::GenerateOptions o;
  return synth::generate_morpho_pairs(synth::load_default_zeros(), n, o, 5);
}

// smallest config that still runs every stage
exp::ExperimentConfig tiny(exp::Arm arm) {
  exp::ExperimentConfig c;
  c.name = "tiny";
  c.seed = 3;
  c.folds = {0};
  c.data.n_per_domain = 12;
  c.arm = arm;
  c.align.iterations = 2;
  c.align.batch_size = 2;
  for (auto* o : {&c.align.reg_net, &c.align.seg_net, &c.segmenter.net}) {
    o->base_channels = 4;
    o->levels = 2;
  }
  c.align.disc_net.base_channels = 4;
  c.align.disc_net.blocks = 2;
  c.segmenter.iterations = 2;
  c.segmenter.batch_size = 2;
  c.segmenter.val_every = 1;
  return c;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("sample files round-trip and carry the magic") {
  const auto dir = scratch("smp");
  torch::manual_seed(1);
  Sample s;
  s.id = 7;
  s.image = Image{torch::rand({9, 11}), Domain::target};
  s.mask = LabelMask{(torch::rand({9, 11}) > 0.5).to(torch::kUInt8)};
  s.seed = 99;
  data::write_sample(dir / "a.smp", s, {{"note", "x"}});
  json header;
  const auto back = data::read_sample(dir / "a.smp", &header);
  CHECK(back.id == 7);
  CHECK(back.seed == 99);
  CHECK(back.image.domain == Domain::target);
  CHECK(torch::equal(back.image.pixels, s.image.pixels));
  REQUIRE(back.mask.has_value());
  CHECK(torch::equal(back.mask->classes, s.mask->classes));
  CHECK(header.at("note") == "x");

  std::ifstream f(dir / "a.smp", std::ios::binary);
  std::string magic(10, '\0');
  f.read(magic.data(), 10);
  CHECK(magic == "DIRDA-SMP\n");

  std::ofstream(dir / "bad.smp") << "not a sample";
  CHECK_THROWS_AS(data::read_sample(dir / "bad.smp"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("dataset cache round-trips and detects tampering") {
  const auto dir = scratch("cache");
  const auto set = small_set(9);
  const auto splits = synth::make_splits(9, 9, 2);
  data::write_dataset(dir / "ds", set, splits, {{"k", 1}});
  auto ds = data::load_dataset(dir / "ds");
  REQUIRE(ds.source.size() == 9);
  REQUIRE(ds.target.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(torch::equal(ds.source[i].image.pixels, set.source[i].image.pixels));
    CHECK(torch::equal(ds.source[i].mask->classes, set.source[i].mask->classes));
    CHECK_FALSE(ds.target[i].mask.has_value());
  }
  CHECK(ds.target_labels.size() == 9);
  CHECK(ds.target_labels.access_count() == 0);
  CHECK(torch::equal(ds.target_labels.read(4).classes, set.target_ground_truth[4].classes));
  CHECK(ds.target_labels.access_count() == 1);
  for (int k = 0; k < 3; ++k) CHECK(ds.splits[k].target.test == splits[k].target.test);

  // flip one byte of a source sample
  const auto victim = dir / "ds" / "samples" / "source_3.smp";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-1, std::ios::end);
    char c = 0;
    f.get(c);
    f.seekp(-1, std::ios::end);
    f.put(char(c ^ 0x5a));
  }
  CHECK_THROWS_AS(data::load_dataset(dir / "ds"), ConfigError);
  CHECK_NOTHROW(data::load_dataset(dir / "ds", /*verify=*/false));
  fs::remove_all(dir);
}

TEST_CASE("target labels are locked during training phases") {
  data::LabelVault vault(std::vector<LabelMask>{LabelMask{torch::ones({4, 4}, torch::kUInt8)}});
  CHECK_FALSE(data::TrainingPhase::target_labels_locked());
  {
    data::TrainingPhase phase("dir", false);
    CHECK(data::TrainingPhase::target_labels_locked());
    CHECK(data::TrainingPhase::current_arm() == "dir");
    CHECK_THROWS_AS((void)vault.read(0), LabelLeakError);
    CHECK(vault.denied_count() == 1);
    {
      // an allowed phase nested inside a locked one stays locked
      data::TrainingPhase inner("oracle", true);
      CHECK(data::TrainingPhase::target_labels_locked());
      CHECK_THROWS_AS((void)vault.read(0), LabelLeakError);
    }
    CHECK(data::TrainingPhase::current_arm() == "dir");
  }
  CHECK(vault.denied_count() == 2);
  CHECK_FALSE(data::TrainingPhase::target_labels_locked());
  {
    data::TrainingPhase oracle("oracle", true);
    CHECK_FALSE(data::TrainingPhase::target_labels_locked());
    CHECK_NOTHROW((void)vault.read(0));
  }
  CHECK(vault.access_count() == 1);
  CHECK_THROWS((void)vault.read(1));
}

TEST_CASE("adaptation arms train with the label files removed") {
  const auto root = scratch("guard");
  setenv("DIRDA_CACHE_ROOT", (root / "cache").c_str(), 1);
  const auto data_dir = exp::prepare_dataset(tiny(exp::Arm::ood));
  const auto labels = data_dir / "labels";
  const auto hidden = root / "labels-hidden";
  REQUIRE(fs::exists(labels));
  fs::rename(labels, hidden);

  std::vector<std::pair<exp::Arm, train::Ablation>> arms;
  for (auto a : {exp::Arm::ood, exp::Arm::intensity, exp::Arm::affine, exp::Arm::deformable,
                 exp::Arm::feature_uda}) {
    arms.emplace_back(a, train::Ablation::full);
  }
  for (auto ab : {train::Ablation::dir_only, train::Ablation::disc, train::Ablation::seg, train::Ablation::full}) {
    arms.emplace_back(exp::Arm::dir, ab);
  }
  std::vector<fs::path> runs;
  for (const auto& [arm, ablation] : arms) {
    auto cfg = tiny(arm);
    cfg.ablation = ablation;
    const auto run = root / cfg.arm_label();
    CAPTURE(cfg.arm_label());
    exp::RunResult result;
    REQUIRE_NOTHROW(result = exp::run_experiment(cfg, run, exp::Stage::train));
    REQUIRE(result.folds.size() == 1);
    CHECK(result.folds[0].target_label_reads_during_training == 0);
    runs.push_back(run);
  }
  // the oracle does need them
  CHECK_THROWS(exp::run_experiment(tiny(exp::Arm::oracle), root / "oracle", exp::Stage::train));

  fs::rename(hidden, labels);
  const auto evaluated = exp::evaluate_run(runs.front());
  REQUIRE(evaluated.ds.has_value());
  CHECK(evaluated.ds->per_sample.size() == 4);
  unsetenv("DIRDA_CACHE_ROOT");
  fs::remove_all(root);
}

}  // TEST_SUITE

// dirda: command-line front end for dataset generation, training, evaluation,
// tables and figures.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "dirda/experiment.hpp"

namespace {

using namespace dirda;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kMissing = 4 };

struct Common {
  std::string config;
  int fold = -1;
  std::int64_t seed = -1;
  std::string arm;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_arm) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--fold", c.fold, "run a single fold (0-2)")->check(CLI::Range(0, 2));
  cmd->add_option("--seed", c.seed, "override the master seed")->check(CLI::NonNegativeNumber);
  if (with_arm) {
    cmd->add_option("--arm", c.arm,
                    "oracle | ood | intensity | affine | deformable | feature_uda | dir_only | +disc | +seg | full");
  }
  cmd->add_option("--out", c.out, "run directory");
}

exp::ExperimentConfig resolve(const Common& c) {
  auto cfg = exp::load_config(c.config);
  if (c.fold >= 0) cfg.folds = {c.fold};
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  if (!c.arm.empty()) {
    if (c.arm == "dir_only" || c.arm == "+disc" || c.arm == "+seg" || c.arm == "full") {
      cfg.arm = exp::Arm::dir;
      cfg.ablation = train::ablation_from_string(c.arm);
    } else {
      cfg.arm = exp::arm_from_string(c.arm);
    }
  }
  return exp::parse_config(cfg.to_json());
}

fs::path run_dir_for(const Common& c, const exp::ExperimentConfig& cfg) {
  if (!c.out.empty()) return c.out;
  return fs::path("runs") / (cfg.name + "-" + cfg.arm_label() + "-" + cfg.hash());
}

void print_summary(const exp::RunResult& r) {
  auto line = [](const char* task, const metrics::MetricsReport& rep) {
    const auto d = rep.summary("dsc");
    const auto s = rep.summary("sdsc");
    std::cout << task << ' ' << rep.arm << " dsc " << d.mean << " ± " << d.std << "  sdsc " << s.mean
              << " ± " << s.std << "  (n=" << d.count << ")\n";
  };
  if (r.ca) line("CA", *r.ca);
  if (r.ds) line("DS", *r.ds);
  std::cout << "run directory: " << r.run_dir.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-space domain adaptation: style and content alignment experiments"};
  app.require_subcommand(1);

  Common gen, align, train_seg, run;
  std::string eval_dir;
  std::vector<std::string> table_runs, figure_runs;
  std::string table_out = "tables", table_layout = "found", figure_out = "figures";
  std::int64_t figure_count = 4;

  auto* cmd_gen = app.add_subcommand("gen-data", "generate (or reuse) the cached dataset");
  add_common(cmd_gen, gen, false);
  cmd_gen->get_option("--out")->description("cache root (default $DIRDA_CACHE_ROOT or ./.dirda-cache)");

  auto* cmd_align = app.add_subcommand("align", "train content alignment and export warped sets");
  add_common(cmd_align, align, true);
  auto* cmd_train = app.add_subcommand("train-seg", "train the downstream segmenter for an arm");
  add_common(cmd_train, train_seg, true);
  auto* cmd_eval = app.add_subcommand("evaluate", "evaluate checkpoints of a trained run");
  cmd_eval->add_option("--out", eval_dir, "run directory")->required();
  auto* cmd_run = app.add_subcommand("run", "full pipeline: train and evaluate");
  add_common(cmd_run, run, true);

  auto* cmd_tables = app.add_subcommand("tables", "emit CSV and text tables from run directories");
  cmd_tables->add_option("runs", table_runs, "run directories");
  cmd_tables->add_option("--out", table_out, "output directory");
  cmd_tables->add_option("--layout", table_layout, "found | baselines | ablation")
      ->check(CLI::IsMember({"found", "baselines", "ablation"}));

  auto* cmd_figures = app.add_subcommand("figures", "emit alignment and segmentation panels");
  cmd_figures->add_option("runs", figure_runs, "run directories (columns, in order)")->required();
  cmd_figures->add_option("--out", figure_out, "output directory");
  cmd_figures->add_option("--count", figure_count, "samples to render")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*cmd_gen) {
      auto cfg = resolve(gen);
      if (!gen.out.empty()) ::setenv("DIRDA_CACHE_ROOT", gen.out.c_str(), 1);
      std::cout << exp::prepare_dataset(cfg).string() << '\n';
    } else if (*cmd_align) {
      const auto cfg = resolve(align);
      if (cfg.arm != exp::Arm::dir) throw ConfigError("arm: align needs a content-alignment arm");
      const auto r = exp::run_experiment(cfg, run_dir_for(align, cfg), exp::Stage::align);
      std::cout << "run directory: " << r.run_dir.string() << '\n';
    } else if (*cmd_train) {
      const auto cfg = resolve(train_seg);
      const auto r = exp::run_experiment(cfg, run_dir_for(train_seg, cfg), exp::Stage::train);
      std::cout << "run directory: " << r.run_dir.string() << '\n';
    } else if (*cmd_eval) {
      print_summary(exp::evaluate_run(eval_dir));
    } else if (*cmd_run) {
      const auto cfg = resolve(run);
      print_summary(exp::run_experiment(cfg, run_dir_for(run, cfg), exp::Stage::full));
    } else if (*cmd_tables) {
      std::vector<fs::path> dirs(table_runs.begin(), table_runs.end());
      const auto layout = exp::table_layout_from_string(table_layout);
      exp::emit_tables(dirs, table_out, layout);
      std::cout << exp::format_text(exp::collect_rows(dirs, layout));
    } else if (*cmd_figures) {
      std::vector<fs::path> dirs(figure_runs.begin(), figure_runs.end());
      for (const auto& p : exp::emit_figures(dirs, figure_out, figure_count)) {
        std::cout << p.kind << ' ' << p.path.string() << '\n';
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const train::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const NumericError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

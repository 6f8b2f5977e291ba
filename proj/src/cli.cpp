#include "thermalign/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "thermalign/pipeline.hpp"

namespace fs = std::filesystem;

namespace thermalign {
namespace {

// Raw flag values; whether a flag was actually given is read back from CLI11
// so config-file values survive unless explicitly overridden.
struct Flags {
  std::string config_path;
  std::string run;
  std::string output_root;
  std::uint64_t seed = 1;
  int threads = 0;
  int n_per_species = 0;
  bool balance = true;
  std::string split_order;
  std::vector<double> ratios;
  int pretrain_steps = 0;
  int max_steps = 0;
  int eval_interval = 0;
  std::string backend;
  std::vector<std::string> modes;
};

void add_common_options(CLI::App* cmd, Flags& f, bool run_creates) {
  cmd->add_option("--config", f.config_path, "pipeline configuration JSON file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--run", f.run,
                  run_creates ? "run directory to (re)use instead of a stamped one"
                              : "run directory holding the earlier stages' artifacts");
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--threads", f.threads, "worker threads, 0 = min(4, hardware)");
  cmd->add_option("--output-root", f.output_root, "root directory for stamped runs");
}

bool given(const CLI::App* cmd, const std::string& name) {
  const CLI::Option* opt = cmd->get_option_no_throw(name);
  return opt && opt->count() > 0;
}

PipelineConfig resolve_config(const CLI::App* cmd, const Flags& f) {
  PipelineConfig cfg;
  if (given(cmd, "--config")) {
    cfg = load_pipeline_config(f.config_path);
  } else if (!f.run.empty() && fs::exists(fs::path(f.run) / "config.json")) {
    cfg = load_pipeline_config((fs::path(f.run) / "config.json").string());
  }
  if (given(cmd, "--seed")) cfg.seed = f.seed;
  if (given(cmd, "--threads")) cfg.threads = f.threads;
  if (given(cmd, "--output-root")) cfg.output_root = f.output_root;
  if (given(cmd, "--n-per-species")) cfg.scenegen.n_per_species = f.n_per_species;
  if (given(cmd, "--balance") || given(cmd, "--no-balance")) cfg.dataset.balance = f.balance;
  if (given(cmd, "--split-order")) cfg.dataset.split_order = f.split_order;
  if (given(cmd, "--ratios"))
    cfg.dataset.ratios = {f.ratios.at(0), f.ratios.at(1), f.ratios.at(2)};
  if (given(cmd, "--steps")) cfg.pretrain.steps = f.pretrain_steps;
  if (given(cmd, "--max-steps")) cfg.align.max_steps = f.max_steps;
  if (given(cmd, "--eval-interval")) cfg.align.eval_interval = f.eval_interval;
  if (given(cmd, "--backend")) cfg.eval.backend = f.backend;
  if (given(cmd, "--mode")) cfg.eval.modes = f.modes;
  cfg.validate();
  return cfg;
}

std::string require_run(const Flags& f) {
  if (f.run.empty())
    throw ConfigError("this stage reads an existing run: pass --run <dir>");
  return f.run;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"synthetic thermal wildlife scenes -> frozen-backbone VLM projector "
               "alignment -> species/count evaluation"};
  app.require_subcommand(1);
  Flags f;

  CLI::App* gen = app.add_subcommand("gen-data", "render the synthetic scene corpus");
  add_common_options(gen, f, true);
  gen->add_option("--n-per-species", f.n_per_species, "scenes per species")
      ->check(CLI::PositiveNumber);

  CLI::App* build = app.add_subcommand("build-dataset",
                                       "balance, split and render conversations");
  add_common_options(build, f, false);
  build->add_flag("--balance,!--no-balance", f.balance, "equalize class sizes");
  build->add_option("--split-order", f.split_order, "augment-first or split-first")
      ->check(CLI::IsMember({"augment-first", "split-first"}));
  build->add_option("--ratios", f.ratios, "train val test fractions")->expected(3);

  CLI::App* pre = app.add_subcommand("pretrain", "train the backbones on the RGB source task");
  add_common_options(pre, f, false);
  pre->add_option("--steps", f.pretrain_steps, "pretraining steps")
      ->check(CLI::PositiveNumber);

  CLI::App* align = app.add_subcommand("align", "projector-only thermal alignment");
  add_common_options(align, f, false);
  align->add_option("--max-steps", f.max_steps, "alignment steps")
      ->check(CLI::PositiveNumber);
  align->add_option("--eval-interval", f.eval_interval, "steps between validation points")
      ->check(CLI::PositiveNumber);

  CLI::App* ev = app.add_subcommand("eval", "score the test split");
  add_common_options(ev, f, false);
  ev->add_option("--backend", f.backend, "local or remote")
      ->check(CLI::IsMember({"local", "remote"}));
  ev->add_option("--mode", f.modes, "prompt modes to score")
      ->check(CLI::IsMember({"closed", "open"}));

  CLI::App* rep = app.add_subcommand("report", "regenerate tables and the loss-curve plot");
  add_common_options(rep, f, false);

  CLI::App* hab = app.add_subcommand("habitat",
                                     "habitat-context descriptions for the RGB twins");
  add_common_options(hab, f, false);
  hab->add_option("--backend", f.backend, "must be remote")
      ->check(CLI::IsMember({"local", "remote"}));

  CLI::App* all = app.add_subcommand("all", "run every stage in order");
  add_common_options(all, f, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    const PipelineConfig cfg = resolve_config(cmd, f);
    if (cmd == gen) {
      stage_gen_data(cfg, prepare_run_dir(cfg, f.run));
    } else if (cmd == build) {
      stage_build_dataset(cfg, require_run(f));
    } else if (cmd == pre) {
      stage_pretrain(cfg, require_run(f));
    } else if (cmd == align) {
      stage_align(cfg, require_run(f));
    } else if (cmd == ev) {
      stage_eval(cfg, require_run(f));
    } else if (cmd == rep) {
      stage_report(cfg, require_run(f));
    } else if (cmd == hab) {
      stage_habitat(cfg, require_run(f));
    } else {
      stage_all(cfg, prepare_run_dir(cfg, f.run));
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace thermalign

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "thermalign/backends.hpp"
#include "thermalign/dataset.hpp"
#include "thermalign/train.hpp"

namespace thermalign {

// Synthetic corpus generation settings. The pretraining corpus reuses the
// scene geometry with its own size below.
struct ScenegenSection {
  int n_per_species = 600;
  int width = 64;
  int height = 64;
  int glyph_scale = 8;
  int count_min = 1;
  int count_max = 12;
  bool operator==(const ScenegenSection&) const = default;
};

struct DatasetSection {
  bool balance = true;
  std::string split_order = "augment-first";  // or "split-first"
  SplitRatios ratios;
  std::string prompt_mode = "mixed";  // "closed" / "open" / "mixed"
  bool operator==(const DatasetSection&) const = default;
};

// Supervised source-task pretraining of the backbones on RGB scenes. The
// budget is independent of alignment; peak_lr defaults higher because the
// whole network trains from scratch here.
struct PretrainSection {
  int steps = 2400;
  double peak_lr = 1e-3;
  double warmup_ratio = 0.03;
  int batch_size = 16;
  int eval_interval = 200;
  int n_per_species = 500;
  double holdout_fraction = 0.1;
  bool operator==(const PretrainSection&) const = default;
};

// Alignment hyperparameters; seed and threads are filled in from the global
// settings when the stage runs.
struct AlignSection {
  double peak_lr = 1e-4;
  double warmup_ratio = 0.03;
  int max_steps = 1000;
  int batch_size = 16;
  int eval_interval = 100;
  double weight_decay = 0.0;
  bool reduced_precision = false;
  bool operator==(const AlignSection&) const = default;
};

struct EvalSection {
  std::string backend = "local";  // or "remote"
  std::vector<std::string> modes = {"closed", "open"};
  int parallelism = 4;
  int max_new_tokens = 12;
  int habitat_max_new_tokens = 96;
  RemoteConfig remote;
  bool operator==(const EvalSection&) const = default;
};

// Full pipeline configuration. Every artifact lives under
// <output_root>/runs/<stamp>-seed<seed>/; per-stage RNG streams are derived
// from the one global seed.
struct PipelineConfig {
  std::string output_root = "out";
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = min(4, hardware)
  ScenegenSection scenegen;
  DatasetSection dataset;
  VLMConfig model;
  PretrainSection pretrain;
  AlignSection align;
  EvalSection eval;
  bool operator==(const PipelineConfig&) const = default;

  int effective_threads() const;
  void validate() const;  // throws ConfigError
};

// Strict JSON codec: unknown or mistyped keys raise ConfigError naming the
// offending path. parse(serialize(c)) == c.
PipelineConfig parse_pipeline_config(const std::string& json_text);
std::string serialize_pipeline_config(const PipelineConfig& cfg);
PipelineConfig load_pipeline_config(const std::string& path);

// Creates <output_root>/runs/<UTC stamp>-seed<N>[-k] (never reusing an
// existing directory) and writes the fully resolved config echo into it.
std::string create_run_dir(const PipelineConfig& cfg);

// run_flag empty -> create_run_dir; otherwise uses the given directory,
// creating it and the config echo when missing.
std::string prepare_run_dir(const PipelineConfig& cfg, const std::string& run_flag);

// Stages. Each reads its inputs from and writes its artifacts into fixed
// subdirectories of run_dir, prints a one-line summary, and throws on
// missing prerequisites.
void stage_gen_data(const PipelineConfig& cfg, const std::string& run_dir);
void stage_build_dataset(const PipelineConfig& cfg, const std::string& run_dir);
PretrainResult stage_pretrain(const PipelineConfig& cfg, const std::string& run_dir);
RunArtifacts stage_align(const PipelineConfig& cfg, const std::string& run_dir);
void stage_eval(const PipelineConfig& cfg, const std::string& run_dir);
// Regenerates table2.csv / table3.csv and the loss-curve SVG from persisted
// artifacts; never mutates training or evaluation outputs.
void stage_report(const PipelineConfig& cfg, const std::string& run_dir);
// Habitat-context descriptions for the test split's RGB twins via the remote
// backend; writes habitat/habitat.jsonl.
void stage_habitat(const PipelineConfig& cfg, const std::string& run_dir);
// gen-data -> build-dataset -> pretrain -> align -> eval -> report.
void stage_all(const PipelineConfig& cfg, const std::string& run_dir);

}  // namespace thermalign

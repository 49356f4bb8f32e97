// Subcommand implementations behind the command-line tool: train, sample,
// analyze, inspect. These throw on any error; the binary turns exceptions
// into single-line diagnostics and a nonzero exit status.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditmoe/train.hpp"

namespace ditmoe {

// Builds a ModelConfig from a preset name or a config file (exactly one),
// then applies key=value overrides in order.
ModelConfig resolve_model_config(const std::string& config_path, const std::string& preset_name,
                                 const std::vector<std::string>& overrides);

struct TrainOptions {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> overrides;
  std::string data_dir;        // real source (required)
  std::string synth_dir;       // optional synthetic source, mixed per ratio
  std::string out_dir = ".";
  std::string resume_path;     // optional checkpoint to continue from
  TrainConfig train;
  int checkpoint_every = 0;    // extra checkpoints every N steps; 0 = final only
  int log_every = 100;         // progress lines on stdout
};

// Writes <out_dir>/loss.csv, periodic checkpoints and <out_dir>/final.dmck.
void run_train(const TrainOptions& opt);

struct SampleOptions {
  std::string checkpoint_path;
  int class_label = 0;
  int count = 1;
  int num_steps = 250;
  double cfg_scale = 1.0;
  uint64_t seed = 0;
  bool trace = false;
  bool use_ema = true;
  int num_timesteps = 1000;  // full schedule length the model was trained on
  std::string out_dir = ".";
  std::string trace_path;    // default <out_dir>/trace.dmtr
};

// Writes count images (sample_<class>_<index>.pgm/.ppm + .txt), image i
// seeded with derive_seed(seed, i), and one combined trace file when
// requested.
void run_sample(const SampleOptions& opt);

struct AnalyzeOptions {
  std::vector<std::string> trace_paths;
  std::string by = "class";  // class | position | timestep
  std::string out_dir = ".";
  bool normalized_entropy = false;
};

// Merges the traces (same config hash required) and writes
// freq_<by>.csv, heatmap_<by>_layer<L>.pgm per MoE layer, and entropy
// summaries (per layer and per group).
void run_analyze(const AnalyzeOptions& opt);

struct InspectOptions {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> overrides;
  bool show_params = true;
  bool show_flops = true;
  std::string flop_mode = "core";  // core | full
  int resolution = 0;              // 0 = the config's input size
};

// Prints parameter counts and Gflops; for presets, also the published
// reference values and percent deviation.
void run_inspect(const InspectOptions& opt);

}  // namespace ditmoe

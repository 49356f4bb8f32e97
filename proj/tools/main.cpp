// Command-line front end: argument parsing only; all behavior lives in the
// library (ditmoe/cli.hpp). Any error surfaces as one diagnostic line on
// stderr and a nonzero exit status.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ditmoe/cli.hpp"

int main(int argc, char** argv) {
  std::string keys;
  for (const std::string& k : ditmoe::config_keys()) {
    if (!keys.empty()) keys += ", ";
    keys += k;
  }
  CLI::App app{"DiT-MoE sparse diffusion transformer toolkit\nConfig keys: " + keys};
  app.require_subcommand(1);
  const std::string set_help = "Config override key=value (repeatable); keys: " + keys;

  ditmoe::TrainOptions train_opt;
  std::string train_objective = "ddpm";
  CLI::App* train = app.add_subcommand("train", "Train a model on a dataset directory");
  train->add_option("--config", train_opt.config_path, "Model config file");
  train->add_option("--preset", train_opt.preset_name, "Model preset name");
  train->add_option("--set", train_opt.overrides, set_help);
  train->add_option("--data", train_opt.data_dir, "Real dataset directory")->required();
  train->add_option("--synth-data", train_opt.synth_dir, "Synthetic dataset directory");
  train->add_option("--out", train_opt.out_dir, "Output directory");
  train->add_option("--resume", train_opt.resume_path, "Checkpoint to resume from");
  train->add_option("--steps", train_opt.train.steps, "Optimization steps")->required();
  train->add_option("--batch-size", train_opt.train.batch_size, "Batch size");
  train->add_option("--lr", train_opt.train.lr, "Learning rate");
  train->add_option("--ema-decay", train_opt.train.ema_decay, "EMA decay");
  train->add_option("--label-dropout", train_opt.train.label_dropout_p,
                    "Class label dropout probability");
  train->add_option("--objective", train_objective, "ddpm or rectified_flow");
  train->add_option("--seed", train_opt.train.seed, "Training seed");
  train->add_option("--mix-real", train_opt.train.mix_real, "Real part of the mix ratio");
  train->add_option("--mix-synth", train_opt.train.mix_synth, "Synthetic part of the mix ratio");
  train->add_option("--clip-norm", train_opt.train.clip_norm,
                    "Global gradient-norm clip (<= 0 disables)");
  train->add_option("--timesteps", train_opt.train.num_timesteps, "Diffusion schedule length");
  train->add_option("--checkpoint-every", train_opt.checkpoint_every,
                    "Write a checkpoint every N steps");
  train->add_option("--log-every", train_opt.log_every, "Progress print interval");

  ditmoe::SampleOptions sample_opt;
  CLI::App* sample = app.add_subcommand("sample", "Sample images from a checkpoint");
  sample->add_option("--checkpoint", sample_opt.checkpoint_path, "Checkpoint file")->required();
  sample->add_option("--class", sample_opt.class_label, "Class label");
  sample->add_option("--count", sample_opt.count, "Number of images");
  sample->add_option("--steps", sample_opt.num_steps, "Sampling steps");
  sample->add_option("--cfg-scale", sample_opt.cfg_scale, "Classifier-free guidance scale");
  sample->add_option("--seed", sample_opt.seed, "Base seed (image i uses substream i)");
  sample->add_flag("--trace", sample_opt.trace, "Record expert routing to a trace file");
  sample->add_flag("!--no-ema", sample_opt.use_ema, "Use raw instead of EMA parameters");
  sample->add_option("--timesteps", sample_opt.num_timesteps, "Diffusion schedule length");
  sample->add_option("--out", sample_opt.out_dir, "Output directory");
  sample->add_option("--trace-file", sample_opt.trace_path, "Trace output path");

  ditmoe::AnalyzeOptions analyze_opt;
  CLI::App* analyze = app.add_subcommand("analyze", "Aggregate routing traces");
  analyze->add_option("traces", analyze_opt.trace_paths, "Trace files")->required();
  analyze->add_option("--by", analyze_opt.by, "Grouping: class, position or timestep");
  analyze->add_option("--out", analyze_opt.out_dir, "Output directory");
  analyze->add_flag("--normalized-entropy", analyze_opt.normalized_entropy,
                    "Divide entropies by ln(num_experts)");

  ditmoe::InspectOptions inspect_opt;
  bool params_only = false, flops_only = false;
  CLI::App* inspect = app.add_subcommand("inspect", "Report parameter counts and Gflops");
  inspect->add_option("preset", inspect_opt.preset_name, "Preset name");
  inspect->add_option("--config", inspect_opt.config_path, "Model config file");
  inspect->add_option("--set", inspect_opt.overrides, set_help);
  inspect->add_flag("--params", params_only, "Parameter counts only");
  inspect->add_flag("--flops", flops_only, "Flop estimate only");
  inspect->add_option("--mode", inspect_opt.flop_mode, "Flop mode: core or full");
  inspect->add_option("--resolution", inspect_opt.resolution, "Input resolution for flops");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      if (train_objective == "ddpm")
        train_opt.train.objective = ditmoe::Objective::ddpm;
      else if (train_objective == "rectified_flow")
        train_opt.train.objective = ditmoe::Objective::rectified_flow;
      else
        throw std::invalid_argument("objective must be ddpm or rectified_flow");
      ditmoe::run_train(train_opt);
    } else if (*sample) {
      ditmoe::run_sample(sample_opt);
    } else if (*analyze) {
      ditmoe::run_analyze(analyze_opt);
    } else if (*inspect) {
      if (params_only && !flops_only) inspect_opt.show_flops = false;
      if (flops_only && !params_only) inspect_opt.show_params = false;
      ditmoe::run_inspect(inspect_opt);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

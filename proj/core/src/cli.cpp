#include "ditmoe/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "ditmoe/analyze.hpp"
#include "ditmoe/sample.hpp"

namespace fs = std::filesystem;

namespace ditmoe {

ModelConfig resolve_model_config(const std::string& config_path, const std::string& preset_name,
                                 const std::vector<std::string>& overrides) {
  if (!config_path.empty() && !preset_name.empty())
    throw std::invalid_argument("give either a config file or a preset, not both");
  ModelConfig cfg;
  if (!preset_name.empty())
    cfg = preset(preset_name);
  else if (!config_path.empty())
    cfg = load_config_file(config_path);
  else
    throw std::invalid_argument("a config file or a preset name is required");
  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must look like key=value, got '" + ov + "'");
    apply_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

std::string checkpoint_name(long long step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%08lld.dmck", step);
  return buf;
}

void check_labels(const Dataset& ds, const ModelConfig& model, const std::string& what) {
  if (ds.num_classes > model.num_classes)
    throw std::invalid_argument(what + " dataset has labels beyond the model's num_classes");
}

}  // namespace

void run_train(const TrainOptions& opt) {
  if (opt.data_dir.empty()) throw std::invalid_argument("train: a dataset directory is required");
  TrainConfig train = opt.train;
  train.validate();

  Dataset real = load_dataset(opt.data_dir);
  Dataset synth;
  if (!opt.synth_dir.empty()) synth = load_dataset(opt.synth_dir);

  fs::create_directories(opt.out_dir);

  Trainer trainer = [&]() -> Trainer {
    if (!opt.resume_path.empty()) {
      Checkpoint ck = load_checkpoint(opt.resume_path);
      check_labels(real, ck.model, "real");
      if (!synth.empty()) check_labels(synth, ck.model, "synthetic");
      return Trainer(ck, train, std::move(real), std::move(synth));
    }
    ModelConfig model = resolve_model_config(opt.config_path, opt.preset_name, opt.overrides);
    check_labels(real, model, "real");
    if (!synth.empty()) check_labels(synth, model, "synthetic");
    return Trainer(model, train, std::move(real), std::move(synth));
  }();

  const std::string loss_path = (fs::path(opt.out_dir) / "loss.csv").string();
  std::ofstream loss_csv(loss_path, std::ios::binary);
  if (!loss_csv) throw std::runtime_error("cannot create loss log: " + loss_path);
  const char* mse_name = train.objective == Objective::rectified_flow ? "rf_mse" : "mse";
  loss_csv << "step," << mse_name << ",vlb,balance,total\n";

  char num[64];
  auto csv_num = [&num](double x) -> const char* {
    std::snprintf(num, sizeof(num), "%.10g", x);
    return num;
  };

  const long long target = trainer.step_count() + train.steps;
  while (trainer.step_count() < target) {
    const StepStats stats = trainer.step();
    const long long s = trainer.step_count();
    loss_csv << s << ',' << csv_num(stats.loss.mse) << ',' << csv_num(stats.loss.vlb) << ','
             << csv_num(stats.loss.balance) << ',' << csv_num(stats.loss.total) << '\n';
    if (opt.log_every > 0 && s % opt.log_every == 0)
      std::cout << "step " << s << "  total " << stats.loss.total << '\n';
    if (opt.checkpoint_every > 0 && s % opt.checkpoint_every == 0 && s < target)
      save_checkpoint((fs::path(opt.out_dir) / checkpoint_name(s)).string(),
                      trainer.make_checkpoint());
  }
  if (!loss_csv) throw std::runtime_error("failed writing loss log: " + loss_path);
  loss_csv.close();

  const std::string final_path = (fs::path(opt.out_dir) / "final.dmck").string();
  save_checkpoint(final_path, trainer.make_checkpoint());
  std::cout << "trained " << train.steps << " steps; wrote " << final_path << " and " << loss_path
            << '\n';
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

void run_sample(const SampleOptions& opt) {
  if (opt.checkpoint_path.empty()) throw std::invalid_argument("sample: a checkpoint is required");
  if (opt.count < 1) throw std::invalid_argument("sample: count must be >= 1");
  const Checkpoint ck = load_checkpoint(opt.checkpoint_path);
  const ModelConfig& model = ck.model;
  const ParamVars params = to_vars(opt.use_ema ? ck.ema : ck.params, false);
  const NoiseSchedule sched = build_linear_schedule(opt.num_timesteps, 1e-4, 2e-2);

  fs::create_directories(opt.out_dir);

  SavedTrace combined;
  combined.config_hash = config_hash(model);
  combined.top_k = model.moe.top_k;
  combined.num_experts = model.moe.num_experts;
  combined.moe_layers = static_cast<int>(model.moe_layers().size());
  combined.seq_len = model.seq_len();
  combined.num_classes = model.num_classes;
  combined.num_steps = opt.num_steps;

  for (int i = 0; i < opt.count; ++i) {
    SampleRequest req;
    req.class_label = opt.class_label;
    req.num_steps = opt.num_steps;
    req.cfg_scale = opt.cfg_scale;
    req.seed = derive_seed(opt.seed, static_cast<uint64_t>(i));
    req.trace = opt.trace;
    SampleResult res = ddpm_sample(params, model, sched, req);
    char name[64];
    std::snprintf(name, sizeof(name), "sample_%04d_%04d", opt.class_label, i);
    write_sample_artifacts((fs::path(opt.out_dir) / name).string(), res, req);
    if (opt.trace) {
      if (combined.timesteps.empty()) combined.timesteps = res.timesteps;
      combined.events.insert(combined.events.end(), res.trace.events.begin(),
                             res.trace.events.end());
    }
  }

  if (opt.trace) {
    const std::string trace_path =
        opt.trace_path.empty() ? (fs::path(opt.out_dir) / "trace.dmtr").string() : opt.trace_path;
    save_trace(trace_path, combined);
    std::cout << "wrote " << opt.count << " samples and " << trace_path << '\n';
  } else {
    std::cout << "wrote " << opt.count << " samples to " << opt.out_dir << '\n';
  }
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

void run_analyze(const AnalyzeOptions& opt) {
  if (opt.trace_paths.empty()) throw std::invalid_argument("analyze: at least one trace file");
  const GroupKind kind = group_kind_from_name(opt.by);

  RoutingStats stats;
  bool first = true;
  uint64_t hash = 0;
  for (const std::string& path : opt.trace_paths) {
    const SavedTrace trace = load_trace(path);
    if (first) {
      hash = trace.config_hash;
      stats = aggregate(trace, kind);
      first = false;
    } else {
      if (trace.config_hash != hash)
        throw std::invalid_argument("analyze: trace " + path +
                                    " comes from a different model config");
      stats = merge(stats, aggregate(trace, kind));
    }
  }

  fs::create_directories(opt.out_dir);
  const std::string csv_path = (fs::path(opt.out_dir) / ("freq_" + opt.by + ".csv")).string();
  export_csv(stats, csv_path);
  for (int l = 0; l < stats.layers; ++l) {
    char name[64];
    std::snprintf(name, sizeof(name), "heatmap_%s_layer%02d.pgm", opt.by.c_str(), l);
    export_heatmap(stats, l, (fs::path(opt.out_dir) / name).string());
  }

  const EntropySummary ent = entropy_summary(stats, opt.normalized_entropy);
  char num[64];
  auto fmt = [&num](double x) -> const char* {
    std::snprintf(num, sizeof(num), "%.10g", x);
    return num;
  };
  {
    std::ofstream f(fs::path(opt.out_dir) / ("entropy_by_layer_" + opt.by + ".csv"),
                    std::ios::binary);
    f << "layer,mean_entropy\n";
    for (int l = 0; l < stats.layers; ++l) f << l << ',' << fmt(ent.per_layer_mean[l]) << '\n';
    if (!f) throw std::runtime_error("failed writing entropy summary");
  }
  {
    std::ofstream f(fs::path(opt.out_dir) / ("entropy_per_group_" + opt.by + ".csv"),
                    std::ios::binary);
    f << "layer,group_id,entropy\n";
    for (int l = 0; l < stats.layers; ++l)
      for (int g = 0; g < stats.groups; ++g)
        f << l << ',' << g << ',' << fmt(ent.per_group[static_cast<size_t>(l) * stats.groups + g])
          << '\n';
    if (!f) throw std::runtime_error("failed writing entropy summary");
  }

  std::cout << "analyzed " << opt.trace_paths.size() << " trace file(s) by " << opt.by << ": "
            << stats.layers << " layers, " << stats.groups << " groups, " << stats.experts
            << " experts\n";
  for (int l = 0; l < stats.layers; ++l)
    std::cout << "layer " << l << " mean entropy " << ent.per_layer_mean[l] << '\n';
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

namespace {

double percent_dev(double value, double reference) {
  return (value - reference) / reference * 100.0;
}

}  // namespace

void run_inspect(const InspectOptions& opt) {
  const ModelConfig cfg = resolve_model_config(opt.config_path, opt.preset_name, opt.overrides);
  const bool is_preset = !opt.preset_name.empty();

  std::printf("depth %d  width %d  heads %d  patch %d  experts %d (top-%d, %d shared)\n",
              cfg.depth, cfg.width, cfg.heads, cfg.patch, cfg.moe.num_experts, cfg.moe.top_k,
              cfg.moe.num_shared);

  if (opt.show_params) {
    const ParamCount pc = param_count(cfg);
    if (is_preset) {
      const PresetReference ref = preset_reference(opt.preset_name);
      std::printf("params total     %14lld   reference %14lld   deviation %+.2f%%\n", pc.total,
                  ref.total_params, percent_dev(static_cast<double>(pc.total),
                                                static_cast<double>(ref.total_params)));
      std::printf("params activated %14lld   reference %14lld   deviation %+.2f%%\n", pc.activated,
                  ref.activated_params, percent_dev(static_cast<double>(pc.activated),
                                                    static_cast<double>(ref.activated_params)));
    } else {
      std::printf("params total     %14lld\n", pc.total);
      std::printf("params activated %14lld\n", pc.activated);
    }
  }

  if (opt.show_flops) {
    FlopMode mode;
    if (opt.flop_mode == "core")
      mode = FlopMode::core;
    else if (opt.flop_mode == "full")
      mode = FlopMode::full;
    else
      throw std::invalid_argument("inspect: flop mode must be core or full");
    const int res = opt.resolution > 0 ? opt.resolution : cfg.input_size;
    const double gflops = flop_estimate(cfg, res, mode);
    if (is_preset && mode == FlopMode::core && res == cfg.input_size) {
      const PresetReference ref = preset_reference(opt.preset_name);
      std::printf("core Gflops      %14.4f   reference %14.2f   deviation %+.2f%%\n", gflops,
                  ref.core_gflops, percent_dev(gflops, ref.core_gflops));
    } else {
      std::printf("%s Gflops at %d  %14.4f\n", opt.flop_mode.c_str(), res, gflops);
    }
  }
}

}  // namespace ditmoe

// Training: objective assembly (denoising MSE, variational term, balance),
// AdamW and EMA updates, label dropout for classifier-free guidance,
// dataset plumbing with real/synthetic mixing, and bit-exact checkpoints.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ditmoe/model.hpp"
#include "ditmoe/schedule.hpp"

namespace ditmoe {

enum class Objective { ddpm, rectified_flow };

struct TrainConfig {
  double lr = 1e-4;
  double ema_decay = 0.9999;
  double label_dropout_p = 0.1;
  int batch_size = 8;
  long long steps = 0;
  Objective objective = Objective::ddpm;
  uint64_t seed = 0;
  // Real:synthetic draw ratio; each item is real with probability r/(r+s).
  // Only consulted when a synthetic source is supplied.
  int mix_real = 1;
  int mix_synth = 5;
  double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables
  int num_timesteps = 1000;

  void validate() const;
};

// ----- data -----

struct LabeledImage {
  ImageCHW image;
  int label = 0;
};

struct Dataset {
  std::vector<LabeledImage> items;
  int num_classes = 0;

  bool empty() const { return items.empty(); }
};

// Class-dependent geometric patterns (stripes, checks, discs) with seeded
// per-image jitter; pixel values in [-1, 1]. channels must be 1 or 3.
Dataset make_procedural_dataset(int num_classes, int per_class, int size, int channels,
                                uint64_t seed);

// Directory layout: one subdirectory per class holding 8-bit PGM/PPM files,
// plus manifest.txt with one "<class> <relative-path>" line per image.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

ImageCHW hflip(const ImageCHW& img);

// Returns null_class with probability p_drop, else label.
int label_dropout(int label, int null_class, double p_drop, Rng& rng);

// Draws single items, real with probability mix_real/(mix_real+mix_synth)
// when a synthetic source is present, then applies a horizontal flip with
// probability 0.5.
struct MixedSampler {
  const Dataset* real = nullptr;
  const Dataset* synth = nullptr;  // optional
  int mix_real = 1;
  int mix_synth = 5;

  LabeledImage draw(Rng& rng) const;
};

// ----- optimizer -----

using GradMap = std::map<std::string, Tensor>;

struct AdamState {
  long long t = 0;  // completed steps (bias correction uses t+1)
  std::map<std::string, NamedArray> m;
  std::map<std::string, NamedArray> v;
};

// Standard bias-corrected Adam; weight decay defaults to 0 and is applied
// decoupled (AdamW) when nonzero. Arithmetic in double, storage in float.
void adamw_step(AdamState& state, ParamStore& params, const GradMap& grads, double lr,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0);

// ema <- decay * ema + (1 - decay) * params, every array.
void ema_update(ParamStore& ema, const ParamStore& params, double decay);

double global_grad_norm(const GradMap& grads);
// Scales all gradients by max_norm/norm when the global norm exceeds it.
void clip_gradients(GradMap& grads, double max_norm);

// ----- objective -----

struct LossParts {
  double mse = 0.0;  // denoising MSE (or rectified-flow velocity MSE)
  double vlb = 0.0;
  double balance = 0.0;
  double total = 0.0;
};

// One batch item with every random draw already fixed, so the loss below is
// a deterministic function of the parameters (used by the gradient checks).
struct DrawnItem {
  ImageCHW x0;
  int label = 0;    // after dropout; may be the null class
  int t_index = 0;  // ddpm objective
  double t_cont = 0.0;  // rectified-flow objective, in [0, 1)
  ImageCHW eps;
};

// Draw order per item: timestep, noise (channel-major pixel order), dropout
// coin. Items are drawn in batch order.
std::vector<DrawnItem> draw_batch(const std::vector<LabeledImage>& batch, const ModelConfig& model,
                                  const TrainConfig& train, Rng& rng);

// Differentiable total loss of a fixed batch: mean MSE over items, plus the
// variational term (ddpm with learned sigma), plus the balance loss averaged
// over items and MoE layers (already alpha-weighted). Per-item expert
// selection counts are accumulated into expert_counts when given.
Var batch_loss_var(const ParamVars& params, const ModelConfig& model, const NoiseSchedule& sched,
                   const TrainConfig& train, const std::vector<DrawnItem>& items,
                   LossParts* parts = nullptr, std::vector<long long>* expert_counts = nullptr);

// Convenience: draw + evaluate without recording gradients.
LossParts training_loss(const ParamVars& params, const ModelConfig& model,
                        const NoiseSchedule& sched, const TrainConfig& train,
                        const std::vector<LabeledImage>& batch, Rng& rng);

// ----- checkpoints -----

struct Checkpoint {
  uint32_t version = 1;
  ModelConfig model;
  ParamStore params;
  ParamStore ema;
  AdamState opt;
  long long step = 0;
  std::string rng_state;
};

// Binary container: magic "DMCK", version, config header, named little-endian
// float32 arrays, trailing CRC-32 over everything before it.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// ----- loop -----

struct StepStats {
  LossParts loss;
  // Expert selection counts summed over the batch and all MoE layers.
  std::vector<long long> expert_counts;
};

class Trainer {
 public:
  // Fresh start: parameters from init_parameters(derive_seed(seed, 0)), the
  // training stream from derive_seed(seed, 1), EMA initialized to the
  // initial parameters.
  Trainer(const ModelConfig& model, const TrainConfig& train, Dataset real, Dataset synth = {});
  // Resume: arrays, step counter and RNG stream restored from the checkpoint
  // (datasets are not stored and must be supplied again).
  Trainer(const Checkpoint& ck, const TrainConfig& train, Dataset real, Dataset synth = {});

  StepStats step();

  long long step_count() const { return step_; }
  const ModelConfig& model_config() const { return model_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const ParamStore& params() const { return params_; }
  const ParamStore& ema_params() const { return ema_; }
  Checkpoint make_checkpoint() const;

 private:
  std::vector<LabeledImage> next_batch();

  ModelConfig model_;
  TrainConfig train_;
  NoiseSchedule sched_;
  Dataset real_;
  Dataset synth_;
  ParamStore params_;
  ParamStore ema_;
  AdamState opt_;
  Rng rng_;
  long long step_ = 0;
};

}  // namespace ditmoe

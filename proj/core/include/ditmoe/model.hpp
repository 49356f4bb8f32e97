// The diffusion transformer itself: patch embedding, fixed 2-D sin-cos
// positions, timestep/class conditioning, adaptive-layernorm blocks whose
// feed-forward is either a dense MLP or a sparse MoE layer, and the final
// projection back to patches. Also: named parameter storage with
// deterministic initialization, exact parameter counting, a flop estimator,
// and the flat key=value config format.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ditmoe/autodiff.hpp"
#include "ditmoe/moe.hpp"
#include "ditmoe/tensor.hpp"

namespace ditmoe {

struct ImageCHW {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;  // channel-major, row-major within channel

  ImageCHW() = default;
  ImageCHW(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0) {}
  double& at(int ch, int y, int x) { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
  size_t size() const { return v.size(); }
};

enum class Placement { every_e, first_half, second_half, explicit_list };

struct ModelConfig {
  int depth = 12;
  int width = 384;
  int heads = 6;
  int patch = 2;
  int input_size = 32;   // spatial side of the model input
  int in_channels = 4;
  int num_classes = 1000;
  bool learned_sigma = true;
  MoeConfig moe;
  Placement placement = Placement::every_e;
  int every = 1;                     // used by every_e
  std::vector<int> explicit_layers;  // used by explicit_list

  void validate() const;
  std::vector<int> moe_layers() const;  // block indices carrying MoE, ascending
  bool is_moe_layer(int block) const;
  int seq_len() const { return (input_size / patch) * (input_size / patch); }
  int token_dim() const { return patch * patch * in_channels; }
  int out_channels() const { return learned_sigma ? 2 * in_channels : in_channels; }
  int null_class() const { return num_classes; }
};

// The six published DiT-MoE configurations, keyed by name (S/2-8E2A etc.).
// All use patch 2, two shared experts, K = 2, 32x32x4 inputs, 1000 classes.
std::vector<std::string> preset_names();
ModelConfig preset(const std::string& name);

// Published reference sizes for the presets: total/activated parameters and
// core Gflops at the presets' native geometry. Used for reporting.
struct PresetReference {
  long long total_params;
  long long activated_params;
  double core_gflops;
};
PresetReference preset_reference(const std::string& name);

// ----- parameters -----

struct NamedArray {
  int rows = 0, cols = 0;
  std::vector<float> data;
};
using ParamStore = std::map<std::string, NamedArray>;
using ParamVars = std::map<std::string, Var>;

enum class InitKind { trunc_normal_002, zeros, router_normal_006 };

struct ParamSpec {
  std::string name;
  int rows = 0, cols = 0;
  InitKind init = InitKind::zeros;
};

// Canonical parameter list; order fixes both the element layout contract and
// the initialization draw order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg);
ParamStore init_parameters(const ModelConfig& cfg, uint64_t seed);
ParamVars to_vars(const ParamStore& store, bool requires_grad);

struct ParamCount {
  long long total = 0;
  long long activated = 0;
};
// Closed-form count (independent of parameter_specs; tests cross-check).
ParamCount param_count(const ModelConfig& cfg);

enum class FlopMode { core, full };
// Multiply-accumulate count in Gflops for one forward pass at the given
// input resolution. core counts the per-token linear layers only (attention
// projections + activated experts / dense MLP); full adds attention
// score/value matmuls, the conditioning path, router, patch and final
// projections.
double flop_estimate(const ModelConfig& cfg, int resolution, FlopMode mode);

// ----- geometry -----

// Row-major patch grid; each token is the patch flattened channel-major,
// i.e. token[ch * p * p + dy * p + dx].
Tensor patchify(const ImageCHW& x, int p);
ImageCHW unpatchify(const Tensor& tokens, int c, int h, int w, int p);

// Fixed (non-learned) 2-D sin-cos positional table, [grid_h*grid_w, dim].
// First half of each row encodes the row coordinate, second half the column.
Tensor pos_embedding_2d(int grid_h, int grid_w, int dim);

// 256-dim sinusoidal features of a (possibly fractional) timestep:
// [sin(t w_0..w_127), cos(t w_0..w_127)] with w_i = 10000^(-i/128).
std::vector<double> timestep_features(double t);

// ----- forward -----

struct ForwardResult {
  Var eps;        // [T, p^2 C] noise prediction in token layout
  Var sigma_raw;  // [T, p^2 C] raw variance head; defined when learned_sigma
  std::vector<MoeForwardResult> moe;  // per MoE layer, model order
  std::vector<int> moe_blocks;        // block index of each entry in moe

  ImageCHW eps_image(const ModelConfig& cfg) const;
  ImageCHW sigma_image(const ModelConfig& cfg) const;
};

// One image forward pass. label == cfg.null_class() selects the
// unconditional embedding row. t is the raw timestep value fed to the
// sinusoidal embedding (an index for the discrete schedule; scaled
// continuous time for rectified flow).
ForwardResult forward(const ParamVars& params, const ModelConfig& cfg, const ImageCHW& x_t,
                      double t, int label, const TraceContext* trace_ctx = nullptr);

// Classifier-free guidance: eps_u + w (eps_c - eps_u), variance head from
// the conditional pass. w = 1 runs the conditional pass only, so it is
// bitwise identical to forward(). Traces record the conditional branch.
ForwardResult cfg_forward(const ParamVars& params, const ModelConfig& cfg, const ImageCHW& x_t,
                          double t, int label, double cfg_scale,
                          const TraceContext* trace_ctx = nullptr);

// ----- config file format -----
// Flat "key = value" lines. Keys: depth, width, heads, patch, num_experts,
// top_k, num_shared, alpha, placement, learned_sigma, input_size,
// in_channels, num_classes, and optionally expert_form, routed_hidden_ratio,
// shared_hidden_ratio (emitted only when non-default). '#' starts a comment.

std::string serialize_config(const ModelConfig& cfg);
ModelConfig parse_config(const std::string& text);
ModelConfig load_config_file(const std::string& path);
void save_config_file(const ModelConfig& cfg, const std::string& path);
// Applies "key=value" to an existing config; unknown keys are rejected.
void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();  // every accepted key, for --help
// FNV-1a hash of the canonical serialization; identifies a config in traces.
uint64_t config_hash(const ModelConfig& cfg);

}  // namespace ditmoe

#include "ditmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ditmoe {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("ModelConfig: depth must be >= 1");
  if (width < 4 || width % 4 != 0)
    throw std::invalid_argument("ModelConfig: width must be a positive multiple of 4");
  if (heads < 1 || width % heads != 0)
    throw std::invalid_argument("ModelConfig: heads must divide width");
  if (patch < 1) throw std::invalid_argument("ModelConfig: patch must be >= 1");
  if (input_size < patch || input_size % patch != 0)
    throw std::invalid_argument("ModelConfig: input_size must be a positive multiple of patch");
  if (in_channels < 1) throw std::invalid_argument("ModelConfig: in_channels must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("ModelConfig: num_classes must be >= 1");
  moe.validate();
  if (placement == Placement::every_e && every < 1)
    throw std::invalid_argument("ModelConfig: every must be >= 1");
  if (placement == Placement::explicit_list) {
    int prev = -1;
    for (int l : explicit_layers) {
      if (l < 0 || l >= depth)
        throw std::invalid_argument("ModelConfig: explicit MoE layer index out of range");
      if (l <= prev)
        throw std::invalid_argument("ModelConfig: explicit MoE layers must be strictly ascending");
      prev = l;
    }
  }
}

std::vector<int> ModelConfig::moe_layers() const {
  std::vector<int> out;
  switch (placement) {
    case Placement::every_e:
      for (int i = 0; i < depth; ++i)
        if (i % every == 0) out.push_back(i);
      break;
    case Placement::first_half:
      for (int i = 0; i < depth / 2; ++i) out.push_back(i);
      break;
    case Placement::second_half:
      for (int i = depth / 2; i < depth; ++i) out.push_back(i);
      break;
    case Placement::explicit_list:
      out = explicit_layers;
      break;
  }
  return out;
}

bool ModelConfig::is_moe_layer(int block) const {
  switch (placement) {
    case Placement::every_e:
      return block % every == 0;
    case Placement::first_half:
      return block < depth / 2;
    case Placement::second_half:
      return block >= depth / 2;
    case Placement::explicit_list:
      return std::binary_search(explicit_layers.begin(), explicit_layers.end(), block);
  }
  return false;
}

namespace {

struct PresetRow {
  const char* name;
  int depth, width, heads, num_experts;
  long long ref_total, ref_activated;
  double ref_gflops;
};

// Published DiT-MoE family sizes (total/activated parameters, core Gflops at
// the native 32x32x4 geometry).
const PresetRow kPresets[] = {
    {"S/2-8E2A", 12, 384, 6, 8, 199000000LL, 71000000LL, 15.43},
    {"S/2-16E2A", 12, 384, 6, 16, 369000000LL, 71000000LL, 15.44},
    {"B/2-8E2A", 12, 768, 12, 8, 795000000LL, 286000000LL, 61.68},
    {"L/2-8E2A", 24, 1024, 16, 8, 2800000000LL, 1000000000LL, 219.26},
    {"XL/2-8E2A", 28, 1152, 16, 8, 4100000000LL, 1500000000LL, 323.74},
    {"G/2-16E2A", 40, 1408, 16, 16, 16500000000LL, 3100000000LL, 690.94},
};

const PresetRow& find_preset(const std::string& name) {
  for (const PresetRow& r : kPresets)
    if (name == r.name) return r;
  throw std::invalid_argument("unknown preset: " + name);
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const PresetRow& r : kPresets) out.push_back(r.name);
  return out;
}

ModelConfig preset(const std::string& name) {
  const PresetRow& r = find_preset(name);
  ModelConfig cfg;
  cfg.depth = r.depth;
  cfg.width = r.width;
  cfg.heads = r.heads;
  cfg.patch = 2;
  cfg.input_size = 32;
  cfg.in_channels = 4;
  cfg.num_classes = 1000;
  cfg.learned_sigma = true;
  cfg.moe.num_experts = r.num_experts;
  cfg.moe.top_k = 2;
  cfg.moe.num_shared = 2;
  cfg.moe.alpha = 0.005;
  cfg.placement = Placement::every_e;
  cfg.every = 1;
  cfg.validate();
  return cfg;
}

PresetReference preset_reference(const std::string& name) {
  const PresetRow& r = find_preset(name);
  return {r.ref_total, r.ref_activated, r.ref_gflops};
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

namespace {

int expert_mats(ExpertForm form) { return form == ExpertForm::gated ? 3 : 2; }

void push_expert_specs(std::vector<ParamSpec>& out, const std::string& prefix, int width,
                       int hidden, ExpertForm form, InitKind init) {
  out.push_back({prefix + ".w1", width, hidden, init});
  if (form == ExpertForm::gated) out.push_back({prefix + ".w3", width, hidden, init});
  out.push_back({prefix + ".w2", hidden, width, init});
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  const int D = cfg.width;
  std::vector<ParamSpec> out;
  out.push_back({"patch_embed.weight", cfg.token_dim(), D, InitKind::trunc_normal_002});
  out.push_back({"patch_embed.bias", 1, D, InitKind::zeros});
  out.push_back({"t_embed.fc1.weight", 256, D, InitKind::trunc_normal_002});
  out.push_back({"t_embed.fc1.bias", 1, D, InitKind::zeros});
  out.push_back({"t_embed.fc2.weight", D, D, InitKind::trunc_normal_002});
  out.push_back({"t_embed.fc2.bias", 1, D, InitKind::zeros});
  out.push_back({"class_embed.table", cfg.num_classes + 1, D, InitKind::trunc_normal_002});
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "block" + std::to_string(b);
    out.push_back({p + ".adaln.weight", D, 6 * D, InitKind::zeros});
    out.push_back({p + ".adaln.bias", 1, 6 * D, InitKind::zeros});
    out.push_back({p + ".attn.qkv.weight", D, 3 * D, InitKind::trunc_normal_002});
    out.push_back({p + ".attn.qkv.bias", 1, 3 * D, InitKind::zeros});
    out.push_back({p + ".attn.proj.weight", D, D, InitKind::trunc_normal_002});
    out.push_back({p + ".attn.proj.bias", 1, D, InitKind::zeros});
    if (cfg.is_moe_layer(b)) {
      out.push_back({p + ".moe.router", D, cfg.moe.num_experts, InitKind::router_normal_006});
      for (int e = 0; e < cfg.moe.num_experts; ++e)
        push_expert_specs(out, p + ".moe.expert" + std::to_string(e), D,
                          cfg.moe.routed_hidden(D), cfg.moe.form, InitKind::trunc_normal_002);
      for (int sE = 0; sE < cfg.moe.num_shared; ++sE)
        push_expert_specs(out, p + ".moe.shared" + std::to_string(sE), D,
                          cfg.moe.shared_hidden(D), cfg.moe.form, InitKind::trunc_normal_002);
    } else {
      out.push_back({p + ".mlp.w1", D, 4 * D, InitKind::trunc_normal_002});
      out.push_back({p + ".mlp.w2", 4 * D, D, InitKind::trunc_normal_002});
    }
  }
  out.push_back({"final.adaln.weight", D, 2 * D, InitKind::zeros});
  out.push_back({"final.adaln.bias", 1, 2 * D, InitKind::zeros});
  out.push_back({"final.linear.weight", D, cfg.patch * cfg.patch * cfg.out_channels(),
                 InitKind::zeros});
  out.push_back({"final.linear.bias", 1, cfg.patch * cfg.patch * cfg.out_channels(),
                 InitKind::zeros});
  return out;
}

ParamStore init_parameters(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  ParamStore store;
  for (const ParamSpec& spec : parameter_specs(cfg)) {
    NamedArray arr;
    arr.rows = spec.rows;
    arr.cols = spec.cols;
    arr.data.assign(static_cast<size_t>(spec.rows) * spec.cols, 0.0f);
    switch (spec.init) {
      case InitKind::zeros:
        break;
      case InitKind::trunc_normal_002:
        for (float& x : arr.data) {
          double z;
          do {
            z = rng.normal();
          } while (std::fabs(z) > 2.0);  // resample outside two standard deviations
          x = static_cast<float>(z * 0.02);
        }
        break;
      case InitKind::router_normal_006:
        for (float& x : arr.data) x = static_cast<float>(rng.normal() * 0.006);
        break;
    }
    store.emplace(spec.name, std::move(arr));
  }
  return store;
}

ParamVars to_vars(const ParamStore& store, bool requires_grad) {
  ParamVars vars;
  for (const auto& [name, arr] : store) {
    Tensor t(arr.rows, arr.cols);
    for (size_t i = 0; i < arr.data.size(); ++i) t.v[i] = static_cast<double>(arr.data[i]);
    vars.emplace(name, Var::leaf(std::move(t), requires_grad));
  }
  return vars;
}

ParamCount param_count(const ModelConfig& cfg) {
  cfg.validate();
  const long long D = cfg.width;
  const long long n = cfg.moe.num_experts;
  const long long k = cfg.moe.top_k;
  const long long ns = cfg.moe.num_shared;
  const long long mats = expert_mats(cfg.moe.form);
  const long long routed = mats * D * cfg.moe.routed_hidden(cfg.width);
  const long long shared = mats * D * cfg.moe.shared_hidden(cfg.width);
  const long long moe_blocks = static_cast<long long>(cfg.moe_layers().size());
  const long long dense_blocks = cfg.depth - moe_blocks;
  const long long tok = cfg.token_dim();
  const long long out_tok = static_cast<long long>(cfg.patch) * cfg.patch * cfg.out_channels();

  long long total = 0;
  total += tok * D + D;                       // patch embedding
  total += 256 * D + D + D * D + D;           // timestep MLP
  total += (cfg.num_classes + 1LL) * D;       // class table incl. null row
  const long long per_block_common = (6 * D * D + 6 * D) + (3 * D * D + 3 * D) + (D * D + D);
  total += cfg.depth * per_block_common;
  total += dense_blocks * (2 * D * 4 * D);
  total += moe_blocks * (D * n + n * routed + ns * shared);
  total += 2 * D * D + 2 * D;                 // final modulation
  total += D * out_tok + out_tok;             // final projection

  ParamCount pc;
  pc.total = total;
  pc.activated = total - (n - k) * routed * moe_blocks;
  return pc;
}

double flop_estimate(const ModelConfig& cfg, int resolution, FlopMode mode) {
  cfg.validate();
  if (resolution < cfg.patch || resolution % cfg.patch != 0)
    throw std::invalid_argument("flop_estimate: resolution must be a positive multiple of patch");
  const double D = cfg.width;
  const double T = static_cast<double>(resolution / cfg.patch) * (resolution / cfg.patch);
  const double mats = expert_mats(cfg.moe.form);
  const double routed = mats * D * cfg.moe.routed_hidden(cfg.width);
  const double shared = mats * D * cfg.moe.shared_hidden(cfg.width);

  double macs = 0.0;
  for (int b = 0; b < cfg.depth; ++b) {
    double per_token = 4.0 * D * D;  // qkv + output projections
    if (cfg.is_moe_layer(b))
      per_token += cfg.moe.top_k * routed + cfg.moe.num_shared * shared;
    else
      per_token += 2.0 * D * 4.0 * D;
    macs += per_token * T;
    if (mode == FlopMode::full) {
      macs += 2.0 * T * T * D;  // attention scores and values
      macs += 6.0 * D * D;      // adaLN modulation, once per image
      if (cfg.is_moe_layer(b)) macs += T * D * cfg.moe.num_experts;  // router
    }
  }
  if (mode == FlopMode::full) {
    macs += T * cfg.token_dim() * D;                                    // patch embedding
    macs += 256.0 * D + D * D;                                          // timestep MLP
    macs += 2.0 * D * D;                                                // final modulation
    macs += T * D * (cfg.patch * cfg.patch * cfg.out_channels());       // final projection
  }
  return macs / 1e9;
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

Tensor patchify(const ImageCHW& x, int p) {
  if (p < 1 || x.h % p != 0 || x.w % p != 0)
    throw std::invalid_argument("patchify: image sides must be multiples of p");
  const int gh = x.h / p, gw = x.w / p;
  Tensor out(gh * gw, p * p * x.c);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const int tok = py * gw + px;
      for (int ch = 0; ch < x.c; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            out.at(tok, (ch * p + dy) * p + dx) = x.at(ch, py * p + dy, px * p + dx);
    }
  return out;
}

ImageCHW unpatchify(const Tensor& tokens, int c, int h, int w, int p) {
  if (p < 1 || h % p != 0 || w % p != 0)
    throw std::invalid_argument("unpatchify: image sides must be multiples of p");
  const int gh = h / p, gw = w / p;
  if (tokens.rows != gh * gw || tokens.cols != p * p * c)
    throw std::invalid_argument("unpatchify: token tensor shape mismatch");
  ImageCHW out(c, h, w);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const int tok = py * gw + px;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            out.at(ch, py * p + dy, px * p + dx) = tokens.at(tok, (ch * p + dy) * p + dx);
    }
  return out;
}

namespace {

// 1-D sin-cos features of a coordinate, dim/2 sines then dim/2 cosines.
void axis_features(double pos, int dim, double* out) {
  const int quarter = dim / 2;
  for (int i = 0; i < quarter; ++i) {
    const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
    out[i] = std::sin(pos * omega);
    out[quarter + i] = std::cos(pos * omega);
  }
}

}  // namespace

Tensor pos_embedding_2d(int grid_h, int grid_w, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("pos_embedding_2d: dim must be a multiple of 4");
  Tensor out(grid_h * grid_w, dim);
  const int half = dim / 2;
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      double* row = out.v.data() + static_cast<size_t>(r * grid_w + c) * dim;
      axis_features(static_cast<double>(r), half, row);
      axis_features(static_cast<double>(c), half, row + half);
    }
  return out;
}

std::vector<double> timestep_features(double t) {
  std::vector<double> out(256);
  for (int i = 0; i < 128; ++i) {
    const double omega = std::pow(10000.0, -static_cast<double>(i) / 128.0);
    out[i] = std::sin(t * omega);
    out[128 + i] = std::cos(t * omega);
  }
  return out;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

const Var& pv(const ParamVars& P, const std::string& name) {
  auto it = P.find(name);
  if (it == P.end()) throw std::invalid_argument("forward: missing parameter " + name);
  return it->second;
}

Var modulate(const Var& x, const Var& shift, const Var& scale_v) {
  return add_rowvec(mul_rowvec(x, add_scalar(scale_v, 1.0)), shift);
}

Var attention(const ParamVars& P, const std::string& prefix, const Var& x, int heads) {
  const int D = x.cols();
  const int hd = D / heads;
  Var qkv = add_rowvec(matmul(x, pv(P, prefix + ".qkv.weight")), pv(P, prefix + ".qkv.bias"));
  std::vector<Var> outs;
  outs.reserve(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    Var q = slice_cols(qkv, h * hd, hd);
    Var k = slice_cols(qkv, D + h * hd, hd);
    Var v = slice_cols(qkv, 2 * D + h * hd, hd);
    Var att = softmax_rows(scale(matmul(q, k, false, true), inv_sqrt));
    outs.push_back(matmul(att, v));
  }
  Var merged = heads == 1 ? outs[0] : concat_cols(outs);
  return add_rowvec(matmul(merged, pv(P, prefix + ".proj.weight")), pv(P, prefix + ".proj.bias"));
}

ExpertVars expert_vars(const ParamVars& P, const std::string& prefix, ExpertForm form) {
  ExpertVars e;
  e.w1 = pv(P, prefix + ".w1");
  e.w2 = pv(P, prefix + ".w2");
  if (form == ExpertForm::gated) e.w3 = pv(P, prefix + ".w3");
  return e;
}

constexpr double kLnEps = 1e-6;

}  // namespace

ImageCHW ForwardResult::eps_image(const ModelConfig& cfg) const {
  return unpatchify(eps.val(), cfg.in_channels, cfg.input_size, cfg.input_size, cfg.patch);
}

ImageCHW ForwardResult::sigma_image(const ModelConfig& cfg) const {
  if (!sigma_raw.defined()) throw std::logic_error("sigma_image: model has no variance head");
  return unpatchify(sigma_raw.val(), cfg.in_channels, cfg.input_size, cfg.input_size, cfg.patch);
}

ForwardResult forward(const ParamVars& params, const ModelConfig& cfg, const ImageCHW& x_t,
                      double t, int label, const TraceContext* trace_ctx) {
  cfg.validate();
  if (x_t.c != cfg.in_channels || x_t.h != cfg.input_size || x_t.w != cfg.input_size)
    throw std::invalid_argument("forward: input image shape does not match config");
  if (label < 0 || label > cfg.num_classes)
    throw std::invalid_argument("forward: class label out of range (null class = num_classes)");

  const int D = cfg.width;
  const int grid = cfg.input_size / cfg.patch;

  Var h = add_rowvec(matmul(Var::constant(patchify(x_t, cfg.patch)), pv(params, "patch_embed.weight")),
                     pv(params, "patch_embed.bias"));
  h = add(h, Var::constant(pos_embedding_2d(grid, grid, D)));

  Var tfeat = Var::constant(Tensor::row(timestep_features(t)));
  Var temb = add_rowvec(matmul(tfeat, pv(params, "t_embed.fc1.weight")),
                        pv(params, "t_embed.fc1.bias"));
  temb = add_rowvec(matmul(vsilu(temb), pv(params, "t_embed.fc2.weight")),
                    pv(params, "t_embed.fc2.bias"));
  Var cemb = gather_rows(pv(params, "class_embed.table"), {label});
  Var cond = add(temb, cemb);

  ForwardResult res;
  int moe_ordinal = 0;
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "block" + std::to_string(b);
    Var mod = add_rowvec(matmul(vsilu(cond), pv(params, p + ".adaln.weight")),
                         pv(params, p + ".adaln.bias"));
    Var shift_msa = slice_cols(mod, 0, D);
    Var scale_msa = slice_cols(mod, D, D);
    Var gate_msa = slice_cols(mod, 2 * D, D);
    Var shift_mlp = slice_cols(mod, 3 * D, D);
    Var scale_mlp = slice_cols(mod, 4 * D, D);
    Var gate_mlp = slice_cols(mod, 5 * D, D);

    Var attn_in = modulate(layernorm_rows(h, kLnEps), shift_msa, scale_msa);
    h = add(h, mul_rowvec(attention(params, p + ".attn", attn_in, cfg.heads), gate_msa));

    Var ffn_in = modulate(layernorm_rows(h, kLnEps), shift_mlp, scale_mlp);
    Var ffn_out;
    if (cfg.is_moe_layer(b)) {
      MoeLayerVars layer;
      layer.router = pv(params, p + ".moe.router");
      for (int e = 0; e < cfg.moe.num_experts; ++e)
        layer.experts.push_back(expert_vars(params, p + ".moe.expert" + std::to_string(e), cfg.moe.form));
      for (int sE = 0; sE < cfg.moe.num_shared; ++sE)
        layer.shared.push_back(expert_vars(params, p + ".moe.shared" + std::to_string(sE), cfg.moe.form));
      TraceContext local;
      const TraceContext* ctx = nullptr;
      if (trace_ctx) {
        local = *trace_ctx;
        local.layer = moe_ordinal;
        ctx = &local;
      }
      MoeForwardResult mres = moe_forward(layer, ffn_in, cfg.moe, ctx);
      ffn_out = mres.output;
      res.moe.push_back(std::move(mres));
      res.moe_blocks.push_back(b);
      ++moe_ordinal;
    } else {
      ffn_out = matmul(vgelu(matmul(ffn_in, pv(params, p + ".mlp.w1"))), pv(params, p + ".mlp.w2"));
    }
    h = add(h, mul_rowvec(ffn_out, gate_mlp));
  }

  Var fmod = add_rowvec(matmul(vsilu(cond), pv(params, "final.adaln.weight")),
                        pv(params, "final.adaln.bias"));
  Var out = modulate(layernorm_rows(h, kLnEps), slice_cols(fmod, 0, D), slice_cols(fmod, D, D));
  out = add_rowvec(matmul(out, pv(params, "final.linear.weight")), pv(params, "final.linear.bias"));

  const int half = cfg.patch * cfg.patch * cfg.in_channels;
  if (cfg.learned_sigma) {
    res.eps = slice_cols(out, 0, half);
    res.sigma_raw = slice_cols(out, half, half);
  } else {
    res.eps = out;
  }
  return res;
}

ForwardResult cfg_forward(const ParamVars& params, const ModelConfig& cfg, const ImageCHW& x_t,
                          double t, int label, double cfg_scale, const TraceContext* trace_ctx) {
  if (cfg_scale == 1.0) return forward(params, cfg, x_t, t, label, trace_ctx);
  ForwardResult cond = forward(params, cfg, x_t, t, label, trace_ctx);
  ForwardResult uncond = forward(params, cfg, x_t, t, cfg.null_class(), nullptr);
  ForwardResult res;
  res.eps = add(uncond.eps, scale(sub(cond.eps, uncond.eps), cfg_scale));
  res.sigma_raw = cond.sigma_raw;
  res.moe = std::move(cond.moe);
  res.moe_blocks = std::move(cond.moe_blocks);
  return res;
}

// ---------------------------------------------------------------------------
// config file format
// ---------------------------------------------------------------------------

namespace {

// Shortest decimal form that parses back to the same double.
std::string format_double(double x) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  size_t pos = 0;
  int out;
  try {
    out = std::stoi(value, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + value + "'");
  }
  if (pos != value.size())
    throw std::invalid_argument("config: bad integer for " + key + ": '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double out = std::strtod(value.c_str(), &end);
  if (end != value.c_str() + value.size() || value.empty())
    throw std::invalid_argument("config: bad number for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + value + "'");
}

std::string placement_string(const ModelConfig& cfg) {
  switch (cfg.placement) {
    case Placement::every_e:
      return "every:" + std::to_string(cfg.every);
    case Placement::first_half:
      return "first_half";
    case Placement::second_half:
      return "second_half";
    case Placement::explicit_list: {
      std::string s = "explicit:";
      for (size_t i = 0; i < cfg.explicit_layers.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(cfg.explicit_layers[i]);
      }
      return s;
    }
  }
  return "every:1";
}

void parse_placement(ModelConfig& cfg, const std::string& value) {
  if (value.rfind("every:", 0) == 0) {
    cfg.placement = Placement::every_e;
    cfg.every = parse_int("placement", value.substr(6));
  } else if (value == "first_half") {
    cfg.placement = Placement::first_half;
  } else if (value == "second_half") {
    cfg.placement = Placement::second_half;
  } else if (value.rfind("explicit:", 0) == 0) {
    cfg.placement = Placement::explicit_list;
    cfg.explicit_layers.clear();
    std::stringstream ss(value.substr(9));
    std::string item;
    while (std::getline(ss, item, ','))
      cfg.explicit_layers.push_back(parse_int("placement", trim(item)));
  } else {
    throw std::invalid_argument("config: bad placement '" + value + "'");
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  return {"depth",        "width",      "heads",         "patch",
          "input_size",   "in_channels", "num_classes",  "learned_sigma",
          "num_experts",  "top_k",      "num_shared",    "alpha",
          "placement",    "expert_form", "routed_hidden_ratio", "shared_hidden_ratio"};
}

std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "depth = " << cfg.depth << '\n';
  os << "width = " << cfg.width << '\n';
  os << "heads = " << cfg.heads << '\n';
  os << "patch = " << cfg.patch << '\n';
  os << "input_size = " << cfg.input_size << '\n';
  os << "in_channels = " << cfg.in_channels << '\n';
  os << "num_classes = " << cfg.num_classes << '\n';
  os << "learned_sigma = " << (cfg.learned_sigma ? "true" : "false") << '\n';
  os << "num_experts = " << cfg.moe.num_experts << '\n';
  os << "top_k = " << cfg.moe.top_k << '\n';
  os << "num_shared = " << cfg.moe.num_shared << '\n';
  os << "alpha = " << format_double(cfg.moe.alpha) << '\n';
  os << "placement = " << placement_string(cfg) << '\n';
  if (cfg.moe.form != ExpertForm::gated) os << "expert_form = plain_gelu\n";
  if (cfg.moe.routed_hidden_ratio != 4.0)
    os << "routed_hidden_ratio = " << format_double(cfg.moe.routed_hidden_ratio) << '\n';
  if (cfg.moe.shared_hidden_ratio != 1.0)
    os << "shared_hidden_ratio = " << format_double(cfg.moe.shared_hidden_ratio) << '\n';
  return os.str();
}

void apply_override(ModelConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "depth") cfg.depth = parse_int(key, value);
  else if (key == "width") cfg.width = parse_int(key, value);
  else if (key == "heads") cfg.heads = parse_int(key, value);
  else if (key == "patch") cfg.patch = parse_int(key, value);
  else if (key == "input_size") cfg.input_size = parse_int(key, value);
  else if (key == "in_channels") cfg.in_channels = parse_int(key, value);
  else if (key == "num_classes") cfg.num_classes = parse_int(key, value);
  else if (key == "learned_sigma") cfg.learned_sigma = parse_bool(key, value);
  else if (key == "num_experts") cfg.moe.num_experts = parse_int(key, value);
  else if (key == "top_k") cfg.moe.top_k = parse_int(key, value);
  else if (key == "num_shared") cfg.moe.num_shared = parse_int(key, value);
  else if (key == "alpha") cfg.moe.alpha = parse_double(key, value);
  else if (key == "placement") parse_placement(cfg, value);
  else if (key == "expert_form") {
    if (value == "gated") cfg.moe.form = ExpertForm::gated;
    else if (value == "plain_gelu") cfg.moe.form = ExpertForm::plain_gelu;
    else throw std::invalid_argument("config: bad expert_form '" + value + "'");
  } else if (key == "routed_hidden_ratio") cfg.moe.routed_hidden_ratio = parse_double(key, value);
  else if (key == "shared_hidden_ratio") cfg.moe.shared_hidden_ratio = parse_double(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ModelConfig parse_config(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> seen;
  while (std::getline(is, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw std::invalid_argument("config: duplicate key '" + key + "'");
    seen.push_back(key);
    apply_override(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void save_config_file(const ModelConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config file: " + path);
  f << serialize_config(cfg);
  if (!f) throw std::runtime_error("failed writing config file: " + path);
}

uint64_t config_hash(const ModelConfig& cfg) {
  const std::string s = serialize_config(cfg);
  uint64_t h = 14695981039346656037ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ditmoe

#include "ditmoe/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ditmoe/io.hpp"

namespace fs = std::filesystem;

namespace ditmoe {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (ema_decay < 0.0 || ema_decay >= 1.0)
    throw std::invalid_argument("TrainConfig: ema_decay must be in [0, 1)");
  if (label_dropout_p < 0.0 || label_dropout_p >= 1.0)
    throw std::invalid_argument("TrainConfig: label_dropout_p must be in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
  if (mix_real < 0 || mix_synth < 0 || mix_real + mix_synth <= 0)
    throw std::invalid_argument("TrainConfig: mix ratio must have r >= 0, s >= 0, r + s > 0");
  if (num_timesteps < 1) throw std::invalid_argument("TrainConfig: num_timesteps must be >= 1");
}

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

Dataset make_procedural_dataset(int num_classes, int per_class, int size, int channels,
                                uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || size < 2)
    throw std::invalid_argument("procedural dataset: need num_classes, per_class >= 1, size >= 2");
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("procedural dataset: channels must be 1 or 3");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = num_classes;
  const double tau = 6.283185307179586;
  for (int k = 0; k < num_classes; ++k) {
    const int kind = k % 4;
    const double period = 2.0 + static_cast<double>(k / 4);
    for (int i = 0; i < per_class; ++i) {
      const double phase = rng.uniform() * period;
      const double amp = 0.7 + 0.3 * rng.uniform();
      ImageCHW img(channels, size, size);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double v = 0.0;
          switch (kind) {
            case 0:  // horizontal bands
              v = std::sin(tau * (y + phase) / period);
              break;
            case 1:  // vertical bands
              v = std::sin(tau * (x + phase) / period);
              break;
            case 2:  // checkerboard
              v = std::sin(tau * (y + phase) / period) * std::sin(tau * (x + phase) / period);
              break;
            case 3: {  // rings around the center
              const double cy = (size - 1) * 0.5, cx = (size - 1) * 0.5;
              const double r = std::hypot(y - cy, x - cx);
              v = std::cos(tau * (r + phase) / period);
              break;
            }
          }
          for (int ch = 0; ch < channels; ++ch) {
            // channels carry the same pattern at staggered strength
            const double chan_amp = amp * (1.0 - 0.25 * ch);
            double pix = chan_amp * v + 0.05 * rng.normal();
            if (pix < -1.0) pix = -1.0;
            if (pix > 1.0) pix = 1.0;
            img.at(ch, y, x) = pix;
          }
        }
      ds.items.push_back({std::move(img), k});
    }
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  if (ds.empty()) throw std::invalid_argument("write_dataset: dataset is empty");
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot create manifest in " + dir);
  std::map<int, int> next_index;
  for (const LabeledImage& item : ds.items) {
    const int k = item.label;
    const std::string cls_dir = "class_" + std::to_string(k);
    fs::create_directories(fs::path(dir) / cls_dir);
    char name[64];
    std::snprintf(name, sizeof(name), "img_%05d.%s", next_index[k]++,
                  item.image.c == 3 ? "ppm" : "pgm");
    const std::string rel = cls_dir + "/" + name;
    write_pnm((fs::path(dir) / rel).string(), to_pnm(item.image));
    manifest << k << ' ' << rel << '\n';
  }
  if (!manifest) throw std::runtime_error("failed writing manifest in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot open manifest.txt in " + dir);
  Dataset ds;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    int label;
    std::string rel;
    if (!(is >> label >> rel))
      throw std::runtime_error("bad manifest line in " + dir + ": '" + line + "'");
    if (label < 0) throw std::runtime_error("negative class label in manifest: " + line);
    LabeledImage item;
    item.label = label;
    item.image = from_pnm(read_pnm((fs::path(dir) / rel).string()));
    ds.items.push_back(std::move(item));
    if (label + 1 > ds.num_classes) ds.num_classes = label + 1;
  }
  if (ds.empty()) throw std::runtime_error("dataset manifest is empty in " + dir);
  return ds;
}

ImageCHW hflip(const ImageCHW& img) {
  ImageCHW out(img.c, img.h, img.w);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(ch, y, x) = img.at(ch, y, img.w - 1 - x);
  return out;
}

int label_dropout(int label, int null_class, double p_drop, Rng& rng) {
  if (p_drop < 0.0 || p_drop >= 1.0)
    throw std::invalid_argument("label_dropout: p_drop must be in [0, 1)");
  // the coin is consumed even at p_drop = 0 so the draw stream layout is fixed
  return rng.uniform() < p_drop ? null_class : label;
}

LabeledImage MixedSampler::draw(Rng& rng) const {
  if (!real || real->empty()) throw std::invalid_argument("mixed sampler: real source is empty");
  const Dataset* src = real;
  if (synth) {
    if (mix_real < 0 || mix_synth < 0 || mix_real + mix_synth <= 0)
      throw std::invalid_argument("mixed sampler: bad mix ratio");
    const double p_real = static_cast<double>(mix_real) / (mix_real + mix_synth);
    if (!(rng.uniform() < p_real)) {
      if (synth->empty())
        throw std::invalid_argument("mixed sampler: ratio requires a synthetic source but it is empty");
      src = synth;
    }
  }
  LabeledImage out = src->items[static_cast<size_t>(rng.uniform_int(
      static_cast<int64_t>(src->items.size())))];
  if (rng.uniform() < 0.5) out.image = hflip(out.image);
  return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adamw_step(AdamState& state, ParamStore& params, const GradMap& grads, double lr,
                double beta1, double beta2, double eps, double weight_decay) {
  const long long t = state.t + 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    if (g && (g->rows != p.rows || g->cols != p.cols))
      throw std::invalid_argument("adamw_step: gradient shape mismatch for " + name);
    NamedArray& m = state.m[name];
    NamedArray& v = state.v[name];
    if (m.data.empty()) {
      m.rows = v.rows = p.rows;
      m.cols = v.cols = p.cols;
      m.data.assign(p.data.size(), 0.0f);
      v.data.assign(p.data.size(), 0.0f);
    }
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g ? g->v[i] : 0.0;
      if (!std::isfinite(gi))
        throw std::runtime_error("adamw_step: non-finite gradient in " + name);
      const double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double theta = p.data[i];
      if (weight_decay != 0.0) theta -= lr * weight_decay * theta;
      theta -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      p.data[i] = static_cast<float>(theta);
    }
  }
  state.t = t;
}

void ema_update(ParamStore& ema, const ParamStore& params, double decay) {
  if (ema.size() != params.size())
    throw std::invalid_argument("ema_update: parameter key sets differ");
  auto eit = ema.begin();
  for (const auto& [name, p] : params) {
    if (eit->first != name || eit->second.data.size() != p.data.size())
      throw std::invalid_argument("ema_update: parameter key sets differ at " + name);
    NamedArray& e = eit->second;
    for (size_t i = 0; i < p.data.size(); ++i)
      e.data[i] = static_cast<float>(decay * e.data[i] + (1.0 - decay) * p.data[i]);
    ++eit;
  }
}

double global_grad_norm(const GradMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    (void)name;
    for (double x : g.v) sq += x * x;
  }
  return std::sqrt(sq);
}

void clip_gradients(GradMap& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto& [name, g] : grads) {
    (void)name;
    for (double& x : g.v) x *= s;
  }
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

std::vector<DrawnItem> draw_batch(const std::vector<LabeledImage>& batch, const ModelConfig& model,
                                  const TrainConfig& train, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("draw_batch: batch is empty");
  std::vector<DrawnItem> items;
  items.reserve(batch.size());
  for (const LabeledImage& li : batch) {
    if (li.image.c != model.in_channels || li.image.h != model.input_size ||
        li.image.w != model.input_size)
      throw std::invalid_argument("draw_batch: item shape does not match model config");
    if (li.label < 0 || li.label >= model.num_classes)
      throw std::invalid_argument("draw_batch: class label out of range");
    DrawnItem d;
    d.x0 = li.image;
    if (train.objective == Objective::ddpm)
      d.t_index = static_cast<int>(rng.uniform_int(train.num_timesteps));
    else
      d.t_cont = rng.uniform();
    d.eps = ImageCHW(d.x0.c, d.x0.h, d.x0.w);
    for (double& e : d.eps.v) e = rng.normal();
    d.label = label_dropout(li.label, model.null_class(), train.label_dropout_p, rng);
    items.push_back(std::move(d));
  }
  return items;
}

namespace {

Tensor tensor_from_vector(const std::vector<double>& v, int rows, int cols) {
  Tensor t(rows, cols);
  t.v = v;
  return t;
}

}  // namespace

Var batch_loss_var(const ParamVars& params, const ModelConfig& model, const NoiseSchedule& sched,
                   const TrainConfig& train, const std::vector<DrawnItem>& items, LossParts* parts,
                   std::vector<long long>* expert_counts) {
  if (items.empty()) throw std::invalid_argument("batch_loss_var: no items");
  const int B = static_cast<int>(items.size());
  const int T_seq = model.seq_len();
  const int tok_dim = model.token_dim();
  if (expert_counts) expert_counts->assign(model.moe.num_experts, 0);

  Var mse_sum, vlb_sum, bal_sum;
  int bal_terms = 0;
  for (const DrawnItem& item : items) {
    ImageCHW xt(item.x0.c, item.x0.h, item.x0.w);
    Tensor target;  // token layout
    double t_value;
    if (train.objective == Objective::ddpm) {
      xt.v = q_sample(sched, item.x0.v, item.t_index, item.eps.v);
      target = patchify(item.eps, model.patch);
      t_value = static_cast<double>(item.t_index);
    } else {
      std::vector<double> vel;
      rf_interpolate(item.x0.v, item.eps.v, item.t_cont, xt.v, vel);
      ImageCHW vel_img(item.x0.c, item.x0.h, item.x0.w);
      vel_img.v = std::move(vel);
      target = patchify(vel_img, model.patch);
      // the sinusoidal embedding sees continuous time stretched to the
      // discrete schedule's range so both objectives share its frequency band
      t_value = item.t_cont * (sched.T - 1);
    }

    ForwardResult fr = forward(params, model, xt, t_value, item.label);
    Var item_mse = mse(fr.eps, Var::constant(target));
    mse_sum = mse_sum.defined() ? add(mse_sum, item_mse) : item_mse;

    if (train.objective == Objective::ddpm && model.learned_sigma) {
      const Tensor xt_tok = patchify(xt, model.patch);
      const Tensor x0_tok = patchify(item.x0, model.patch);
      // the variational term trains the variance head only: the model mean
      // enters as a plain tensor computed from the detached noise estimate
      const std::vector<double> x0_hat =
          predict_x0_from_eps(sched, xt_tok.v, item.t_index, fr.eps.val().v);
      std::vector<double> mean;
      double post_var;
      posterior_mean_variance(sched, x0_hat, xt_tok.v, item.t_index, mean, post_var);
      Var logvar = interpolate_log_variance(sched, fr.sigma_raw, item.t_index);
      Var item_vlb = vlb_term_var(sched, tensor_from_vector(mean, T_seq, tok_dim), logvar, x0_tok,
                                  xt_tok, item.t_index);
      vlb_sum = vlb_sum.defined() ? add(vlb_sum, item_vlb) : item_vlb;
    }

    for (const MoeForwardResult& m : fr.moe) {
      Var b = balance_loss_var(m.probs, m.decisions, model.moe);
      bal_sum = bal_sum.defined() ? add(bal_sum, b) : b;
      ++bal_terms;
      if (expert_counts)
        for (const RouterDecision& d : m.decisions)
          for (int e : d.selected) ++(*expert_counts)[e];
    }
  }

  Var total = scale(mse_sum, 1.0 / B);
  if (parts) parts->mse = total.scalar();
  if (vlb_sum.defined()) {
    Var vlb_mean = scale(vlb_sum, 1.0 / B);
    if (parts) parts->vlb = vlb_mean.scalar();
    total = add(total, vlb_mean);
  } else if (parts) {
    parts->vlb = 0.0;
  }
  if (bal_terms > 0) {
    Var bal_mean = scale(bal_sum, 1.0 / bal_terms);
    if (parts) parts->balance = bal_mean.scalar();
    total = add(total, bal_mean);
  } else if (parts) {
    parts->balance = 0.0;
  }
  if (parts) parts->total = total.scalar();
  return total;
}

LossParts training_loss(const ParamVars& params, const ModelConfig& model,
                        const NoiseSchedule& sched, const TrainConfig& train,
                        const std::vector<LabeledImage>& batch, Rng& rng) {
  const std::vector<DrawnItem> items = draw_batch(batch, model, train, rng);
  NoGradGuard no_grad;
  LossParts parts;
  batch_loss_var(params, model, sched, train, items, &parts);
  return parts;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'M', 'C', 'K'};

void write_group(ByteWriter& w, const char* name,
                 const std::map<std::string, NamedArray>& group) {
  w.str(name);
  w.u32(static_cast<uint32_t>(group.size()));
  for (const auto& [arr_name, arr] : group) {
    w.str(arr_name);
    w.u32(static_cast<uint32_t>(arr.rows));
    w.u32(static_cast<uint32_t>(arr.cols));
    w.u32(static_cast<uint32_t>(arr.data.size()));
    for (float f : arr.data) w.f32(f);
  }
}

std::map<std::string, NamedArray> read_group(ByteReader& r, const char* expect_name) {
  if (r.str() != expect_name)
    throw std::runtime_error(std::string("checkpoint: expected array group ") + expect_name);
  std::map<std::string, NamedArray> group;
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    NamedArray arr;
    arr.rows = static_cast<int>(r.u32());
    arr.cols = static_cast<int>(r.u32());
    const uint32_t len = r.u32();
    if (static_cast<uint64_t>(arr.rows) * arr.cols != len)
      throw std::runtime_error("checkpoint: array length mismatch for " + name);
    arr.data.resize(len);
    for (uint32_t j = 0; j < len; ++j) arr.data[j] = r.f32();
    group.emplace(std::move(name), std::move(arr));
  }
  return group;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(ck.version);
  w.str(serialize_config(ck.model));
  w.i64(ck.step);
  w.str(ck.rng_state);
  w.i64(ck.opt.t);
  write_group(w, "params", ck.params);
  write_group(w, "ema", ck.ema);
  write_group(w, "adam_m", ck.opt.m);
  write_group(w, "adam_v", ck.opt.v);
  w.u32(crc32(w.bytes));
  write_file_bytes(path, w.bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 12) throw std::runtime_error("checkpoint too short: " + path);
  const uint32_t stored = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                          static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8 |
                          static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16 |
                          static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw std::runtime_error("checkpoint checksum mismatch: " + path);
  ByteReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ck.version));
  ck.model = parse_config(r.str());
  ck.step = r.i64();
  ck.rng_state = r.str();
  ck.opt.t = r.i64();
  ck.params = read_group(r, "params");
  ck.ema = read_group(r, "ema");
  ck.opt.m = read_group(r, "adam_m");
  ck.opt.v = read_group(r, "adam_v");
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes: " + path);
  return ck;
}

// ---------------------------------------------------------------------------
// loop
// ---------------------------------------------------------------------------

Trainer::Trainer(const ModelConfig& model, const TrainConfig& train, Dataset real, Dataset synth)
    : model_(model),
      train_(train),
      sched_(build_linear_schedule(train.num_timesteps, 1e-4, 2e-2)),
      real_(std::move(real)),
      synth_(std::move(synth)),
      rng_(derive_seed(train.seed, 1)) {
  model_.validate();
  train_.validate();
  if (real_.empty()) throw std::invalid_argument("trainer: real dataset is empty");
  params_ = init_parameters(model_, derive_seed(train_.seed, 0));
  ema_ = params_;
}

Trainer::Trainer(const Checkpoint& ck, const TrainConfig& train, Dataset real, Dataset synth)
    : model_(ck.model),
      train_(train),
      sched_(build_linear_schedule(train.num_timesteps, 1e-4, 2e-2)),
      real_(std::move(real)),
      synth_(std::move(synth)),
      params_(ck.params),
      ema_(ck.ema),
      opt_(ck.opt),
      rng_(0),
      step_(ck.step) {
  model_.validate();
  train_.validate();
  if (real_.empty()) throw std::invalid_argument("trainer: real dataset is empty");
  rng_.deserialize(ck.rng_state);
}

std::vector<LabeledImage> Trainer::next_batch() {
  MixedSampler sampler;
  sampler.real = &real_;
  sampler.synth = synth_.empty() ? nullptr : &synth_;
  sampler.mix_real = train_.mix_real;
  sampler.mix_synth = train_.mix_synth;
  std::vector<LabeledImage> batch;
  batch.reserve(train_.batch_size);
  for (int i = 0; i < train_.batch_size; ++i) batch.push_back(sampler.draw(rng_));
  return batch;
}

StepStats Trainer::step() {
  const std::vector<LabeledImage> batch = next_batch();
  const std::vector<DrawnItem> items = draw_batch(batch, model_, train_, rng_);

  ParamVars vars = to_vars(params_, true);
  StepStats stats;
  Var total = batch_loss_var(vars, model_, sched_, train_, items, &stats.loss,
                             &stats.expert_counts);
  if (!std::isfinite(stats.loss.total))
    throw std::runtime_error("non-finite training loss at step " + std::to_string(step_));
  backward(total);

  GradMap grads;
  for (const auto& [name, var] : vars)
    if (var.node_->grad_ready) grads.emplace(name, var.node_->grad);
  clip_gradients(grads, train_.clip_norm);
  adamw_step(opt_, params_, grads, train_.lr);
  ema_update(ema_, params_, train_.ema_decay);
  ++step_;
  return stats;
}

Checkpoint Trainer::make_checkpoint() const {
  Checkpoint ck;
  ck.version = 1;
  ck.model = model_;
  ck.params = params_;
  ck.ema = ema_;
  ck.opt = opt_;
  ck.step = step_;
  ck.rng_state = rng_.serialize();
  return ck;
}

}  // namespace ditmoe

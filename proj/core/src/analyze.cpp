#include "ditmoe/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ditmoe/io.hpp"

namespace ditmoe {

// ---------------------------------------------------------------------------
// trace files
// ---------------------------------------------------------------------------

namespace {

constexpr char kTraceMagic[4] = {'D', 'M', 'T', 'R'};

void check_u16(int v, const char* what) {
  if (v < 0 || v > 0xFFFF)
    throw std::invalid_argument(std::string("trace: ") + what + " does not fit in 16 bits");
}

}  // namespace

void save_trace(const std::string& path, const SavedTrace& trace) {
  if (trace.top_k < 1) throw std::invalid_argument("trace: top_k must be >= 1");
  ByteWriter w;
  w.raw(kTraceMagic, 4);
  w.u32(1);  // version
  w.u64(trace.config_hash);
  w.u32(static_cast<uint32_t>(trace.top_k));
  w.u32(static_cast<uint32_t>(trace.num_experts));
  w.u32(static_cast<uint32_t>(trace.moe_layers));
  w.u32(static_cast<uint32_t>(trace.seq_len));
  w.u32(static_cast<uint32_t>(trace.num_classes));
  w.u32(static_cast<uint32_t>(trace.num_steps));
  w.u32(static_cast<uint32_t>(trace.timesteps.size()));
  for (int t : trace.timesteps) w.i32(t);
  w.u64(trace.events.size());
  for (const RoutingEvent& e : trace.events) {
    if (static_cast<int>(e.selected.size()) != trace.top_k)
      throw std::invalid_argument("trace: event selection width differs from top_k");
    check_u16(e.layer, "layer");
    check_u16(e.token, "token");
    w.u8(static_cast<uint8_t>(e.layer));
    w.u8(static_cast<uint8_t>(e.layer >> 8));
    w.u8(static_cast<uint8_t>(e.token));
    w.u8(static_cast<uint8_t>(e.token >> 8));
    w.u32(static_cast<uint32_t>(e.step_ordinal));
    w.u32(static_cast<uint32_t>(e.timestep));
    w.u32(static_cast<uint32_t>(e.class_label));
    for (int s : e.selected) {
      check_u16(s, "expert id");
      w.u8(static_cast<uint8_t>(s));
      w.u8(static_cast<uint8_t>(s >> 8));
    }
  }
  w.u32(crc32(w.bytes));
  write_file_bytes(path, w.bytes);
}

SavedTrace load_trace(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 12) throw std::runtime_error("trace file too short: " + path);
  const uint32_t stored = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                          static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8 |
                          static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16 |
                          static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw std::runtime_error("trace checksum mismatch: " + path);
  ByteReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kTraceMagic, 4) != 0)
    throw std::runtime_error("not a trace file: " + path);
  const uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error("unsupported trace version " + std::to_string(version));
  SavedTrace t;
  t.config_hash = r.u64();
  t.top_k = static_cast<int>(r.u32());
  t.num_experts = static_cast<int>(r.u32());
  t.moe_layers = static_cast<int>(r.u32());
  t.seq_len = static_cast<int>(r.u32());
  t.num_classes = static_cast<int>(r.u32());
  t.num_steps = static_cast<int>(r.u32());
  const uint32_t nts = r.u32();
  t.timesteps.resize(nts);
  for (uint32_t i = 0; i < nts; ++i) t.timesteps[i] = r.i32();
  const uint64_t count = r.u64();
  t.events.resize(count);
  for (uint64_t i = 0; i < count; ++i) {
    RoutingEvent& e = t.events[i];
    e.layer = r.u8() | (r.u8() << 8);
    e.token = r.u8() | (r.u8() << 8);
    e.step_ordinal = static_cast<int>(r.u32());
    e.timestep = static_cast<int>(r.u32());
    e.class_label = static_cast<int>(r.u32());
    e.selected.resize(t.top_k);
    for (int k = 0; k < t.top_k; ++k) e.selected[k] = r.u8() | (r.u8() << 8);
  }
  if (!r.done()) throw std::runtime_error("trace has trailing bytes: " + path);
  return t;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

std::string group_kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::by_class:
      return "class";
    case GroupKind::by_position:
      return "position";
    case GroupKind::by_timestep:
      return "timestep";
  }
  return "class";
}

GroupKind group_kind_from_name(const std::string& name) {
  if (name == "class") return GroupKind::by_class;
  if (name == "position") return GroupKind::by_position;
  if (name == "timestep") return GroupKind::by_timestep;
  throw std::invalid_argument("unknown group kind '" + name + "'");
}

RoutingStats make_empty_stats(GroupKind kind, int layers, int groups, int experts) {
  if (layers < 1 || groups < 1 || experts < 1)
    throw std::invalid_argument("stats: layers, groups and experts must all be >= 1");
  RoutingStats s;
  s.kind = kind;
  s.layers = layers;
  s.groups = groups;
  s.experts = experts;
  s.counts.assign(static_cast<size_t>(layers) * groups * experts, 0);
  s.totals.assign(static_cast<size_t>(layers) * groups, 0);
  return s;
}

RoutingStats aggregate(const SavedTrace& trace, GroupKind kind) {
  int groups;
  switch (kind) {
    case GroupKind::by_class:
      groups = trace.num_classes;
      break;
    case GroupKind::by_position:
      groups = trace.seq_len;
      break;
    case GroupKind::by_timestep:
    default:
      groups = trace.num_steps;
      break;
  }
  RoutingStats s = make_empty_stats(kind, trace.moe_layers, groups, trace.num_experts);
  for (const RoutingEvent& e : trace.events) {
    int g;
    switch (kind) {
      case GroupKind::by_class:
        g = e.class_label;
        break;
      case GroupKind::by_position:
        g = e.token;
        break;
      case GroupKind::by_timestep:
      default:
        g = e.step_ordinal;
        break;
    }
    if (e.layer < 0 || e.layer >= s.layers)
      throw std::out_of_range("aggregate: layer index out of range");
    if (g < 0 || g >= s.groups) throw std::out_of_range("aggregate: group index out of range");
    for (int sel : e.selected) {
      if (sel < 0 || sel >= s.experts)
        throw std::out_of_range("aggregate: expert index out of range");
      ++s.count(e.layer, g, sel);
      ++s.total(e.layer, g);
    }
  }
  return s;
}

RoutingStats merge(const RoutingStats& a, const RoutingStats& b) {
  if (a.kind != b.kind || a.layers != b.layers || a.groups != b.groups ||
      a.experts != b.experts)
    throw std::invalid_argument("merge: stats shapes or group kinds differ");
  RoutingStats out = a;
  for (size_t i = 0; i < out.counts.size(); ++i) out.counts[i] += b.counts[i];
  for (size_t i = 0; i < out.totals.size(); ++i) out.totals[i] += b.totals[i];
  return out;
}

std::vector<double> frequency_matrix(const RoutingStats& stats) {
  std::vector<double> freq(stats.counts.size(), 0.0);
  for (int l = 0; l < stats.layers; ++l)
    for (int g = 0; g < stats.groups; ++g) {
      const long long tot = stats.total(l, g);
      if (tot <= 0) continue;
      for (int e = 0; e < stats.experts; ++e)
        freq[(static_cast<size_t>(l) * stats.groups + g) * stats.experts + e] =
            static_cast<double>(stats.count(l, g, e)) / static_cast<double>(tot);
    }
  return freq;
}

EntropySummary entropy_summary(const RoutingStats& stats, bool normalized) {
  const std::vector<double> freq = frequency_matrix(stats);
  const double norm = normalized && stats.experts > 1
                          ? std::log(static_cast<double>(stats.experts))
                          : 1.0;
  EntropySummary out;
  out.per_group.assign(static_cast<size_t>(stats.layers) * stats.groups, 0.0);
  out.per_layer_mean.assign(stats.layers, 0.0);
  for (int l = 0; l < stats.layers; ++l) {
    double sum = 0.0;
    int observed = 0;
    for (int g = 0; g < stats.groups; ++g) {
      if (stats.total(l, g) <= 0) continue;
      double h = 0.0;
      for (int e = 0; e < stats.experts; ++e) {
        const double p = freq[(static_cast<size_t>(l) * stats.groups + g) * stats.experts + e];
        if (p > 0.0) h -= p * std::log(p);
      }
      h /= norm;
      out.per_group[static_cast<size_t>(l) * stats.groups + g] = h;
      sum += h;
      ++observed;
    }
    out.per_layer_mean[l] = observed > 0 ? sum / observed : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

namespace {

std::string format_freq(double x) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

}  // namespace

void export_csv(const RoutingStats& stats, const std::string& path) {
  std::ofstream f(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!f) throw std::runtime_error("cannot create CSV file: " + path);
  const std::vector<double> freq = frequency_matrix(stats);
  const std::string kind = group_kind_name(stats.kind);
  f << "layer,group_kind,group_id,expert_id,count,frequency\n";
  for (int l = 0; l < stats.layers; ++l)
    for (int g = 0; g < stats.groups; ++g)
      for (int e = 0; e < stats.experts; ++e)
        f << l << ',' << kind << ',' << g << ',' << e << ',' << stats.count(l, g, e) << ','
          << format_freq(freq[(static_cast<size_t>(l) * stats.groups + g) * stats.experts + e])
          << '\n';
  if (!f) throw std::runtime_error("failed writing CSV file: " + path);
}

RoutingStats import_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open CSV file: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("CSV file is empty: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "layer,group_kind,group_id,expert_id,count,frequency")
    throw std::runtime_error("unexpected CSV header in " + path);

  struct Row {
    int layer, group, expert;
    long long count;
  };
  std::vector<Row> rows;
  std::string kind_name;
  int max_layer = -1, max_group = -1, max_expert = -1;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field[6];
    for (int i = 0; i < 6; ++i)
      if (!std::getline(ss, field[i], i == 5 ? '\n' : ','))
        throw std::runtime_error("short CSV row in " + path + ": '" + line + "'");
    Row row;
    row.layer = std::stoi(field[0]);
    if (kind_name.empty())
      kind_name = field[1];
    else if (kind_name != field[1])
      throw std::runtime_error("mixed group kinds in CSV " + path);
    row.group = std::stoi(field[2]);
    row.expert = std::stoi(field[3]);
    row.count = std::stoll(field[4]);
    rows.push_back(row);
    max_layer = std::max(max_layer, row.layer);
    max_group = std::max(max_group, row.group);
    max_expert = std::max(max_expert, row.expert);
  }
  if (rows.empty()) throw std::runtime_error("CSV has no data rows: " + path);
  RoutingStats s = make_empty_stats(group_kind_from_name(kind_name), max_layer + 1, max_group + 1,
                                    max_expert + 1);
  for (const Row& r : rows) {
    s.count(r.layer, r.group, r.expert) += r.count;
    s.total(r.layer, r.group) += r.count;
  }
  return s;
}

void export_heatmap(const RoutingStats& stats, int layer, const std::string& path) {
  if (layer < 0 || layer >= stats.layers)
    throw std::invalid_argument("export_heatmap: layer out of range");
  const std::vector<double> freq = frequency_matrix(stats);
  double max_freq = 0.0;
  for (int g = 0; g < stats.groups; ++g)
    for (int e = 0; e < stats.experts; ++e)
      max_freq = std::max(
          max_freq, freq[(static_cast<size_t>(layer) * stats.groups + g) * stats.experts + e]);
  PnmImage img;
  img.channels = 1;
  img.w = stats.experts;
  img.h = stats.groups;
  img.pix.resize(static_cast<size_t>(img.w) * img.h, 255);
  if (max_freq > 0.0) {
    for (int g = 0; g < stats.groups; ++g)
      for (int e = 0; e < stats.experts; ++e) {
        const double fr =
            freq[(static_cast<size_t>(layer) * stats.groups + g) * stats.experts + e];
        img.pix[static_cast<size_t>(g) * stats.experts + e] =
            static_cast<uint8_t>(std::lround(255.0 * (1.0 - fr / max_freq)));
      }
  }
  write_pnm(path, img);
}

}  // namespace ditmoe

// Routing-frequency analysis: aggregates traced expert selections into
// per-layer count matrices grouped by class, token position or sampling
// step, with entropy summaries and CSV / heatmap export. Traces travel in a
// compact binary file format so shards can be merged.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditmoe/moe.hpp"

namespace ditmoe {

// A routing trace plus the sampling context the analyzer needs to size its
// group axes and to refuse merging traces from different model configs.
struct SavedTrace {
  uint64_t config_hash = 0;
  int top_k = 0;
  int num_experts = 0;
  int moe_layers = 0;
  int seq_len = 0;
  int num_classes = 0;
  int num_steps = 0;
  std::vector<int> timesteps;  // respaced schedule indices, decreasing
  std::vector<RoutingEvent> events;
};

// Binary container: magic "DMTR", version, header, fixed-width event
// records, trailing CRC-32 over everything before it.
void save_trace(const std::string& path, const SavedTrace& trace);
SavedTrace load_trace(const std::string& path);

enum class GroupKind { by_class, by_position, by_timestep };

std::string group_kind_name(GroupKind kind);
GroupKind group_kind_from_name(const std::string& name);

struct RoutingStats {
  GroupKind kind = GroupKind::by_class;
  int layers = 0;
  int groups = 0;
  int experts = 0;
  std::vector<long long> counts;  // [layers][groups][experts], row-major
  std::vector<long long> totals;  // [layers][groups], sum over experts

  long long& count(int l, int g, int e) {
    return counts[(static_cast<size_t>(l) * groups + g) * experts + e];
  }
  long long count(int l, int g, int e) const {
    return counts[(static_cast<size_t>(l) * groups + g) * experts + e];
  }
  long long& total(int l, int g) { return totals[static_cast<size_t>(l) * groups + g]; }
  long long total(int l, int g) const { return totals[static_cast<size_t>(l) * groups + g]; }
};

RoutingStats make_empty_stats(GroupKind kind, int layers, int groups, int experts);

// Group axes: by_class -> class label (num_classes groups), by_position ->
// token index (seq_len groups), by_timestep -> sampling-step ordinal
// (num_steps groups). Counts increment once per (event, selected expert).
RoutingStats aggregate(const SavedTrace& trace, GroupKind kind);

// Elementwise sum; shapes and kind must match.
RoutingStats merge(const RoutingStats& a, const RoutingStats& b);

// Per-(layer, group) row normalization of counts; rows with no observations
// come out as all zeros.
std::vector<double> frequency_matrix(const RoutingStats& stats);

struct EntropySummary {
  std::vector<double> per_layer_mean;  // [layers], averaged over observed groups
  std::vector<double> per_group;       // [layers][groups]; 0 for unobserved groups
};

// Shannon entropy in nats of each frequency row; normalized divides by
// ln(experts) for cross-config comparison.
EntropySummary entropy_summary(const RoutingStats& stats, bool normalized = false);

// CSV schema: layer,group_kind,group_id,expert_id,count,frequency -- one row
// per cell, header mandatory, LF endings, '.' decimal separator.
void export_csv(const RoutingStats& stats, const std::string& path);
RoutingStats import_csv(const std::string& path);

// 8-bit PGM, groups x experts, frequency [0, layer max] mapped to [255, 0]
// (darker = more frequent).
void export_heatmap(const RoutingStats& stats, int layer, const std::string& path);

}  // namespace ditmoe

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "spkv/kvcache.hpp"
#include "spkv/model.hpp"

namespace spkv {

// Binary keep/drop decisions per [layer][kv_head][position] for one stream.
using ZTraces = std::vector<std::vector<std::vector<std::uint8_t>>>;

ZTraces ztraces_from_gate_trace(const std::vector<GateTraceEntry>& trace, int n_layers,
                                int n_kv_heads, int T);
// One ZTraces per batch row. Heads that never gate get their semantic value
// (global keeps everything, window-only keeps nothing).
std::vector<ZTraces> ztraces_from_forward(const Model& m, const ForwardResult& fr, int B,
                                          int T, bool force_global = false);

// Long-term retention accounting. Only positions old enough to have faced
// eviction count: the trailing window is excluded everywhere.
struct DensityReport {
  int n_layers = 0;
  int n_kv_heads = 0;
  std::vector<long long> retained;  // [l*K + k] kept entries among eligible
  std::vector<long long> tokens;    // [l*K + k] eligible positions

  double d(int l, int k) const;  // per-head density; 1 when nothing was eligible
  double rho() const;            // pooled density over every (l, k, position)
  long long total_tokens() const;
  long long total_retained() const;
};

DensityReport density(const ZTraces& z, int window);
DensityReport pool_density(const std::vector<DensityReport>& parts);

void write_density_report_json(const std::string& path, const DensityReport& r);
DensityReport read_density_report_json(const std::string& path);

// Which kv heads to make global in a hybrid architecture.
enum class HeadStrategy { A_3to1_early, B_3to1_offset, C_random, D_densest };
const char* head_strategy_name(HeadStrategy s);
HeadStrategy head_strategy_from_name(const std::string& name);

struct HeadSelection {
  HeadStrategy strategy = HeadStrategy::D_densest;
  int budget = 0;
  std::vector<std::pair<int, int>> heads;  // sorted (layer, kv_head)
};

// A/B pick whole layers on a 3:1 local:global cadence (A anchors a global
// layer at 0, B delays it to 3; the last layer is always global) and need
// budget divisible by n_kv_heads. C samples uniformly (needs rng). D takes
// the densest heads, ties toward the lower (layer, head).
HeadSelection select_heads(HeadStrategy s, int budget, const DensityReport& report,
                           Rng* rng = nullptr);

// Fraction of all long-term-retained entries that live under the selection.
double coverage(const HeadSelection& sel, const DensityReport& report);

// Forward cost per token: 2N + 2 * n_layers * n_ctx * d_attn, the attention
// term scaled by density when sparse.
struct FlopsModel {
  double n_params = 0.0;  // non-embedding parameters
  int n_layers = 0;
  double n_ctx = 0.0;
  double d_attn = 0.0;  // n_heads * d_head
  double rho = 1.0;
};

double flops_per_token(const FlopsModel& f, bool sparse);

// Block-granular skippability: over all (head, query tile, key block)
// triples where the block sits entirely outside every tile query's window,
// the share whose gates are all zero.
struct BlockSkipStats {
  long long eligible = 0;
  long long skippable = 0;
  double fraction() const { return eligible == 0 ? 0.0 : static_cast<double>(skippable) / eligible; }
};

BlockSkipStats block_skip_stats(const ZTraces& z, int window, int block = 64);

// L(C) = L_inf + A * C^(-alpha), fit by a 1000-point grid on L_inf and
// log-linear least squares for (A, alpha) at each candidate.
struct PowerLawFit {
  double l_inf = 0.0;
  double a = 0.0;
  double alpha = 0.0;
  double r2 = 0.0;
  double rss = 0.0;
};

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points);

// Decode-time cache reads relative to a dense cache: (w + rho*(T-w)) / T,
// averaged over heads.
double memory_traffic_ratio(const DensityReport& report, long long seq_len, int window);

struct SweepRow {
  float tau = 0.0f;
  double rho = 0.0;
  double nll = 0.0;
};

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace spkv

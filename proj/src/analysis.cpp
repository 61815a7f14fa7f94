#include "spkv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace spkv {

ZTraces ztraces_from_gate_trace(const std::vector<GateTraceEntry>& trace, int n_layers,
                                int n_kv_heads, int T) {
  ZTraces z(static_cast<std::size_t>(n_layers));
  for (auto& layer : z)
    layer.assign(static_cast<std::size_t>(n_kv_heads),
                 std::vector<std::uint8_t>(static_cast<std::size_t>(T), 0));
  std::vector<std::uint8_t> seen(
      static_cast<std::size_t>(n_layers) * n_kv_heads * T, 0);
  for (const GateTraceEntry& e : trace) {
    if (e.layer < 0 || e.layer >= n_layers || e.head < 0 || e.head >= n_kv_heads ||
        e.position < 0 || e.position >= T)
      throw std::runtime_error("ztraces_from_gate_trace: entry out of range");
    const std::size_t flat =
        (static_cast<std::size_t>(e.layer) * n_kv_heads + e.head) * T + e.position;
    if (seen[flat]) throw std::runtime_error("ztraces_from_gate_trace: duplicate entry");
    seen[flat] = 1;
    z[static_cast<std::size_t>(e.layer)][static_cast<std::size_t>(e.head)]
     [static_cast<std::size_t>(e.position)] = e.z ? 1 : 0;
  }
  for (std::uint8_t s : seen)
    if (!s) throw std::runtime_error("ztraces_from_gate_trace: missing entries");
  return z;
}

std::vector<ZTraces> ztraces_from_forward(const Model& m, const ForwardResult& fr, int B,
                                          int T, bool force_global) {
  const int L = m.cfg.n_layers, K = m.cfg.n_kv_heads;
  std::vector<ZTraces> out(static_cast<std::size_t>(B));
  for (ZTraces& z : out) {
    z.assign(static_cast<std::size_t>(L), {});
    for (auto& layer : z)
      layer.assign(static_cast<std::size_t>(K),
                   std::vector<std::uint8_t>(static_cast<std::size_t>(T), 0));
  }
  for (int l = 0; l < L; ++l) {
    const LayerGateInfo& info = fr.gates[static_cast<std::size_t>(l)];
    for (int k = 0; k < K; ++k) {
      AttentionKind kind =
          force_global ? AttentionKind::Global : m.cfg.effective_kind(l, k);
      for (int b = 0; b < B; ++b) {
        std::vector<std::uint8_t>& row = out[static_cast<std::size_t>(b)]
                                            [static_cast<std::size_t>(l)]
                                            [static_cast<std::size_t>(k)];
        switch (kind) {
          case AttentionKind::Global:
            std::fill(row.begin(), row.end(), std::uint8_t{1});
            break;
          case AttentionKind::SlidingWindowOnly:
            break;  // stays 0
          case AttentionKind::SelfPrunedKV: {
            if (!info.field.z.st)
              throw std::runtime_error("ztraces_from_forward: gated layer without z");
            const float* zp =
                info.field.z.ptr() + (static_cast<std::size_t>(b) * K + k) * T;
            for (int t = 0; t < T; ++t) row[static_cast<std::size_t>(t)] = zp[t] != 0.0f;
            break;
          }
        }
      }
    }
  }
  return out;
}

double DensityReport::d(int l, int k) const {
  const std::size_t i = static_cast<std::size_t>(l) * n_kv_heads + k;
  if (tokens[i] == 0) return 1.0;
  return static_cast<double>(retained[i]) / static_cast<double>(tokens[i]);
}

long long DensityReport::total_tokens() const {
  return std::accumulate(tokens.begin(), tokens.end(), 0LL);
}

long long DensityReport::total_retained() const {
  return std::accumulate(retained.begin(), retained.end(), 0LL);
}

double DensityReport::rho() const {
  const long long tot = total_tokens();
  if (tot == 0) return 1.0;
  return static_cast<double>(total_retained()) / static_cast<double>(tot);
}

DensityReport density(const ZTraces& z, int window) {
  if (window < 1) throw std::runtime_error("density: window must be >= 1");
  if (z.empty() || z[0].empty()) throw std::runtime_error("density: empty traces");
  DensityReport r;
  r.n_layers = static_cast<int>(z.size());
  r.n_kv_heads = static_cast<int>(z[0].size());
  const int T = static_cast<int>(z[0][0].size());
  const int eligible = std::max(0, T - window);
  r.retained.assign(static_cast<std::size_t>(r.n_layers) * r.n_kv_heads, 0);
  r.tokens.assign(static_cast<std::size_t>(r.n_layers) * r.n_kv_heads, 0);
  for (int l = 0; l < r.n_layers; ++l) {
    if (static_cast<int>(z[static_cast<std::size_t>(l)].size()) != r.n_kv_heads)
      throw std::runtime_error("density: ragged head axis");
    for (int k = 0; k < r.n_kv_heads; ++k) {
      const std::vector<std::uint8_t>& row = z[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)];
      if (static_cast<int>(row.size()) != T) throw std::runtime_error("density: ragged time axis");
      const std::size_t i = static_cast<std::size_t>(l) * r.n_kv_heads + k;
      r.tokens[i] = eligible;
      for (int t = 0; t < eligible; ++t) r.retained[i] += row[static_cast<std::size_t>(t)] ? 1 : 0;
    }
  }
  return r;
}

DensityReport pool_density(const std::vector<DensityReport>& parts) {
  if (parts.empty()) throw std::runtime_error("pool_density: no parts");
  DensityReport r = parts[0];
  for (std::size_t p = 1; p < parts.size(); ++p) {
    if (parts[p].n_layers != r.n_layers || parts[p].n_kv_heads != r.n_kv_heads)
      throw std::runtime_error("pool_density: shape mismatch");
    for (std::size_t i = 0; i < r.retained.size(); ++i) {
      r.retained[i] += parts[p].retained[i];
      r.tokens[i] += parts[p].tokens[i];
    }
  }
  return r;
}

void write_density_report_json(const std::string& path, const DensityReport& r) {
  nlohmann::ordered_json j;
  j["n_layers"] = r.n_layers;
  j["n_kv_heads"] = r.n_kv_heads;
  nlohmann::ordered_json kept = nlohmann::ordered_json::array();
  nlohmann::ordered_json toks = nlohmann::ordered_json::array();
  nlohmann::ordered_json dens = nlohmann::ordered_json::array();
  for (int l = 0; l < r.n_layers; ++l) {
    nlohmann::ordered_json kr = nlohmann::ordered_json::array();
    nlohmann::ordered_json tr = nlohmann::ordered_json::array();
    nlohmann::ordered_json dr = nlohmann::ordered_json::array();
    for (int k = 0; k < r.n_kv_heads; ++k) {
      const std::size_t i = static_cast<std::size_t>(l) * r.n_kv_heads + k;
      kr.push_back(r.retained[i]);
      tr.push_back(r.tokens[i]);
      dr.push_back(r.d(l, k));
    }
    kept.push_back(kr);
    toks.push_back(tr);
    dens.push_back(dr);
  }
  j["retained"] = kept;
  j["tokens"] = toks;
  j["density"] = dens;
  j["rho"] = r.rho();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

DensityReport read_density_report_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  DensityReport r;
  r.n_layers = j.at("n_layers").get<int>();
  r.n_kv_heads = j.at("n_kv_heads").get<int>();
  r.retained.reserve(static_cast<std::size_t>(r.n_layers) * r.n_kv_heads);
  r.tokens.reserve(static_cast<std::size_t>(r.n_layers) * r.n_kv_heads);
  for (const auto& row : j.at("retained")) for (const auto& v : row) r.retained.push_back(v.get<long long>());
  for (const auto& row : j.at("tokens")) for (const auto& v : row) r.tokens.push_back(v.get<long long>());
  if (r.retained.size() != static_cast<std::size_t>(r.n_layers) * r.n_kv_heads ||
      r.tokens.size() != r.retained.size())
    throw std::runtime_error("density report: matrix shape mismatch in " + path);
  return r;
}

const char* head_strategy_name(HeadStrategy s) {
  switch (s) {
    case HeadStrategy::A_3to1_early: return "a";
    case HeadStrategy::B_3to1_offset: return "b";
    case HeadStrategy::C_random: return "c";
    case HeadStrategy::D_densest: return "d";
  }
  throw std::runtime_error("head_strategy_name: bad enum");
}

HeadStrategy head_strategy_from_name(const std::string& name) {
  for (HeadStrategy s : {HeadStrategy::A_3to1_early, HeadStrategy::B_3to1_offset,
                         HeadStrategy::C_random, HeadStrategy::D_densest})
    if (name == head_strategy_name(s)) return s;
  throw std::runtime_error("unknown head selection strategy: " + name);
}

namespace {

std::vector<std::pair<int, int>> whole_layers_pattern(int first_global, int budget_layers,
                                                      int n_layers, int n_heads) {
  std::vector<int> picked{n_layers - 1};  // last layer is always global
  for (int l = first_global; l < n_layers && static_cast<int>(picked.size()) < budget_layers;
       l += 4)
    if (l != n_layers - 1) picked.push_back(l);
  if (static_cast<int>(picked.size()) != budget_layers)
    throw std::runtime_error("select_heads: 3:1 pattern cannot supply this budget");
  std::sort(picked.begin(), picked.end());
  std::vector<std::pair<int, int>> heads;
  for (int l : picked)
    for (int k = 0; k < n_heads; ++k) heads.emplace_back(l, k);
  return heads;
}

}  // namespace

HeadSelection select_heads(HeadStrategy s, int budget, const DensityReport& report,
                           Rng* rng) {
  const int L = report.n_layers, K = report.n_kv_heads;
  const int total = L * K;
  if (L < 1 || K < 1) throw std::runtime_error("select_heads: empty report");
  if (budget < 0 || budget > total) throw std::runtime_error("select_heads: budget out of range");
  HeadSelection sel;
  sel.strategy = s;
  sel.budget = budget;
  switch (s) {
    case HeadStrategy::A_3to1_early:
    case HeadStrategy::B_3to1_offset: {
      if (budget % K != 0)
        throw std::runtime_error("select_heads: A/B budgets must be whole layers");
      const int first = s == HeadStrategy::A_3to1_early ? 0 : 3;
      sel.heads = whole_layers_pattern(first, budget / K, L, K);
      break;
    }
    case HeadStrategy::C_random: {
      if (!rng) throw std::runtime_error("select_heads: strategy c needs an rng");
      std::vector<int> idx(static_cast<std::size_t>(total));
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < budget; ++i) {
        const int j = i + static_cast<int>(rng->next_below(static_cast<std::uint64_t>(total - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      }
      for (int i = 0; i < budget; ++i)
        sel.heads.emplace_back(idx[static_cast<std::size_t>(i)] / K, idx[static_cast<std::size_t>(i)] % K);
      std::sort(sel.heads.begin(), sel.heads.end());
      break;
    }
    case HeadStrategy::D_densest: {
      std::vector<std::pair<int, int>> all;
      for (int l = 0; l < L; ++l)
        for (int k = 0; k < K; ++k) all.emplace_back(l, k);
      std::sort(all.begin(), all.end(), [&](const auto& x, const auto& y) {
        const double dx = report.d(x.first, x.second);
        const double dy = report.d(y.first, y.second);
        if (dx != dy) return dx > dy;
        return x < y;  // ties toward the lower (layer, head)
      });
      all.resize(static_cast<std::size_t>(budget));
      std::sort(all.begin(), all.end());
      sel.heads = std::move(all);
      break;
    }
  }
  return sel;
}

double coverage(const HeadSelection& sel, const DensityReport& report) {
  const long long tot = report.total_retained();
  if (report.total_tokens() == 0 || tot == 0)
    throw std::runtime_error("coverage: report has no retained entries");
  long long kept = 0;
  for (const auto& [l, k] : sel.heads) {
    if (l < 0 || l >= report.n_layers || k < 0 || k >= report.n_kv_heads)
      throw std::runtime_error("coverage: selection outside report");
    kept += report.retained[static_cast<std::size_t>(l) * report.n_kv_heads + k];
  }
  return static_cast<double>(kept) / static_cast<double>(tot);
}

double flops_per_token(const FlopsModel& f, bool sparse) {
  if (f.n_params < 0 || f.n_layers < 0 || f.n_ctx < 0 || f.d_attn < 0 || f.rho < 0)
    throw std::runtime_error("flops_per_token: negative model field");
  const double attn = 2.0 * f.n_layers * f.n_ctx * f.d_attn;
  return 2.0 * f.n_params + (sparse ? f.rho * attn : attn);
}

BlockSkipStats block_skip_stats(const ZTraces& z, int window, int block) {
  if (block < 1) throw std::runtime_error("block_skip_stats: block must be >= 1");
  if (window < 1) throw std::runtime_error("block_skip_stats: window must be >= 1");
  BlockSkipStats st;
  if (z.empty() || z[0].empty()) return st;
  const int T = static_cast<int>(z[0][0].size());
  for (const auto& layer : z)
    for (const auto& head : layer) {
      // per key block: are all gates zero?
      for (int b0 = 0; b0 < T; b0 += block) {
        const int b1 = std::min(T, b0 + block);
        bool all_zero = true;
        for (int s = b0; s < b1; ++s) all_zero = all_zero && head[static_cast<std::size_t>(s)] == 0;
        // a query tile [q0,q1) can skip this block iff every key in it is
        // out-of-window for every query: b1 <= q0 - window + 1
        for (int q0 = 0; q0 < T; q0 += block) {
          if (b1 > q0 - window + 1) continue;
          ++st.eligible;
          if (all_zero) ++st.skippable;
        }
      }
    }
  return st;
}

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points) {
  const int n = static_cast<int>(points.size());
  if (n < 4) throw std::runtime_error("fit_power_law: need at least 4 points");
  double min_nll = points[0].second;
  for (int i = 0; i < n; ++i) {
    if (points[i].first <= 0.0) throw std::runtime_error("fit_power_law: compute must be positive");
    if (i > 0 && points[i].first <= points[i - 1].first)
      throw std::runtime_error("fit_power_law: compute must be strictly increasing");
    min_nll = std::min(min_nll, points[i].second);
  }
  if (min_nll <= 0.0) throw std::runtime_error("fit_power_law: losses must be positive");

  std::vector<double> lx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) lx[static_cast<std::size_t>(i)] = std::log(points[static_cast<std::size_t>(i)].first);

  PowerLawFit best;
  best.rss = std::numeric_limits<double>::infinity();
  const int grid = 1000;
  std::vector<double> y(static_cast<std::size_t>(n));
  for (int g = 0; g < grid; ++g) {
    const double l_inf = min_nll * (g + 0.5) / grid;
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) ok = points[static_cast<std::size_t>(i)].second > l_inf;
    if (!ok) continue;  // candidate floor not below every loss
    for (int i = 0; i < n; ++i)
      y[static_cast<std::size_t>(i)] = std::log(points[static_cast<std::size_t>(i)].second - l_inf);
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) { mx += lx[static_cast<std::size_t>(i)]; my += y[static_cast<std::size_t>(i)]; }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
      const double dx = lx[static_cast<std::size_t>(i)] - mx;
      const double dy = y[static_cast<std::size_t>(i)] - my;
      sxx += dx * dx;
      sxy += dx * dy;
      syy += dy * dy;
    }
    if (sxx == 0.0) continue;
    const double slope = sxy / sxx;
    const double icept = my - slope * mx;
    double rss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double resid = y[static_cast<std::size_t>(i)] - (icept + slope * lx[static_cast<std::size_t>(i)]);
      rss += resid * resid;
    }
    if (rss < best.rss) {
      best.rss = rss;
      best.l_inf = l_inf;
      best.alpha = -slope;
      best.a = std::exp(icept);
      best.r2 = syy == 0.0 ? 1.0 : 1.0 - rss / syy;
    }
  }
  if (!std::isfinite(best.rss))
    throw std::runtime_error("fit_power_law: no feasible floor candidate");
  return best;
}

double memory_traffic_ratio(const DensityReport& report, long long seq_len, int window) {
  if (seq_len < 1) throw std::runtime_error("memory_traffic_ratio: seq_len must be >= 1");
  const double t = static_cast<double>(seq_len);
  const double w = static_cast<double>(std::min<long long>(window, seq_len));
  const double beyond = static_cast<double>(std::max<long long>(seq_len - window, 0));
  double acc = 0.0;
  const int heads = report.n_layers * report.n_kv_heads;
  if (heads == 0) throw std::runtime_error("memory_traffic_ratio: empty report");
  for (int l = 0; l < report.n_layers; ++l)
    for (int k = 0; k < report.n_kv_heads; ++k) acc += (w + report.d(l, k) * beyond) / t;
  return acc / heads;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  std::fputs("tau,rho,nll\n", f);
  for (const SweepRow& r : rows)
    std::fprintf(f, "%.9g,%.9g,%.9g\n", static_cast<double>(r.tau), r.rho, r.nll);
  std::fclose(f);
}

}  // namespace spkv

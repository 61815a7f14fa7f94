#include "spkv/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace spkv {

namespace {
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}

const char* policy_kind_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::None: return "none";
    case PolicyKind::StreamingLLM: return "streaming_llm";
    case PolicyKind::H2O: return "h2o";
    case PolicyKind::Random: return "random";
  }
  throw std::runtime_error("policy_kind_name: bad enum");
}

PolicyKind policy_kind_from_name(const std::string& name) {
  for (PolicyKind k : {PolicyKind::None, PolicyKind::StreamingLLM, PolicyKind::H2O,
                       PolicyKind::Random})
    if (name == policy_kind_name(k)) return k;
  throw std::runtime_error("unknown eviction policy: " + name);
}

void EvictionPolicy::validate() const {
  if (window < 1) throw std::runtime_error("eviction policy: window must be >= 1");
  if (chunk_size < 1) throw std::runtime_error("eviction policy: chunk_size must be >= 1");
  if (n_sinks < 0) throw std::runtime_error("eviction policy: n_sinks must be >= 0");
  if (budget_fraction < 0.0f || budget_fraction > 1.0f)
    throw std::runtime_error("eviction policy: budget_fraction must be in [0,1]");
  if (keep_fraction < 0.0f || keep_fraction > 1.0f)
    throw std::runtime_error("eviction policy: keep_fraction must be in [0,1]");
}

std::string EvictionPolicy::describe() const {
  char buf[96];
  switch (kind) {
    case PolicyKind::None:
      return "none";
    case PolicyKind::StreamingLLM:
      std::snprintf(buf, sizeof(buf), "streaming_llm(sinks=%d,w=%d)", n_sinks, window);
      return buf;
    case PolicyKind::H2O:
      std::snprintf(buf, sizeof(buf), "h2o(b=%.3f,sinks=%d,w=%d)",
                    static_cast<double>(budget_fraction), n_sinks, window);
      return buf;
    case PolicyKind::Random:
      std::snprintf(buf, sizeof(buf), "random(p=%.3f,sinks=%d,w=%d)",
                    static_cast<double>(keep_fraction), n_sinks, window);
      return buf;
  }
  throw std::runtime_error("describe: bad enum");
}

void h2o_accumulate(const std::vector<Tensor>& attn_probs, int row_begin, int row_end,
                    std::vector<double>& scores) {
  for (const Tensor& p : attn_probs) {
    const int B = p.dim(0), H = p.dim(1), T = p.dim(2);
    if (row_end > T) throw std::runtime_error("h2o_accumulate: row range exceeds T");
    const float* d = p.ptr();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int t = row_begin; t < row_end; ++t) {
          const float* row = d + ((static_cast<std::size_t>(b) * H + h) * T + t) * T;
          for (int s = 0; s <= t && s < static_cast<int>(scores.size()); ++s)
            scores[static_cast<std::size_t>(s)] += row[s];
        }
  }
}

std::vector<int> h2o_topk(const std::vector<double>& scores,
                          const std::vector<int>& candidates, int k) {
  std::vector<int> order = candidates;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;  // ties toward the lower position
  });
  if (k < 0) k = 0;
  if (k < static_cast<int>(order.size())) order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<std::uint8_t> streaming_llm_retained(int prefix_len, int window, int n_sinks) {
  std::vector<std::uint8_t> r(static_cast<std::size_t>(prefix_len), 0);
  for (int s = 0; s < prefix_len; ++s)
    if (s < n_sinks || s >= prefix_len - window) r[static_cast<std::size_t>(s)] = 1;
  return r;
}

namespace {

// 0 where the query may look, -inf where the entry has been evicted; the
// upper triangle stays 0 because causality is already in the base bias
Tensor visibility_bias(const std::vector<std::vector<std::uint8_t>>& vis, int L) {
  Tensor e = Tensor::zeros({L, L}, false);
  float* d = e.ptr();
  for (int t = 0; t < L; ++t) {
    float* row = d + static_cast<std::size_t>(t) * L;
    for (int s = 0; s <= t; ++s)
      if (!vis[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)]) row[s] = kNegInf;
  }
  return e;
}

}  // namespace

PrefillResult chunked_prefill_eval(const Model& m, const std::vector<int>& tokens,
                                   const EvictionPolicy& policy) {
  policy.validate();
  const int T = static_cast<int>(tokens.size());
  if (T < 2) throw std::runtime_error("chunked_prefill_eval: need at least 2 tokens");
  NoGradGuard ng;

  std::vector<std::vector<std::uint8_t>> vis(static_cast<std::size_t>(T));
  std::vector<std::uint8_t> retained(static_cast<std::size_t>(T), 0);
  std::vector<std::uint8_t> decided(static_cast<std::size_t>(T), 0);  // Random: sticky draws
  std::vector<double> scores(static_cast<std::size_t>(T), 0.0);       // H2O
  Rng rng(policy.seed);
  const bool need_probs = policy.kind == PolicyKind::H2O;

  PrefillResult out;
  Tensor final_logits;
  std::vector<Tensor> probs;

  for (int cs = 0; cs < T; cs += policy.chunk_size) {
    const int ce = std::min(T, cs + policy.chunk_size);
    // freeze this chunk's visibility: survivors so far plus the chunk itself
    for (int t = cs; t < ce; ++t) {
      std::vector<std::uint8_t>& row = vis[static_cast<std::size_t>(t)];
      row.assign(static_cast<std::size_t>(t) + 1, 0);
      for (int s = 0; s < cs; ++s) row[static_cast<std::size_t>(s)] = retained[static_cast<std::size_t>(s)];
      for (int s = cs; s <= t; ++s) row[static_cast<std::size_t>(s)] = 1;
    }
    if (need_probs) {
      Tensor extra = visibility_bias(vis, ce);
      GateRuntime rt;
      rt.force_global = true;
      rt.extra_bias = &extra;
      rt.attn_probs = &probs;
      std::vector<int> prefix(tokens.begin(), tokens.begin() + ce);
      ForwardResult fr = m.forward(prefix, 1, ce, rt);
      h2o_accumulate(probs, cs, ce, scores);
      if (ce == T) final_logits = fr.logits;
    }

    for (int s = cs; s < ce; ++s) retained[static_cast<std::size_t>(s)] = 1;
    const int L = ce;
    const int win_start = std::max(0, L - policy.window);
    switch (policy.kind) {
      case PolicyKind::None:
        break;
      case PolicyKind::StreamingLLM:
        for (int s = 0; s < win_start; ++s)
          retained[static_cast<std::size_t>(s)] = s < policy.n_sinks ? 1 : 0;
        break;
      case PolicyKind::H2O: {
        std::vector<int> cand;  // evicted entries never come back
        for (int s = policy.n_sinks; s < win_start; ++s)
          if (retained[static_cast<std::size_t>(s)]) cand.push_back(s);
        const int eligible = std::max(0, win_start - std::min(policy.n_sinks, win_start));
        const int k = static_cast<int>(
            std::lround(static_cast<double>(policy.budget_fraction) * eligible));
        std::vector<int> keep = h2o_topk(scores, cand, k);
        for (int s : cand) retained[static_cast<std::size_t>(s)] = 0;
        for (int s : keep) retained[static_cast<std::size_t>(s)] = 1;
        break;
      }
      case PolicyKind::Random:
        for (int s = 0; s < win_start; ++s) {
          std::uint8_t& dec = decided[static_cast<std::size_t>(s)];
          if (!dec) {
            dec = 1;
            if (s < policy.n_sinks) continue;  // sinks never face the draw
            if (retained[static_cast<std::size_t>(s)])
              retained[static_cast<std::size_t>(s)] =
                  rng.next_float() < policy.keep_fraction ? 1 : 0;
          }
        }
        break;
    }
    ChunkLogEntry e;
    e.prefix_len = L;
    e.outside_window = win_start;
    for (int s = 0; s < win_start; ++s)
      e.retained_outside += retained[static_cast<std::size_t>(s)] ? 1 : 0;
    out.log.push_back(e);
  }

  if (!need_probs) {
    Tensor extra = visibility_bias(vis, T);
    GateRuntime rt;
    rt.force_global = true;
    rt.extra_bias = &extra;
    final_logits = m.forward(tokens, 1, T, rt).logits;
  }

  out.nll = per_position_nll(final_logits, tokens);
  double acc = 0.0;
  for (float v : out.nll) acc += v;
  out.mean_nll = out.nll.empty() ? 0.0 : acc / static_cast<double>(out.nll.size());

  double dsum = 0.0;
  int dcnt = 0;
  for (const ChunkLogEntry& e : out.log)
    if (e.outside_window > 0) {
      dsum += static_cast<double>(e.retained_outside) / e.outside_window;
      ++dcnt;
    }
  out.density = dcnt == 0 ? 1.0 : dsum / dcnt;
  out.final_retained = std::move(retained);
  return out;
}

void write_baseline_jsonl(const std::string& path, const std::vector<BaselineRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const BaselineRow& r : rows) {
    nlohmann::ordered_json j;
    j["policy"] = r.policy;
    j["density"] = r.density;
    j["nll"] = r.nll;
    j["delta_nll_vs_dense"] = r.delta_nll_vs_dense;
    const std::string line = j.dump() + "\n";
    if (std::fwrite(line.data(), 1, line.size(), f) != line.size()) {
      std::fclose(f);
      throw std::runtime_error("short write: " + path);
    }
  }
  std::fclose(f);
}

}  // namespace spkv

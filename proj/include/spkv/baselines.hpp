#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spkv/model.hpp"

namespace spkv {

// Post-hoc cache-compression policies applied during chunked prefill on a
// dense model. The policy decides, after each chunk, which past positions
// stay readable; entries outside the retained set are gone for good (their
// cached k/v can never be re-admitted, matching how a real cache evicts).
enum class PolicyKind { None, StreamingLLM, H2O, Random };

const char* policy_kind_name(PolicyKind k);
PolicyKind policy_kind_from_name(const std::string& name);

struct EvictionPolicy {
  PolicyKind kind = PolicyKind::None;
  int window = 128;     // always-retained recency window
  int chunk_size = 16;  // positions consumed between eviction passes
  int n_sinks = 0;      // StreamingLLM / H2O: always-retained prefix
  float budget_fraction = 0.0f;  // H2O: kept fraction of non-window non-sink positions
  float keep_fraction = 0.0f;    // Random: per-position keep probability
  std::uint64_t seed = 0;        // Random draws

  void validate() const;
  std::string describe() const;  // e.g. "h2o(b=0.20,sinks=4)"
};

struct ChunkLogEntry {
  int prefix_len = 0;        // positions processed so far
  int outside_window = 0;    // prefix_len - window, clamped at 0
  int retained_outside = 0;  // survivors among those
};

struct PrefillResult {
  std::vector<float> nll;  // nll[t] = -log p(tokens[t+1] | visible prefix)
  double mean_nll = 0.0;
  double density = 0.0;  // mean over chunk boundaries of retained/outside
  std::vector<ChunkLogEntry> log;
  std::vector<std::uint8_t> final_retained;  // [T] survivor flags at the end
};

// Appendix-style protocol: the sequence is consumed chunk_size positions at a
// time, each new query attends only to currently retained positions plus its
// own chunk, and the policy evicts after every chunk. Runs the model dense
// (force_global); gating plays no part here.
PrefillResult chunked_prefill_eval(const Model& m, const std::vector<int>& tokens,
                                   const EvictionPolicy& policy);

// Accumulate heavy-hitter scores from one chunk's attention weights:
// scores[s] += sum over layers, heads, and query rows in [row_begin,row_end)
// of the probability mass placed on key position s.
void h2o_accumulate(const std::vector<Tensor>& attn_probs, int row_begin, int row_end,
                    std::vector<double>& scores);

// The k highest-scoring candidates; ties broken toward the lower position.
std::vector<int> h2o_topk(const std::vector<double>& scores,
                          const std::vector<int>& candidates, int k);

// Direct construction of the sinks-plus-window retained set, for checking the
// evaluator against.
std::vector<std::uint8_t> streaming_llm_retained(int prefix_len, int window, int n_sinks);

struct BaselineRow {
  std::string policy;
  double density = 0.0;
  double nll = 0.0;
  double delta_nll_vs_dense = 0.0;
};

void write_baseline_jsonl(const std::string& path, const std::vector<BaselineRow>& rows);

}  // namespace spkv

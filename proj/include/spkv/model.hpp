#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spkv/gating.hpp"
#include "spkv/tensor.hpp"

namespace spkv {

enum class AttentionKind { Global, SlidingWindowOnly, SelfPrunedKV };

const char* attention_kind_name(AttentionKind k);
AttentionKind attention_kind_from_name(const std::string& name);

struct HeadOverride {
  int layer = 0;
  int kv_head = 0;
  AttentionKind kind = AttentionKind::Global;
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_q_heads = 8;
  int n_kv_heads = 2;
  int d_head = 16;
  int d_ffn = 512;
  int vocab_size = 128;
  int max_seq_len = 256;
  float rope_base = 10000.0f;
  // empty means every layer SelfPrunedKV
  std::vector<AttentionKind> layer_kinds;
  std::vector<HeadOverride> head_overrides;

  static ModelConfig toy();
  void validate() const;
  int group_size() const { return n_q_heads / n_kv_heads; }
  AttentionKind layer_kind(int layer) const;
  AttentionKind effective_kind(int layer, int kv_head) const;
};

// Per-forward gating control; the persistent thresholds/window live in
// GateConfig on the model.
struct GateRuntime {
  GateMode mode = GateMode::Soft;
  float alpha = 0.0f;      // Annealed
  Rng* rng = nullptr;      // BernoulliSTE draws
  bool force_global = false;  // dense runs: ignore gating entirely
  // Extra additive attention bias [T,T], broadcast over batch and heads;
  // evaluation-only (no gradient flows into it). Used to restrict visibility
  // to an externally chosen retained set.
  const Tensor* extra_bias = nullptr;
  // When set, receives the per-layer post-softmax attention weights
  // [B,n_q_heads,T,T]; cleared at the start of each forward.
  std::vector<Tensor>* attn_probs = nullptr;
};

struct LayerParams {
  Tensor attn_norm_w, wq, wk, wv, wo;
  Tensor ffn_norm_w, ffn_w1, ffn_w2;
  UtilityPredictor predictor;
};

struct LayerGateInfo {
  GateField field;                      // u (and z when available); undefined if no gated head
  std::vector<std::uint8_t> spkv_heads; // which kv heads are actually gated
};

struct ForwardResult {
  Tensor logits;  // [B,T,vocab]
  std::vector<LayerGateInfo> gates;
};

struct ParamRef {
  Tensor* t;
  bool predictor;
};

struct Model {
  ModelConfig cfg;
  GateConfig gate;
  Tensor embedding;  // [vocab, d_model], tied with the unembedding
  std::vector<LayerParams> layers;
  Tensor final_norm_w;

  static Model init(const ModelConfig& cfg, const GateConfig& gate, Rng& rng);

  ForwardResult forward(const std::vector<int>& tokens, int B, int T,
                        const GateRuntime& rt) const;

  // Stable parameter order (matches the checkpoint payload): embedding, then
  // per layer [attn_norm, wq, wk, wv, wo, ffn_norm, ffn_w1, ffn_w2,
  // predictor.w1, b1, w2, b2], then final norm.
  std::vector<ParamRef> param_refs();
  std::vector<const Tensor*> param_list() const;
  std::size_t n_params() const;
  void zero_grads();
};

// Mean next-token cross-entropy: logits[b,t] predicts tokens[b,t+1], counted
// where loss_mask[b,t+1] = 1. loss_mask is aligned with tokens.
Tensor next_token_loss(const Tensor& logits, const std::vector<int>& tokens,
                       const std::vector<std::uint8_t>& loss_mask);

// Per-position NLL of token t+1 given prefix, for evaluation reporting.
std::vector<float> per_position_nll(const Tensor& logits, const std::vector<int>& tokens);

}  // namespace spkv

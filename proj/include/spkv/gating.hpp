#pragma once

#include <string>
#include <vector>

#include "spkv/tensor.hpp"

namespace spkv {

// How out-of-window keys are scored during a forward pass.
enum class GateMode { Soft, Hard, Annealed, BernoulliSTE };

const char* gate_mode_name(GateMode m);
GateMode gate_mode_from_name(const std::string& name);

struct GateConfig {
  int window = 128;      // always-attendable recency window w
  float tau = 0.5f;      // retention threshold
  GateMode mode = GateMode::Soft;
  float alpha = 0.0f;    // Annealed interpolation weight in [0,1]
  float p_min = 0.0f;    // Bernoulli clip, keeps both outcomes possible
  float aux_weight = 0.0f;
  float init_bias = 5.0f;
  float predictor_lr_mult = 5.0f;
  float predictor_weight_decay = 0.1f;

  void validate() const;
};

// Per-layer utilities u in (0,1), plus binary decisions z when a hard or
// sampled mode produced them. Both laid out [B, n_kv_heads, T].
struct GateField {
  Tensor u;
  Tensor z;
};

// Two-layer MLP scoring every position's KV row for long-term retention,
// one net per layer emitting all kv heads jointly. Hidden width = d_model.
struct UtilityPredictor {
  Tensor w1, b1, w2, b2;
  bool frozen = false;

  static UtilityPredictor init(int d_model, int n_kv_heads, float init_bias, Rng& rng);

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  void set_frozen(bool f);
  int n_kv_heads() const { return w2.dim(1); }
};

// h: [B,T,d_model] -> utilities [B,K,T]. Differentiable unless frozen.
GateField predict_utilities(const UtilityPredictor& p, const Tensor& h);

// Soft bias log(u + 1e-8); gradient flows to u.
Tensor soft_gate_bias(const GateField& g);

// z = 1[u >= tau]; z carries no gradient.
GateField hard_gate(const GateField& g, float tau);

// 0 where z = 1, -inf where z = 0; constant (no gradient path).
Tensor hard_gate_bias(const Tensor& z);

// u~ = (1-alpha) * u + alpha * 1[u >= tau]; d(u~)/du = (1-alpha).
Tensor annealed_gate(const GateField& g, float tau, float alpha);

struct SteGate {
  Tensor bias;  // 0 / -inf by sampled z; backward routed through log(u + eps)
  Tensor z;
};

// z ~ Bernoulli(clip(u, p_min, 1-p_min)); straight-through backward.
SteGate bernoulli_ste_gate(const GateField& g, float p_min, Rng& rng);

// -lambda_aux * mean(u); pressure toward open gates.
Tensor aux_density_loss(const GateField& g, float lambda_aux);

// Per-head row replacement on a [B,K,T] gate bias: Gate keeps the computed
// row (and its gradient), Open pins it to 0, Closed pins it to -inf.
enum class HeadBias { Gate, Open, Closed };
Tensor override_head_bias(const Tensor& bias, const std::vector<HeadBias>& kinds);

}  // namespace spkv

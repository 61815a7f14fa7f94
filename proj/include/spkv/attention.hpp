#pragma once

#include "spkv/tensor.hpp"

namespace spkv {

// Geometry of the combined mask: causal, plus an always-attendable recency
// window of w positions. A key s is in the window of query t iff 0 <= t-s < w
// (strict at t-s = w), so the self position is always attendable when w >= 1.
struct MaskSpec {
  int T = 0;
  int window = 1;
};

// Combine causality, the window, and per-key gate biases into a dense
// [B, n_q_heads, T, T] additive bias. gate_bias is [B, n_kv_heads, T] and is
// broadcast across each kv head's query group. Entries: -inf above the
// diagonal, 0 in-window, gate_bias[s] out-of-window. Gradients flow back to
// the finite out-of-window entries.
Tensor build_bias(const MaskSpec& mask, const Tensor& gate_bias, int n_q_heads);

// o = softmax(q k^T / sqrt(D) + bias) v over [B,H,T,D] with bias [B,H,T,T].
// probs_out, when given, receives the post-softmax weights [B,H,T,T] (shares
// storage with the graph; treat as read-only).
Tensor gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& bias, Tensor* probs_out = nullptr);

}  // namespace spkv

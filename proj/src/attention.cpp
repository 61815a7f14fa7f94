#include "spkv/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "spkv/ops.hpp"

namespace spkv {

namespace {
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}

Tensor build_bias(const MaskSpec& mask, const Tensor& gate_bias, int n_q_heads) {
  if (mask.window < 1) throw std::runtime_error("build_bias: window must be >= 1");
  if (gate_bias.rank() != 3) throw std::runtime_error("build_bias: gate_bias must be [B,K,T]");
  const int B = gate_bias.dim(0), K = gate_bias.dim(1), T = gate_bias.dim(2);
  if (T != mask.T) throw std::runtime_error("build_bias: T mismatch");
  if (n_q_heads % K != 0) throw std::runtime_error("build_bias: n_q_heads not divisible by n_kv_heads");
  const int group = n_q_heads / K;
  const int w = mask.window;

  Tensor out = Tensor::zeros({B, n_q_heads, T, T});
  const float* pg = gate_bias.ptr();
  float* po = out.ptr();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < n_q_heads; ++h) {
      const float* grow = pg + (static_cast<std::size_t>(b) * K + h / group) * T;
      float* plane = po + ((static_cast<std::size_t>(b) * n_q_heads + h) * T) * T;
      for (int t = 0; t < T; ++t) {
        float* row = plane + static_cast<std::size_t>(t) * T;
        const int win_start = (t - w + 1 > 0) ? t - w + 1 : 0;
        for (int s = 0; s < win_start; ++s) row[s] = grow[s];
        for (int s = win_start; s <= t; ++s) row[s] = 0.0f;
        for (int s = t + 1; s < T; ++s) row[s] = kNegInf;
      }
    }

  if (autograd_track({&gate_bias})) {
    autograd_attach(out, {gate_bias}, [B, K, T, n_q_heads, group, w](Tensor& o) {
      Tensor& gb = o.node->parents[0];
      gb.ensure_grad();
      const float* g = o.grad_ptr();
      float* dg = gb.grad_ptr();
      // only out-of-window, causal-visible cells read the gate bias
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < n_q_heads; ++h) {
          float* drow = dg + (static_cast<std::size_t>(b) * K + h / group) * T;
          const float* plane = g + ((static_cast<std::size_t>(b) * n_q_heads + h) * T) * T;
          for (int t = 0; t < T; ++t) {
            const float* row = plane + static_cast<std::size_t>(t) * T;
            const int win_start = (t - w + 1 > 0) ? t - w + 1 : 0;
            for (int s = 0; s < win_start; ++s) drow[s] += row[s];
          }
        }
    });
  }
  return out;
}

Tensor gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& bias, Tensor* probs_out) {
  if (q.rank() != 4 || k.shape != q.shape || v.shape != q.shape)
    throw std::runtime_error("gated_attention: q,k,v must share [B,H,T,D]");
  const int B = q.dim(0), H = q.dim(1), T = q.dim(2), D = q.dim(3);
  if (bias.shape != std::vector<int>{B, H, T, T})
    throw std::runtime_error("gated_attention: bias must be [B,H,T,T], got " +
                             shape_str(bias.shape));
  Tensor qf = reshape(q, {B * H, T, D});
  Tensor kf = reshape(k, {B * H, T, D});
  Tensor vf = reshape(v, {B * H, T, D});
  Tensor scores = scale(bmm_nt(qf, kf), 1.0f / std::sqrt(static_cast<float>(D)));
  Tensor p = softmax_lastdim(scores, reshape(bias, {B * H, T, T}));
  if (probs_out) *probs_out = reshape(p, {B, H, T, T});
  return reshape(bmm_nn(p, vf), {B, H, T, D});
}

}  // namespace spkv

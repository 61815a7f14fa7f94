#include "spkv/gating.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "spkv/ops.hpp"

namespace spkv {

namespace {
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}

const char* gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::Soft: return "soft";
    case GateMode::Hard: return "hard";
    case GateMode::Annealed: return "annealed";
    case GateMode::BernoulliSTE: return "bernoulli_ste";
  }
  throw std::runtime_error("gate_mode_name: bad enum value");
}

GateMode gate_mode_from_name(const std::string& name) {
  if (name == "soft") return GateMode::Soft;
  if (name == "hard") return GateMode::Hard;
  if (name == "annealed") return GateMode::Annealed;
  if (name == "bernoulli_ste") return GateMode::BernoulliSTE;
  throw std::runtime_error("unknown gate mode: " + name);
}

void GateConfig::validate() const {
  if (window < 1) throw std::runtime_error("gate config: window must be >= 1");
  if (tau < 0.0f || tau > 1.0f) throw std::runtime_error("gate config: tau must be in [0,1]");
  if (alpha < 0.0f || alpha > 1.0f) throw std::runtime_error("gate config: alpha must be in [0,1]");
  if (p_min < 0.0f || p_min >= 0.5f) throw std::runtime_error("gate config: p_min must be in [0,0.5)");
  if (aux_weight < 0.0f) throw std::runtime_error("gate config: aux_weight must be >= 0");
}

UtilityPredictor UtilityPredictor::init(int d_model, int n_kv_heads, float init_bias,
                                        Rng& rng) {
  UtilityPredictor p;
  const float s1 = 1.0f / std::sqrt(static_cast<float>(d_model));
  p.w1 = Tensor::randn({d_model, d_model}, rng, s1, true);
  p.b1 = Tensor::zeros({d_model}, true);
  // w2 = 0 makes the initial gate exactly sigmoid(init_bias) for any input
  p.w2 = Tensor::zeros({d_model, n_kv_heads}, true);
  p.b2 = Tensor::full({n_kv_heads}, init_bias, true);
  return p;
}

std::vector<Tensor*> UtilityPredictor::params() { return {&w1, &b1, &w2, &b2}; }

std::vector<const Tensor*> UtilityPredictor::params() const {
  return {&w1, &b1, &w2, &b2};
}

void UtilityPredictor::set_frozen(bool f) {
  frozen = f;
  for (Tensor* t : params()) t->requires_grad = !f;
}

GateField predict_utilities(const UtilityPredictor& p, const Tensor& h) {
  if (h.rank() != 3 || h.dim(2) != p.w1.dim(0))
    throw std::runtime_error("predict_utilities: h must be [B,T,d_model], got " +
                             shape_str(h.shape));
  const int B = h.dim(0), T = h.dim(1), d = h.dim(2);
  const int K = p.n_kv_heads();
  Tensor flat = reshape(h, {B * T, d});
  Tensor hidden = silu(add_rowvec(matmul(flat, p.w1), p.b1));
  Tensor logits = add_rowvec(matmul(hidden, p.w2), p.b2);
  Tensor u = transpose_last2(reshape(sigmoid(logits), {B, T, K}));  // [B,K,T]
  GateField g;
  g.u = u;
  return g;
}

Tensor soft_gate_bias(const GateField& g) { return log_eps(g.u); }

GateField hard_gate(const GateField& g, float tau) {
  GateField out;
  out.u = g.u;
  out.z = Tensor::zeros(g.u.shape);
  const float* pu = g.u.ptr();
  float* pz = out.z.ptr();
  for (std::size_t i = 0; i < g.u.numel(); ++i) pz[i] = (pu[i] >= tau) ? 1.0f : 0.0f;
  return out;
}

Tensor hard_gate_bias(const Tensor& z) {
  Tensor bias = Tensor::zeros(z.shape);
  const float* pz = z.ptr();
  float* pb = bias.ptr();
  for (std::size_t i = 0; i < z.numel(); ++i) pb[i] = (pz[i] != 0.0f) ? 0.0f : kNegInf;
  return bias;
}

Tensor annealed_gate(const GateField& g, float tau, float alpha) {
  if (alpha < 0.0f || alpha > 1.0f) throw std::runtime_error("annealed_gate: alpha out of [0,1]");
  const Tensor& u = g.u;
  Tensor out = Tensor::zeros(u.shape);
  const float* pu = u.ptr();
  float* po = out.ptr();
  const std::size_t n = u.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const float ind = (pu[i] >= tau) ? 1.0f : 0.0f;
    po[i] = (1.0f - alpha) * pu[i] + alpha * ind;
  }
  if (autograd_track({&u})) {
    autograd_attach(out, {u}, [n, alpha](Tensor& o) {
      Tensor& u2 = o.node->parents[0];
      u2.ensure_grad();
      const float* gr = o.grad_ptr();
      float* gu = u2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gu[i] += (1.0f - alpha) * gr[i];
    });
  }
  return out;
}

SteGate bernoulli_ste_gate(const GateField& g, float p_min, Rng& rng) {
  if (p_min < 0.0f || p_min >= 0.5f) throw std::runtime_error("bernoulli_ste_gate: p_min out of [0,0.5)");
  const Tensor& u = g.u;
  const std::size_t n = u.numel();
  SteGate out;
  out.z = Tensor::zeros(u.shape);
  out.bias = Tensor::zeros(u.shape);
  const float* pu = u.ptr();
  float* pz = out.z.ptr();
  float* pb = out.bias.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const float p = std::min(std::max(pu[i], p_min), 1.0f - p_min);
    const float draw = rng.next_float();
    pz[i] = (draw < p) ? 1.0f : 0.0f;
    pb[i] = (pz[i] != 0.0f) ? 0.0f : kNegInf;
  }
  if (autograd_track({&u})) {
    // straight-through: treat the bias as if it were log(u + eps)
    autograd_attach(out.bias, {u}, [n](Tensor& o) {
      Tensor& u2 = o.node->parents[0];
      u2.ensure_grad();
      const float* gr = o.grad_ptr();
      const float* pu2 = u2.ptr();
      float* gu = u2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gu[i] += gr[i] / (pu2[i] + kLogEps);
    });
  }
  return out;
}

Tensor aux_density_loss(const GateField& g, float lambda_aux) {
  if (lambda_aux < 0.0f) throw std::runtime_error("aux_density_loss: lambda_aux must be >= 0");
  return scale(mean(g.u), -lambda_aux);
}

Tensor override_head_bias(const Tensor& bias, const std::vector<HeadBias>& kinds) {
  if (bias.rank() != 3) throw std::runtime_error("override_head_bias: bias must be [B,K,T]");
  const int B = bias.dim(0), K = bias.dim(1), T = bias.dim(2);
  if (static_cast<int>(kinds.size()) != K)
    throw std::runtime_error("override_head_bias: kinds size != n_kv_heads");
  Tensor out = Tensor::zeros(bias.shape);
  const float* pb = bias.ptr();
  float* po = out.ptr();
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      float* row = po + (static_cast<std::size_t>(b) * K + k) * T;
      const float* src = pb + (static_cast<std::size_t>(b) * K + k) * T;
      switch (kinds[k]) {
        case HeadBias::Gate: std::copy(src, src + T, row); break;
        case HeadBias::Open: std::fill(row, row + T, 0.0f); break;
        case HeadBias::Closed: std::fill(row, row + T, kNegInf); break;
      }
    }
  }
  if (autograd_track({&bias})) {
    autograd_attach(out, {bias}, [B, K, T, kinds](Tensor& o) {
      Tensor& x = o.node->parents[0];
      x.ensure_grad();
      const float* gr = o.grad_ptr();
      float* gx = x.grad_ptr();
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          if (kinds[k] != HeadBias::Gate) continue;
          const std::size_t off = (static_cast<std::size_t>(b) * K + k) * T;
          for (int t = 0; t < T; ++t) gx[off + t] += gr[off + t];
        }
    });
  }
  return out;
}

}  // namespace spkv

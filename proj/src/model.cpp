#include "spkv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "spkv/attention.hpp"
#include "spkv/ops.hpp"

namespace spkv {

const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::Global: return "global";
    case AttentionKind::SlidingWindowOnly: return "sliding_window";
    case AttentionKind::SelfPrunedKV: return "self_pruned";
  }
  throw std::runtime_error("attention_kind_name: bad enum value");
}

AttentionKind attention_kind_from_name(const std::string& name) {
  if (name == "global") return AttentionKind::Global;
  if (name == "sliding_window") return AttentionKind::SlidingWindowOnly;
  if (name == "self_pruned") return AttentionKind::SelfPrunedKV;
  throw std::runtime_error("unknown attention kind: " + name);
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::runtime_error("model config: n_layers must be >= 1");
  if (n_kv_heads < 1 || n_q_heads < n_kv_heads || n_q_heads % n_kv_heads != 0)
    throw std::runtime_error("model config: n_q_heads must be a positive multiple of n_kv_heads");
  if (d_model != n_q_heads * d_head)
    throw std::runtime_error("model config: d_model must equal n_q_heads * d_head");
  if (d_ffn < 1 || vocab_size < 2 || max_seq_len < 1)
    throw std::runtime_error("model config: d_ffn, vocab_size, max_seq_len out of range");
  if (!layer_kinds.empty() && static_cast<int>(layer_kinds.size()) != n_layers)
    throw std::runtime_error("model config: layer_kinds must be empty or have n_layers entries");
  for (const HeadOverride& o : head_overrides) {
    if (o.layer < 0 || o.layer >= n_layers || o.kv_head < 0 || o.kv_head >= n_kv_heads)
      throw std::runtime_error("model config: head override out of range");
  }
}

AttentionKind ModelConfig::layer_kind(int layer) const {
  if (layer_kinds.empty()) return AttentionKind::SelfPrunedKV;
  return layer_kinds.at(static_cast<std::size_t>(layer));
}

AttentionKind ModelConfig::effective_kind(int layer, int kv_head) const {
  for (const HeadOverride& o : head_overrides)
    if (o.layer == layer && o.kv_head == kv_head) return o.kind;
  return layer_kind(layer);
}

Model Model::init(const ModelConfig& cfg, const GateConfig& gate, Rng& rng) {
  cfg.validate();
  gate.validate();
  Model m;
  m.cfg = cfg;
  m.gate = gate;
  const int d = cfg.d_model;
  const float ws = 1.0f / std::sqrt(static_cast<float>(d));
  const float fs = 1.0f / std::sqrt(static_cast<float>(cfg.d_ffn));
  m.embedding = Tensor::randn({cfg.vocab_size, d}, rng, 0.02f, true);
  m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (LayerParams& l : m.layers) {
    l.attn_norm_w = Tensor::full({d}, 1.0f, true);
    l.wq = Tensor::randn({d, cfg.n_q_heads * cfg.d_head}, rng, ws, true);
    l.wk = Tensor::randn({d, cfg.n_kv_heads * cfg.d_head}, rng, ws, true);
    l.wv = Tensor::randn({d, cfg.n_kv_heads * cfg.d_head}, rng, ws, true);
    l.wo = Tensor::randn({cfg.n_q_heads * cfg.d_head, d}, rng, ws, true);
    l.ffn_norm_w = Tensor::full({d}, 1.0f, true);
    l.ffn_w1 = Tensor::randn({d, cfg.d_ffn}, rng, ws, true);
    l.ffn_w2 = Tensor::randn({cfg.d_ffn, d}, rng, fs, true);
    l.predictor = UtilityPredictor::init(d, cfg.n_kv_heads, gate.init_bias, rng);
  }
  m.final_norm_w = Tensor::full({d}, 1.0f, true);
  return m;
}

namespace {

// Gate bias rows for one layer given its per-head kinds and the gate mode.
// Returns the [B,K,T] additive bias and fills `info` for the caller.
Tensor layer_gate_bias(const Model& m, int layer, const Tensor& hn3,
                       const GateRuntime& rt, LayerGateInfo& info) {
  const int B = hn3.dim(0), T = hn3.dim(1);
  const int K = m.cfg.n_kv_heads;
  info.spkv_heads.assign(static_cast<std::size_t>(K), 0);

  std::vector<HeadBias> kinds(static_cast<std::size_t>(K), HeadBias::Open);
  bool any_gate = false;
  if (!rt.force_global) {
    for (int k = 0; k < K; ++k) {
      switch (m.cfg.effective_kind(layer, k)) {
        case AttentionKind::Global: kinds[k] = HeadBias::Open; break;
        case AttentionKind::SlidingWindowOnly: kinds[k] = HeadBias::Closed; break;
        case AttentionKind::SelfPrunedKV:
          kinds[k] = HeadBias::Gate;
          info.spkv_heads[static_cast<std::size_t>(k)] = 1;
          any_gate = true;
          break;
      }
    }
  }
  if (!any_gate) {
    // entirely constant rows; no predictor evaluation at all
    Tensor bias = Tensor::zeros({B, K, T});
    float* pb = bias.ptr();
    const float neg = -std::numeric_limits<float>::infinity();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k)
        if (kinds[static_cast<std::size_t>(k)] == HeadBias::Closed) {
          float* row = pb + (static_cast<std::size_t>(b) * K + k) * T;
          std::fill(row, row + T, neg);
        }
    return bias;
  }

  GateField gf = predict_utilities(m.layers[static_cast<std::size_t>(layer)].predictor, hn3);
  info.field.u = gf.u;
  Tensor bias;
  switch (rt.mode) {
    case GateMode::Soft:
      bias = soft_gate_bias(gf);
      break;
    case GateMode::Hard: {
      GateField hg = hard_gate(gf, m.gate.tau);
      info.field.z = hg.z;
      bias = hard_gate_bias(hg.z);
      break;
    }
    case GateMode::Annealed:
      bias = annealed_gate(gf, m.gate.tau, rt.alpha);
      bias = log_eps(bias);
      break;
    case GateMode::BernoulliSTE: {
      if (!rt.rng) throw std::runtime_error("forward: BernoulliSTE mode needs a runtime rng");
      SteGate sg = bernoulli_ste_gate(gf, m.gate.p_min, *rt.rng);
      info.field.z = sg.z;
      bias = sg.bias;
      break;
    }
    default:
      throw std::runtime_error("forward: bad gate mode");
  }
  if (!info.field.z.st) {
    NoGradGuard ng;
    info.field.z = hard_gate(gf, m.gate.tau).z;  // for logging/traces
  }
  bool all_gate = true;
  for (HeadBias hb : kinds) all_gate = all_gate && hb == HeadBias::Gate;
  if (!all_gate) bias = override_head_bias(bias, kinds);
  return bias;
}

// out[b,h,t,s] = bias[b,h,t,s] + extra[t,s]; gradient passes through to bias
// only (extra is an evaluation-time visibility mask, never learned)
Tensor add_visibility_bias(const Tensor& bias, const Tensor& extra) {
  const int B = bias.dim(0), H = bias.dim(1), T = bias.dim(2);
  if (extra.shape != std::vector<int>{T, T})
    throw std::runtime_error("forward: extra_bias must be [T,T], got " + shape_str(extra.shape));
  Tensor out = Tensor::zeros(bias.shape, bias.requires_grad);
  const float* b = bias.ptr();
  const float* e = extra.ptr();
  float* o = out.ptr();
  const std::size_t plane = static_cast<std::size_t>(T) * T;
  for (int bh = 0; bh < B * H; ++bh) {
    const float* src = b + bh * plane;
    float* dst = o + bh * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + e[i];
  }
  if (autograd_track({&bias})) {
    autograd_attach(out, {bias}, [](Tensor& t) {
      Tensor& p = t.node->parents[0];
      p.ensure_grad();
      const float* g = t.grad_ptr();
      float* dp = p.grad_ptr();
      for (std::size_t i = 0; i < t.numel(); ++i) dp[i] += g[i];
    });
  }
  return out;
}

}  // namespace

ForwardResult Model::forward(const std::vector<int>& tokens, int B, int T,
                             const GateRuntime& rt) const {
  if (static_cast<std::size_t>(B) * T != tokens.size())
    throw std::runtime_error("forward: tokens size != B*T");
  if (T > cfg.max_seq_len) throw std::runtime_error("forward: T exceeds max_seq_len");
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size) throw std::runtime_error("forward: token id out of range");

  const int d = cfg.d_model;
  const int M = B * T;
  const int Hq = cfg.n_q_heads, K = cfg.n_kv_heads, D = cfg.d_head;
  const int group = cfg.group_size();
  const MaskSpec mask{T, gate.window};

  ForwardResult res;
  res.gates.resize(static_cast<std::size_t>(cfg.n_layers));
  if (rt.attn_probs) rt.attn_probs->clear();

  Tensor x = reshape(spkv::embedding(embedding, tokens, B, T), {M, d});
  for (int li = 0; li < cfg.n_layers; ++li) {
    const LayerParams& l = layers[static_cast<std::size_t>(li)];

    Tensor hn = rmsnorm(x, l.attn_norm_w);
    Tensor q = rope(permute_0213(reshape(matmul(hn, l.wq), {B, T, Hq, D})), cfg.rope_base, 0);
    Tensor k = rope(permute_0213(reshape(matmul(hn, l.wk), {B, T, K, D})), cfg.rope_base, 0);
    Tensor v = permute_0213(reshape(matmul(hn, l.wv), {B, T, K, D}));

    Tensor gate_bias =
        layer_gate_bias(*this, li, reshape(hn, {B, T, d}), rt, res.gates[static_cast<std::size_t>(li)]);
    Tensor bias = build_bias(mask, gate_bias, Hq);
    if (rt.extra_bias) bias = add_visibility_bias(bias, *rt.extra_bias);

    Tensor probs;
    Tensor attn = gated_attention(q, repeat_heads(k, group), repeat_heads(v, group), bias,
                                  rt.attn_probs ? &probs : nullptr);
    if (rt.attn_probs) rt.attn_probs->push_back(probs);
    Tensor attn_flat = reshape(permute_0213(attn), {M, Hq * D});
    x = add(x, matmul(attn_flat, l.wo));

    Tensor hn2 = rmsnorm(x, l.ffn_norm_w);
    x = add(x, matmul(silu(matmul(hn2, l.ffn_w1)), l.ffn_w2));
  }
  Tensor xf = rmsnorm(x, final_norm_w);
  res.logits = reshape(matmul_nt(xf, embedding), {B, T, cfg.vocab_size});
  return res;
}

std::vector<ParamRef> Model::param_refs() {
  std::vector<ParamRef> out;
  out.push_back({&embedding, false});
  for (LayerParams& l : layers) {
    out.push_back({&l.attn_norm_w, false});
    out.push_back({&l.wq, false});
    out.push_back({&l.wk, false});
    out.push_back({&l.wv, false});
    out.push_back({&l.wo, false});
    out.push_back({&l.ffn_norm_w, false});
    out.push_back({&l.ffn_w1, false});
    out.push_back({&l.ffn_w2, false});
    for (Tensor* t : l.predictor.params()) out.push_back({t, true});
  }
  out.push_back({&final_norm_w, false});
  return out;
}

std::vector<const Tensor*> Model::param_list() const {
  std::vector<const Tensor*> out;
  out.push_back(&embedding);
  for (const LayerParams& l : layers) {
    out.push_back(&l.attn_norm_w);
    out.push_back(&l.wq);
    out.push_back(&l.wk);
    out.push_back(&l.wv);
    out.push_back(&l.wo);
    out.push_back(&l.ffn_norm_w);
    out.push_back(&l.ffn_w1);
    out.push_back(&l.ffn_w2);
    for (const Tensor* t : l.predictor.params()) out.push_back(t);
  }
  out.push_back(&final_norm_w);
  return out;
}

std::size_t Model::n_params() const {
  std::size_t n = 0;
  for (const Tensor* t : param_list()) n += t->numel();
  return n;
}

void Model::zero_grads() {
  for (ParamRef p : param_refs())
    if (p.t->has_grad()) {
      float* g = p.t->grad_ptr();
      std::fill(g, g + p.t->numel(), 0.0f);
    }
}

Tensor next_token_loss(const Tensor& logits, const std::vector<int>& tokens,
                       const std::vector<std::uint8_t>& loss_mask) {
  if (logits.rank() != 3) throw std::runtime_error("next_token_loss: logits must be [B,T,V]");
  const int B = logits.dim(0), T = logits.dim(1), V = logits.dim(2);
  if (tokens.size() != static_cast<std::size_t>(B) * T || loss_mask.size() != tokens.size())
    throw std::runtime_error("next_token_loss: tokens/mask size mismatch");
  // row (b,t) predicts token (b,t+1); the final row of each sequence has no
  // target and is always dropped
  std::vector<int> targets(static_cast<std::size_t>(B) * T, 0);
  std::vector<std::uint8_t> m(static_cast<std::size_t>(B) * T, 0);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t + 1 < T; ++t) {
      const std::size_t i = static_cast<std::size_t>(b) * T + t;
      targets[i] = tokens[i + 1];
      m[i] = loss_mask[i + 1];
    }
  return cross_entropy_masked(reshape(logits, {B * T, V}), targets, m);
}

std::vector<float> per_position_nll(const Tensor& logits, const std::vector<int>& tokens) {
  if (logits.rank() != 3) throw std::runtime_error("per_position_nll: logits must be [B,T,V]");
  const int B = logits.dim(0), T = logits.dim(1), V = logits.dim(2);
  if (tokens.size() != static_cast<std::size_t>(B) * T)
    throw std::runtime_error("per_position_nll: tokens size mismatch");
  std::vector<float> out(static_cast<std::size_t>(B) * (T - 1), 0.0f);
  const float* pl = logits.ptr();
  for (int b = 0; b < B; ++b)
    for (int t = 0; t + 1 < T; ++t) {
      const float* row = pl + (static_cast<std::size_t>(b) * T + t) * V;
      double mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double se = 0.0;
      for (int j = 0; j < V; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
      const int tgt = tokens[static_cast<std::size_t>(b) * T + t + 1];
      out[static_cast<std::size_t>(b) * (T - 1) + t] =
          static_cast<float>(mx + std::log(se) - row[tgt]);
    }
  return out;
}

}  // namespace spkv

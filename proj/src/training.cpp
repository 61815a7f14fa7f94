#include "spkv/training.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "spkv/ops.hpp"

namespace spkv {

const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::DenseBaseline: return "dense";
    case TrainMode::SoftGatedCPT: return "soft-cpt";
    case TrainMode::TAHG: return "tahg";
    case TrainMode::BernoulliSTE: return "bernoulli-ste";
    case TrainMode::FromScratchGated: return "from-scratch";
    case TrainMode::FrozenLLM: return "frozen-llm";
  }
  throw std::runtime_error("train_mode_name: bad enum value");
}

TrainMode train_mode_from_name(const std::string& name) {
  if (name == "dense") return TrainMode::DenseBaseline;
  if (name == "soft-cpt") return TrainMode::SoftGatedCPT;
  if (name == "tahg") return TrainMode::TAHG;
  if (name == "bernoulli-ste") return TrainMode::BernoulliSTE;
  if (name == "from-scratch") return TrainMode::FromScratchGated;
  if (name == "frozen-llm") return TrainMode::FrozenLLM;
  throw std::runtime_error("unknown train mode: " + name);
}

const char* phase_tag_name(PhaseTag p) {
  switch (p) {
    case PhaseTag::Dense: return "dense";
    case PhaseTag::Soft: return "soft";
    case PhaseTag::Annealed: return "annealed";
    case PhaseTag::Hard: return "hard";
    case PhaseTag::Sampled: return "sampled";
  }
  throw std::runtime_error("phase_tag_name: bad enum value");
}

void TrainConfig::validate() const {
  if (total_steps < 1) throw std::runtime_error("train config: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > decay_start_step || decay_start_step > total_steps)
    throw std::runtime_error("train config: need warmup <= decay_start <= total_steps");
  if (peak_lr <= 0.0f) throw std::runtime_error("train config: peak_lr must be > 0");
  if (final_lr_fraction < 0.0f || final_lr_fraction > 1.0f)
    throw std::runtime_error("train config: final_lr_fraction must be in [0,1]");
  if (batch_size < 1) throw std::runtime_error("train config: batch_size must be >= 1");
  if (phase2_start_fraction <= 0.0f || phase2_start_fraction > 1.0f)
    throw std::runtime_error("train config: phase2_start_fraction must be in (0,1]");
  if (anneal_steps < 0) throw std::runtime_error("train config: anneal_steps must be >= 0");
  if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f)
    throw std::runtime_error("train config: betas must be in [0,1)");
  if (eps <= 0.0f || clip_norm <= 0.0f || weight_decay < 0.0f)
    throw std::runtime_error("train config: eps/clip_norm/weight_decay out of range");
}

int TrainConfig::phase2_boundary() const {
  const int span = total_steps - decay_start_step;
  return decay_start_step + static_cast<int>(std::lround(phase2_start_fraction * span));
}

int TrainConfig::resolved_anneal_steps() const {
  const int span = total_steps - decay_start_step;
  if (anneal_steps > span) return std::max(1, span / 10);
  return anneal_steps;
}

float lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step >= cfg.total_steps)
    throw std::runtime_error("lr_at: step outside [0, total_steps)");
  if (step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
  if (step < cfg.decay_start_step) return cfg.peak_lr;
  const float span = static_cast<float>(cfg.total_steps - cfg.decay_start_step);
  const float progress = static_cast<float>(step - cfg.decay_start_step) / span;
  constexpr float pi = 3.14159265358979323846f;
  const float cos_term = 0.5f * (1.0f + std::cos(pi * progress));
  return cfg.peak_lr * (cfg.final_lr_fraction + (1.0f - cfg.final_lr_fraction) * cos_term);
}

PhaseState phase_of(int step, const TrainConfig& cfg) {
  const int boundary = cfg.phase2_boundary();
  if (step < boundary) return {PhaseTag::Soft, 0.0f};
  const int anneal = cfg.resolved_anneal_steps();
  if (anneal == 0) return {PhaseTag::Hard, 1.0f};
  const float a = static_cast<float>(step - boundary) / static_cast<float>(anneal);
  if (a >= 1.0f) return {PhaseTag::Hard, 1.0f};
  return {PhaseTag::Annealed, a};
}

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_train_log: cannot open " + path);
  for (const TrainRecord& r : log.records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    j["aux"] = r.aux;
    if (r.has_gate_stats) {
      j["mean_u"] = r.mean_u;
      j["rho"] = r.rho;
    } else {
      j["mean_u"] = nullptr;
      j["rho"] = nullptr;
    }
    j["phase"] = phase_tag_name(r.phase);
    j["alpha"] = r.alpha;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_train_log: write failed for " + path);
}

float clip_global_norm(std::vector<ParamRef>& params, float max_norm) {
  double sq = 0.0;
  for (ParamRef& p : params) {
    if (!p.t->requires_grad || !p.t->has_grad()) continue;
    const float* g = p.t->grad_ptr();
    for (std::size_t i = 0; i < p.t->numel(); ++i)
      sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float s = max_norm / norm;
    for (ParamRef& p : params) {
      if (!p.t->requires_grad || !p.t->has_grad()) continue;
      float* g = p.t->grad_ptr();
      for (std::size_t i = 0; i < p.t->numel(); ++i) g[i] *= s;
    }
  }
  return norm;
}

void AdamW::step(std::vector<ParamRef>& params, float lr, float base_wd,
                 float pred_lr_mult, float pred_wd) {
  std::size_t total = 0;
  for (ParamRef& p : params) total += p.t->numel();
  if (m.empty()) {
    m.assign(total, 0.0f);
    v.assign(total, 0.0f);
  }
  if (m.size() != total || v.size() != total)
    throw std::runtime_error("adamw: parameter layout changed between steps");
  ++t;
  const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
  const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
  std::size_t off = 0;
  for (ParamRef& p : params) {
    const std::size_t n = p.t->numel();
    if (p.t->requires_grad && p.t->has_grad()) {
      const float lr_eff = p.predictor ? lr * pred_lr_mult : lr;
      const float wd_eff = p.predictor ? pred_wd : base_wd;
      float* w = p.t->ptr();
      const float* g = p.t->grad_ptr();
      for (std::size_t i = 0; i < n; ++i) {
        m[off + i] = beta1 * m[off + i] + (1.0f - beta1) * g[i];
        v[off + i] = beta2 * v[off + i] + (1.0f - beta2) * g[i] * g[i];
        const float mh = m[off + i] / bc1;
        const float vh = v[off + i] / bc2;
        w[i] -= lr_eff * (mh / (std::sqrt(vh) + eps) + wd_eff * w[i]);
      }
    }
    off += n;
  }
}

namespace {

// Sum / count / z-sum of gated entries across layers; sums the graph-side
// utilities too when an aux loss will need them.
struct GateStats {
  double sum_u = 0.0;
  double sum_z = 0.0;
  std::size_t count = 0;
  Tensor graph_sum;  // sum of gated utilities, in-graph
};

GateStats collect_gate_stats(const ForwardResult& fr, bool build_graph) {
  GateStats gs;
  for (const LayerGateInfo& info : fr.gates) {
    bool any = false, all = true;
    for (std::uint8_t s : info.spkv_heads) {
      any = any || s;
      all = all && s;
    }
    if (!any) continue;
    const Tensor& u = info.field.u;
    const int B = u.dim(0), K = u.dim(1), T = u.dim(2);
    const float* pu = u.ptr();
    const float* pz = info.field.z.ptr();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) {
        if (!info.spkv_heads[static_cast<std::size_t>(k)]) continue;
        const std::size_t o = (static_cast<std::size_t>(b) * K + k) * T;
        for (int t2 = 0; t2 < T; ++t2) {
          gs.sum_u += pu[o + t2];
          gs.sum_z += pz[o + t2];
        }
        gs.count += static_cast<std::size_t>(T);
      }
    if (build_graph) {
      Tensor s;
      if (all) {
        s = sum(u);
      } else {
        Tensor msk = Tensor::zeros(u.shape);
        float* pm = msk.ptr();
        for (int b = 0; b < B; ++b)
          for (int k = 0; k < K; ++k) {
            if (!info.spkv_heads[static_cast<std::size_t>(k)]) continue;
            const std::size_t o = (static_cast<std::size_t>(b) * K + k) * T;
            for (int t2 = 0; t2 < T; ++t2) pm[o + t2] = 1.0f;
          }
        s = sum(mul(u, msk));
      }
      gs.graph_sum = gs.graph_sum.defined() ? add(gs.graph_sum, s) : s;
    }
  }
  return gs;
}

}  // namespace

TrainResult train(Model& model, const BatchFn& next_batch, const TrainConfig& cfg,
                  const std::string& log_path) {
  cfg.validate();
  model.gate.validate();
  Rng rng(cfg.seed);
  AdamW opt(cfg.beta1, cfg.beta2, cfg.eps);
  std::vector<ParamRef> params = model.param_refs();
  TrainResult res;

  if (cfg.mode == TrainMode::FrozenLLM)
    for (ParamRef& p : params)
      if (!p.predictor) p.t->requires_grad = false;

  const bool two_phase =
      cfg.mode == TrainMode::TAHG || cfg.mode == TrainMode::FromScratchGated;
  bool predictor_frozen = false;

  auto flush = [&]() {
    if (!log_path.empty()) write_train_log(log_path, res.log);
  };

  for (int step = 0; step < cfg.total_steps; ++step) {
    PhaseState ps{PhaseTag::Soft, 0.0f};
    GateRuntime rt;
    bool gated = true;
    switch (cfg.mode) {
      case TrainMode::DenseBaseline:
        rt.force_global = true;
        ps.tag = PhaseTag::Dense;
        gated = false;
        break;
      case TrainMode::SoftGatedCPT:
      case TrainMode::FrozenLLM:
        rt.mode = GateMode::Soft;
        break;
      case TrainMode::BernoulliSTE:
        rt.mode = GateMode::BernoulliSTE;
        rt.rng = &rng;
        ps.tag = PhaseTag::Sampled;
        break;
      case TrainMode::TAHG:
      case TrainMode::FromScratchGated:
        ps = phase_of(step, cfg);
        rt.mode = ps.tag == PhaseTag::Soft      ? GateMode::Soft
                  : ps.tag == PhaseTag::Hard    ? GateMode::Hard
                                                : GateMode::Annealed;
        rt.alpha = ps.alpha;
        break;
    }
    if (two_phase && ps.tag != PhaseTag::Soft && !predictor_frozen) {
      for (LayerParams& l : model.layers) l.predictor.set_frozen(true);
      predictor_frozen = true;
    }

    Batch b = next_batch(step, rng);
    ForwardResult fr = model.forward(b.tokens, b.B, b.T, rt);
    Tensor lm = next_token_loss(fr.logits, b.tokens, b.loss_mask);

    const bool want_aux = gated && model.gate.aux_weight > 0.0f;
    GateStats gs = gated ? collect_gate_stats(fr, want_aux) : GateStats{};
    Tensor total = lm;
    float aux_val = 0.0f;
    if (want_aux && gs.count > 0) {
      Tensor aux =
          scale(gs.graph_sum, -model.gate.aux_weight / static_cast<float>(gs.count));
      aux_val = aux.item();
      total = add(lm, aux);
    }

    TrainRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, cfg);
    rec.loss = lm.item();
    rec.aux = aux_val;
    rec.has_gate_stats = gs.count > 0;
    if (rec.has_gate_stats) {
      rec.mean_u = static_cast<float>(gs.sum_u / static_cast<double>(gs.count));
      rec.rho = static_cast<float>(gs.sum_z / static_cast<double>(gs.count));
    }
    rec.phase = ps.tag;
    rec.alpha = ps.alpha;
    res.log.records.push_back(rec);

    if (!std::isfinite(rec.loss) || !std::isfinite(rec.aux)) {
      flush();
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step) + " (loss=" + std::to_string(rec.loss) +
                               ", aux=" + std::to_string(rec.aux) + ")");
    }

    model.zero_grads();
    backward(total);
    clip_global_norm(params, cfg.clip_norm);
    opt.step(params, rec.lr, cfg.weight_decay, model.gate.predictor_lr_mult,
             model.gate.predictor_weight_decay);
  }

  flush();
  res.checkpoint = snapshot(model);
  res.checkpoint.has_opt = true;
  res.checkpoint.adam_step = opt.t;
  res.checkpoint.m = opt.m;
  res.checkpoint.v = opt.v;
  res.checkpoint.train_step = static_cast<std::uint64_t>(cfg.total_steps);
  res.checkpoint.rng_state = rng.state;
  return res;
}

}  // namespace spkv

#include "spkv/kvcache.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"

namespace spkv {

void CacheConfig::validate() const {
  if (page_size < 1) throw std::runtime_error("cache config: page_size must be >= 1");
  if (initial_headroom < 1) throw std::runtime_error("cache config: initial_headroom must be >= 1");
  if (max_pages < 0) throw std::runtime_error("cache config: max_pages must be >= 0");
}

void PagePool::init(int page_size_, int d_head_, bool allow_growth_, int max_pages_) {
  page_size = page_size_;
  d_head = d_head_;
  allow_growth = allow_growth_;
  max_pages = max_pages_;
  pages.clear();
  free_list.clear();
  allocated = 0;
}

int PagePool::alloc() {
  if (free_list.empty()) {
    if (!allow_growth || (max_pages > 0 && capacity() >= max_pages))
      throw std::runtime_error("page pool exhausted (" + std::to_string(capacity()) +
                               " pages) and growth is disabled");
    pages.emplace_back(static_cast<std::size_t>(page_size) * 2 * d_head, 0.0f);
    free_list.push_back(capacity() - 1);
  }
  const int p = free_list.back();
  free_list.pop_back();
  ++allocated;
  return p;
}

void PagePool::release(int page) {
  if (page < 0 || page >= capacity()) throw std::runtime_error("page pool: bad page id");
  free_list.push_back(page);
  --allocated;
}

void HeadCache::init(int d_head_, int window_, int initial_headroom) {
  d_head = d_head_;
  window = window_;
  page_indices.assign(static_cast<std::size_t>(initial_headroom), -1);
  used_pages = 0;
  slots_in_last_page = 0;
  retained_count = 0;
  realloc_count = 0;
  ring_k.assign(static_cast<std::size_t>(window) * d_head, 0.0f);
  ring_v.assign(static_cast<std::size_t>(window) * d_head, 0.0f);
  ring_z.assign(static_cast<std::size_t>(window), 0);
  write_ptr = 0;
  fill = 0;
}

void HeadCache::append(const float* k, const float* v, bool z, PagePool& pool) {
  if (fill == window && ring_z[static_cast<std::size_t>(write_ptr)]) {
    // displaced entry was marked keep: move it to the long-term region
    if (used_pages == 0 || slots_in_last_page == pool.page_size) {
      if (used_pages == static_cast<int>(page_indices.size())) {
        page_indices.resize(page_indices.size() * 2, -1);
        ++realloc_count;
      }
      page_indices[static_cast<std::size_t>(used_pages)] = pool.alloc();
      ++used_pages;
      slots_in_last_page = 0;
    }
    float* dst = pool.slot(page_indices[static_cast<std::size_t>(used_pages - 1)],
                           slots_in_last_page);
    const std::size_t off = static_cast<std::size_t>(write_ptr) * d_head;
    std::memcpy(dst, ring_k.data() + off, static_cast<std::size_t>(d_head) * sizeof(float));
    std::memcpy(dst + d_head, ring_v.data() + off,
                static_cast<std::size_t>(d_head) * sizeof(float));
    ++slots_in_last_page;
    ++retained_count;
  }
  const std::size_t off = static_cast<std::size_t>(write_ptr) * d_head;
  std::memcpy(ring_k.data() + off, k, static_cast<std::size_t>(d_head) * sizeof(float));
  std::memcpy(ring_v.data() + off, v, static_cast<std::size_t>(d_head) * sizeof(float));
  ring_z[static_cast<std::size_t>(write_ptr)] = z ? 1 : 0;
  write_ptr = (write_ptr + 1) % window;
  if (fill < window) ++fill;
}

namespace {

// The helpers below mirror the training kernels' accumulation order exactly
// (ascending contraction index, f32 throughout) so incremental decode tracks
// the full-sequence forward to rounding error.

void vecmat(const float* x, const float* W, int k, int n, float* out) {
  for (int j = 0; j < n; ++j) out[j] = 0.0f;
  for (int p = 0; p < k; ++p) {
    const float a = x[p];
    const float* w_row = W + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) out[j] += a * w_row[j];
  }
}

float dot(const float* a, const float* b, int n) {
  float s = 0.0f;
  for (int p = 0; p < n; ++p) s += a[p] * b[p];
  return s;
}

void rmsnorm_vec(const float* x, const float* w, int n, float eps, float* y) {
  float ss = 0.0f;
  for (int j = 0; j < n; ++j) ss += x[j] * x[j];
  const float r = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
  for (int j = 0; j < n; ++j) y[j] = x[j] * w[j] * r;
}

void rope_vec(float* x, int D, float base, int pos) {
  const int half = D / 2;
  const float fpos = static_cast<float>(pos);
  for (int i = 0; i < half; ++i) {
    const float freq = std::pow(base, -2.0f * static_cast<float>(i) / static_cast<float>(D));
    const float ang = fpos * freq;
    const float c = std::cos(ang);
    const float s = std::sin(ang);
    const float x0 = x[2 * i], x1 = x[2 * i + 1];
    x[2 * i] = x0 * c - x1 * s;
    x[2 * i + 1] = x0 * s + x1 * c;
  }
}

float sigmoid_f(float x) { return 1.0f / (1.0f + std::exp(-x)); }
float silu_f(float x) { return x * sigmoid_f(x); }

}  // namespace

DecodeState DecodeState::init(const Model& m, const CacheConfig& cc, bool record_trace_) {
  cc.validate();
  m.cfg.validate();
  m.gate.validate();
  DecodeState st;
  st.model = &m;
  st.cache_cfg = cc;
  st.record_trace = record_trace_;
  st.pool.init(cc.page_size, m.cfg.d_head, cc.allow_pool_growth, cc.max_pages);
  st.heads.resize(static_cast<std::size_t>(m.cfg.n_layers) * m.cfg.n_kv_heads);
  for (HeadCache& h : st.heads) h.init(m.cfg.d_head, m.gate.window, cc.initial_headroom);
  const ModelConfig& c = m.cfg;
  st.x_.resize(static_cast<std::size_t>(c.d_model));
  st.hn_.resize(static_cast<std::size_t>(c.d_model));
  st.q_.resize(static_cast<std::size_t>(c.n_q_heads) * c.d_head);
  st.k_.resize(static_cast<std::size_t>(c.n_kv_heads) * c.d_head);
  st.v_.resize(static_cast<std::size_t>(c.n_kv_heads) * c.d_head);
  st.u_.resize(static_cast<std::size_t>(c.d_model) +
               static_cast<std::size_t>(c.n_kv_heads));  // hidden + head scores
  st.attn_.resize(static_cast<std::size_t>(c.n_q_heads) * c.d_head);
  st.proj_.resize(static_cast<std::size_t>(c.d_model));
  st.ffn_.resize(static_cast<std::size_t>(c.d_ffn));
  return st;
}

std::vector<float> DecodeState::decode_step(int token) {
  const Model& m = *model;
  const ModelConfig& c = m.cfg;
  if (t + 1 >= c.max_seq_len) throw std::runtime_error("decode_step: position exceeds max_seq_len");
  if (token < 0 || token >= c.vocab_size) throw std::runtime_error("decode_step: token out of range");
  ++t;
  const int d = c.d_model, D = c.d_head, Hq = c.n_q_heads, K = c.n_kv_heads;
  const int group = c.group_size();
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(D));
  const int w = m.gate.window;
  const float tau = m.gate.tau;

  std::memcpy(x_.data(), m.embedding.ptr() + static_cast<std::size_t>(token) * d,
              static_cast<std::size_t>(d) * sizeof(float));

  for (int li = 0; li < c.n_layers; ++li) {
    const LayerParams& l = m.layers[static_cast<std::size_t>(li)];
    rmsnorm_vec(x_.data(), l.attn_norm_w.ptr(), d, 1e-5f, hn_.data());

    vecmat(hn_.data(), l.wq.ptr(), d, Hq * D, q_.data());
    vecmat(hn_.data(), l.wk.ptr(), d, K * D, k_.data());
    vecmat(hn_.data(), l.wv.ptr(), d, K * D, v_.data());
    for (int h = 0; h < Hq; ++h) rope_vec(q_.data() + static_cast<std::size_t>(h) * D, D, c.rope_base, t);
    for (int k = 0; k < K; ++k) rope_vec(k_.data() + static_cast<std::size_t>(k) * D, D, c.rope_base, t);

    // utility of the new position for each kv head (two-layer MLP, then
    // sigmoid), matching the training-path predictor bit for bit
    float* hidden = u_.data();
    float* uhead = u_.data() + d;
    const UtilityPredictor& p = l.predictor;
    vecmat(hn_.data(), p.w1.ptr(), d, d, hidden);
    for (int j = 0; j < d; ++j) hidden[j] = silu_f(hidden[j] + p.b1.ptr()[j]);
    vecmat(hidden, p.w2.ptr(), d, K, uhead);
    for (int k = 0; k < K; ++k) uhead[k] = sigmoid_f(uhead[k] + p.b2.ptr()[k]);

    // append before attending: self is always visible, and the displaced
    // entry (now exactly w back) is retained only if its stored z said so
    for (int k = 0; k < K; ++k) {
      float u = uhead[k];
      bool z;
      switch (c.effective_kind(li, k)) {
        case AttentionKind::Global: u = 1.0f; z = true; break;
        case AttentionKind::SlidingWindowOnly: u = 0.0f; z = false; break;
        default: z = u >= tau; break;
      }
      head(li, k).append(k_.data() + static_cast<std::size_t>(k) * D,
                         v_.data() + static_cast<std::size_t>(k) * D, z, pool);
      if (record_trace) trace.push_back({li, k, t, u, static_cast<std::uint8_t>(z ? 1 : 0)});
    }

    for (int h = 0; h < Hq; ++h) {
      const int k0 = h / group;
      const HeadCache& hc = head(li, k0);
      const float* qh = q_.data() + static_cast<std::size_t>(h) * D;
      const int n_long = hc.retained_count;
      const int n_win = hc.fill;
      const int n_vis = n_long + n_win;
      if (static_cast<int>(scores_.size()) < n_vis) {
        scores_.resize(static_cast<std::size_t>(n_vis));
        probs_.resize(static_cast<std::size_t>(n_vis));
      }
      // scores in ascending position order: long-term entries were evicted
      // in position order, then the ring oldest -> newest
      for (int e = 0; e < n_long; ++e)
        scores_[static_cast<std::size_t>(e)] = dot(qh, hc.longterm_slot(pool, e), D) * inv_scale;
      const int oldest = (hc.fill == w) ? hc.write_ptr : 0;
      for (int i = 0; i < n_win; ++i) {
        const int slot = (oldest + i) % w;
        scores_[static_cast<std::size_t>(n_long + i)] =
            dot(qh, hc.ring_k.data() + static_cast<std::size_t>(slot) * D, D) * inv_scale;
      }
      float mx = scores_[0];
      for (int e = 1; e < n_vis; ++e) mx = std::max(mx, scores_[static_cast<std::size_t>(e)]);
      float sum = 0.0f;
      for (int e = 0; e < n_vis; ++e) {
        const float ex = std::exp(scores_[static_cast<std::size_t>(e)] - mx);
        probs_[static_cast<std::size_t>(e)] = ex;
        sum += ex;
      }
      const float inv = 1.0f / sum;
      for (int e = 0; e < n_vis; ++e) probs_[static_cast<std::size_t>(e)] *= inv;

      float* out = attn_.data() + static_cast<std::size_t>(h) * D;
      for (int j = 0; j < D; ++j) out[j] = 0.0f;
      for (int e = 0; e < n_long; ++e) {
        const float pw = probs_[static_cast<std::size_t>(e)];
        const float* vrow = hc.longterm_slot(pool, e) + D;
        for (int j = 0; j < D; ++j) out[j] += pw * vrow[j];
      }
      for (int i = 0; i < n_win; ++i) {
        const int slot = (oldest + i) % w;
        const float pw = probs_[static_cast<std::size_t>(n_long + i)];
        const float* vrow = hc.ring_v.data() + static_cast<std::size_t>(slot) * D;
        for (int j = 0; j < D; ++j) out[j] += pw * vrow[j];
      }
    }

    vecmat(attn_.data(), l.wo.ptr(), Hq * D, d, proj_.data());
    for (int j = 0; j < d; ++j) x_[static_cast<std::size_t>(j)] += proj_[static_cast<std::size_t>(j)];

    rmsnorm_vec(x_.data(), l.ffn_norm_w.ptr(), d, 1e-5f, hn_.data());
    vecmat(hn_.data(), l.ffn_w1.ptr(), d, c.d_ffn, ffn_.data());
    for (int j = 0; j < c.d_ffn; ++j) ffn_[static_cast<std::size_t>(j)] = silu_f(ffn_[static_cast<std::size_t>(j)]);
    vecmat(ffn_.data(), l.ffn_w2.ptr(), c.d_ffn, d, proj_.data());
    for (int j = 0; j < d; ++j) x_[static_cast<std::size_t>(j)] += proj_[static_cast<std::size_t>(j)];
  }

  rmsnorm_vec(x_.data(), m.final_norm_w.ptr(), d, 1e-5f, hn_.data());
  std::vector<float> logits(static_cast<std::size_t>(c.vocab_size));
  for (int vtok = 0; vtok < c.vocab_size; ++vtok)
    logits[static_cast<std::size_t>(vtok)] =
        dot(hn_.data(), m.embedding.ptr() + static_cast<std::size_t>(vtok) * d, d);
  return logits;
}

MemoryReport memory_report(const DecodeState& st) {
  MemoryReport r;
  const std::size_t slot_bytes = static_cast<std::size_t>(st.model->cfg.d_head) * 2 * sizeof(float);
  const int w = st.model->gate.window;
  for (const HeadCache& h : st.heads) {
    r.bytes_window += static_cast<std::size_t>(w) * slot_bytes;
    r.pages_used += h.used_pages;
    r.headroom_grows += h.realloc_count;
    r.max_stream_reallocs = std::max(r.max_stream_reallocs, h.realloc_count);
    r.retained_total += static_cast<std::size_t>(h.retained_count);
  }
  r.bytes_longterm = static_cast<std::size_t>(r.pages_used) *
                     static_cast<std::size_t>(st.cache_cfg.page_size) * slot_bytes;
  const std::size_t evicted_per_head =
      static_cast<std::size_t>(std::max(st.t + 1 - w, 1));
  r.density = static_cast<double>(r.retained_total) /
              (static_cast<double>(st.heads.size()) * static_cast<double>(evicted_per_head));
  return r;
}

void check_page_conservation(const DecodeState& st) {
  const PagePool& pool = st.pool;
  if (pool.allocated + static_cast<int>(pool.free_list.size()) != pool.capacity())
    throw std::runtime_error("page conservation: allocated + free != capacity");
  std::unordered_set<int> seen;
  int pages_used = 0;
  std::size_t retained = 0;
  for (const HeadCache& h : st.heads) {
    for (int i = 0; i < h.used_pages; ++i) {
      const int pg = h.page_indices[static_cast<std::size_t>(i)];
      if (pg < 0 || pg >= pool.capacity())
        throw std::runtime_error("page conservation: stream references bad page id");
      if (!seen.insert(pg).second)
        throw std::runtime_error("page conservation: page referenced by two streams");
    }
    if (h.used_pages > 0 &&
        (h.slots_in_last_page < 1 || h.slots_in_last_page > pool.page_size))
      throw std::runtime_error("page conservation: bad last-page slot count");
    const int expect = (h.used_pages == 0)
                           ? 0
                           : (h.used_pages - 1) * pool.page_size + h.slots_in_last_page;
    if (expect != h.retained_count)
      throw std::runtime_error("page conservation: retained_count mismatch with page usage");
    pages_used += h.used_pages;
    retained += static_cast<std::size_t>(h.retained_count);
  }
  if (static_cast<int>(seen.size()) != pool.allocated)
    throw std::runtime_error("page conservation: allocated pages not all owned");
  const long long upper = static_cast<long long>(pages_used) * pool.page_size;
  const long long lower =
      (static_cast<long long>(pages_used) - static_cast<long long>(st.heads.size())) *
      pool.page_size;
  if (static_cast<long long>(retained) > upper ||
      (retained > 0 && static_cast<long long>(retained) <= lower))
    throw std::runtime_error("page conservation: retained count outside page bounds");
}

void write_gate_trace_jsonl(const std::string& path, const std::vector<GateTraceEntry>& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_gate_trace_jsonl: cannot open " + path);
  for (const GateTraceEntry& e : trace) {
    nlohmann::ordered_json j;
    j["layer"] = e.layer;
    j["head"] = e.head;
    j["position"] = e.position;
    j["u"] = e.u;
    j["z"] = static_cast<int>(e.z);
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_gate_trace_jsonl: write failed for " + path);
}

std::vector<GateTraceEntry> read_gate_trace_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_gate_trace_jsonl: cannot open " + path);
  std::vector<GateTraceEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    GateTraceEntry e;
    e.layer = j.at("layer").get<int>();
    e.head = j.at("head").get<int>();
    e.position = j.at("position").get<int>();
    e.u = j.at("u").get<float>();
    e.z = static_cast<std::uint8_t>(j.at("z").get<int>());
    out.push_back(e);
  }
  return out;
}

}  // namespace spkv

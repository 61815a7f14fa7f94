#pragma once

// Independent double-precision reference implementations used as test
// oracles. Deliberately naive loops, written against the mathematical
// definitions rather than sharing any code with the production kernels.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace spkv::f64ref {

using vec = std::vector<double>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double log_eps(double x) { return std::log(x + 1e-8); }

inline void gemm_nn(int G, int m, int k, int n, const vec& A, const vec& B, vec& C) {
  C.assign(static_cast<std::size_t>(G) * m * n, 0.0);
  for (int g = 0; g < G; ++g)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0;
        for (int p = 0; p < k; ++p)
          acc += A[(static_cast<std::size_t>(g) * m + i) * k + p] *
                 B[(static_cast<std::size_t>(g) * k + p) * n + j];
        C[(static_cast<std::size_t>(g) * m + i) * n + j] = acc;
      }
}

inline void gemm_nt(int G, int m, int k, int n, const vec& A, const vec& B, vec& C) {
  C.assign(static_cast<std::size_t>(G) * m * n, 0.0);
  for (int g = 0; g < G; ++g)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0;
        for (int p = 0; p < k; ++p)
          acc += A[(static_cast<std::size_t>(g) * m + i) * k + p] *
                 B[(static_cast<std::size_t>(g) * n + j) * k + p];
        C[(static_cast<std::size_t>(g) * m + i) * n + j] = acc;
      }
}

inline void softmax_bias(std::size_t R, int n, const vec& x, const vec& bias, vec& p) {
  p.assign(R * n, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = kNegInf;
    for (int j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j] + bias[r * n + j]);
    if (mx == kNegInf) throw std::runtime_error("f64ref softmax: fully masked row");
    double z = 0;
    for (int j = 0; j < n; ++j) {
      const double v = x[r * n + j] + bias[r * n + j];
      const double e = (v == kNegInf) ? 0.0 : std::exp(v - mx);
      p[r * n + j] = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) p[r * n + j] /= z;
  }
}

inline void rmsnorm(std::size_t R, int n, const vec& x, const vec& w, double eps, vec& y) {
  y.assign(R * n, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double ms = 0;
    for (int j = 0; j < n; ++j) ms += x[r * n + j] * x[r * n + j];
    const double inv = 1.0 / std::sqrt(ms / n + eps);
    for (int j = 0; j < n; ++j) y[r * n + j] = x[r * n + j] * w[j] * inv;
  }
}

// x laid out [BH, T, D]; rotates pair (2i, 2i+1) by pos * base^(-2i/D).
inline void rope(int BH, int T, int D, double base, int pos0, const vec& x, vec& y) {
  y.assign(x.size(), 0.0);
  for (int r = 0; r < BH; ++r)
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < D / 2; ++i) {
        const double ang = (pos0 + t) * std::pow(base, -2.0 * i / D);
        const double c = std::cos(ang), s = std::sin(ang);
        const std::size_t off = (static_cast<std::size_t>(r) * T + t) * D + 2 * i;
        y[off] = x[off] * c - x[off + 1] * s;
        y[off + 1] = x[off] * s + x[off + 1] * c;
      }
}

// Two-loop MLP mirror of the utility predictor: h [B,T,d] row-major,
// hidden width = d, outputs u laid out [B,K,T].
inline void predictor_mlp(int B, int T, int d, int K, const vec& h, const vec& w1,
                          const vec& b1, const vec& w2, const vec& b2, vec& u) {
  u.assign(static_cast<std::size_t>(B) * K * T, 0.0);
  vec hidden(d);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      const double* row = h.data() + (static_cast<std::size_t>(b) * T + t) * d;
      for (int j = 0; j < d; ++j) {
        double acc = b1[j];
        for (int i = 0; i < d; ++i) acc += row[i] * w1[static_cast<std::size_t>(i) * d + j];
        hidden[j] = silu(acc);
      }
      for (int kk = 0; kk < K; ++kk) {
        double acc = b2[kk];
        for (int j = 0; j < d; ++j) acc += hidden[j] * w2[static_cast<std::size_t>(j) * K + kk];
        u[(static_cast<std::size_t>(b) * K + kk) * T + t] = sigmoid(acc);
      }
    }
}

// Soft-gated causal attention with an always-open window and GQA broadcast.
// q,k,v [B,Hq,T,D]; u [B,K,T]; out [B,Hq,T,D]. Out-of-window keys get
// log(u+1e-8) added to their scores.
inline void attention_soft(int B, int Hq, int K, int T, int D, int w, const vec& q,
                           const vec& k, const vec& v, const vec& u, vec& out) {
  const int group = Hq / K;
  out.assign(q.size(), 0.0);
  vec p(T);
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < Hq; ++h) {
      const double* urow = u.data() + (static_cast<std::size_t>(b) * K + h / group) * T;
      for (int t = 0; t < T; ++t) {
        const double* qrow =
            q.data() + ((static_cast<std::size_t>(b) * Hq + h) * T + t) * D;
        double mx = kNegInf;
        for (int s = 0; s <= t; ++s) {
          const double* krow =
              k.data() + ((static_cast<std::size_t>(b) * Hq + h) * T + s) * D;
          double dot = 0;
          for (int dd = 0; dd < D; ++dd) dot += qrow[dd] * krow[dd];
          dot /= std::sqrt(static_cast<double>(D));
          if (t - s >= w) dot += log_eps(urow[s]);
          p[s] = dot;
          mx = std::max(mx, dot);
        }
        double z = 0;
        for (int s = 0; s <= t; ++s) {
          p[s] = std::exp(p[s] - mx);
          z += p[s];
        }
        double* orow = out.data() + ((static_cast<std::size_t>(b) * Hq + h) * T + t) * D;
        for (int s = 0; s <= t; ++s) {
          const double* vrow =
              v.data() + ((static_cast<std::size_t>(b) * Hq + h) * T + s) * D;
          const double ps = p[s] / z;
          for (int dd = 0; dd < D; ++dd) orow[dd] += ps * vrow[dd];
        }
      }
    }
}

inline double cross_entropy_masked(int M, int V, const vec& logits,
                                   const std::vector<int>& targets,
                                   const std::vector<std::uint8_t>& mask) {
  double acc = 0;
  std::size_t cnt = 0;
  for (int r = 0; r < M; ++r) {
    if (!mask[r]) continue;
    ++cnt;
    double mx = logits[static_cast<std::size_t>(r) * V];
    for (int j = 1; j < V; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(r) * V + j]);
    double se = 0;
    for (int j = 0; j < V; ++j) se += std::exp(logits[static_cast<std::size_t>(r) * V + j] - mx);
    acc += mx + std::log(se) - logits[static_cast<std::size_t>(r) * V + targets[r]];
  }
  return acc / static_cast<double>(cnt);
}

}  // namespace spkv::f64ref

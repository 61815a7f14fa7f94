#include "spkv/ops.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>

#include "spkv/kernels.hpp"

namespace spkv {

bool autograd_track(std::initializer_list<const Tensor*> parents) {
  if (!grad_enabled()) return false;
  for (const Tensor* p : parents)
    if (p->requires_grad) return true;
  return false;
}

void autograd_attach(Tensor& out, std::vector<Tensor> parents,
                     std::function<void(Tensor&)> backward) {
  out.requires_grad = true;
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(backward);
}

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

bool track(std::initializer_list<const Tensor*> parents) {
  return autograd_track(parents);
}

void attach(Tensor& out, std::vector<Tensor> parents,
            std::function<void(Tensor&)> backward) {
  autograd_attach(out, std::move(parents), std::move(backward));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape)
    throw std::runtime_error(std::string(what) + ": shape mismatch " +
                             shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (track({&a, &b})) {
    attach(out, {a, b}, [n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        float* ga = a2.grad_ptr();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        float* gb = b2.grad_ptr();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (track({&a, &b})) {
    attach(out, {a, b}, [n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        float* ga = a2.grad_ptr();
        const float* pb2 = b2.ptr();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        float* gb = b2.grad_ptr();
        const float* pa2 = a2.ptr();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  float* po = out.ptr();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (track({&a})) {
    attach(out, {a}, [n, s](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      a2.ensure_grad();
      float* ga = a2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = 1.0f / (1.0f + std::exp(-px[i]));
  if (track({&x})) {
    Tensor saved = out;  // shares data
    attach(out, {x}, [n, saved](Tensor& o) {
      const float* g = o.grad_ptr();
      const float* y = saved.ptr();
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const float s = 1.0f / (1.0f + std::exp(-px[i]));
    po[i] = px[i] * s;
  }
  if (track({&x})) {
    attach(out, {x}, [n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      const float* px2 = x2.ptr();
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) {
        const float s = 1.0f / (1.0f + std::exp(-px2[i]));
        gx[i] += g[i] * (s + px2[i] * s * (1.0f - s));
      }
    });
  }
  return out;
}

Tensor log_eps(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::log(px[i] + kLogEps);
  if (track({&x})) {
    attach(out, {x}, [n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      const float* px2 = x2.ptr();
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / (px2[i] + kLogEps);
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  const float* px = x.ptr();
  const std::size_t n = x.numel();
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  out.ptr()[0] = acc;
  if (track({&x})) {
    attach(out, {x}, [n](Tensor& o) {
      const float g = o.grad_ptr()[0];
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw std::runtime_error("mean: empty tensor");
  Tensor s = sum(x);
  return scale(s, 1.0f / static_cast<float>(n));
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
    throw std::runtime_error("add_rowvec: want [M,n] + [n], got " +
                             shape_str(x.shape) + " + " + shape_str(b.shape));
  const int M = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  for (int r = 0; r < M; ++r)
    for (int j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] + pb[j];
  if (track({&x, &b})) {
    attach(out, {x, b}, [M, n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& x2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (x2.requires_grad) {
        x2.ensure_grad();
        float* gx = x2.grad_ptr();
        const std::size_t total = static_cast<std::size_t>(M) * n;
        for (std::size_t i = 0; i < total; ++i) gx[i] += g[i];
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        float* gb = b2.grad_ptr();
        for (int r = 0; r < M; ++r)
          for (int j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw std::runtime_error("matmul: bad shapes " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(1, m, k, n, a.ptr(), b.ptr(), out.ptr(), false);
  if (track({&a, &b})) {
    attach(out, {a, b}, [m, k, n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        kernels::gemm_nt(1, m, n, k, g, b2.ptr(), a2.grad_ptr(), true);
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        kernels::gemm_tn(1, k, m, n, a2.ptr(), g, b2.grad_ptr(), true);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw std::runtime_error("matmul_nt: bad shapes " + shape_str(a.shape) +
                             " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nt(1, m, k, n, a.ptr(), b.ptr(), out.ptr(), false);
  if (track({&a, &b})) {
    attach(out, {a, b}, [m, k, n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        kernels::gemm_nn(1, m, n, k, g, b2.ptr(), a2.grad_ptr(), true);
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        kernels::gemm_tn(1, n, m, k, g, a2.ptr(), b2.grad_ptr(), true);
      }
    });
  }
  return out;
}

namespace {

void check_bmm(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0])
    throw std::runtime_error(std::string(what) + ": bad shapes " +
                             shape_str(a.shape) + " x " + shape_str(b.shape));
}

}  // namespace

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, "bmm_nn");
  if (a.shape[2] != b.shape[1])
    throw std::runtime_error("bmm_nn: inner dim mismatch");
  const int G = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
  Tensor out = Tensor::zeros({G, m, n});
  kernels::gemm_nn(G, m, k, n, a.ptr(), b.ptr(), out.ptr(), false);
  if (track({&a, &b})) {
    attach(out, {a, b}, [G, m, k, n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        kernels::gemm_nt(G, m, n, k, g, b2.ptr(), a2.grad_ptr(), true);
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        kernels::gemm_tn(G, k, m, n, a2.ptr(), g, b2.grad_ptr(), true);
      }
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  check_bmm(a, b, "bmm_nt");
  if (a.shape[2] != b.shape[2])
    throw std::runtime_error("bmm_nt: inner dim mismatch");
  const int G = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[1];
  Tensor out = Tensor::zeros({G, m, n});
  kernels::gemm_nt(G, m, k, n, a.ptr(), b.ptr(), out.ptr(), false);
  if (track({&a, &b})) {
    attach(out, {a, b}, [G, m, k, n](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& a2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      if (a2.requires_grad) {
        a2.ensure_grad();
        kernels::gemm_nn(G, m, n, k, g, b2.ptr(), a2.grad_ptr(), true);
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        kernels::gemm_tn(G, n, m, k, g, a2.ptr(), b2.grad_ptr(), true);
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const std::vector<int>& shape) {
  if (shape_numel(shape) != x.numel())
    throw std::runtime_error("reshape: numel mismatch " + shape_str(x.shape) +
                             " -> " + shape_str(shape));
  Tensor out = Tensor::zeros(shape);
  std::memcpy(out.ptr(), x.ptr(), x.numel() * sizeof(float));
  if (track({&x})) {
    const std::size_t n = x.numel();
    attach(out, {x}, [n](Tensor& o) {
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      const float* g = o.grad_ptr();
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace {

// y[.., j, i] = x[.., i, j]
void do_transpose_last2(const float* x, float* y, std::size_t outer, int r, int c) {
  for (std::size_t o = 0; o < outer; ++o) {
    const float* xs = x + o * static_cast<std::size_t>(r) * c;
    float* ys = y + o * static_cast<std::size_t>(r) * c;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ys[static_cast<std::size_t>(j) * r + i] = xs[static_cast<std::size_t>(i) * c + j];
  }
}

}  // namespace

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw std::runtime_error("transpose_last2: rank < 2");
  std::vector<int> shape = x.shape;
  const int r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::size_t outer = 1;
  for (std::size_t i = 0; i + 2 < x.shape.size(); ++i) outer *= static_cast<std::size_t>(x.shape[i]);
  Tensor out = Tensor::zeros(shape);
  do_transpose_last2(x.ptr(), out.ptr(), outer, r, c);
  if (track({&x})) {
    attach(out, {x}, [outer, r, c](Tensor& o) {
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      // transpose of the gradient lands back in x-layout; accumulate manually
      const float* g = o.grad_ptr();
      float* gx = x2.grad_ptr();
      for (std::size_t ou = 0; ou < outer; ++ou) {
        const float* gs = g + ou * static_cast<std::size_t>(r) * c;
        float* xs = gx + ou * static_cast<std::size_t>(r) * c;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) xs[static_cast<std::size_t>(i) * c + j] += gs[static_cast<std::size_t>(j) * r + i];
      }
    });
  }
  return out;
}

Tensor permute_0213(const Tensor& x) {
  if (x.rank() != 4) throw std::runtime_error("permute_0213: rank != 4");
  const int A = x.shape[0], B = x.shape[1], C = x.shape[2], D = x.shape[3];
  Tensor out = Tensor::zeros({A, C, B, D});
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const float* src = px + (((static_cast<std::size_t>(a) * B + b) * C + c) * D);
        float* dst = po + (((static_cast<std::size_t>(a) * C + c) * B + b) * D);
        std::memcpy(dst, src, static_cast<std::size_t>(D) * sizeof(float));
      }
  if (track({&x})) {
    attach(out, {x}, [A, B, C, D](Tensor& o) {
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      const float* g = o.grad_ptr();
      float* gx = x2.grad_ptr();
      for (int a = 0; a < A; ++a)
        for (int c = 0; c < C; ++c)
          for (int b = 0; b < B; ++b) {
            const float* src = g + (((static_cast<std::size_t>(a) * C + c) * B + b) * D);
            float* dst = gx + (((static_cast<std::size_t>(a) * B + b) * C + c) * D);
            for (int d = 0; d < D; ++d) dst[d] += src[d];
          }
    });
  }
  return out;
}

namespace {

// Rotates pair (2i, 2i+1) of each head row by angle pos * base^(-2i/D).
// dir=+1 forward, dir=-1 inverse (used for the gradient; rotation is orthogonal).
void rope_apply(const float* x, float* y, int BH, int T, int D, float base,
                int pos0, int dir) {
  const int half = D / 2;
  for (int r = 0; r < BH; ++r) {
    for (int t = 0; t < T; ++t) {
      const float* xs = x + (static_cast<std::size_t>(r) * T + t) * D;
      float* ys = y + (static_cast<std::size_t>(r) * T + t) * D;
      const float pos = static_cast<float>(pos0 + t);
      for (int i = 0; i < half; ++i) {
        const float freq = std::pow(base, -2.0f * static_cast<float>(i) / static_cast<float>(D));
        const float ang = pos * freq;
        const float c = std::cos(ang);
        const float s = std::sin(ang) * static_cast<float>(dir);
        const float x0 = xs[2 * i], x1 = xs[2 * i + 1];
        ys[2 * i] = x0 * c - x1 * s;
        ys[2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace

Tensor rope(const Tensor& x, float base, int pos0) {
  if (x.rank() != 4) throw std::runtime_error("rope: want [B,H,T,D]");
  const int B = x.shape[0], H = x.shape[1], T = x.shape[2], D = x.shape[3];
  if (D % 2 != 0) throw std::runtime_error("rope: odd head dim");
  Tensor out = Tensor::zeros(x.shape);
  rope_apply(x.ptr(), out.ptr(), B * H, T, D, base, pos0, +1);
  if (track({&x})) {
    attach(out, {x}, [B, H, T, D, base, pos0](Tensor& o) {
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      std::vector<float> tmp(o.numel());
      rope_apply(o.grad_ptr(), tmp.data(), B * H, T, D, base, pos0, -1);
      float* gx = x2.grad_ptr();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& w, float eps) {
  if (x.rank() < 1 || w.rank() != 1 || x.shape.back() != w.shape[0])
    throw std::runtime_error("rmsnorm: bad shapes " + shape_str(x.shape) +
                             ", w " + shape_str(w.shape));
  const int n = x.shape.back();
  const std::size_t R = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape);
  auto inv_rms = std::make_shared<std::vector<float>>(R);
  kernels::rmsnorm_rows(R, n, x.ptr(), w.ptr(), eps, out.ptr(), inv_rms->data());
  if (track({&x, &w})) {
    attach(out, {x, w}, [R, n, inv_rms](Tensor& o) {
      const float* g = o.grad_ptr();
      Tensor& x2 = o.node->parents[0];
      Tensor& w2 = o.node->parents[1];
      if (x2.requires_grad) {
        x2.ensure_grad();
        kernels::rmsnorm_rows_backward_x(R, n, x2.ptr(), w2.ptr(), inv_rms->data(),
                                         g, x2.grad_ptr(), true);
      }
      if (w2.requires_grad) {
        w2.ensure_grad();
        float* gw = w2.grad_ptr();
        const float* px = x2.ptr();
        const float* ir = inv_rms->data();
        for (std::size_t r = 0; r < R; ++r)
          for (int j = 0; j < n; ++j)
            gw[j] += g[r * n + j] * px[r * n + j] * ir[r];
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, int B, int T) {
  if (table.rank() != 2) throw std::runtime_error("embedding: table must be [V,d]");
  if (static_cast<std::size_t>(B) * T != ids.size())
    throw std::runtime_error("embedding: ids size != B*T");
  const int V = table.shape[0], d = table.shape[1];
  for (int id : ids)
    if (id < 0 || id >= V) throw std::runtime_error("embedding: id out of range");
  Tensor out = Tensor::zeros({B, T, d});
  const float* pt = table.ptr();
  float* po = out.ptr();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(po + i * d, pt + static_cast<std::size_t>(ids[i]) * d,
                static_cast<std::size_t>(d) * sizeof(float));
  if (track({&table})) {
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    attach(out, {table}, [ids_copy, d](Tensor& o) {
      Tensor& t2 = o.node->parents[0];
      t2.ensure_grad();
      const float* g = o.grad_ptr();
      float* gt = t2.grad_ptr();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        float* row = gt + static_cast<std::size_t>((*ids_copy)[i]) * d;
        const float* gr = g + i * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x, const Tensor& bias) {
  check_same_shape(x, bias, "softmax_lastdim");
  if (x.rank() < 1) throw std::runtime_error("softmax_lastdim: rank 0");
  const int n = x.shape.back();
  const std::size_t R = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape);
  if (!kernels::softmax_rows(R, n, x.ptr(), bias.ptr(), out.ptr()))
    throw std::runtime_error("softmax_lastdim: fully masked row");
  if (track({&x, &bias})) {
    Tensor saved = out;
    attach(out, {x, bias}, [R, n, saved](Tensor& o) {
      const float* g = o.grad_ptr();
      const float* p = saved.ptr();
      Tensor& x2 = o.node->parents[0];
      Tensor& b2 = o.node->parents[1];
      // dx = p * (g - sum(p*g)); identical for the additive bias
      if (x2.requires_grad) {
        x2.ensure_grad();
        kernels::softmax_rows_backward(R, n, p, g, x2.grad_ptr(), true);
      }
      if (b2.requires_grad) {
        b2.ensure_grad();
        kernels::softmax_rows_backward(R, n, p, g, b2.grad_ptr(), true);
      }
    });
  }
  return out;
}

Tensor repeat_heads(const Tensor& x, int group) {
  if (x.rank() != 4) throw std::runtime_error("repeat_heads: want [B,K,T,D]");
  if (group < 1) throw std::runtime_error("repeat_heads: group < 1");
  const int B = x.shape[0], K = x.shape[1], T = x.shape[2], D = x.shape[3];
  Tensor out = Tensor::zeros({B, K * group, T, D});
  const std::size_t row = static_cast<std::size_t>(T) * D;
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < group; ++j)
        std::memcpy(po + ((static_cast<std::size_t>(b) * K * group) + k * group + j) * row,
                    px + (static_cast<std::size_t>(b) * K + k) * row, row * sizeof(float));
  if (track({&x})) {
    attach(out, {x}, [B, K, T, D, group, row](Tensor& o) {
      Tensor& x2 = o.node->parents[0];
      x2.ensure_grad();
      const float* g = o.grad_ptr();
      float* gx = x2.grad_ptr();
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          float* dst = gx + (static_cast<std::size_t>(b) * K + k) * row;
          for (int j = 0; j < group; ++j) {
            const float* src = g + ((static_cast<std::size_t>(b) * K * group) + k * group + j) * row;
            for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
          }
        }
    });
  }
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  if (logits.rank() != 2) throw std::runtime_error("cross_entropy_masked: want [M,V]");
  const int M = logits.shape[0], V = logits.shape[1];
  if (targets.size() != static_cast<std::size_t>(M) || mask.size() != static_cast<std::size_t>(M))
    throw std::runtime_error("cross_entropy_masked: targets/mask size mismatch");
  std::size_t cnt = 0;
  for (std::uint8_t m : mask) cnt += (m != 0);
  if (cnt == 0) throw std::runtime_error("cross_entropy_masked: empty mask");
  for (int r = 0; r < M; ++r)
    if (mask[r] && (targets[r] < 0 || targets[r] >= V))
      throw std::runtime_error("cross_entropy_masked: target out of range");

  const float* pl = logits.ptr();
  float acc = 0.0f;
  for (int r = 0; r < M; ++r) {
    if (!mask[r]) continue;
    const float* row = pl + static_cast<std::size_t>(r) * V;
    float mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    float se = 0.0f;
    for (int j = 0; j < V; ++j) se += std::exp(row[j] - mx);
    acc += mx + std::log(se) - row[targets[r]];
  }
  Tensor out = Tensor::zeros({1});
  out.ptr()[0] = acc / static_cast<float>(cnt);
  if (track({&logits})) {
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto mk = std::make_shared<std::vector<std::uint8_t>>(mask);
    attach(out, {logits}, [M, V, cnt, tg, mk](Tensor& o) {
      const float g = o.grad_ptr()[0] / static_cast<float>(cnt);
      Tensor& l2 = o.node->parents[0];
      l2.ensure_grad();
      const float* pl2 = l2.ptr();
      float* gl = l2.grad_ptr();
      for (int r = 0; r < M; ++r) {
        if (!(*mk)[r]) continue;
        const float* row = pl2 + static_cast<std::size_t>(r) * V;
        float* grow = gl + static_cast<std::size_t>(r) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        float se = 0.0f;
        for (int j = 0; j < V; ++j) se += std::exp(row[j] - mx);
        const float inv = 1.0f / se;
        for (int j = 0; j < V; ++j) grow[j] += g * (std::exp(row[j] - mx) * inv);
        grow[(*tg)[r]] -= g;
      }
    });
  }
  return out;
}

}  // namespace spkv

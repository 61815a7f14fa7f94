#pragma once

#include <cstdint>
#include <vector>

#include "spkv/tensor.hpp"

namespace spkv {

constexpr float kLogEps = 1e-8f;

// Elementwise / reductions, each differentiable.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor log_eps(const Tensor& x);  // log(x + 1e-8)
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// x:[M,n] + row vector b:[n].
Tensor add_rowvec(const Tensor& x, const Tensor& b);

// 2D matrix products.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]

// Batched over leading dim G.
Tensor bmm_nn(const Tensor& a, const Tensor& b);  // [G,m,k]x[G,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);  // [G,m,k]x[G,n,k] -> [G,m,n]

// Layout ops.
Tensor reshape(const Tensor& x, const std::vector<int>& shape);
Tensor transpose_last2(const Tensor& x);
Tensor permute_0213(const Tensor& x);  // [A,B,C,D] -> [A,C,B,D]

// Rotary position embedding over [B,H,T,D]; positions pos0..pos0+T-1.
Tensor rope(const Tensor& x, float base, int pos0);

// RMS norm over the last dim with learned scale w.
Tensor rmsnorm(const Tensor& x, const Tensor& w, float eps = 1e-5f);

// ids row-major [B,T]; table [V,d] -> [B,T,d]. Gradient scatters into table.
Tensor embedding(const Tensor& table, const std::vector<int>& ids, int B, int T);

// Softmax over the last dim of x + bias. Entries with bias = -inf get exactly
// zero probability and zero gradient. Throws if a row is fully masked.
Tensor softmax_lastdim(const Tensor& x, const Tensor& bias);

// Mean cross-entropy of logits [M,V] against targets, over mask==1 rows.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

// Broadcast kv heads to their query-head groups:
// [B,K,T,D] -> [B,K*group,T,D], head k*group+j copies head k.
Tensor repeat_heads(const Tensor& x, int group);

// Hooks for modules that define their own differentiable ops.
bool autograd_track(std::initializer_list<const Tensor*> parents);
void autograd_attach(Tensor& out, std::vector<Tensor> parents,
                     std::function<void(Tensor&)> backward);

}  // namespace spkv

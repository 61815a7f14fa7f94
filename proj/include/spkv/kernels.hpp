#pragma once

#include <cstddef>

// Hot inner loops, each in two flavors: a plain serial reference and an
// OpenMP row-parallel version. Both accumulate every output element in the
// same index order, so their results are bit-identical and the parallel
// kernels stay deterministic for any thread count.

namespace spkv::kernels {

// Global switch between the serial reference and the OpenMP kernels.
void set_parallel(bool on);
bool parallel_enabled();
int thread_count();

// Batched GEMM over G independent [m,k]x[k,n] problems, row-major,
// contiguous batches. acc=false overwrites C, acc=true adds into it.
//   nn: C[g,i,j] = sum_p A[g,i,p] * B[g,p,j]      A:[G,m,k] B:[G,k,n]
//   nt: C[g,i,j] = sum_p A[g,i,p] * B[g,j,p]      A:[G,m,k] B:[G,n,k]
//   tn: C[g,i,j] = sum_p A[g,p,i] * B[g,p,j]      A:[G,k,m] B:[G,k,n]
void gemm_nn_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_nt_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_tn_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_nn_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_nt_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_tn_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_nn(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_nt(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);
void gemm_tn(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc);

// Row-wise softmax of x + bias over R rows of width n. Entries with
// bias = -inf come out exactly 0. Rows must have at least one finite bias.
// Returns false if a fully masked row was seen (output then undefined).
bool softmax_rows_serial(std::size_t R, int n, const float* x, const float* bias, float* out);
bool softmax_rows_omp(std::size_t R, int n, const float* x, const float* bias, float* out);
bool softmax_rows(std::size_t R, int n, const float* x, const float* bias, float* out);

// Backward of row softmax: dx[i] = p[i] * (g[i] - sum_j p[j]*g[j]).
// Zero probability rows entries get exactly zero gradient.
void softmax_rows_backward_serial(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc);
void softmax_rows_backward_omp(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc);
void softmax_rows_backward(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc);

// RMS norm over rows: y[i,j] = x[i,j] * w[j] * rsqrt(mean_j x^2 + eps).
// inv_rms (length R) is stashed for the backward pass.
void rmsnorm_rows_serial(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms);
void rmsnorm_rows_omp(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms);
void rmsnorm_rows(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms);

// dx for rmsnorm; dw is accumulated serially by the caller (shared rows).
void rmsnorm_rows_backward_x_serial(std::size_t R, int n, const float* x, const float* w,
                                    const float* inv_rms, const float* dy, float* dx, bool acc);
void rmsnorm_rows_backward_x_omp(std::size_t R, int n, const float* x, const float* w,
                                 const float* inv_rms, const float* dy, float* dx, bool acc);
void rmsnorm_rows_backward_x(std::size_t R, int n, const float* x, const float* w,
                             const float* inv_rms, const float* dy, float* dx, bool acc);

}  // namespace spkv::kernels

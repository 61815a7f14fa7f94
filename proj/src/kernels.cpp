#include "spkv/kernels.hpp"

#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace spkv::kernels {

namespace {
bool g_parallel = true;
constexpr float kNegInf = -std::numeric_limits<float>::infinity();
}  // namespace

void set_parallel(bool on) { g_parallel = on; }
bool parallel_enabled() { return g_parallel; }

int thread_count() {
#ifdef _OPENMP
    return g_parallel ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

// One output row of C = A(row i) * B. The j loop is an independent
// accumulator per output element, so vectorizing it does not reorder any
// single sum; serial and OpenMP paths share these row kernels and stay
// bit-identical to each other.
static inline void gemm_nn_row(int k, int n, const float* __restrict a_row,
                               const float* __restrict B, float* __restrict c_row, bool acc) {
    if (!acc) {
        for (int j = 0; j < n; ++j) c_row[j] = 0.0f;
    }
    for (int p = 0; p < k; ++p) {
        const float a = a_row[p];
        const float* __restrict b_row = B + static_cast<std::size_t>(p) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
}

static inline void gemm_nt_row(int k, int n, const float* __restrict a_row,
                               const float* __restrict B, float* __restrict c_row, bool acc) {
    for (int j = 0; j < n; ++j) {
        const float* __restrict b_row = B + static_cast<std::size_t>(j) * k;
        float s = 0.0f;
#pragma omp simd reduction(+ : s)
        for (int p = 0; p < k; ++p) s += a_row[p] * b_row[p];
        c_row[j] = acc ? c_row[j] + s : s;
    }
}

// C row i (length n) from A column i: C[i,j] = sum_p A[p,i] * B[p,j].
static inline void gemm_tn_row(int m, int k, int n, int i, const float* __restrict A,
                               const float* __restrict B, float* __restrict c_row, bool acc) {
    if (!acc) {
        for (int j = 0; j < n; ++j) c_row[j] = 0.0f;
    }
    for (int p = 0; p < k; ++p) {
        const float a = A[static_cast<std::size_t>(p) * m + i];
        const float* __restrict b_row = B + static_cast<std::size_t>(p) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
}

void gemm_nn_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    for (int g = 0; g < G; ++g) {
        const float* Ag = A + static_cast<std::size_t>(g) * m * k;
        const float* Bg = B + static_cast<std::size_t>(g) * k * n;
        float* Cg = C + static_cast<std::size_t>(g) * m * n;
        for (int i = 0; i < m; ++i)
            gemm_nn_row(k, n, Ag + static_cast<std::size_t>(i) * k, Bg, Cg + static_cast<std::size_t>(i) * n, acc);
    }
}

void gemm_nn_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    const std::size_t rows = static_cast<std::size_t>(G) * m;
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t g = r / m, i = r % m;
        const float* Ag = A + (g * m + i) * k;
        const float* Bg = B + g * static_cast<std::size_t>(k) * n;
        gemm_nn_row(k, n, Ag, Bg, C + r * n, acc);
    }
}

void gemm_nt_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    for (int g = 0; g < G; ++g) {
        const float* Ag = A + static_cast<std::size_t>(g) * m * k;
        const float* Bg = B + static_cast<std::size_t>(g) * n * k;
        float* Cg = C + static_cast<std::size_t>(g) * m * n;
        for (int i = 0; i < m; ++i)
            gemm_nt_row(k, n, Ag + static_cast<std::size_t>(i) * k, Bg, Cg + static_cast<std::size_t>(i) * n, acc);
    }
}

void gemm_nt_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    const std::size_t rows = static_cast<std::size_t>(G) * m;
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t g = r / m, i = r % m;
        const float* Ag = A + (g * m + i) * k;
        const float* Bg = B + g * static_cast<std::size_t>(n) * k;
        gemm_nt_row(k, n, Ag, Bg, C + r * n, acc);
    }
}

void gemm_tn_serial(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    for (int g = 0; g < G; ++g) {
        const float* Ag = A + static_cast<std::size_t>(g) * k * m;
        const float* Bg = B + static_cast<std::size_t>(g) * k * n;
        float* Cg = C + static_cast<std::size_t>(g) * m * n;
        for (int i = 0; i < m; ++i)
            gemm_tn_row(m, k, n, i, Ag, Bg, Cg + static_cast<std::size_t>(i) * n, acc);
    }
}

void gemm_tn_omp(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    const std::size_t rows = static_cast<std::size_t>(G) * m;
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t g = r / m, i = r % m;
        const float* Ag = A + g * static_cast<std::size_t>(k) * m;
        const float* Bg = B + g * static_cast<std::size_t>(k) * n;
        gemm_tn_row(m, k, n, static_cast<int>(i), Ag, Bg, C + r * n, acc);
    }
}

void gemm_nn(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    g_parallel ? gemm_nn_omp(G, m, k, n, A, B, C, acc) : gemm_nn_serial(G, m, k, n, A, B, C, acc);
}
void gemm_nt(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    g_parallel ? gemm_nt_omp(G, m, k, n, A, B, C, acc) : gemm_nt_serial(G, m, k, n, A, B, C, acc);
}
void gemm_tn(int G, int m, int k, int n, const float* A, const float* B, float* C, bool acc) {
    g_parallel ? gemm_tn_omp(G, m, k, n, A, B, C, acc) : gemm_tn_serial(G, m, k, n, A, B, C, acc);
}

// ---------------------------------------------------------------------------
// Softmax rows
// ---------------------------------------------------------------------------

static inline bool softmax_one_row(int n, const float* __restrict x, const float* __restrict bias,
                                   float* __restrict out) {
    float mx = kNegInf;
#pragma omp simd reduction(max : mx)
    for (int j = 0; j < n; ++j) {
        const float v = x[j] + bias[j];
        if (v > mx) mx = v;
    }
    if (mx == kNegInf) return false;  // fully masked row
    float sum = 0.0f;
    for (int j = 0; j < n; ++j) {
        const float v = x[j] + bias[j];
        const float e = (v == kNegInf) ? 0.0f : std::exp(v - mx);
        out[j] = e;
        sum += e;
    }
    const float inv = 1.0f / sum;
#pragma omp simd
    for (int j = 0; j < n; ++j) out[j] *= inv;
    return true;
}

bool softmax_rows_serial(std::size_t R, int n, const float* x, const float* bias, float* out) {
    bool ok = true;
    for (std::size_t r = 0; r < R; ++r)
        ok = softmax_one_row(n, x + r * n, bias + r * n, out + r * n) && ok;
    return ok;
}

bool softmax_rows_omp(std::size_t R, int n, const float* x, const float* bias, float* out) {
    bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok)
    for (std::size_t r = 0; r < R; ++r)
        ok = softmax_one_row(n, x + r * n, bias + r * n, out + r * n) && ok;
    return ok;
}

bool softmax_rows(std::size_t R, int n, const float* x, const float* bias, float* out) {
    return g_parallel ? softmax_rows_omp(R, n, x, bias, out) : softmax_rows_serial(R, n, x, bias, out);
}

static inline void softmax_backward_row(int n, const float* p, const float* g, float* dx, bool acc) {
    float dot = 0.0f;
    for (int j = 0; j < n; ++j) dot += p[j] * g[j];
    for (int j = 0; j < n; ++j) {
        const float v = p[j] * (g[j] - dot);
        dx[j] = acc ? dx[j] + v : v;
    }
}

void softmax_rows_backward_serial(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc) {
    for (std::size_t r = 0; r < R; ++r) softmax_backward_row(n, p + r * n, g + r * n, dx + r * n, acc);
}

void softmax_rows_backward_omp(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < R; ++r) softmax_backward_row(n, p + r * n, g + r * n, dx + r * n, acc);
}

void softmax_rows_backward(std::size_t R, int n, const float* p, const float* g, float* dx, bool acc) {
    g_parallel ? softmax_rows_backward_omp(R, n, p, g, dx, acc)
               : softmax_rows_backward_serial(R, n, p, g, dx, acc);
}

// ---------------------------------------------------------------------------
// RMS norm rows
// ---------------------------------------------------------------------------

static inline void rmsnorm_row(int n, const float* x, const float* w, float eps, float* y, float* inv_rms) {
    float ss = 0.0f;
    for (int j = 0; j < n; ++j) ss += x[j] * x[j];
    const float r = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
    *inv_rms = r;
    for (int j = 0; j < n; ++j) y[j] = x[j] * w[j] * r;
}

void rmsnorm_rows_serial(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms) {
    for (std::size_t r = 0; r < R; ++r) rmsnorm_row(n, x + r * n, w, eps, y + r * n, inv_rms + r);
}

void rmsnorm_rows_omp(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < R; ++r) rmsnorm_row(n, x + r * n, w, eps, y + r * n, inv_rms + r);
}

void rmsnorm_rows(std::size_t R, int n, const float* x, const float* w, float eps, float* y, float* inv_rms) {
    g_parallel ? rmsnorm_rows_omp(R, n, x, w, eps, y, inv_rms)
               : rmsnorm_rows_serial(R, n, x, w, eps, y, inv_rms);
}

// dL/dx_j = r * (w_j*dy_j - x_j * r^2 / n * sum_i dy_i*w_i*x_i)
static inline void rmsnorm_backward_row(int n, const float* x, const float* w, float inv_rms,
                                        const float* dy, float* dx, bool acc) {
    float dot = 0.0f;
    for (int j = 0; j < n; ++j) dot += dy[j] * w[j] * x[j];
    const float c = inv_rms * inv_rms * inv_rms * dot / static_cast<float>(n);
    for (int j = 0; j < n; ++j) {
        const float v = inv_rms * w[j] * dy[j] - c * x[j];
        dx[j] = acc ? dx[j] + v : v;
    }
}

void rmsnorm_rows_backward_x_serial(std::size_t R, int n, const float* x, const float* w,
                                    const float* inv_rms, const float* dy, float* dx, bool acc) {
    for (std::size_t r = 0; r < R; ++r)
        rmsnorm_backward_row(n, x + r * n, w, inv_rms[r], dy + r * n, dx + r * n, acc);
}

void rmsnorm_rows_backward_x_omp(std::size_t R, int n, const float* x, const float* w,
                                 const float* inv_rms, const float* dy, float* dx, bool acc) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < R; ++r)
        rmsnorm_backward_row(n, x + r * n, w, inv_rms[r], dy + r * n, dx + r * n, acc);
}

void rmsnorm_rows_backward_x(std::size_t R, int n, const float* x, const float* w,
                             const float* inv_rms, const float* dy, float* dx, bool acc) {
    g_parallel ? rmsnorm_rows_backward_x_omp(R, n, x, w, inv_rms, dy, dx, acc)
               : rmsnorm_rows_backward_x_serial(R, n, x, w, inv_rms, dy, dx, acc);
}

}  // namespace spkv::kernels

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace spkv {

// Deterministic SplitMix64 stream. Pinned so runs reproduce bit-identically
// across platforms and implementations.
struct Rng {
    std::uint64_t state = 0;

    explicit Rng(std::uint64_t seed = 0) : state(seed) {}

    std::uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    float next_float() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller.
    float next_normal();
};

struct Tensor;

struct Node {
    std::vector<Tensor> parents;
    std::function<void(Tensor&)> backward;
};

// Dense row-major f32 tensor. Copies are shallow handles onto the same
// storage, so a grad buffer created through any handle is visible to all of
// them; autograd edges hang off `node`.
struct Tensor {
    struct Storage {
        std::vector<float> data;
        std::vector<float> grad;  // empty until ensure_grad()
    };

    std::vector<int> shape;
    std::shared_ptr<Storage> st;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    Tensor() = default;

    static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
    static Tensor full(const std::vector<int>& shape, float value, bool requires_grad = false);
    static Tensor from_values(const std::vector<int>& shape, const std::vector<float>& values,
                              bool requires_grad = false);
    static Tensor randn(const std::vector<int>& shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);

    std::size_t numel() const;
    bool defined() const { return static_cast<bool>(st); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return st->data.data(); }
    const float* ptr() const { return st->data.data(); }
    float item() const;

    void ensure_grad();
    void zero_grad();
    bool has_grad() const { return st && !st->grad.empty(); }
    float* grad_ptr() { return st->grad.data(); }
    const float* grad_ptr() const { return st->grad.data(); }

    // Detached handle onto the same storage (no autograd edge, won't train).
    Tensor detach() const;
};

// Gradient recording is on by default; disable it around evaluation-only
// forwards to skip tape construction.
bool grad_enabled();

struct NoGradGuard {
    bool prev;
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse-mode sweep from `root` (a scalar): topologically orders the tape
// and accumulates gradients into every reachable requires_grad tensor.
void backward(Tensor root);

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

}  // namespace spkv

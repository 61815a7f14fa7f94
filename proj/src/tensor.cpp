#include "spkv/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace spkv {

float Rng::next_normal() {
    // Box-Muller; both uniforms drawn per call so the stream layout is fixed.
    float u1 = next_float();
    const float u2 = next_float();
    if (u1 <= 0.0f) u1 = 1.0f / 16777216.0f;
    const float r = std::sqrt(-2.0f * std::log(u1));
    constexpr float two_pi = 6.28318530717958647692f;
    return r * std::cos(two_pi * u2);
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::runtime_error("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
    Tensor t;
    t.shape = shape;
    t.st = std::make_shared<Storage>();
    t.st->data.assign(shape_numel(shape), 0.0f);
    t.requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(const std::vector<int>& shape, float value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    for (float& v : t.st->data) v = value;
    return t;
}

Tensor Tensor::from_values(const std::vector<int>& shape, const std::vector<float>& values,
                           bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw std::runtime_error("from_values: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(shape));
    Tensor t = zeros(shape, requires_grad);
    t.st->data = values;
    return t;
}

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    for (float& v : t.st->data) v = rng.next_normal() * stddev;
    return t;
}

std::size_t Tensor::numel() const { return st ? st->data.size() : 0; }

float Tensor::item() const {
    if (numel() != 1) throw std::runtime_error("item() on tensor of shape " + shape_str(shape));
    return st->data[0];
}

void Tensor::ensure_grad() {
    if (st->grad.empty()) st->grad.assign(st->data.size(), 0.0f);
}

void Tensor::zero_grad() {
    for (float& g : st->grad) g = 0.0f;
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape = shape;
    t.st = st;
    t.requires_grad = false;
    return t;
}

namespace {
bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void backward(Tensor root) {
    if (root.numel() != 1) throw std::runtime_error("backward: root must be a scalar");
    if (!root.requires_grad || !root.node)
        throw std::runtime_error("backward: root does not require grad");

    // Explicit topological order via iterative DFS over tape nodes.
    std::vector<Tensor> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Tensor t;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root.node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        Node* node = f.t.node.get();
        if (f.next_parent < node->parents.size()) {
            Tensor& p = node->parents[f.next_parent++];
            if (p.node && !visited.count(p.node.get())) {
                visited.insert(p.node.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }

    root.ensure_grad();
    root.st->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor t = *it;
        if (t.node && t.node->backward) t.node->backward(t);
    }
}

}  // namespace spkv

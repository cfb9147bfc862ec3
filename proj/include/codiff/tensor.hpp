// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float32 tensor plus a minimal reverse-mode tape.
// A Tensor is cheap to copy: copies share the same data/grad buffers.
// Ops (see ops.hpp) attach a Node holding the parents and a backprop
// closure; backward() replays the tape in reverse topological order.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace codiff {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

struct Node;

struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<float>> data;
    std::shared_ptr<std::vector<float>> grad;  // allocated iff requires_grad
    std::shared_ptr<Node> node;                // set iff produced by a tracked op
    bool requires_grad = false;
    // Reductions (sum/mse) stash their double accumulation here so scalar
    // losses can be read without the f32 rounding; see item_hi().
    std::shared_ptr<double> scalar_hi;

    Tensor() = default;

    static Tensor zeros(const Shape& s, bool req_grad = false) {
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<float>>(shape_numel(s), 0.0f);
        if (req_grad) t.enable_grad();
        return t;
    }

    static Tensor full(const Shape& s, float v) {
        Tensor t = zeros(s);
        for (float& x : *t.data) x = v;
        return t;
    }

    static Tensor from(const Shape& s, std::vector<float> values) {
        if (values.size() != shape_numel(s))
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(s));
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<float>>(std::move(values));
        return t;
    }

    bool defined() const { return static_cast<bool>(data); }
    size_t numel() const { return data ? data->size() : 0; }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data->data(); }
    const float* ptr() const { return data->data(); }
    float& at(size_t i) { return (*data)[i]; }
    float at(size_t i) const { return (*data)[i]; }

    // Scalar fetch for [1]-shaped results (losses).
    float item() const {
        if (numel() != 1) throw std::logic_error("tensor: item() on shape " + shape_str(shape));
        return (*data)[0];
    }

    // Scalar fetch at accumulation precision (falls back to the f32 value).
    double item_hi() const {
        if (numel() != 1) throw std::logic_error("tensor: item_hi() on shape " + shape_str(shape));
        return scalar_hi ? *scalar_hi : static_cast<double>((*data)[0]);
    }

    void enable_grad() {
        requires_grad = true;
        if (!grad) grad = std::make_shared<std::vector<float>>(numel(), 0.0f);
    }

    void zero_grad() {
        if (grad)
            for (float& g : *grad) g = 0.0f;
    }

    // Same buffers, no tape: use to pass a produced value as a constant.
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    // Same data buffer reinterpreted under a new shape (numel must match).
    Tensor aliased(const Shape& s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("tensor: alias " + shape_str(shape) + " as " + shape_str(s));
        Tensor t = *this;
        t.shape = s;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<float>>(*data);
        return t;
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_shape(const Tensor& t, const Shape& s, const char* what) {
    if (t.shape != s)
        throw std::invalid_argument(std::string(what) + ": expected " + shape_str(s) +
                                    ", got " + shape_str(t.shape));
}

inline bool all_finite(const Tensor& t) {
    for (float v : *t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

struct Node {
    std::vector<Tensor> parents;
    // Receives the op output (to read its grad buffer) and accumulates into
    // the parents' grad buffers.
    std::function<void(const Tensor&)> backprop;
};

// Thread-local tape switch. Ops record nodes only while this is on.
inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse pass from a scalar loss. Seeds d(loss)/d(loss)=1 and walks the
// recorded tape once in reverse topological order.
inline void backward(Tensor& loss) {
    if (loss.numel() != 1)
        throw std::logic_error("backward: loss must be a scalar, got " + shape_str(loss.shape));
    if (!loss.node) {
        if (loss.requires_grad) {  // loss is itself a leaf; gradient is trivially 1
            (*loss.grad)[0] += 1.0f;
            return;
        }
        throw std::logic_error("backward: no recorded graph behind this value");
    }

    std::vector<Tensor> order;
    std::unordered_set<const Node*> seen;
    // Iterative DFS; builds post-order = topological order of the DAG.
    struct Frame {
        Tensor t;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss, 0});
    seen.insert(loss.node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& parents = f.t.node->parents;
        bool descended = false;
        while (f.next_parent < parents.size()) {
            const Tensor& p = parents[f.next_parent++];
            if (p.node && !seen.count(p.node.get())) {
                seen.insert(p.node.get());
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_parent >= parents.size()) {
            order.push_back(f.t);
            stack.pop_back();
        }
    }

    if (!loss.grad) throw std::logic_error("backward: loss has no grad buffer");
    (*loss.grad)[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (it->node->backprop) it->node->backprop(*it);
}

}  // namespace codiff

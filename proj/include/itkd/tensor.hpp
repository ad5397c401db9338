#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

#include "itkd/errors.hpp"

namespace itkd {

namespace detail {
// Map-sized tensor buffers (hundreds of KB) otherwise bounce through
// mmap/munmap on every training step, and the kernel re-zeroes the pages
// each time. Raising the thresholds keeps them on the heap free lists.
inline const bool malloc_tuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 64 << 20);
#endif
    return true;
}();
}  // namespace detail

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the recorded computation graph. Leaves have no parents;
/// interior nodes carry the closure that routes the output gradient to the
/// parents' gradient buffers.
struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool frozen = false;  // leaf only: gradient stays zero, optimizer skips it
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    // True when gradients should flow into this node during backward.
    bool contributes() const { return requires_grad && !frozen; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

/// Tape recording switch. When off, ops produce detached leaves.
inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

/// Tracks how close any relu/abs/clamp input came to its kink during the
/// forward passes since the last reset. The finite-difference checker uses
/// this to exclude instances sitting on a nondifferentiable point.
inline double& kink_distance() {
    thread_local double d = 1e300;
    return d;
}

inline void note_kink(double dist) {
    if (dist < kink_distance()) kink_distance() = dist;
}

}  // namespace detail

inline void reset_kink_distance() { detail::kink_distance() = 1e300; }
inline double min_kink_distance() { return detail::kink_distance(); }

/// Scoped guard that disables graph recording (teacher forward, evaluation).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

/// Dense double-precision tensor, a cheap handle onto a shared graph node.
/// Values are immutable once the tensor participates in an op; raw_values()
/// is for leaf initialization and test-side perturbation only.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->values.assign(std::size_t(numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_values(Shape shape, std::vector<double> v, bool requires_grad = false) {
        if (std::int64_t(v.size()) != numel(shape))
            throw ShapeError(msg("tensor: ", v.size(), " values do not fill shape ", shape_str(shape)));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from_values({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    int rank() const { return int(node().shape.size()); }
    int dim(int i) const { return node().shape[std::size_t(i)]; }
    std::int64_t size() const { return std::int64_t(node().values.size()); }

    std::span<const double> values() const { return node().values; }

    /// Mutable access to a leaf's storage. Refuses interior nodes: their
    /// values are owned by the recorded graph.
    std::span<double> raw_values() {
        if (!node().parents.empty())
            throw Error("tensor: raw_values() is only valid on leaf tensors");
        return node().values;
    }

    double scalar_value() const {
        if (size() != 1)
            throw ShapeError(msg("tensor: scalar_value() on shape ", shape_str(shape())));
        return node().values[0];
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool b) { node().requires_grad = b; }
    bool frozen() const { return node().frozen; }
    void set_frozen(bool b) { node().frozen = b; }

    std::span<const double> grad() const {
        node().ensure_grad();
        return node().grad;
    }

    void zero_grad() {
        node().grad.assign(node().values.size(), 0.0);
    }

    /// Leaf copy of the values; gradients never flow through it.
    Tensor detach() const {
        auto n = std::make_shared<detail::Node>();
        n->shape = node().shape;
        n->values = node().values;
        return Tensor(std::move(n));
    }

    detail::Node& node() const {
        if (!node_) throw Error("tensor: use of default-constructed tensor");
        return *node_;
    }

    detail::NodePtr node_ptr() const { return node_; }

    static Tensor from_node(detail::NodePtr n) { return Tensor(std::move(n)); }

  private:
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

    detail::NodePtr node_;
};

namespace detail {

/// Assembles an op result node. Honors grad_mode: with recording off the
/// result is a detached leaf holding just the forward values.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<NodePtr> parents,
                          std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    if (grad_mode()) {
        bool needs = false;
        for (const auto& p : parents)
            if (p->contributes()) { needs = true; break; }
        if (needs) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::from_node(std::move(n));
}

}  // namespace detail
}  // namespace itkd

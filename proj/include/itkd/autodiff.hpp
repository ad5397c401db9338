#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "itkd/tensor.hpp"

namespace itkd {

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable contributing leaf; frozen and unreachable leaves keep zeros
/// (buffers are allocated lazily, zero_grad() clears accumulation).
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError(msg("backward: loss must be scalar, got ", shape_str(loss.shape())));
    auto root = loss.node_ptr();
    if (!root || !root->requires_grad) return;

    // Reverse DFS post-order = valid topological order: every node runs
    // before the nodes it consumes from.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* n;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get()});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (!p->parents.empty() && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        n->ensure_grad();
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::string worst_leaf;
    int worst_index = -1;
    int elements_checked = 0;
    double min_kink_distance = 1e300;  // over all forward evaluations
    bool kink_excluded = false;        // instance rejected: sat on a relu/abs/clamp kink

    bool pass(double tol) const { return !kink_excluded && max_rel_err < tol; }
};

struct FdLeaf {
    std::string name;
    Tensor tensor;
};

/// Compares analytic gradients of build() against central differences for
/// every element of every leaf. build() must reconstruct the scalar loss
/// from the leaves' current values on each call.
///
/// Instances whose forward pass comes within kink_tol of a relu/abs/clamp
/// kink are excluded (reported, not compared): the derivative is not
/// defined there and the comparison would be meaningless.
inline FiniteDiffReport finite_diff_check(const std::function<Tensor()>& build,
                                          const std::vector<FdLeaf>& leaves,
                                          double step = 1e-5, double kink_tol = 1e-6) {
    FiniteDiffReport rep;

    reset_kink_distance();
    Tensor loss = build();
    rep.min_kink_distance = min_kink_distance();
    if (rep.min_kink_distance < kink_tol) {
        rep.kink_excluded = true;
        return rep;
    }

    for (const auto& l : leaves) l.tensor.node().grad.assign(l.tensor.node().values.size(), 0.0);
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& l : leaves) {
        l.tensor.node().ensure_grad();
        analytic.push_back(l.tensor.node().grad);
    }

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].tensor.node().values;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double saved = vals[i];
            double fp, fm;
            {
                NoGradGuard ng;
                vals[i] = saved + step;
                fp = build().scalar_value();
                vals[i] = saved - step;
                fm = build().scalar_value();
            }
            vals[i] = saved;
            rep.min_kink_distance = std::min(rep.min_kink_distance, min_kink_distance());

            double numeric = (fp - fm) / (2.0 * step);
            double a = analytic[li][i];
            double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            double rel = std::fabs(a - numeric) / denom;
            ++rep.elements_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_leaf = leaves[li].name;
                rep.worst_index = int(i);
            }
        }
    }
    if (rep.min_kink_distance < kink_tol) rep.kink_excluded = true;
    return rep;
}

}  // namespace itkd

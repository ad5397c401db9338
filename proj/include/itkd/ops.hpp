#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "itkd/tensor.hpp"

namespace itkd {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const char* prim, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(msg(prim, ": shape mismatch ", shape_str(a.shape()), " vs ",
                             shape_str(b.shape())));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();

    if (a.shape() == b.shape()) {
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        return detail::make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](detail::Node& n) {
            if (ap->contributes()) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) ap->grad[i] += n.grad[i];
            }
            if (bp->contributes()) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) bp->grad[i] += n.grad[i];
            }
        });
    }

    // Bias broadcast: [m,n]+[n] over rows, or [c,h,w]+[c] over channels.
    // The only broadcasting this library performs.
    bool row_bias = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    bool chan_bias = a.rank() == 3 && b.rank() == 1 && a.dim(0) == b.dim(0);
    if (!row_bias && !chan_bias)
        throw ShapeError(msg("add: shape mismatch ", shape_str(a.shape()), " vs ",
                             shape_str(b.shape())));

    std::vector<double> out(av.size());
    if (row_bias) {
        int m = a.dim(0), cols = a.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < cols; ++j) out[std::size_t(i * cols + j)] = av[std::size_t(i * cols + j)] + bv[std::size_t(j)];
    } else {
        int c = a.dim(0);
        std::int64_t hw = std::int64_t(a.dim(1)) * a.dim(2);
        for (int ch = 0; ch < c; ++ch) {
            double bias = bv[std::size_t(ch)];
            for (std::int64_t i = 0; i < hw; ++i) out[std::size_t(ch * hw + i)] = av[std::size_t(ch * hw + i)] + bias;
        }
    }
    bool rb = row_bias;
    return detail::make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp, rb](detail::Node& n) {
        if (ap->contributes()) {
            ap->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) ap->grad[i] += n.grad[i];
        }
        if (bp->contributes()) {
            bp->ensure_grad();
            if (rb) {
                int m = n.shape[0], cols = n.shape[1];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < cols; ++j) bp->grad[std::size_t(j)] += n.grad[std::size_t(i * cols + j)];
            } else {
                int c = n.shape[0];
                std::int64_t hw = std::int64_t(n.shape[1]) * n.shape[2];
                for (int ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) s += n.grad[std::size_t(ch * hw + i)];
                    bp->grad[std::size_t(ch)] += s;
                }
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](detail::Node& n) {
        if (ap->contributes()) {
            ap->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) ap->grad[i] += n.grad[i];
        }
        if (bp->contributes()) {
            bp->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bp->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](detail::Node& n) {
        if (ap->contributes()) {
            ap->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) ap->grad[i] += n.grad[i] * bp->values[i];
        }
        if (bp->contributes()) {
            bp->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bp->grad[i] += n.grad[i] * ap->values[i];
        }
    });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
    const auto& av = a.node().values;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
    auto ap = a.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {ap}, [ap, s](detail::Node& n) {
        if (!ap->contributes()) return;
        ap->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) ap->grad[i] += n.grad[i] * s;
    });
}

inline Tensor relu(const Tensor& x) {
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    double kink = 1e300;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        double d = std::fabs(xv[i]);
        if (d < kink) kink = d;
    }
    detail::note_kink(kink);
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (xp->values[i] > 0.0) xp->grad[i] += n.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& x) {
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double s = n.values[i];
            xp->grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

inline Tensor exp(const Tensor& x) {
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) xp->grad[i] += n.grad[i] * n.values[i];
    });
}

/// Natural log; inputs must be strictly positive (clamp upstream).
inline Tensor log(const Tensor& x) {
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::log(xv[i]);
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) xp->grad[i] += n.grad[i] / xp->values[i];
    });
}

/// Abs; subgradient at 0 is 0.
inline Tensor abs(const Tensor& x) {
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    double kink = 1e300;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = std::fabs(xv[i]);
        if (out[i] < kink) kink = out[i];
    }
    detail::note_kink(kink);
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double v = xp->values[i];
            double sgn = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            xp->grad[i] += n.grad[i] * sgn;
        }
    });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw Error(msg("clamp: invalid bounds [", lo, ", ", hi, "]"));
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    double kink = 1e300;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = std::min(std::max(xv[i], lo), hi);
        double d = std::min(std::fabs(xv[i] - lo), std::fabs(xv[i] - hi));
        if (d < kink) kink = d;
    }
    detail::note_kink(kink);
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp}, [xp, lo, hi](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double v = xp->values[i];
            if (v > lo && v < hi) xp->grad[i] += n.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError(msg("matmul: incompatible shapes ", shape_str(a.shape()), " and ",
                             shape_str(b.shape())));
    int m = a.dim(0), k = a.dim(1), ncol = b.dim(1);
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    std::vector<double> out(std::size_t(m) * std::size_t(ncol), 0.0);
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            double aik = av[std::size_t(i * k + kk)];
            const double* brow = bv.data() + std::size_t(kk) * std::size_t(ncol);
            double* crow = out.data() + std::size_t(i) * std::size_t(ncol);
            for (int j = 0; j < ncol; ++j) crow[j] += aik * brow[j];
        }
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return detail::make_result({m, ncol}, std::move(out), {ap, bp},
                               [ap, bp, m, k, ncol](detail::Node& n) {
        const double* g = n.grad.data();
        if (ap->contributes()) {
            ap->ensure_grad();
            // dA = g * B^T
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    const double* grow = g + std::size_t(i) * std::size_t(ncol);
                    const double* brow = bp->values.data() + std::size_t(kk) * std::size_t(ncol);
                    double s = 0.0;
                    for (int j = 0; j < ncol; ++j) s += grow[j] * brow[j];
                    ap->grad[std::size_t(i * k + kk)] += s;
                }
        }
        if (bp->contributes()) {
            bp->ensure_grad();
            // dB = A^T * g
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    double aik = ap->values[std::size_t(i * k + kk)];
                    const double* grow = g + std::size_t(i) * std::size_t(ncol);
                    double* brow = bp->grad.data() + std::size_t(kk) * std::size_t(ncol);
                    for (int j = 0; j < ncol; ++j) brow[j] += aik * grow[j];
                }
        }
    });
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2)
        throw ShapeError(msg("transpose-2d: expected rank 2, got ", shape_str(x.shape())));
    int m = x.dim(0), ncol = x.dim(1);
    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < ncol; ++j) out[std::size_t(j * m + i)] = xv[std::size_t(i * ncol + j)];
    auto xp = x.node_ptr();
    return detail::make_result({ncol, m}, std::move(out), {xp}, [xp, m, ncol](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < ncol; ++j)
                xp->grad[std::size_t(i * ncol + j)] += n.grad[std::size_t(j * m + i)];
    });
}

/// Row-stable softmax over one axis of a rank-2 tensor.
inline Tensor softmax(const Tensor& x, int axis) {
    if (x.rank() != 2)
        throw ShapeError(msg("softmax-along-axis: expected rank 2, got ", shape_str(x.shape())));
    if (axis != 0 && axis != 1)
        throw ShapeError(msg("softmax-along-axis: axis ", axis, " out of range for ",
                             shape_str(x.shape())));
    int m = x.dim(0), ncol = x.dim(1);
    int lines = axis == 1 ? m : ncol;
    int len = axis == 1 ? ncol : m;
    int stride = axis == 1 ? 1 : ncol;
    int line_stride = axis == 1 ? ncol : 1;

    const auto& xv = x.node().values;
    std::vector<double> out(xv.size());
    for (int l = 0; l < lines; ++l) {
        const double* in = xv.data() + std::size_t(l) * std::size_t(line_stride);
        double* o = out.data() + std::size_t(l) * std::size_t(line_stride);
        double mx = in[0];
        for (int i = 1; i < len; ++i) mx = std::max(mx, in[std::size_t(i) * std::size_t(stride)]);
        double sum = 0.0;
        for (int i = 0; i < len; ++i) {
            double e = std::exp(in[std::size_t(i) * std::size_t(stride)] - mx);
            o[std::size_t(i) * std::size_t(stride)] = e;
            sum += e;
        }
        for (int i = 0; i < len; ++i) o[std::size_t(i) * std::size_t(stride)] /= sum;
    }
    auto xp = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {xp},
                               [xp, lines, len, stride, line_stride](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (int l = 0; l < lines; ++l) {
            const double* y = n.values.data() + std::size_t(l) * std::size_t(line_stride);
            const double* g = n.grad.data() + std::size_t(l) * std::size_t(line_stride);
            double* dx = xp->grad.data() + std::size_t(l) * std::size_t(line_stride);
            double dot = 0.0;
            for (int i = 0; i < len; ++i) {
                std::size_t k = std::size_t(i) * std::size_t(stride);
                dot += g[k] * y[k];
            }
            for (int i = 0; i < len; ++i) {
                std::size_t k = std::size_t(i) * std::size_t(stride);
                dx[k] += (g[k] - dot) * y[k];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and structure
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    const auto& xv = x.node().values;
    double s = 0.0;
    for (double v : xv) s += v;
    auto xp = x.node_ptr();
    return detail::make_result({1}, {s}, {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        double g = n.grad[0];
        for (std::size_t i = 0; i < xp->grad.size(); ++i) xp->grad[i] += g;
    });
}

inline Tensor mean(const Tensor& x) {
    const auto& xv = x.node().values;
    double s = 0.0;
    for (double v : xv) s += v;
    double inv = 1.0 / double(xv.size());
    auto xp = x.node_ptr();
    return detail::make_result({1}, {s * inv}, {xp}, [xp, inv](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        double g = n.grad[0] * inv;
        for (std::size_t i = 0; i < xp->grad.size(); ++i) xp->grad[i] += g;
    });
}

inline Tensor concat(std::span<const Tensor> xs, int axis) {
    if (xs.empty()) throw ShapeError("concat-along-axis: no inputs");
    int rank = xs[0].rank();
    if (!((rank == 2 && (axis == 0 || axis == 1)) || (rank == 3 && axis == 0)))
        throw ShapeError(msg("concat-along-axis: axis ", axis, " unsupported for rank ", rank));
    for (const auto& t : xs)
        if (t.rank() != rank)
            throw ShapeError("concat-along-axis: mixed ranks");

    Shape out_shape = xs[0].shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        const Shape& s = xs[i].shape();
        for (int d = 0; d < rank; ++d)
            if (d != axis && s[std::size_t(d)] != out_shape[std::size_t(d)])
                throw ShapeError(msg("concat-along-axis: shape mismatch ", shape_str(out_shape),
                                     " vs ", shape_str(s)));
        out_shape[std::size_t(axis)] += s[std::size_t(axis)];
    }

    std::vector<double> out(std::size_t(numel(out_shape)));
    std::vector<detail::NodePtr> parents;
    parents.reserve(xs.size());
    std::vector<int> widths;  // extent of each input along the concat axis
    for (const auto& t : xs) {
        parents.push_back(t.node_ptr());
        widths.push_back(t.dim(axis));
    }

    if (axis == 0) {
        // contiguous blocks for rank 2 axis 0 and rank 3 axis 0 alike
        std::size_t off = 0;
        for (const auto& t : xs) {
            const auto& v = t.node().values;
            std::copy(v.begin(), v.end(), out.begin() + std::ptrdiff_t(off));
            off += v.size();
        }
    } else {
        int rows = out_shape[0];
        int total = out_shape[1];
        int col0 = 0;
        for (const auto& t : xs) {
            const auto& v = t.node().values;
            int w = t.dim(1);
            for (int r = 0; r < rows; ++r)
                std::copy(v.begin() + std::ptrdiff_t(r * w), v.begin() + std::ptrdiff_t((r + 1) * w),
                          out.begin() + std::ptrdiff_t(r * total + col0));
            col0 += w;
        }
    }

    auto ps = parents;  // copy for the closure
    return detail::make_result(out_shape, std::move(out), std::move(parents),
                               [ps, widths, axis](detail::Node& n) {
        if (axis == 0) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < ps.size(); ++k) {
                auto& p = *ps[k];
                std::size_t cnt = p.values.size();
                if (p.contributes()) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < cnt; ++i) p.grad[i] += n.grad[off + i];
                }
                off += cnt;
            }
        } else {
            int rows = n.shape[0];
            int total = n.shape[1];
            int col0 = 0;
            for (std::size_t k = 0; k < ps.size(); ++k) {
                auto& p = *ps[k];
                int w = widths[k];
                if (p.contributes()) {
                    p.ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j)
                            p.grad[std::size_t(r * w + j)] += n.grad[std::size_t(r * total + col0 + j)];
                }
                col0 += w;
            }
        }
    });
}

inline Tensor concat(std::initializer_list<Tensor> xs, int axis) {
    std::vector<Tensor> v(xs);
    return concat(std::span<const Tensor>(v), axis);
}

inline Tensor gather_rows(const Tensor& x, std::vector<int> rows) {
    if (x.rank() != 2)
        throw ShapeError(msg("gather-rows: expected rank 2, got ", shape_str(x.shape())));
    int m = x.dim(0), ncol = x.dim(1);
    for (int r : rows)
        if (r < 0 || r >= m)
            throw ShapeError(msg("gather-rows: row ", r, " out of range [0, ", m, ")"));
    const auto& xv = x.node().values;
    std::vector<double> out(rows.size() * std::size_t(ncol));
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(xv.begin() + std::ptrdiff_t(rows[i] * ncol),
                  xv.begin() + std::ptrdiff_t((rows[i] + 1) * ncol),
                  out.begin() + std::ptrdiff_t(i * std::size_t(ncol)));
    auto xp = x.node_ptr();
    return detail::make_result({int(rows.size()), ncol}, std::move(out), {xp},
                               [xp, rows, ncol](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < ncol; ++j)
                xp->grad[std::size_t(rows[i] * ncol + j)] += n.grad[i * std::size_t(ncol) + std::size_t(j)];
    });
}

/// View-free reshape; total element count must match.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError(msg("reshape: cannot view ", shape_str(x.shape()), " as ",
                             shape_str(shape)));
    std::vector<double> out(x.node().values);
    auto xp = x.node_ptr();
    return detail::make_result(std::move(shape), std::move(out), {xp}, [xp](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) xp->grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// 2-D convolution over a [C,H,W] map. Kernels 1x1 (no padding) and 3x3
/// (padding 1), stride 1 or 2. Bias optional (pass an undefined tensor).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError(msg("conv2d: expected [C,H,W] input and [Co,Ci,k,k] weight, got ",
                             shape_str(x.shape()), " and ", shape_str(w.shape())));
    int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci)
        throw ShapeError(msg("conv2d: weight expects ", w.dim(1), " input channels, map has ", ci));
    if (w.dim(3) != k || (k != 1 && k != 3))
        throw ShapeError(msg("conv2d: unsupported kernel ", w.dim(2), "x", w.dim(3)));
    if (stride != 1 && stride != 2) throw ShapeError(msg("conv2d: unsupported stride ", stride));
    bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != co))
        throw ShapeError(msg("conv2d: bias shape ", shape_str(b.shape()), " does not match ",
                             co, " output channels"));

    int pad = k == 3 ? 1 : 0;
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (wd + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0)
        throw ShapeError(msg("conv2d: output would be empty for input ", shape_str(x.shape())));

    const double* xv = x.node().values.data();
    const double* wv = w.node().values.data();
    std::vector<double> out(std::size_t(co) * std::size_t(ho) * std::size_t(wo), 0.0);

    if (has_bias) {
        const auto& bv = b.node().values;
        for (int oc = 0; oc < co; ++oc)
            std::fill(out.begin() + std::ptrdiff_t(oc * ho * wo),
                      out.begin() + std::ptrdiff_t((oc + 1) * ho * wo), bv[std::size_t(oc)]);
    }

    if (k == 1 && stride == 1) {
        // pixel-tiled channel mix; tiles keep both operands hot in L1
        constexpr std::int64_t kTile = 512;
        std::int64_t npix = std::int64_t(h) * wd;
        for (std::int64_t p0 = 0; p0 < npix; p0 += kTile) {
            std::int64_t p1 = std::min(npix, p0 + kTile);
            for (int oc = 0; oc < co; ++oc) {
                double* y = out.data() + std::size_t(oc) * std::size_t(npix);
                for (int icc = 0; icc < ci; ++icc) {
                    double wgt = wv[std::size_t(oc * ci + icc)];
                    const double* xin = xv + std::size_t(icc) * std::size_t(npix);
                    for (std::int64_t i = p0; i < p1; ++i) y[i] += wgt * xin[i];
                }
            }
        }
    } else if (k == 3 && stride == 1) {
        // row-blocked so each input plane streams once per output channel
        constexpr int kRows = 8;
        for (int oy0 = 0; oy0 < ho; oy0 += kRows) {
            int oy1 = std::min(ho, oy0 + kRows);
            for (int oc = 0; oc < co; ++oc) {
                double* ybase = out.data() + std::size_t(oc) * std::size_t(ho) * std::size_t(wo);
                for (int icc = 0; icc < ci; ++icc) {
                    const double* xbase = xv + std::size_t(icc) * std::size_t(h) * std::size_t(wd);
                    const double* wbase = wv + std::size_t((oc * ci + icc) * 9);
                    for (int ky = 0; ky < 3; ++ky) {
                        int oy_lo = std::max(oy0, pad - ky);
                        int oy_hi = std::min(oy1, h + pad - ky);
                        for (int kx = 0; kx < 3; ++kx) {
                            double wgt = wbase[ky * 3 + kx];
                            int ox_lo = std::max(0, pad - kx);
                            int ox_hi = std::min(wo, wd + pad - kx);
                            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                const double* xrow = xbase + std::size_t(oy + ky - pad) * std::size_t(wd) + (kx - pad);
                                double* yrow = ybase + std::size_t(oy) * std::size_t(wo);
                                for (int ox = ox_lo; ox < ox_hi; ++ox) yrow[ox] += wgt * xrow[ox];
                            }
                        }
                    }
                }
            }
        }
    } else {
        // strided general path; used on the small downsampled maps
        for (int oc = 0; oc < co; ++oc)
            for (int icc = 0; icc < ci; ++icc) {
                const double* xbase = xv + std::size_t(icc) * std::size_t(h) * std::size_t(wd);
                const double* wbase = wv + std::size_t((oc * ci + icc)) * std::size_t(k * k);
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        double acc = 0.0;
                        for (int ky = 0; ky < k; ++ky) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                acc += wbase[ky * k + kx] * xbase[std::size_t(iy) * std::size_t(wd) + std::size_t(ix)];
                            }
                        }
                        out[std::size_t((oc * ho + oy) * wo + ox)] += acc;
                    }
            }
    }

    auto xp = x.node_ptr();
    auto wp = w.node_ptr();
    auto bp = has_bias ? b.node_ptr() : detail::NodePtr();
    std::vector<detail::NodePtr> parents{xp, wp};
    if (bp) parents.push_back(bp);

    return detail::make_result({co, ho, wo}, std::move(out), std::move(parents),
                               [xp, wp, bp, ci, h, wd, co, k, stride, pad, ho, wo](detail::Node& n) {
        const double* g = n.grad.data();
        const double* xv = xp->values.data();
        const double* wv = wp->values.data();

        if (bp && bp->contributes()) {
            bp->ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                double s = 0.0;
                const double* grow = g + std::size_t(oc) * std::size_t(ho) * std::size_t(wo);
                for (std::int64_t i = 0, npix = std::int64_t(ho) * wo; i < npix; ++i) s += grow[i];
                bp->grad[std::size_t(oc)] += s;
            }
        }

        bool need_dx = xp->contributes();
        bool need_dw = wp->contributes();
        if (need_dx) xp->ensure_grad();
        if (need_dw) wp->ensure_grad();
        if (!need_dx && !need_dw) return;

        if (k == 1 && stride == 1) {
            constexpr std::int64_t kTile = 512;
            std::int64_t npix = std::int64_t(h) * wd;
            for (std::int64_t p0 = 0; p0 < npix; p0 += kTile) {
                std::int64_t p1 = std::min(npix, p0 + kTile);
                for (int oc = 0; oc < co; ++oc) {
                    const double* grow = g + std::size_t(oc) * std::size_t(npix);
                    for (int icc = 0; icc < ci; ++icc) {
                        if (need_dx) {
                            double wgt = wv[std::size_t(oc * ci + icc)];
                            double* dx = xp->grad.data() + std::size_t(icc) * std::size_t(npix);
                            for (std::int64_t i = p0; i < p1; ++i) dx[i] += wgt * grow[i];
                        }
                        if (need_dw) {
                            const double* xin = xv + std::size_t(icc) * std::size_t(npix);
                            double s = 0.0;
                            for (std::int64_t i = p0; i < p1; ++i) s += grow[i] * xin[i];
                            wp->grad[std::size_t(oc * ci + icc)] += s;
                        }
                    }
                }
            }
        } else if (k == 3 && stride == 1) {
            constexpr int kRows = 8;
            for (int oy0 = 0; oy0 < ho; oy0 += kRows) {
                int oy1 = std::min(ho, oy0 + kRows);
                for (int oc = 0; oc < co; ++oc) {
                    const double* gbase = g + std::size_t(oc) * std::size_t(ho) * std::size_t(wo);
                    for (int icc = 0; icc < ci; ++icc) {
                        const double* xbase = xv + std::size_t(icc) * std::size_t(h) * std::size_t(wd);
                        const double* wbase = wv + std::size_t((oc * ci + icc) * 9);
                        double* dxbase = need_dx ? xp->grad.data() + std::size_t(icc) * std::size_t(h) * std::size_t(wd) : nullptr;
                        double* dwbase = need_dw ? wp->grad.data() + std::size_t((oc * ci + icc) * 9) : nullptr;
                        for (int ky = 0; ky < 3; ++ky) {
                            int oy_lo = std::max(oy0, pad - ky);
                            int oy_hi = std::min(oy1, h + pad - ky);
                            for (int kx = 0; kx < 3; ++kx) {
                                int ox_lo = std::max(0, pad - kx);
                                int ox_hi = std::min(wo, wd + pad - kx);
                                double wgt = wbase[ky * 3 + kx];
                                double dw_acc = 0.0;
                                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                    const double* grow = gbase + std::size_t(oy) * std::size_t(wo);
                                    const double* xrow = xbase + std::size_t(oy + ky - pad) * std::size_t(wd) + (kx - pad);
                                    if (need_dx) {
                                        double* dxrow = dxbase + std::size_t(oy + ky - pad) * std::size_t(wd) + (kx - pad);
                                        for (int ox = ox_lo; ox < ox_hi; ++ox) dxrow[ox] += wgt * grow[ox];
                                    }
                                    if (need_dw) {
                                        double s = 0.0;
                                        for (int ox = ox_lo; ox < ox_hi; ++ox) s += grow[ox] * xrow[ox];
                                        dw_acc += s;
                                    }
                                }
                                if (need_dw) dwbase[ky * 3 + kx] += dw_acc;
                            }
                        }
                    }
                }
            }
        } else {
            for (int oc = 0; oc < co; ++oc)
                for (int icc = 0; icc < ci; ++icc) {
                    const double* xbase = xv + std::size_t(icc) * std::size_t(h) * std::size_t(wd);
                    const double* wbase = wv + std::size_t(oc * ci + icc) * std::size_t(k * k);
                    double* dxbase = need_dx ? xp->grad.data() + std::size_t(icc) * std::size_t(h) * std::size_t(wd) : nullptr;
                    double* dwbase = need_dw ? wp->grad.data() + std::size_t(oc * ci + icc) * std::size_t(k * k) : nullptr;
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox) {
                            double gv = g[std::size_t((oc * ho + oy) * wo + ox)];
                            if (gv == 0.0) continue;
                            for (int ky = 0; ky < k; ++ky) {
                                int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    std::size_t xi = std::size_t(iy) * std::size_t(wd) + std::size_t(ix);
                                    if (need_dx) dxbase[xi] += wbase[ky * k + kx] * gv;
                                    if (need_dw) dwbase[ky * k + kx] += gv * xbase[xi];
                                }
                            }
                        }
                }
        }
    });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride) {
    return conv2d(x, w, Tensor(), stride);
}

/// Nearest-neighbor 2x upsampling of a [C,H,W] map.
inline Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError(msg("transposed-upsample-2x: expected [C,H,W], got ", shape_str(x.shape())));
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& xv = x.node().values;
    std::vector<double> out(std::size_t(c) * std::size_t(2 * h) * std::size_t(2 * w));
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i) {
            const double* xrow = xv.data() + std::size_t((ch * h + i) * w);
            double* y0 = out.data() + std::size_t((ch * 2 * h + 2 * i) * 2 * w);
            double* y1 = y0 + std::size_t(2 * w);
            for (int j = 0; j < w; ++j) {
                double v = xrow[j];
                y0[2 * j] = v;
                y0[2 * j + 1] = v;
                y1[2 * j] = v;
                y1[2 * j + 1] = v;
            }
        }
    auto xp = x.node_ptr();
    return detail::make_result({c, 2 * h, 2 * w}, std::move(out), {xp}, [xp, c, h, w](detail::Node& n) {
        if (!xp->contributes()) return;
        xp->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i) {
                const double* g0 = n.grad.data() + std::size_t((ch * 2 * h + 2 * i) * 2 * w);
                const double* g1 = g0 + std::size_t(2 * w);
                double* dx = xp->grad.data() + std::size_t((ch * h + i) * w);
                for (int j = 0; j < w; ++j)
                    dx[j] += g0[2 * j] + g0[2 * j + 1] + g1[2 * j] + g1[2 * j + 1];
            }
    });
}

// ---------------------------------------------------------------------------
// Primitive dispatch
// ---------------------------------------------------------------------------

enum class Primitive {
    Matmul,
    Conv2d,
    Upsample2x,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Mean,
    Sum,
    Concat,
    Transpose2d,
    GatherRows,
    Clamp,
    Abs,
};

struct PrimAttrs {
    int axis = -1;
    int stride = 1;
    double scalar = 1.0;
    double lo = 0.0;
    double hi = 0.0;
    std::vector<int> rows;
};

inline Primitive primitive_from_string(std::string_view s) {
    if (s == "matmul") return Primitive::Matmul;
    if (s == "conv2d") return Primitive::Conv2d;
    if (s == "transposed-upsample-2x") return Primitive::Upsample2x;
    if (s == "relu") return Primitive::Relu;
    if (s == "sigmoid") return Primitive::Sigmoid;
    if (s == "exp") return Primitive::Exp;
    if (s == "log") return Primitive::Log;
    if (s == "softmax-along-axis") return Primitive::Softmax;
    if (s == "add") return Primitive::Add;
    if (s == "sub") return Primitive::Sub;
    if (s == "mul") return Primitive::Mul;
    if (s == "scalar-mul") return Primitive::ScalarMul;
    if (s == "mean") return Primitive::Mean;
    if (s == "sum") return Primitive::Sum;
    if (s == "concat-along-axis") return Primitive::Concat;
    if (s == "transpose-2d") return Primitive::Transpose2d;
    if (s == "gather-rows") return Primitive::GatherRows;
    if (s == "clamp") return Primitive::Clamp;
    if (s == "abs") return Primitive::Abs;
    throw Error(msg("unknown primitive kind '", s, "'"));
}

inline Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs,
                              const PrimAttrs& attrs = {}) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw ShapeError(msg("primitive expects ", n, " inputs, got ", inputs.size()));
    };
    switch (kind) {
        case Primitive::Matmul: need(2); return matmul(inputs[0], inputs[1]);
        case Primitive::Conv2d:
            if (inputs.size() == 2) return conv2d(inputs[0], inputs[1], attrs.stride);
            need(3);
            return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride);
        case Primitive::Upsample2x: need(1); return upsample2x(inputs[0]);
        case Primitive::Relu: need(1); return relu(inputs[0]);
        case Primitive::Sigmoid: need(1); return sigmoid(inputs[0]);
        case Primitive::Exp: need(1); return exp(inputs[0]);
        case Primitive::Log: need(1); return log(inputs[0]);
        case Primitive::Softmax: need(1); return softmax(inputs[0], attrs.axis);
        case Primitive::Add: need(2); return add(inputs[0], inputs[1]);
        case Primitive::Sub: need(2); return sub(inputs[0], inputs[1]);
        case Primitive::Mul: need(2); return mul(inputs[0], inputs[1]);
        case Primitive::ScalarMul: need(1); return scalar_mul(inputs[0], attrs.scalar);
        case Primitive::Mean: need(1); return mean(inputs[0]);
        case Primitive::Sum: need(1); return sum(inputs[0]);
        case Primitive::Concat: return concat(inputs, attrs.axis);
        case Primitive::Transpose2d: need(1); return transpose2d(inputs[0]);
        case Primitive::GatherRows: need(1); return gather_rows(inputs[0], attrs.rows);
        case Primitive::Clamp: need(1); return clamp(inputs[0], attrs.lo, attrs.hi);
        case Primitive::Abs: need(1); return abs(inputs[0]);
    }
    throw Error("unknown primitive kind");
}

}  // namespace itkd

// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode autodiff. The graph is
// rebuilt on every forward pass (dynamic tape), which keeps varying page
// counts and sequence lengths trivial. Deliberately small: only the ops a
// CPU-trained encoder-decoder transformer needs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hivt5/errors.hpp"
#include "hivt5/rng.hpp"

namespace hivt5 {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

class Tensor;

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as values once touched
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Propagates this node's grad into its parents (+=).
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

// Autograd can be switched off (inference, frozen submodels): ops then return
// constant tensors with no parents, so no graph is built behind them.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = saved; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Collects leaf (parameter) gradients into buffers private to one backward
// pass. Lets independent graphs over shared parameters run backward on
// different threads; the caller merges sinks in a fixed order afterwards.
class GradSink {
public:
    std::vector<double>& buffer_for(const TensorNode* leaf) {
        auto it = buffers_.find(leaf);
        if (it == buffers_.end())
            it = buffers_.emplace(leaf, std::vector<double>(leaf->values.size(), 0.0)).first;
        return it->second;
    }
    const std::vector<double>* find(const TensorNode* leaf) const {
        auto it = buffers_.find(leaf);
        return it == buffers_.end() ? nullptr : &it->second;
    }
    const std::unordered_map<const TensorNode*, std::vector<double>>& buffers() const { return buffers_; }

private:
    std::unordered_map<const TensorNode*, std::vector<double>> buffers_;
};

namespace detail {

inline GradSink*& active_sink() {
    thread_local GradSink* sink = nullptr;
    return sink;
}

// Gradient buffer for a parent node: leaves are redirected into the active
// sink when one is installed, interior nodes always use their own buffer.
inline std::vector<double>& grad_buf(const std::shared_ptr<TensorNode>& n) {
    if (GradSink* s = active_sink(); s && n->is_leaf()) return s->buffer_for(n.get());
    n->ensure_grad();
    return n->grad;
}

}  // namespace detail

// Value-semantic handle onto a shared graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->values.assign(numel(shape), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                             shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(double v) { return from_values({}, {v}); }

    // Trainable parameter, N(0, stddev) init.
    static Tensor param(Shape shape, Rng& rng, double stddev) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values.resize(numel(n->shape));
        for (auto& v : n->values) v = rng.normal(0.0, stddev);
        n->requires_grad = true;
        return Tensor(n);
    }

    static Tensor param_zeros(Shape shape) {
        auto n = std::make_shared<TensorNode>();
        n->values.assign(numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = true;
        return Tensor(n);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    double item() const {
        if (node_->values.size() != 1)
            throw ContractError("item: tensor has " + std::to_string(node_->values.size()) + " elements");
        return node_->values[0];
    }

    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                      std::function<void(TensorNode&)> backward) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool need = false;
    if (grad_enabled_flag())
        for (const auto& t : inputs) need = need || t.requires_grad();
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            auto& g = detail::grad_buf(an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_buf(bn);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            auto& g = detail::grad_buf(an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_buf(bn);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& n) {
        if (an->requires_grad) {
            auto& g = detail::grad_buf(an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_buf(bn);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * an->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, c](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * c;
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (an->values[i] > 0.0) g[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    return detail::make_op(std::move(shape), a.values(), {a}, [an](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Mapping out-index -> in-index for a permutation of axes.
inline std::vector<std::size_t> transpose_index_map(const Shape& in_shape, const std::vector<std::size_t>& perm) {
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    auto in_strides = strides_of(in_shape);
    auto out_strides = strides_of(out_shape);
    std::vector<std::size_t> map(numel(in_shape));
    for (std::size_t o = 0; o < map.size(); ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t d = 0; d < perm.size(); ++d) {
            std::size_t coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[perm[d]];
        }
        map[o] = src;
    }
    return map;
}

}  // namespace detail

inline Tensor transpose(const Tensor& a, std::vector<std::size_t> perm) {
    if (perm.size() != a.ndim()) throw ShapeError("transpose: permutation rank mismatch");
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
    auto map = detail::transpose_index_map(a.shape(), perm);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = a.values()[map[o]];
    auto an = a.node();
    auto map_ptr = std::make_shared<std::vector<std::size_t>>(std::move(map));
    return detail::make_op(std::move(out_shape), std::move(out), {a}, [an, map_ptr](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (std::size_t o = 0; o < n.grad.size(); ++o) g[(*map_ptr)[o]] += n.grad[o];
    });
}

// Concatenation along axis 0 (all other extents equal).
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Shape out_shape = parts[0].shape();
    if (out_shape.empty()) throw ShapeError("concat_rows: scalars cannot be concatenated");
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.ndim() != out_shape.size()) throw ShapeError("concat_rows: rank mismatch");
        for (std::size_t d = 1; d < out_shape.size(); ++d)
            if (p.shape()[d] != out_shape[d]) throw ShapeError("concat_rows: trailing extents differ");
        rows += p.shape()[0];
    }
    out_shape[0] = rows;
    std::vector<double> out;
    out.reserve(numel(out_shape));
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op(std::move(out_shape), std::move(out), parts, [nodes](TensorNode& n) {
        std::size_t off = 0;
        for (auto& pn : nodes) {
            std::size_t len = pn->values.size();
            if (pn->requires_grad) {
                auto& g = detail::grad_buf(pn);
                for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
            }
            off += len;
        }
    });
}

// Rows [begin, end) along axis 0.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.ndim() == 0 || begin > end || end > a.shape()[0])
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[0] = end - begin;
    std::size_t row = a.shape()[0] == 0 ? 0 : a.size() / a.shape()[0];
    std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * row),
                            a.values().begin() + static_cast<std::ptrdiff_t>(end * row));
    auto an = a.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a}, [an, begin, row](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        std::size_t off = begin * row;
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[off + i] += n.grad[i];
    });
}

// table[indices[i], :] -> row i. Gradient scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
    if (table.ndim() != 2) throw ShapeError("gather_rows: table must be 2-d, got " + shape_str(table.shape()));
    std::size_t rows = table.shape()[0], d = table.shape()[1];
    for (std::size_t idx : indices)
        if (idx >= rows)
            throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of " + std::to_string(rows));
    std::vector<double> out(indices.size() * d);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    auto tn = table.node();
    auto idx_ptr = std::make_shared<std::vector<std::size_t>>(indices);
    return detail::make_op({indices.size(), d}, std::move(out), {table}, [tn, idx_ptr, d](TensorNode& n) {
        if (!tn->requires_grad) return;
        auto& g = detail::grad_buf(tn);
        for (std::size_t i = 0; i < idx_ptr->size(); ++i) {
            std::size_t off = (*idx_ptr)[i] * d;
            for (std::size_t j = 0; j < d; ++j) g[off + j] += n.grad[i * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the inner loop stride-1.
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B^T.
inline void mm_acc_bt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* dcrow = dc + i * n;
        double* darow = da + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            double g = dcrow[j];
            if (g == 0.0) continue;
            const double* bcol = b + j;
            for (std::size_t kk = 0; kk < k; ++kk) darow[kk] += g * bcol[kk * n];
        }
    }
}

// dB[k,n] += A^T * dC.
inline void mm_acc_at(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* dcrow = dc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            double* dbrow = db + kk * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

}  // namespace detail

// 2-d x 2-d, or batched 3-d x 3-d with equal leading extent.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::size_t batch = 1, m, k, n;
    if (sa.size() == 2 && sb.size() == 2) {
        m = sa[0];
        k = sa[1];
        if (sb[0] != k)
            throw ShapeError("matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));
        n = sb[1];
    } else if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0])
            throw ShapeError("matmul: batch extents differ, " + shape_str(sa) + " x " + shape_str(sb));
        batch = sa[0];
        m = sa[1];
        k = sa[2];
        if (sb[1] != k)
            throw ShapeError("matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));
        n = sb[2];
    } else {
        throw ShapeError("matmul: expected 2-d x 2-d or 3-d x 3-d, got " + shape_str(sa) + " x " + shape_str(sb));
    }
    Shape out_shape = (sa.size() == 2) ? Shape{m, n} : Shape{batch, m, n};
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t bi = 0; bi < batch; ++bi)
        detail::mm_acc(a.values().data() + bi * m * k, b.values().data() + bi * k * n, out.data() + bi * m * n, m, k,
                       n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a, b}, [an, bn, batch, m, k, n](TensorNode& nd) {
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* dc = nd.grad.data() + bi * m * n;
            if (an->requires_grad)
                detail::mm_acc_bt(dc, bn->values.data() + bi * k * n, detail::grad_buf(an).data() + bi * m * k, m, k,
                                  n);
            if (bn->requires_grad)
                detail::mm_acc_at(an->values.data() + bi * m * k, dc, detail::grad_buf(bn).data() + bi * k * n, m, k,
                                  n);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    auto an = a.node();
    return detail::make_op({}, {s}, {a}, [an](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (auto& gi : g) gi += n.grad[0];
    });
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

// Mean over axis 0: [r, ...] -> [...].
inline Tensor mean_axis0(const Tensor& a) {
    if (a.ndim() == 0 || a.shape()[0] == 0) throw ShapeError("mean_axis0: needs a non-empty leading axis");
    std::size_t rows = a.shape()[0], cols = a.size() / rows;
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += a.values()[r * cols + c];
    double inv = 1.0 / static_cast<double>(rows);
    for (auto& v : out) v *= inv;
    auto an = a.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a}, [an, rows, cols, inv](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += n.grad[c] * inv;
    });
}

// Per-row dot product of two [n, d] tensors -> [n].
inline Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "rowwise_dot");
    if (a.ndim() != 2) throw ShapeError("rowwise_dot: expected 2-d inputs, got " + shape_str(a.shape()));
    std::size_t rows = a.shape()[0], d = a.shape()[1];
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r] += a.values()[r * d + j] * b.values()[r * d + j];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op({rows}, std::move(out), {a, b}, [an, bn, rows, d](TensorNode& n) {
        for (std::size_t r = 0; r < rows; ++r) {
            double gr = n.grad[r];
            if (an->requires_grad) {
                auto& g = detail::grad_buf(an);
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gr * bn->values[r * d + j];
            }
            if (bn->requires_grad) {
                auto& g = detail::grad_buf(bn);
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gr * an->values[r * d + j];
            }
        }
    });
}

// Softmax along the last axis, max-subtracted for stability.
inline Tensor softmax(const Tensor& a) {
    if (a.ndim() == 0) throw ShapeError("softmax: scalar input");
    for (double v : a.values())
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
    std::size_t cols = a.shape().back(), rows = a.size() / cols;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * cols;
        double* o = out.data() + r * cols;
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= denom;
    }
    auto an = a.node();
    auto out_copy = std::make_shared<std::vector<double>>(out);
    return detail::make_op(a.shape(), std::move(out), {a}, [an, out_copy, rows, cols](TensorNode& n) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_buf(an);
        // dx = y * (dy - sum(dy * y)) per row
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = out_copy->data() + r * cols;
            const double* dy = n.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += y[j] * (dy[j] - dot);
        }
    });
}

// RMS normalization over the last axis, multiplied by a per-channel gain.
// T5-family: no mean subtraction, no bias.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    if (x.ndim() == 0) throw ShapeError("rms_norm: scalar input");
    std::size_t d = x.shape().back();
    if (gain.ndim() != 1 || gain.shape()[0] != d)
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match last axis " +
                         std::to_string(d));
    std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += in[j] * in[j];
        ms = ms / static_cast<double>(d) + eps;
        double inv = ms > 0.0 ? 1.0 / std::sqrt(ms) : 0.0;
        inv_rms[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[j] * inv * gain.values()[j];
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto inv_ptr = std::make_shared<std::vector<double>>(std::move(inv_rms));
    return detail::make_op(x.shape(), std::move(out), {x, gain}, [xn, gn, inv_ptr, rows, d](TensorNode& n) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xv = xn->values.data() + r * d;
            const double* dy = n.grad.data() + r * d;
            double inv = (*inv_ptr)[r];
            if (gn->requires_grad) {
                auto& g = detail::grad_buf(gn);
                for (std::size_t j = 0; j < d; ++j) g[j] += dy[j] * xv[j] * inv;
            }
            if (xn->requires_grad) {
                auto& g = detail::grad_buf(xn);
                // y_j = x_j * inv * g_j with inv = (mean(x^2)+eps)^{-1/2}:
                // dx_j = inv*g_j*dy_j - x_j * inv^3/d * sum_k dy_k g_k x_k
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) s += dy[k] * gn->values[k] * xv[k];
                double c = inv * inv * inv * s / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += inv * gn->values[j] * dy[j] - xv[j] * c;
            }
        }
    });
}

// Mean negative log-likelihood over non-ignored targets. logits: [n, V].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_index = -1) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [n, vocab]");
    std::size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " rows");
    for (int t : targets)
        if (t != ignore_index && (t < 0 || static_cast<std::size_t>(t) >= v))
            throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocab of " + std::to_string(v));
    std::size_t counted = 0;
    double loss = 0.0;
    std::vector<double> probs(logits.size());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.values().data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            denom += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= denom;
        if (targets[i] != ignore_index) {
            loss -= std::log(probs[i * v + static_cast<std::size_t>(targets[i])]);
            ++counted;
        }
    }
    if (counted == 0) throw ContractError("cross_entropy: every target is ignored");
    loss /= static_cast<double>(counted);
    auto ln = logits.node();
    auto probs_ptr = std::make_shared<std::vector<double>>(std::move(probs));
    auto tgt_ptr = std::make_shared<std::vector<int>>(targets);
    return detail::make_op({}, {loss}, {logits},
                           [ln, probs_ptr, tgt_ptr, n, v, counted, ignore_index](TensorNode& nd) {
                               if (!ln->requires_grad) return;
                               auto& g = detail::grad_buf(ln);
                               double gl = nd.grad[0] / static_cast<double>(counted);
                               for (std::size_t i = 0; i < n; ++i) {
                                   int t = (*tgt_ptr)[i];
                                   if (t == ignore_index) continue;
                                   for (std::size_t j = 0; j < v; ++j) {
                                       double p = (*probs_ptr)[i * v + j];
                                       g[i * v + j] += gl * (p - (static_cast<std::size_t>(t) == j ? 1.0 : 0.0));
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace detail {

// Post-order over the requires-grad subgraph: leaves first, root last.
inline std::vector<TensorNode*> topo_order(TensorNode* root) {
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            TensorNode* p = top.first->parents[top.second++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss; visits each node exactly once. Leaf
// gradients accumulate (+=) into node-resident buffers, or into `sink` when
// provided (then shared parameter nodes are never written, so sweeps over
// disjoint graphs may run on separate threads).
inline void backward(const Tensor& loss, GradSink* sink = nullptr) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward: loss does not require grad");
    auto order = detail::topo_order(loss.raw());
    GradSink* saved = detail::active_sink();
    detail::active_sink() = sink;
    if (sink && loss.raw()->is_leaf()) {
        sink->buffer_for(loss.raw())[0] += 1.0;
    } else {
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (!node->backward_fn) continue;
        node->ensure_grad();
        node->backward_fn(*node);
    }
    detail::active_sink() = saved;
    // Interior buffers are scratch; drop them so a second backward over the
    // same graph starts clean and memory is returned promptly.
    for (TensorNode* node : order)
        if (!node->is_leaf() && node != loss.raw()) node->grad.clear();
    if (!loss.raw()->is_leaf()) loss.node()->grad.clear();
}

}  // namespace hivt5

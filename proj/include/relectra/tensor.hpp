#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "relectra/errors.hpp"
#include "relectra/rng.hpp"

namespace relectra {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Additive mask value for attention. Finite so forward results never hold
// inf; exp(x - max) underflows to exactly 0 for masked entries.
template <typename Real>
constexpr Real kMaskedScore = static_cast<Real>(-1e30);

template <typename Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool backward_done = false;  // set on the loss node after backward()
    std::uint64_t order = 0;     // creation index; backward runs in reverse order
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // adds into parents' grads

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), Real(0));
    }
};

namespace detail {
inline std::uint64_t next_node_order() {
    // A graph is confined to one thread (see module concurrency contract),
    // so a thread-local counter gives a deterministic per-graph ordering.
    thread_local std::uint64_t counter = 0;
    return ++counter;
}
}  // namespace detail

// Dense row-major tensor with optional reverse-mode gradient. Value-semantic
// handle to a shared node; ops build the computation graph implicitly when
// any input requires a gradient.
template <typename Real>
class Tensor {
public:
    using Node = TensorNode<Real>;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), Real(0)); }

    static Tensor filled(Shape shape, Real value) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), value);
        n->order = detail::next_node_order();
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<Real> data) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->order = detail::next_node_order();
        return Tensor(std::move(n));
    }

    static Tensor scalar(Real v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1)) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.resize(shape_numel(n->shape));
        for (auto& v : n->data) v = static_cast<Real>(rng.normal()) * stddev;
        n->order = detail::next_node_order();
        return Tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
    std::size_t cols() const {
        return node_->shape.size() < 2
                   ? (node_->shape.empty() ? 1 : node_->shape[0])
                   : node_->data.size() / node_->shape[0];
    }

    const std::vector<Real>& data() const { return node_->data; }
    std::vector<Real>& mutable_data() { return node_->data; }
    const std::vector<Real>& grad() const {
        if (node_->grad.empty()) throw StateError("gradient not populated; call backward() first");
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }

    Real value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar tensor, got shape " + shape_str(shape()));
        return node_->data[0];
    }

    Tensor& set_requires_grad(bool b = true) {
        node_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    void zero_grad() {
        node_->grad.clear();
        node_->backward_done = false;
    }

    // Copies the values into a fresh leaf disconnected from any graph.
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->order = detail::next_node_order();
        return Tensor(std::move(n));
    }

    std::shared_ptr<Node> node() const { return node_; }

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
void check_finite(const TensorNode<Real>& n, const char* op) {
    for (Real v : n.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

template <typename Real>
Tensor<Real> make_op(const char* op, Shape shape, std::vector<Real> data,
                     std::vector<Tensor<Real>> parents,
                     std::function<void(TensorNode<Real>&)> backprop) {
    auto n = std::make_shared<TensorNode<Real>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->order = next_node_order();
    check_finite(*n, op);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<Real>(std::move(n));
}

template <typename Real>
std::pair<std::size_t, std::size_t> as_2d(const Tensor<Real>& x) {
    const Shape& s = x.shape();
    if (s.empty()) return {1, 1};
    std::size_t last = s.back();
    return {x.numel() / last, last};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op<Real>("add", a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        }
    });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op<Real>("sub", a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op<Real>("mul", a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.data[i];
        }
    });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op<Real>("scale", a.shape(), std::move(out), {a}, [c](TensorNode<Real>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

// x: [n, m], rowvec: [m]; adds rowvec to every row.
template <typename Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& rowvec) {
    auto [n, m] = detail::as_2d(x);
    if (rowvec.numel() != m) {
        throw ShapeError("add_rowvec: row vector " + shape_str(rowvec.shape()) + " does not match " +
                         shape_str(x.shape()));
    }
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] + rowvec.data()[j];
    return detail::make_op<Real>("add_rowvec", x.shape(), std::move(out), {x, rowvec},
                                 [n = n, m = m](TensorNode<Real>& nd) {
                                     auto& px = *nd.parents[0];
                                     auto& pb = *nd.parents[1];
                                     if (px.requires_grad) {
                                         px.ensure_grad();
                                         for (std::size_t i = 0; i < nd.grad.size(); ++i) px.grad[i] += nd.grad[i];
                                     }
                                     if (pb.requires_grad) {
                                         pb.ensure_grad();
                                         for (std::size_t i = 0; i < n; ++i)
                                             for (std::size_t j = 0; j < m; ++j) pb.grad[j] += nd.grad[i * m + j];
                                     }
                                 });
}

// x: [n, m], colvec: [n] or [n,1]; scales row i by colvec[i].
template <typename Real>
Tensor<Real> mul_colvec(const Tensor<Real>& x, const Tensor<Real>& colvec) {
    auto [n, m] = detail::as_2d(x);
    if (colvec.numel() != n) {
        throw ShapeError("mul_colvec: column vector " + shape_str(colvec.shape()) + " does not match " +
                         shape_str(x.shape()));
    }
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] * colvec.data()[i];
    return detail::make_op<Real>("mul_colvec", x.shape(), std::move(out), {x, colvec},
                                 [n = n, m = m](TensorNode<Real>& nd) {
                                     auto& px = *nd.parents[0];
                                     auto& pw = *nd.parents[1];
                                     if (px.requires_grad) {
                                         px.ensure_grad();
                                         for (std::size_t i = 0; i < n; ++i)
                                             for (std::size_t j = 0; j < m; ++j)
                                                 px.grad[i * m + j] += nd.grad[i * m + j] * pw.data[i];
                                     }
                                     if (pw.requires_grad) {
                                         pw.ensure_grad();
                                         for (std::size_t i = 0; i < n; ++i) {
                                             Real acc = 0;
                                             for (std::size_t j = 0; j < m; ++j)
                                                 acc += nd.grad[i * m + j] * px.data[i * m + j];
                                             pw.grad[i] += acc;
                                         }
                                     }
                                 });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[n,m] += A[n,k] * B[k,m]; fixed i-k-j loop order, deterministic.
template <typename Real>
void matmul_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[n,m] += A[n,k] * B[m,k]^T
template <typename Real>
void matmul_nt_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const Real* brow = b + j * k;
            Real acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,m] += A[n,k]^T * B[n,m]
template <typename Real>
void matmul_tn_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        const Real* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            Real av = arow[p];
            if (av == Real(0)) continue;
            Real* crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// x: [*, k] treated as [n, k]; w: [k, m] -> [*, m]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& x, const Tensor<Real>& w) {
    auto [n, k] = detail::as_2d(x);
    if (w.shape().size() != 2 || w.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
    }
    std::size_t m = w.shape()[1];
    std::vector<Real> out(n * m, Real(0));
    detail::matmul_acc(x.data().data(), w.data().data(), out.data(), n, k, m);
    Shape out_shape = x.shape();
    out_shape.back() = m;
    return detail::make_op<Real>("matmul", std::move(out_shape), std::move(out), {x, w},
                                 [n = n, k = k, m = m](TensorNode<Real>& nd) {
                                     auto& px = *nd.parents[0];
                                     auto& pw = *nd.parents[1];
                                     if (px.requires_grad) {
                                         px.ensure_grad();  // gX = g * W^T
                                         detail::matmul_nt_acc(nd.grad.data(), pw.data.data(), px.grad.data(), n, m, k);
                                     }
                                     if (pw.requires_grad) {
                                         pw.ensure_grad();  // gW = X^T * g
                                         detail::matmul_tn_acc(px.data.data(), nd.grad.data(), pw.grad.data(), n, k, m);
                                     }
                                 });
}

// a: [n, k], b: [m, k] -> a * b^T : [n, m]
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto [n, k] = detail::as_2d(a);
    auto [m, kb] = detail::as_2d(b);
    if (k != kb) {
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<Real> out(n * m, Real(0));
    detail::matmul_nt_acc(a.data().data(), b.data().data(), out.data(), n, k, m);
    return detail::make_op<Real>("matmul_nt", Shape{n, m}, std::move(out), {a, b},
                                 [n = n, k = k, m = m](TensorNode<Real>& nd) {
                                     auto& pa = *nd.parents[0];
                                     auto& pb = *nd.parents[1];
                                     if (pa.requires_grad) {
                                         pa.ensure_grad();  // gA = g * B
                                         detail::matmul_acc(nd.grad.data(), pb.data.data(), pa.grad.data(), n, m, k);
                                     }
                                     if (pb.requires_grad) {
                                         pb.ensure_grad();  // gB = g^T * A
                                         detail::matmul_tn_acc(nd.grad.data(), pa.data.data(), pb.grad.data(), n, m, k);
                                     }
                                 });
}

// out = x * weight + bias (bias broadcast over leading dims).
template <typename Real>
Tensor<Real> apply_linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias) {
    if (weight.shape().size() != 2) {
        throw ShapeError("apply_linear: weight must be 2-d, got " + shape_str(weight.shape()));
    }
    if (bias.numel() != weight.shape()[1]) {
        throw ShapeError("apply_linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    return add_rowvec(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// gather / slice / concat
// ---------------------------------------------------------------------------

// x: [n, m]; picks rows by index (duplicates allowed; backward scatter-adds).
// Also serves as embedding lookup.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<std::size_t> idx) {
    auto [n, m] = detail::as_2d(x);
    for (std::size_t i : idx) {
        if (i >= n) {
            throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " +
                             std::to_string(n) + " rows");
        }
    }
    std::vector<Real> out(idx.size() * m);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.data().begin() + idx[r] * m, m, out.begin() + r * m);
    Shape out_shape{idx.size(), m};
    return detail::make_op<Real>("gather_rows", std::move(out_shape), std::move(out), {x},
                                 [idx = std::move(idx), m = m](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     for (std::size_t r = 0; r < idx.size(); ++r)
                                         for (std::size_t j = 0; j < m; ++j)
                                             p.grad[idx[r] * m + j] += nd.grad[r * m + j];
                                 });
}

template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, std::size_t begin, std::size_t count) {
    auto [n, m] = detail::as_2d(x);
    if (begin + count > n) {
        throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of bounds for " + std::to_string(n) + " rows");
    }
    std::vector<Real> out(count * m);
    std::copy_n(x.data().begin() + begin * m, count * m, out.begin());
    return detail::make_op<Real>("slice_rows", Shape{count, m}, std::move(out), {x},
                                 [begin, count, m = m](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     for (std::size_t i = 0; i < count * m; ++i)
                                         p.grad[begin * m + i] += nd.grad[i];
                                 });
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    std::size_t m = detail::as_2d(parts[0]).second;
    std::size_t total = 0;
    for (const auto& p : parts) {
        auto [rn, rm] = detail::as_2d(p);
        if (rm != m) throw ShapeError("concat_rows: column mismatch");
        total += rn;
    }
    std::vector<Real> out;
    out.reserve(total * m);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::size_t> row_counts;
    row_counts.reserve(parts.size());
    for (const auto& p : parts) row_counts.push_back(detail::as_2d(p).first);
    return detail::make_op<Real>("concat_rows", Shape{total, m}, std::move(out), parts,
                                 [row_counts = std::move(row_counts), m](TensorNode<Real>& nd) {
                                     std::size_t off = 0;
                                     for (std::size_t k = 0; k < nd.parents.size(); ++k) {
                                         auto& p = *nd.parents[k];
                                         std::size_t cnt = row_counts[k] * m;
                                         if (p.requires_grad) {
                                             p.ensure_grad();
                                             for (std::size_t i = 0; i < cnt; ++i) p.grad[i] += nd.grad[off + i];
                                         }
                                         off += cnt;
                                     }
                                 });
}

template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t begin, std::size_t count) {
    auto [n, m] = detail::as_2d(x);
    if (begin + count > m) {
        throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of bounds for " + std::to_string(m) + " columns");
    }
    std::vector<Real> out(n * count);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.data().begin() + i * m + begin, count, out.begin() + i * count);
    return detail::make_op<Real>("slice_cols", Shape{n, count}, std::move(out), {x},
                                 [begin, count, n = n, m = m](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < count; ++j)
                                             p.grad[i * m + begin + j] += nd.grad[i * count + j];
                                 });
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    std::size_t n = detail::as_2d(parts[0]).first;
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    widths.reserve(parts.size());
    for (const auto& p : parts) {
        auto [rn, rm] = detail::as_2d(p);
        if (rn != n) throw ShapeError("concat_cols: row mismatch");
        widths.push_back(rm);
        total += rm;
    }
    std::vector<Real> out(n * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(parts[k].data().begin() + i * widths[k], widths[k], out.begin() + i * total + off);
        off += widths[k];
    }
    return detail::make_op<Real>("concat_cols", Shape{n, total}, std::move(out), parts,
                                 [widths = std::move(widths), n, total](TensorNode<Real>& nd) {
                                     std::size_t off = 0;
                                     for (std::size_t k = 0; k < nd.parents.size(); ++k) {
                                         auto& p = *nd.parents[k];
                                         if (p.requires_grad) {
                                             p.ensure_grad();
                                             for (std::size_t i = 0; i < n; ++i)
                                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                                     p.grad[i * widths[k] + j] += nd.grad[i * total + off + j];
                                         }
                                         off += widths[k];
                                     }
                                 });
}

// ---------------------------------------------------------------------------
// nonlinearities, norms, reductions
// ---------------------------------------------------------------------------

// Row-wise softmax with max subtraction. Rows are the last dimension.
template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    auto [n, m] = detail::as_2d(x);
    if (m < 1) throw ShapeError("softmax_rows: empty rows");
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = x.data().data() + i * m;
        Real mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < m; ++j) {
            Real e = std::exp(row[j] - mx);
            out[i * m + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= sum;
    }
    return detail::make_op<Real>("softmax_rows", x.shape(), std::move(out), {x},
                                 [n = n, m = m](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     for (std::size_t i = 0; i < n; ++i) {
                                         const Real* y = nd.data.data() + i * m;
                                         const Real* g = nd.grad.data() + i * m;
                                         Real dot = 0;
                                         for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
                                         for (std::size_t j = 0; j < m; ++j)
                                             p.grad[i * m + j] += y[j] * (g[j] - dot);
                                     }
                                 });
}

// log(sum(exp(row))) per row -> [n, 1]
template <typename Real>
Tensor<Real> logsumexp_rows(const Tensor<Real>& x) {
    auto [n, m] = detail::as_2d(x);
    std::vector<Real> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = x.data().data() + i * m;
        Real mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < m; ++j) sum += std::exp(row[j] - mx);
        out[i] = mx + std::log(sum);
    }
    return detail::make_op<Real>("logsumexp_rows", Shape{n, 1}, std::move(out), {x},
                                 [n = n, m = m](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     for (std::size_t i = 0; i < n; ++i) {
                                         const Real* row = p.data.data() + i * m;
                                         Real z = nd.data[i];
                                         Real g = nd.grad[i];
                                         for (std::size_t j = 0; j < m; ++j)
                                             p.grad[i * m + j] += g * std::exp(row[j] - z);
                                     }
                                 });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real acc = 0;
    for (Real v : x.data()) acc += v;
    return detail::make_op<Real>("sum", Shape{1}, {acc}, {x}, [](TensorNode<Real>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += nd.grad[0];
    });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
    Real acc = 0;
    for (Real v : x.data()) acc += v;
    Real inv = Real(1) / static_cast<Real>(x.numel());
    return detail::make_op<Real>("mean", Shape{1}, {acc * inv}, {x}, [inv](TensorNode<Real>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += nd.grad[0] * inv;
    });
}

// GELU with the exact erf formulation.
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        Real v = x.data()[i];
        out[i] = Real(0.5) * v * (Real(1) + std::erf(v * Real(0.7071067811865475)));
    }
    return detail::make_op<Real>("gelu", x.shape(), std::move(out), {x}, [](TensorNode<Real>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) {
            Real v = p.data[i];
            Real cdf = Real(0.5) * (Real(1) + std::erf(v * Real(0.7071067811865475)));
            Real pdf = std::exp(Real(-0.5) * v * v) * Real(0.3989422804014327);
            p.grad[i] += nd.grad[i] * (cdf + v * pdf);
        }
    });
}

// Per-row layer normalization over the last dimension, with affine params.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
    auto [n, m] = detail::as_2d(x);
    if (gamma.numel() != m || beta.numel() != m) {
        throw ShapeError("layer_norm: affine params must have " + std::to_string(m) + " entries");
    }
    std::vector<Real> out(x.numel());
    std::vector<Real> xhat(x.numel());
    std::vector<Real> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = x.data().data() + i * m;
        Real mu = 0;
        for (std::size_t j = 0; j < m; ++j) mu += row[j];
        mu /= static_cast<Real>(m);
        Real var = 0;
        for (std::size_t j = 0; j < m; ++j) {
            Real d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(m);
        Real is = Real(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < m; ++j) {
            Real h = (row[j] - mu) * is;
            xhat[i * m + j] = h;
            out[i * m + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    return detail::make_op<Real>(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [n = n, m = m, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<Real>& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            if (pg.requires_grad) pg.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            if (px.requires_grad) px.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const Real* g = nd.grad.data() + i * m;
                const Real* h = xhat.data() + i * m;
                if (pg.requires_grad || pb.requires_grad) {
                    for (std::size_t j = 0; j < m; ++j) {
                        if (pg.requires_grad) pg.grad[j] += g[j] * h[j];
                        if (pb.requires_grad) pb.grad[j] += g[j];
                    }
                }
                if (px.requires_grad) {
                    Real mean_gh = 0, mean_ghh = 0;
                    for (std::size_t j = 0; j < m; ++j) {
                        Real gh = g[j] * pg.data[j];
                        mean_gh += gh;
                        mean_ghh += gh * h[j];
                    }
                    mean_gh /= static_cast<Real>(m);
                    mean_ghh /= static_cast<Real>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        Real gh = g[j] * pg.data[j];
                        px.grad[i * m + j] += inv_std[i] * (gh - mean_gh - h[j] * mean_ghh);
                    }
                }
            }
        });
}

// Inverted dropout. Identity when inactive or p == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, Rng& rng, bool active) {
    if (!active || p <= 0.0) return x;
    if (p >= 1.0) throw ContractError("dropout: probability must be < 1");
    Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
    std::vector<Real> mask(x.numel());
    for (auto& mv : mask) mv = (rng.uniform() < p) ? Real(0) : keep_scale;
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return detail::make_op<Real>("dropout", x.shape(), std::move(out), {x},
                                 [mask = std::move(mask)](TensorNode<Real>& nd) {
                                     auto& p2 = *nd.parents[0];
                                     p2.ensure_grad();
                                     for (std::size_t i = 0; i < nd.grad.size(); ++i)
                                         p2.grad[i] += nd.grad[i] * mask[i];
                                 });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean negative log-probability over positions where ignore_mask is false.
// An empty ignore_mask includes every position. Zero counted positions give
// loss 0 by convention.
template <typename Real>
Tensor<Real> cross_entropy_loss(const Tensor<Real>& logits, const std::vector<std::size_t>& targets,
                                const std::vector<bool>& ignore_mask = {}) {
    auto [n, v] = detail::as_2d(logits);
    if (targets.size() != n) {
        throw ShapeError("cross_entropy_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    }
    if (!ignore_mask.empty() && ignore_mask.size() != n) {
        throw ShapeError("cross_entropy_loss: ignore mask length mismatch");
    }
    std::size_t count = 0;
    Real total = 0;
    std::vector<Real> logz(n, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        if (!ignore_mask.empty() && ignore_mask[i]) continue;
        if (targets[i] >= v) {
            throw IndexError("cross_entropy_loss: target id " + std::to_string(targets[i]) +
                             " out of range [0, " + std::to_string(v) + ")");
        }
        const Real* row = logits.data().data() + i * v;
        Real mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        Real z = mx + std::log(sum);
        logz[i] = z;
        total += z - row[targets[i]];
        ++count;
    }
    Real loss = count ? total / static_cast<Real>(count) : Real(0);
    return detail::make_op<Real>(
        "cross_entropy_loss", Shape{1}, {loss}, {logits},
        [targets, ignore_mask, logz = std::move(logz), n = n, v = v, count](TensorNode<Real>& nd) {
            if (count == 0) return;
            auto& p = *nd.parents[0];
            p.ensure_grad();
            Real go = nd.grad[0] / static_cast<Real>(count);
            for (std::size_t i = 0; i < n; ++i) {
                if (!ignore_mask.empty() && ignore_mask[i]) continue;
                const Real* row = p.data.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) {
                    Real soft = std::exp(row[j] - logz[i]);
                    p.grad[i * v + j] += go * (soft - (j == targets[i] ? Real(1) : Real(0)));
                }
            }
        });
}

// Mean of the numerically stabilized form max(z,0) - z*y + log1p(exp(-|z|)).
template <typename Real>
Tensor<Real> binary_cross_entropy_with_logits(const Tensor<Real>& logits, const std::vector<int>& labels) {
    std::size_t n = logits.numel();
    if (labels.size() != n) {
        throw ShapeError("binary_cross_entropy_with_logits: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " logits");
    }
    if (n == 0) return Tensor<Real>::scalar(Real(0));
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Real z = logits.data()[i];
        Real y = static_cast<Real>(labels[i]);
        total += std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Real loss = total / static_cast<Real>(n);
    return detail::make_op<Real>("binary_cross_entropy_with_logits", Shape{1}, {loss}, {logits},
                                 [labels, n](TensorNode<Real>& nd) {
                                     auto& p = *nd.parents[0];
                                     p.ensure_grad();
                                     Real go = nd.grad[0] / static_cast<Real>(n);
                                     for (std::size_t i = 0; i < n; ++i) {
                                         Real z = p.data[i];
                                         Real sig = Real(1) / (Real(1) + std::exp(-z));
                                         p.grad[i] += go * (sig - static_cast<Real>(labels[i]));
                                     }
                                 });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename Real>
void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (root->backward_done) {
        throw StateError("backward: already called on this loss; reset gradients first");
    }
    root->backward_done = true;

    // Reachable nodes in reverse creation order. Creation order is a valid
    // topological order (an op's parents always precede it), so a single
    // reverse sweep visits each node exactly once.
    std::vector<TensorNode<Real>*> nodes;
    std::unordered_set<TensorNode<Real>*> seen;
    std::vector<TensorNode<Real>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto* nd = stack.back();
        stack.pop_back();
        nodes.push_back(nd);
        for (const auto& p : nd->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorNode<Real>* a, const TensorNode<Real>* b) { return a->order > b->order; });

    root->ensure_grad();
    root->grad[0] += Real(1);
    for (auto* nd : nodes) {
        if (nd->backprop && !nd->grad.empty()) nd->backprop(*nd);
    }
}

// ---------------------------------------------------------------------------
// gradient checking (finite-difference oracle)
// ---------------------------------------------------------------------------

// Compares reverse-mode gradients of the scalar function f at x against
// central finite differences. Returns the max elementwise relative error
// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
template <typename Real, typename F>
double check_gradients(F&& f, Tensor<Real>& x, Real eps) {
    if (eps <= Real(0)) throw ContractError("check_gradients: eps must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor<Real> loss = f(x);
    if (loss.numel() != 1) throw ContractError("check_gradients: f must be scalar-valued");
    backward(loss);
    std::vector<Real> g_ad = x.has_grad() ? x.grad() : std::vector<Real>(x.numel(), Real(0));
    x.zero_grad();

    double max_err = 0.0;
    auto& vals = x.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        Real orig = vals[i];
        vals[i] = orig + eps;
        double lp = static_cast<double>(f(x).value());
        vals[i] = orig - eps;
        double lm = static_cast<double>(f(x).value());
        vals[i] = orig;
        double g_fd = (lp - lm) / (2.0 * static_cast<double>(eps));
        double ga = static_cast<double>(g_ad[i]);
        double denom = std::max({std::abs(ga), std::abs(g_fd), 1e-8});
        max_err = std::max(max_err, std::abs(ga - g_fd) / denom);
    }
    return max_err;
}

}  // namespace relectra

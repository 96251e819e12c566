#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "signbart/error.hpp"
#include "signbart/rng.hpp"

namespace signbart {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward needs it
    bool requires_grad = false;
    bool tracked = false;  // produced by a recorded op while a tape was active
};

inline void ensure_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite value encountered");
        }
    }
}

inline std::vector<double>& grad_buf(TensorNode& node) {
    if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
    return node.grad;
}

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Value-type handle sharing its
/// storage node; ops return fresh tensors and record pullbacks on the active
/// tape when gradients are being tracked.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> values) {
        validate_shape(shape);
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        detail::ensure_finite(values, "tensor");
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) {
        validate_shape(shape);
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        std::size_t n = shape_numel(shape);
        t.node_->shape = std::move(shape);
        t.node_->data.assign(n, 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        detail::ensure_finite(t.node_->data, "tensor");
        return t;
    }

    static Tensor scalar(double value) { return from_data({1}, {value}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item: tensor has shape " + shape_str(shape()) + ", expected a scalar");
        }
        return node_->data[0];
    }

    double at(std::initializer_list<std::size_t> index) const {
        return node_->data[offset_of(index)];
    }
    double& at(std::initializer_list<std::size_t> index) { return node_->data[offset_of(index)]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        node_->requires_grad = value;
        return *this;
    }
    bool tracked() const { return node_->tracked || node_->requires_grad; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) {
            throw ContractError("grad: tensor has no gradient populated");
        }
        return node_->grad;
    }
    std::vector<double>& grad_mutable() { return detail::grad_buf(*node_); }
    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
    void drop_grad() { node_->grad.clear(); }

    /// Deep copy of the storage (grad not copied).
    Tensor clone() const {
        Tensor t = from_data(node_->shape, node_->data);
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor: rank-0 shapes are not supported");
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor: zero-length dimension in shape " + shape_str(shape));
        }
    }

    std::size_t offset_of(std::initializer_list<std::size_t> index) const {
        const Shape& s = node_->shape;
        if (index.size() != s.size()) {
            throw DimensionError("index rank " + std::to_string(index.size()) +
                                 " does not match tensor rank " + std::to_string(s.size()));
        }
        std::size_t off = 0;
        std::size_t d = 0;
        for (std::size_t i : index) {
            off = off * s[d] + i;
            ++d;
        }
        return off;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Ordered record of pullback closures for one forward pass. Ops record onto
/// the innermost live tape; replaying entries in reverse order visits the
/// graph in reverse topological order. Gradients accumulate (+=) into shared
/// inputs. The tape is cleared after each backward pass.
class Tape {
public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() {
        if (active_ == this) active_ = prev_;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> pullback) { entries_.push_back(std::move(pullback)); }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    void replay_backward() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> entries_;
    Tape* prev_;
    inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool track_out(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->tracked()) return true;
    }
    return false;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " do not broadcast");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides of `in` aligned right against `out`, 0 on broadcast dims.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t acc = 1;
    const std::size_t pad = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[i + pad] = (in[i] == 1 && out[i + pad] != 1) ? 0 : acc;
        acc *= in[i];
    }
    return strides;
}

// Visits every linear index of `out`, supplying the matching offsets into two
// broadcast operands.
template <class Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn fn) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t a_off = 0, b_off = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        fn(lin, a_off, b_off);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            a_off += sa[d];
            b_off += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            a_off -= sa[d] * out[d];
            b_off -= sb[d] * out[d];
        }
    }
}

// Sums `src` (shaped src_shape) into `dst` (shaped dst_shape, broadcastable
// up to src_shape). Used to push gradients back through broadcasts.
inline void reduce_sum_into(const std::vector<double>& src, const Shape& src_shape,
                            std::vector<double>& dst, const Shape& dst_shape) {
    if (src_shape == dst_shape) {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        return;
    }
    const auto dstrides = broadcast_strides(dst_shape, src_shape);
    const auto sstrides = broadcast_strides(src_shape, src_shape);
    for_each_broadcast(src_shape, sstrides, dstrides,
                       [&](std::size_t, std::size_t s_off, std::size_t d_off) { dst[d_off] += src[s_off]; });
}

// C[M,N] (+)= A[M,K] * B[K,N]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k_dim,
                  std::size_t n, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        if (!acc) std::fill(crow, crow + n, 0.0);
        const double* arow = a + i * k_dim;
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double aik = arow[k];
            const double* brow = b + k * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void mm_nt(const double* a, const double* bt, double* c, std::size_t m, std::size_t k_dim,
                  std::size_t n, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k_dim;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = bt + j * k_dim;
            double s = 0.0;
            for (std::size_t k = 0; k < k_dim; ++k) s += arow[k] * brow[k];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k_dim,
                  std::size_t n, bool acc) {
    if (!acc) std::fill(c, c + k_dim * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k_dim;
        const double* brow = b + i * n;
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double aik = arow[k];
            double* crow = c + k * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives

inline Tensor add(const Tensor& a, const Tensor& b) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
    Tensor out = Tensor::zeros(out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    } else {
        const auto sa = detail::broadcast_strides(a.shape(), out_shape);
        const auto sb = detail::broadcast_strides(b.shape(), out_shape);
        detail::for_each_broadcast(out_shape, sa, sb,
                                   [&](std::size_t lin, std::size_t ia, std::size_t ib) { ov[lin] = av[ia] + bv[ib]; });
    }
    detail::ensure_finite(ov, "add");
    if (detail::track_out({&a, &b})) {
        out.node()->tracked = true;
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad || an->tracked) {
                detail::reduce_sum_into(on->grad, on->shape, detail::grad_buf(*an), an->shape);
            }
            if (bn->requires_grad || bn->tracked) {
                detail::reduce_sum_into(on->grad, on->shape, detail::grad_buf(*bn), bn->shape);
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
    Tensor out = Tensor::zeros(out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    } else {
        detail::for_each_broadcast(out_shape, sa, sb,
                                   [&](std::size_t lin, std::size_t ia, std::size_t ib) { ov[lin] = av[ia] * bv[ib]; });
    }
    detail::ensure_finite(ov, "mul");
    if (detail::track_out({&a, &b})) {
        out.node()->tracked = true;
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, sa, sb, out_shape] {
            if (on->grad.empty()) return;
            const auto& og = on->grad;
            if (an->requires_grad || an->tracked) {
                std::vector<double> tmp(og.size());
                detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t, std::size_t ib) {
                    tmp[lin] = og[lin] * bn->data[ib];
                });
                detail::reduce_sum_into(tmp, out_shape, detail::grad_buf(*an), an->shape);
            }
            if (bn->requires_grad || bn->tracked) {
                std::vector<double> tmp(og.size());
                detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t ia, std::size_t) {
                    tmp[lin] = og[lin] * an->data[ia];
                });
                detail::reduce_sum_into(tmp, out_shape, detail::grad_buf(*bn), bn->shape);
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double factor) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
    detail::ensure_finite(ov, "scale");
    if (detail::track_out({&a})) {
        out.node()->tracked = true;
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, factor] {
            if (on->grad.empty()) return;
            auto& ga = detail::grad_buf(*an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * on->grad[i];
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Elementwise minimum with broadcasting. Not differentiated; used to combine
/// additive attention masks.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), "minimum");
    Tensor out = Tensor::zeros(out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
        ov[lin] = std::min(av[ia], bv[ib]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape primitives

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    Tensor out = Tensor::from_data(std::move(new_shape), a.data());
    if (detail::track_out({&a})) {
        out.node()->tracked = true;
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (on->grad.empty()) return;
            auto& ga = detail::grad_buf(*an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
        });
    }
    return out;
}

namespace detail {

inline void permuted_copy(const std::vector<double>& src, const Shape& src_shape, std::size_t d0,
                          std::size_t d1, std::vector<double>& dst, bool acc_into_dst) {
    Shape dst_shape = src_shape;
    std::swap(dst_shape[d0], dst_shape[d1]);
    // strides of src viewed through the permuted index order
    std::vector<std::size_t> src_strides(src_shape.size());
    std::size_t accum = 1;
    for (std::size_t i = src_shape.size(); i-- > 0;) {
        src_strides[i] = accum;
        accum *= src_shape[i];
    }
    std::vector<std::size_t> perm_strides = src_strides;
    std::swap(perm_strides[d0], perm_strides[d1]);
    const std::size_t n = src.size();
    std::vector<std::size_t> idx(dst_shape.size(), 0);
    std::size_t s_off = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        if (acc_into_dst) {
            dst[lin] += src[s_off];
        } else {
            dst[lin] = src[s_off];
        }
        for (std::size_t d = dst_shape.size(); d-- > 0;) {
            ++idx[d];
            s_off += perm_strides[d];
            if (idx[d] < dst_shape[d]) break;
            idx[d] = 0;
            s_off -= perm_strides[d] * dst_shape[d];
        }
    }
}

}  // namespace detail

inline Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1) {
    if (d0 >= a.rank() || d1 >= a.rank()) {
        throw DimensionError("transpose: axes (" + std::to_string(d0) + ", " + std::to_string(d1) +
                             ") out of range for shape " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    std::swap(out_shape[d0], out_shape[d1]);
    Tensor out = Tensor::zeros(out_shape);
    detail::permuted_copy(a.data(), a.shape(), d0, d1, out.data(), false);
    if (detail::track_out({&a})) {
        out.node()->tracked = true;
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, d0, d1] {
            if (on->grad.empty()) return;
            detail::permuted_copy(on->grad, on->shape, d0, d1, detail::grad_buf(*an), true);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix product

/// Matrix product over the last two axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t ka = sa.back();
    const std::size_t kb = sb[sb.size() - 2];
    const std::size_t n = sb.back();
    if (ka != kb) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(sa) + " x " + shape_str(sb));
    }
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    const Shape batch = batch_a.empty() && batch_b.empty()
                            ? Shape{}
                            : detail::broadcast_shape(batch_a, batch_b, "matmul");
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor out = Tensor::zeros(out_shape);
    const Shape batch_or_one = batch.empty() ? Shape{1} : batch;
    const Shape ba_or_one = batch_a.empty() ? Shape{1} : batch_a;
    const Shape bb_or_one = batch_b.empty() ? Shape{1} : batch_b;
    const auto stride_a = detail::broadcast_strides(ba_or_one, batch_or_one);
    const auto stride_b = detail::broadcast_strides(bb_or_one, batch_or_one);
    const auto stride_o = detail::broadcast_strides(batch_or_one, batch_or_one);

    const std::size_t block_a = m * ka;
    const std::size_t block_b = kb * n;
    const std::size_t block_o = m * n;
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    detail::for_each_broadcast(batch_or_one, stride_a, stride_b, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
        detail::mm_nn(pa + ia * block_a, pb + ib * block_b, po + lin * block_o, m, ka, n, false);
    });
    detail::ensure_finite(out.data(), "matmul");

    if (detail::track_out({&a, &b})) {
        out.node()->tracked = true;
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, m, ka, n, batch_or_one, stride_a, stride_b, block_a, block_b, block_o] {
            if (on->grad.empty()) return;
            const double* og = on->grad.data();
            const bool want_a = an->requires_grad || an->tracked;
            const bool want_b = bn->requires_grad || bn->tracked;
            double* ga = want_a ? detail::grad_buf(*an).data() : nullptr;
            double* gb = want_b ? detail::grad_buf(*bn).data() : nullptr;
            detail::for_each_broadcast(batch_or_one, stride_a, stride_b,
                                       [&](std::size_t lin, std::size_t ia, std::size_t ib) {
                                           const double* dc = og + lin * block_o;
                                           if (want_a) {
                                               // dA += dC * B^T
                                               detail::mm_nt(dc, bn->data.data() + ib * block_b,
                                                             ga + ia * block_a, m, n, ka, true);
                                           }
                                           if (want_b) {
                                               // dB += A^T * dC
                                               detail::mm_tn(an->data.data() + ia * block_a, dc,
                                                             gb + ib * block_b, m, ka, n, true);
                                           }
                                       });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinear primitives

/// Numerically stable softmax over the last axis (max-subtraction).
inline Tensor softmax_last_dim(const Tensor& t) {
    const std::size_t width = t.shape().back();
    const std::size_t rows = t.numel() / width;
    Tensor out = Tensor::zeros(t.shape());
    const auto& x = t.data();
    auto& y = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * width;
        double* yr = y.data() + r * width;
        double mx = xr[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < width; ++j) yr[j] *= inv;
    }
    detail::ensure_finite(y, "softmax");
    if (detail::track_out({&t})) {
        out.node()->tracked = true;
        auto tn = t.node(), on = out.node();
        Tape::active()->record([tn, on, rows, width] {
            if (on->grad.empty()) return;
            auto& gx = detail::grad_buf(*tn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = on->data.data() + r * width;
                const double* gy = on->grad.data() + r * width;
                double* gxr = gx.data() + r * width;
                double dot = 0.0;
                for (std::size_t j = 0; j < width; ++j) dot += gy[j] * yr[j];
                for (std::size_t j = 0; j < width; ++j) gxr[j] += yr[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

/// Normalizes each slice along the last axis to zero mean / unit variance
/// (biased variance, eps inside the square root), then applies gain and bias.
inline Tensor layer_norm(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ParameterError("layer_norm: eps must be > 0, got " + std::to_string(eps));
    const std::size_t width = t.shape().back();
    if (gain.numel() != width || bias.numel() != width) {
        throw DimensionError("layer_norm: gain/bias length must equal last dimension " +
                             std::to_string(width) + ", got " + std::to_string(gain.numel()) + "/" +
                             std::to_string(bias.numel()));
    }
    const std::size_t rows = t.numel() / width;
    Tensor out = Tensor::zeros(t.shape());
    auto xhat = std::make_shared<std::vector<double>>(t.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    const auto& x = t.data();
    const auto& g = gain.data();
    const auto& b = bias.data();
    auto& y = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * width;
        double mean = 0.0;
        for (std::size_t j = 0; j < width; ++j) mean += xr[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(width);
        const double r_inv = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = r_inv;
        double* xh = xhat->data() + r * width;
        double* yr = y.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) {
            xh[j] = (xr[j] - mean) * r_inv;
            yr[j] = xh[j] * g[j] + b[j];
        }
    }
    detail::ensure_finite(y, "layer_norm");
    if (detail::track_out({&t, &gain, &bias})) {
        out.node()->tracked = true;
        auto tn = t.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape::active()->record([tn, gn, bn, on, xhat, rstd, rows, width] {
            if (on->grad.empty()) return;
            const auto& gy = on->grad;
            if (gn->requires_grad || gn->tracked) {
                auto& gg = detail::grad_buf(*gn);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xh = xhat->data() + r * width;
                    const double* gyr = gy.data() + r * width;
                    for (std::size_t j = 0; j < width; ++j) gg[j] += gyr[j] * xh[j];
                }
            }
            if (bn->requires_grad || bn->tracked) {
                auto& gb = detail::grad_buf(*bn);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* gyr = gy.data() + r * width;
                    for (std::size_t j = 0; j < width; ++j) gb[j] += gyr[j];
                }
            }
            if (tn->requires_grad || tn->tracked) {
                auto& gx = detail::grad_buf(*tn);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xh = xhat->data() + r * width;
                    const double* gyr = gy.data() + r * width;
                    double* gxr = gx.data() + r * width;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < width; ++j) {
                        const double dxhat = gyr[j] * gn->data[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(width);
                    mean_dxhat_xhat /= static_cast<double>(width);
                    for (std::size_t j = 0; j < width; ++j) {
                        const double dxhat = gyr[j] * gn->data[j];
                        gxr[j] += (*rstd)[r] * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape());
    const auto& x = t.data();
    auto& y = out.data();
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
    }
    detail::ensure_finite(y, "gelu");
    if (detail::track_out({&t})) {
        out.node()->tracked = true;
        auto tn = t.node(), on = out.node();
        Tape::active()->record([tn, on, kInvSqrt2] {
            if (on->grad.empty()) return;
            auto& gx = detail::grad_buf(*tn);
            constexpr double kInvSqrt2Pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const double xi = tn->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
                gx[i] += on->grad[i] * (cdf + xi * pdf);
            }
        });
    }
    return out;
}

/// Inverted dropout: zeroes elements with probability `rate` and scales
/// survivors by 1/(1-rate). Identity in eval mode.
inline Tensor dropout(const Tensor& t, double rate, bool training, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ParameterError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) {
        // pass-through; keep the graph connected
        return scale(t, 1.0);
    }
    if (rng == nullptr) throw ContractError("dropout: training mode needs a random generator");
    Tensor out = Tensor::zeros(t.shape());
    auto mask = std::make_shared<std::vector<double>>(t.numel());
    const double keep_scale = 1.0 / (1.0 - rate);
    const auto& x = t.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        (*mask)[i] = rng->uniform() < rate ? 0.0 : keep_scale;
        y[i] = x[i] * (*mask)[i];
    }
    if (detail::track_out({&t})) {
        out.node()->tracked = true;
        auto tn = t.node(), on = out.node();
        Tape::active()->record([tn, on, mask] {
            if (on->grad.empty()) return;
            auto& gx = detail::grad_buf(*tn);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * (*mask)[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::track_out({&t})) {
        out.node()->tracked = true;
        auto tn = t.node(), on = out.node();
        Tape::active()->record([tn, on] {
            if (on->grad.empty()) return;
            auto& gx = detail::grad_buf(*tn);
            const double g = on->grad[0];
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

/// Mean over the valid time steps of a (B, T, D) tensor. `frame_mask` is a
/// (B, T) 0/1 tensor; rows must contain at least one valid step.
inline Tensor masked_mean_pool(const Tensor& t, const Tensor& frame_mask) {
    if (t.rank() != 3 || frame_mask.rank() != 2 || t.dim(0) != frame_mask.dim(0) ||
        t.dim(1) != frame_mask.dim(1)) {
        throw DimensionError("masked_mean_pool: got " + shape_str(t.shape()) + " with mask " +
                             shape_str(frame_mask.shape()));
    }
    const std::size_t batch = t.dim(0), steps = t.dim(1), depth = t.dim(2);
    auto inv_len = std::make_shared<std::vector<double>>(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        double len = 0.0;
        for (std::size_t s = 0; s < steps; ++s) len += frame_mask.data()[b * steps + s];
        if (len == 0.0) {
            throw ContractError("masked_mean_pool: batch row " + std::to_string(b) + " has no valid frames");
        }
        (*inv_len)[b] = 1.0 / len;
    }
    Tensor out = Tensor::zeros({batch, depth});
    const auto& x = t.data();
    const auto& m = frame_mask.data();
    auto& y = out.data();
    for (std::size_t b = 0; b < batch; ++b) {
        double* yr = y.data() + b * depth;
        for (std::size_t s = 0; s < steps; ++s) {
            if (m[b * steps + s] == 0.0) continue;
            const double* xr = x.data() + (b * steps + s) * depth;
            for (std::size_t d = 0; d < depth; ++d) yr[d] += xr[d];
        }
        for (std::size_t d = 0; d < depth; ++d) yr[d] *= (*inv_len)[b];
    }
    detail::ensure_finite(y, "masked_mean_pool");
    if (detail::track_out({&t})) {
        out.node()->tracked = true;
        auto tn = t.node(), mn = frame_mask.node(), on = out.node();
        Tape::active()->record([tn, mn, on, inv_len, batch, steps, depth] {
            if (on->grad.empty()) return;
            auto& gx = detail::grad_buf(*tn);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* gyr = on->grad.data() + b * depth;
                for (std::size_t s = 0; s < steps; ++s) {
                    const double w = mn->data[b * steps + s] * (*inv_len)[b];
                    if (w == 0.0) continue;
                    double* gxr = gx.data() + (b * steps + s) * depth;
                    for (std::size_t d = 0; d < depth; ++d) gxr[d] += w * gyr[d];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward driver

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
/// gradients into every tracked tensor reachable from `loss`. The tape is
/// cleared afterwards.
inline void backward(const Tensor& loss, Tape& tape) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.tracked()) {
        throw ContractError("backward: loss was not produced through the active tape");
    }
    if (!std::isfinite(loss.item())) {
        throw NumericError("backward: loss is not finite");
    }
    detail::grad_buf(*loss.node())[0] += 1.0;
    tape.replay_backward();
    tape.clear();
}

}  // namespace signbart

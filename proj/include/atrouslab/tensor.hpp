// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with tape-based reverse-mode autodiff.
//
// A Tensor<T> is a cheap handle onto shared storage; ops are free functions
// that run eagerly and, when a Tape<T> is active and an input participates in
// gradient flow, record a closure computing the vector-Jacobian product.
// Gradient buffers are engaged lazily: a tensor participates if it is a leaf
// with requires_grad or was produced from a participating input. Frozen
// parameters (requires_grad == false) never engage, so no work is spent on
// their gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "atrouslab/common.hpp"
#include "atrouslab/rng.hpp"

namespace atrouslab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;  // leaf flag set by the user
    std::vector<T> grad;         // engaged (sized) only when participating in a tape
};

}  // namespace detail

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), T(0), requires_grad);
    }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        return make(std::move(shape), value, requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) {
        return make(Shape{}, value, requires_grad);
    }
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    // ref-qualified: the storage dies with the handle, so a temporary's data
    // must not escape into a range-for or reference
    std::vector<T>& data() & { return impl_->data; }
    const std::vector<T>& data() const& { return impl_->data; }
    std::vector<T>& data() && = delete;
    const std::vector<T>& data() const&& = delete;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool grad_engaged() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
    bool participates() const { return impl_->requires_grad || grad_engaged(); }
    void engage_grad() const {
        if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
    }
    std::vector<T>& grad() & {
        if (!grad_engaged()) throw StateError("gradient not engaged on this tensor");
        return impl_->grad;
    }
    const std::vector<T>& grad() const& {
        if (!grad_engaged()) throw StateError("gradient not engaged on this tensor");
        return impl_->grad;
    }
    std::vector<T>& grad() && = delete;
    const std::vector<T>& grad() const&& = delete;
    void zero_grad() {
        if (grad_engaged()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    T at(std::initializer_list<std::size_t> idx) const {
        return impl_->data[flat_index(idx)];
    }
    T& at(std::initializer_list<std::size_t> idx) {
        return impl_->data[flat_index(idx)];
    }

    // deep copy, detached from any graph
    Tensor clone() const {
        Tensor t = from_data(impl_->shape, impl_->data, impl_->requires_grad);
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }

  private:
    static Tensor make(Shape shape, T fill, bool requires_grad) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl<T>>();
        std::size_t n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(n, fill);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        const Shape& s = impl_->shape;
        if (idx.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
        std::size_t flat = 0;
        std::size_t d = 0;
        for (std::size_t i : idx) {
            flat = flat * s[d] + i;
            ++d;
        }
        return flat;
    }

    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return tls_current_; }

    // RAII activation; one tape per training step, one thread at a time
    class Scope {
      public:
        explicit Scope(Tape& tape) : prev_(tls_current_) { tls_current_ = &tape; }
        ~Scope() { tls_current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

    void record(std::function<void()> vjp) { ops_.push_back(std::move(vjp)); }

    std::size_t size() const { return ops_.size(); }
    bool consumed() const { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and replays all recorded VJPs in reverse.
    // Populates grad for every participating tensor; the tape is consumed.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        if (consumed_) throw StateError("backward called on a consumed tape");
        consumed_ = true;
        if (loss.participates()) {
            loss.engage_grad();
            loss.impl()->grad[0] = T(1);
        }
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

  private:
    static inline thread_local Tape* tls_current_ = nullptr;
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

namespace detail {

// Grad plumbing shared by every op: engages grads on the output and on every
// participating input, and tells the caller whether a VJP closure should be
// recorded on the active tape.
template <typename T>
bool tape_should_record(std::initializer_list<const Tensor<T>*> inputs, const Tensor<T>& out) {
    Tape<T>* tape = Tape<T>::current();
    if (!tape) return false;
    bool any = false;
    for (const Tensor<T>* in : inputs) {
        if (in->participates()) {
            in->engage_grad();
            any = true;
        }
    }
    if (any) out.engage_grad();
    return any;
}

// Broadcast plan following numpy rules, restricted to what the library needs:
// shapes are right-aligned; each dimension pair must be equal or contain a 1.
struct BcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;  // element strides into a, 0 on broadcast dims
    std::vector<std::size_t> stride_b;
};

inline BcastPlan make_bcast(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    BcastPlan plan;
    plan.out.assign(rank, 1);
    std::vector<std::size_t> ea(rank, 1), eb(rank, 1);
    for (std::size_t i = 0; i < a.size(); ++i) ea[rank - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) eb[rank - b.size() + i] = b[i];
    for (std::size_t i = 0; i < rank; ++i) {
        if (ea[i] == eb[i] || ea[i] == 1 || eb[i] == 1) {
            plan.out[i] = std::max(ea[i], eb[i]);
        } else {
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
    }
    // row-major strides of the padded shapes, zeroed where broadcast
    std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sa[i] = acc;
        acc *= ea[i];
    }
    acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sb[i] = acc;
        acc *= eb[i];
    }
    for (std::size_t i = 0; i < rank; ++i) {
        if (ea[i] == 1 && plan.out[i] != 1) sa[i] = 0;
        if (eb[i] == 1 && plan.out[i] != 1) sb[i] = 0;
    }
    plan.stride_a = std::move(sa);
    plan.stride_b = std::move(sb);
    return plan;
}

// Invokes fn(out_index, a_index, b_index) over the broadcast iteration space.
template <typename Fn>
void for_each_bcast(const BcastPlan& plan, Fn&& fn) {
    const std::size_t rank = plan.out.size();
    const std::size_t total = shape_numel(plan.out);
    if (rank == 0) {
        fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        fn(o, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += plan.stride_a[d];
            ib += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            idx[d] = 0;
            ia -= plan.stride_a[d] * plan.out[d];
            ib -= plan.stride_b[d] * plan.out[d];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// FwdFn: T(a,b). GradA/GradB: local partial derivative evaluated at (a,b).
template <typename T, typename FwdFn, typename GradA, typename GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, GradA da, GradB db) {
    if (a.shape() == b.shape()) {
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        T* po = out.data().data();
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
        if (tape_should_record<T>({&a, &b}, out)) {
            const bool ga = a.participates(), gb = b.participates();
            Tape<T>::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), da, db, ga, gb, n] {
                const T* g = oi->grad.data();
                for (std::size_t i = 0; i < n; ++i) {
                    if (ga) ai->grad[i] += g[i] * da(ai->data[i], bi->data[i]);
                    if (gb) bi->grad[i] += g[i] * db(ai->data[i], bi->data[i]);
                }
            });
        }
        return out;
    }
    BcastPlan plan = make_bcast(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(plan.out);
    {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        T* po = out.data().data();
        for_each_bcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = fwd(pa[ia], pb[ib]); });
    }
    if (tape_should_record<T>({&a, &b}, out)) {
        const bool ga = a.participates(), gb = b.participates();
        Tape<T>::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), plan, da, db, ga, gb] {
            const T* g = oi->grad.data();
            for_each_bcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                if (ga) ai->grad[ia] += g[o] * da(ai->data[ia], bi->data[ib]);
                if (gb) bi->grad[ib] += g[o] * db(ai->data[ia], bi->data[ib]);
            });
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename GradFn>
Tensor<T> unary_op(const Tensor<T>& x, FwdFn fwd, GradFn dfn) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data().data();
    T* po = out.data().data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), dfn, n] {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * dfn(xi->data[i], oi->data[i]);
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T s) { return s * (T(1) - s); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        x,
        [=](T v) {
            return static_cast<T>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [=](T v, T) {
            const double d = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            return static_cast<T>(cdf + d * inv_sqrt2pi * std::exp(-0.5 * d * d));
        });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// gradient passes through strictly inside the interval, zero on/outside
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary_op(
        x, [=](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [=](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [=](T v) { return v * c; }, [=](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [=](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return mul_scalar(x, T(-1));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
    }
    Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), x.data());
    if (detail::tape_should_record<T>({&x}, out)) {
        const std::size_t n = x.numel();
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), n] {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw ShapeError("permute rank mismatch for " + shape_str(s));
    const std::size_t rank = s.size();
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];

    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
    // stride through the input as we walk the output linearly
    std::vector<std::size_t> walk(rank);
    for (std::size_t i = 0; i < rank; ++i) walk[i] = in_strides[perm[i]];

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data().data();
    T* po = out.data().data();
    const std::size_t total = x.numel();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
        po[o] = px[src];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += walk[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= walk[d] * out_shape[d];
        }
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), out_shape, walk, rank, total] {
            std::vector<std::size_t> idx2(rank, 0);
            std::size_t src2 = 0;
            for (std::size_t o = 0; o < total; ++o) {
                xi->grad[src2] += oi->grad[o];
                for (std::size_t d = rank; d-- > 0;) {
                    ++idx2[d];
                    src2 += walk[d];
                    if (idx2[d] < out_shape[d]) break;
                    idx2[d] = 0;
                    src2 -= walk[d] * out_shape[d];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
    std::vector<std::size_t> perm(x.dim());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

// select index i along axis 1: [B, N, ...] -> [B, ...]
template <typename T>
Tensor<T> select_axis1(const Tensor<T>& x, std::size_t index) {
    const Shape& s = x.shape();
    if (s.size() < 2 || index >= s[1]) {
        throw ShapeError("select_axis1(" + std::to_string(index) + ") out of range for " + shape_str(s));
    }
    Shape out_shape;
    out_shape.push_back(s[0]);
    for (std::size_t d = 2; d < s.size(); ++d) out_shape.push_back(s[d]);
    std::size_t inner = 1;
    for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data().data();
    T* po = out.data().data();
    for (std::size_t b = 0; b < s[0]; ++b) {
        const T* src = px + (b * s[1] + index) * inner;
        std::copy(src, src + inner, po + b * inner);
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        const std::size_t b_count = s[0], n_count = s[1];
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), b_count, n_count, inner, index] {
            for (std::size_t b = 0; b < b_count; ++b) {
                T* gx = xi->grad.data() + (b * n_count + index) * inner;
                const T* go = oi->grad.data() + b * inner;
                for (std::size_t i = 0; i < inner; ++i) gx[i] += go[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl()] {
            const T g = oi->grad[0];
            for (T& gv : xi->grad) gv += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// sum over the trailing `tail_dims` dimensions: [d0..dk, t0..tm] -> [d0..dk]
template <typename T>
Tensor<T> sum_tail(const Tensor<T>& x, std::size_t tail_dims) {
    const Shape& s = x.shape();
    if (tail_dims == 0 || tail_dims > s.size()) {
        throw ShapeError("sum_tail(" + std::to_string(tail_dims) + ") invalid for " + shape_str(s));
    }
    Shape out_shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(tail_dims));
    std::size_t inner = 1;
    for (std::size_t d = s.size() - tail_dims; d < s.size(); ++d) inner *= s[d];
    const std::size_t outer = x.numel() / inner;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* px = x.data().data();
    T* po = out.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        T acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += px[o * inner + i];
        po[o] = acc;
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), outer, inner] {
            for (std::size_t o = 0; o < outer; ++o) {
                const T g = oi->grad[o];
                for (std::size_t i = 0; i < inner; ++i) xi->grad[o * inner + i] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension (numerically stable)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("softmax requires rank >= 1");
    const std::size_t cols = s.back();
    const std::size_t rows = x.numel() / cols;
    Tensor<T> out = Tensor<T>::zeros(s);
    const T* px = x.data().data();
    T* po = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * cols;
        T* orow = po + r * cols;
        T m = row[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
        T denom = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            orow[c] = std::exp(row[c] - m);
            denom += orow[c];
        }
        const T inv = T(1) / denom;
        for (std::size_t c = 0; c < cols; ++c) orow[c] *= inv;
    }
    if (detail::tape_should_record<T>({&x}, out)) {
        Tape<T>::current()->record([xi = x.impl(), oi = out.impl(), rows, cols] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* a = oi->data.data() + r * cols;
                const T* g = oi->grad.data() + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) dot += a[c] * g[c];
                T* gx = xi->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) gx[c] += a[c] * (g[c] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched matmul: [.., m, k] x [.., k, n] -> [.., m, n]
// Leading dims must match, be 1 (broadcast), or b may be rank 2.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void mm_acc_bt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T* arow = a + i * k;
            const T* brow = b + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void mm_acc_at(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + i * n;
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct MatmulPlan {
    Shape out;
    std::size_t batches = 1;
    std::size_t m = 0, k = 0, n = 0;
    bool a_bcast = false, b_bcast = false;  // whole-batch broadcast (single matrix)
};

inline MatmulPlan make_matmul_plan(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a) + " and " + shape_str(b));
    }
    MatmulPlan plan;
    plan.m = a[a.size() - 2];
    plan.k = a[a.size() - 1];
    const std::size_t bk = b[b.size() - 2];
    plan.n = b[b.size() - 1];
    if (plan.k != bk) {
        throw ShapeError("matmul inner extents differ: " + shape_str(a) + " x " + shape_str(b));
    }
    Shape lead_a(a.begin(), a.end() - 2), lead_b(b.begin(), b.end() - 2);
    Shape lead;
    if (lead_a == lead_b) {
        lead = lead_a;
    } else if (lead_b.empty()) {
        lead = lead_a;
        plan.b_bcast = true;
    } else if (lead_a.empty()) {
        lead = lead_b;
        plan.a_bcast = true;
    } else {
        throw ShapeError("matmul batch extents differ: " + shape_str(a) + " x " + shape_str(b));
    }
    plan.batches = shape_numel(lead);
    plan.out = lead;
    plan.out.push_back(plan.m);
    plan.out.push_back(plan.n);
    return plan;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::MatmulPlan plan = detail::make_matmul_plan(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(plan.out);
    const std::size_t an = plan.m * plan.k, bn = plan.k * plan.n, on = plan.m * plan.n;
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (std::size_t t = 0; t < plan.batches; ++t) {
        detail::mm_acc(plan.m, plan.k, plan.n, pa + (plan.a_bcast ? 0 : t * an),
                       pb + (plan.b_bcast ? 0 : t * bn), po + t * on);
    }
    if (detail::tape_should_record<T>({&a, &b}, out)) {
        const bool ga = a.participates(), gb = b.participates();
        Tape<T>::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), plan, an, bn, on, ga, gb] {
            for (std::size_t t = 0; t < plan.batches; ++t) {
                const T* go = oi->grad.data() + t * on;
                const T* av = ai->data.data() + (plan.a_bcast ? 0 : t * an);
                const T* bv = bi->data.data() + (plan.b_bcast ? 0 : t * bn);
                if (ga) {
                    // dA = dC * B^T
                    detail::mm_acc_bt(plan.m, plan.n, plan.k, go, bv,
                                      ai->grad.data() + (plan.a_bcast ? 0 : t * an));
                }
                if (gb) {
                    // dB = A^T * dC
                    detail::mm_acc_at(plan.m, plan.k, plan.n, av, go,
                                      bi->grad.data() + (plan.b_bcast ? 0 : t * bn));
                }
            }
        });
    }
    return out;
}

// max |a - b| over all elements; test/diagnostic helper
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    }
    return m;
}

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

}  // namespace atrouslab

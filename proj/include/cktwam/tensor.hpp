// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "cktwam/common.hpp"
#include "cktwam/rng.hpp"

namespace cktwam {

// ---------------------------------------------------------------------------
// Instrumentation and fault-injection hooks (thread-local, test-visible).
// ---------------------------------------------------------------------------

/// Running count of scalar multiplies performed by matmul; used by cost tests.
inline uint64_t& matmul_mult_counter() {
    thread_local uint64_t c = 0;
    return c;
}

namespace debug {
/// When set, gelu's backward applies a deliberately wrong derivative so the
/// finite-difference checker can demonstrate its own sensitivity.
inline bool& gelu_backward_fault() {
    thread_local bool f = false;
    return f;
}
}  // namespace debug

// ---------------------------------------------------------------------------
// Tensor and tape
// ---------------------------------------------------------------------------

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    uint64_t id = 0;

    std::vector<T>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
    void accumulate(const T* g, int64_t off, int64_t n) {
        auto& buf = grad_buf();
        for (int64_t i = 0; i < n; ++i) buf[off + i] += g[i];
    }
};

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

/// Dense row-major tensor handle. Copies share the underlying node; use
/// clone() for a deep copy. Values are treated as immutable while a tape
/// holds records referencing the node.
template <typename T>
class Tensor {
public:
    using NodePtr = std::shared_ptr<TensorNode<T>>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, true);
    }
    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return full({1}, v); }
    static Tensor from_vector(Shape shape, std::vector<T> vals, bool requires_grad = false) {
        return from_data(std::move(shape), std::move(vals), requires_grad, false);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(n_->value.size()); }
    int64_t dim(int i) const {
        int r = rank();
        if (i < 0) i += r;
        return n_->shape[static_cast<size_t>(i)];
    }

    const std::vector<T>& values() const { return n_->value; }
    std::vector<T>& mutable_values() { return n_->value; }
    const T* data() const { return n_->value.data(); }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<T>& grad() const { return n_->grad; }
    void zero_grad() {
        n_->grad.assign(n_->value.size(), T(0));
    }
    void clear_grad() { n_->grad.clear(); }

    uint64_t id() const { return n_->id; }
    NodePtr node() const { return n_; }

    Tensor clone() const {
        Tensor t = from_vector(n_->shape, n_->value);
        return t;
    }

    T item() const {
        if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
        return n_->value[0];
    }

private:
    static Tensor from_data(Shape shape, std::vector<T> vals, bool requires_grad, bool fill_zero) {
        int64_t n = numel(shape);
        for (int64_t d : shape)
            if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<TensorNode<T>>();
        t.n_->shape = std::move(shape);
        if (fill_zero)
            t.n_->value.assign(static_cast<size_t>(n), T(0));
        else {
            if (static_cast<int64_t>(vals.size()) != n)
                throw ShapeError("value count does not match shape " + shape_str(t.n_->shape));
            t.n_->value = std::move(vals);
        }
        t.n_->requires_grad = requires_grad;
        t.n_->id = next_node_id();
        return t;
    }

    NodePtr n_;
};

template <typename T>
Tensor<T> randn(Shape shape, RngStream& rng, T stddev = T(1), bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.mutable_values()) v = static_cast<T>(rng.gaussian()) * stddev;
    return t;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

/// Reverse-mode tape: an ordered record of executed ops. backward() replays
/// the records in exact reverse order; op-output gradients are reset at the
/// start of every backward so repeated calls (after leaf-grad reset) yield
/// identical leaf gradients.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() { return active_slot(); }

    void record(std::shared_ptr<TensorNode<T>> out, std::function<void()> fn) {
        records_.push_back({std::move(out), std::move(fn)});
    }

    size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward() requires a scalar loss");
        if (!loss.requires_grad())
            throw IntegrityError("backward() on a tensor with no recorded graph");
        for (auto& r : records_) {
            auto& g = r.out->grad_buf();
            std::fill(g.begin(), g.end(), T(0));
        }
        loss.node()->grad_buf()[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
    }

private:
    static Tape*& active_slot() {
        thread_local Tape* t = nullptr;
        return t;
    }
    struct Record {
        std::shared_ptr<TensorNode<T>> out;
        std::function<void()> fn;
    };
    std::vector<Record> records_;
};

namespace detail {

template <typename T>
inline void autodiff_record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                            std::function<void()> fn) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return;
    bool need = false;
    for (const auto* t : inputs) need = need || t->requires_grad();
    if (!need) return;
    out.set_requires_grad(true);
    tape->record(out.node(), std::move(fn));
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

/// Per-out-dim element strides for `in` broadcast (right-aligned) to `out`.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto ist = contiguous_strides(in);
    std::vector<int64_t> st(out.size(), 0);
    size_t off = out.size() - in.size();
    for (size_t i = off; i < out.size(); ++i) {
        size_t j = i - off;
        st[i] = (in[j] == 1 && out[i] != 1) ? 0 : ist[j];
    }
    return st;
}

/// Visit every position of `shape`, providing offsets into two broadcast
/// inputs and the linear output index.
template <typename F>
inline void for_each_broadcast(const Shape& shape, const std::vector<int64_t>& sa,
                               const std::vector<int64_t>& sb, F&& body) {
    int64_t n = numel(shape);
    if (n == 0) return;
    size_t r = shape.size();
    if (r == 0) {
        body(int64_t(0), int64_t(0), int64_t(0));
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        body(i, oa, ob);
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            auto ud = static_cast<size_t>(d);
            ++idx[ud];
            oa += sa[ud];
            ob += sb[ud];
            if (idx[ud] < shape[ud]) break;
            idx[ud] = 0;
            oa -= sa[ud] * shape[ud];
            ob -= sb[ud] * shape[ud];
        }
    }
}

template <typename T, typename FVal, typename FDa, typename FDb>
Tensor<T> binary_broadcast(const char* name, const Tensor<T>& a, const Tensor<T>& b, FVal f, FDa dfa,
                           FDb dfb) {
    Shape os = broadcast_shape(a.shape(), b.shape(), name);
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    Tensor<T> out = Tensor<T>::zeros(os);
    {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.mutable_values().data();
        for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) { po[i] = f(pa[oa], pb[ob]); });
    }
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    autodiff_record(out, {&a, &b}, [an, bn, on, os, sa, sb, dfa, dfb] {
        const T* g = on->grad.data();
        const T* pa = an->value.data();
        const T* pb = bn->value.data();
        std::vector<T>* ga = an->requires_grad ? &an->grad_buf() : nullptr;
        std::vector<T>* gb = bn->requires_grad ? &bn->grad_buf() : nullptr;
        for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
            if (ga) (*ga)[static_cast<size_t>(oa)] += dfa(pa[oa], pb[ob]) * g[i];
            if (gb) (*gb)[static_cast<size_t>(ob)] += dfb(pa[oa], pb[ob]) * g[i];
        });
    });
    return out;
}

template <typename T, typename FVal, typename FGrad>
Tensor<T> unary_elementwise(const Tensor<T>& x, FVal f, FGrad df) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.mutable_values().data();
    int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
    auto xn = x.node();
    auto on = out.node();
    autodiff_record(out, {&x}, [xn, on, df] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        const T* pv = xn->value.data();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += df(pv[i]) * g[i];
    });
    return out;
}

inline int normalize_axis(int axis, int rank, const char* op) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw ShapeError(std::string(op) + ": axis out of range");
    return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

/// out = x * m + c with scalar constants (not tensors).
template <typename T>
Tensor<T> affine_const(const Tensor<T>& x, T m, T c) {
    return detail::unary_elementwise(
        x, [m, c](T v) { return v * m + c; }, [m](T) { return m; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T m) {
    return affine_const(x, m, T(0));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return detail::unary_elementwise(
        x,
        [](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
        },
        [](T v) {
            double d = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * d * d);
            double grad = cdf + d * pdf;
            if (debug::gelu_backward_fault()) grad *= 1.05;
            return static_cast<T>(grad);
        });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary_elementwise(
        x,
        [](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(d > 0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d)));
        },
        [](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(1.0 / (1.0 + std::exp(-d)));
        });
}

/// Identity in eval mode; in train mode zeroes entries with probability
/// `rate` and scales survivors by 1/(1-rate). rate == 0 returns x unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train_mode, RngStream rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
    if (!train_mode || rate == 0.0) {
        Tensor<T> out = x.clone();
        auto xn = x.node();
        auto on = out.node();
        detail::autodiff_record(out, {&x}, [xn, on] {
            xn->accumulate(on->grad.data(), 0, static_cast<int64_t>(on->grad.size()));
        });
        return out;
    }
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    for (auto& m : *mask) m = rng.uniform() < rate ? T(0) : keep_scale;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.mutable_values().data();
    for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] * (*mask)[static_cast<size_t>(i)];
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, mask] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*mask)[i] * g[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor<T> out = Tensor<T>::from_vector(std::move(new_shape), x.values());
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on] {
        xn->accumulate(on->grad.data(), 0, static_cast<int64_t>(on->grad.size()));
    });
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm) {
    int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("transpose: perm rank mismatch");
    Shape os(static_cast<size_t>(r));
    auto ist = detail::contiguous_strides(x.shape());
    std::vector<int64_t> map_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        int p = perm[static_cast<size_t>(i)];
        if (p < 0 || p >= r) throw ShapeError("transpose: invalid permutation");
        os[static_cast<size_t>(i)] = x.dim(p);
        map_stride[static_cast<size_t>(i)] = ist[static_cast<size_t>(p)];
    }
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = x.data();
    T* po = out.mutable_values().data();
    std::vector<int64_t> zero(os.size(), 0);
    detail::for_each_broadcast(os, map_stride, zero,
                               [&](int64_t i, int64_t ox, int64_t) { po[i] = px[ox]; });
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, os, map_stride, zero] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        detail::for_each_broadcast(os, map_stride, zero, [&](int64_t i, int64_t ox, int64_t) {
            gx[static_cast<size_t>(ox)] += g[i];
        });
    });
    return out;
}

/// Swap the two innermost axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    int r = x.rank();
    if (r < 2) throw ShapeError("transpose_last2: rank must be >= 2");
    std::vector<int> perm(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[static_cast<size_t>(r - 2)], perm[static_cast<size_t>(r - 1)]);
    return transpose(x, perm);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    int a = detail::normalize_axis(axis, x.rank(), "slice");
    if (start < 0 || len < 0 || start + len > x.dim(a)) throw ShapeError("slice: range out of bounds");
    Shape os = x.shape();
    os[static_cast<size_t>(a)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.dim(i);
    for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
    int64_t axis_len = x.dim(a);
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = x.data();
    T* po = out.mutable_values().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, px + (o * axis_len + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(T));
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, outer, inner, axis_len, start, len] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < len * inner; ++i)
                gx[static_cast<size_t>((o * axis_len + start) * inner + i)] += g[o * len * inner + i];
    });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int a = detail::normalize_axis(axis, parts[0].rank(), "concat");
    Shape os = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != a && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch on non-concat axis between " +
                                 shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
        total += p.dim(a);
    }
    os[static_cast<size_t>(a)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = a + 1; i < static_cast<int>(os.size()); ++i) inner *= os[static_cast<size_t>(i)];
    Tensor<T> out = Tensor<T>::zeros(os);
    T* po = out.mutable_values().data();
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len = p.dim(a);
        const T* pp = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + off) * inner, pp + o * len * inner,
                        static_cast<size_t>(len * inner) * sizeof(T));
        off += len;
    }
    bool need = false;
    for (const auto& p : parts) need = need || p.requires_grad();
    Tape<T>* tape = Tape<T>::active();
    if (need && tape) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode<T>>> in_nodes;
        std::vector<int64_t> lens;
        for (const auto& p : parts) {
            in_nodes.push_back(p.node());
            lens.push_back(p.dim(a));
        }
        auto on = out.node();
        tape->record(on, [in_nodes, lens, on, outer, inner, total] {
            const T* g = on->grad.data();
            int64_t off2 = 0;
            for (size_t pi = 0; pi < in_nodes.size(); ++pi) {
                int64_t len = lens[pi];
                if (in_nodes[pi]->requires_grad) {
                    auto& gx = in_nodes[pi]->grad_buf();
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < len * inner; ++i)
                            gx[static_cast<size_t>(o * len * inner + i)] +=
                                g[(o * total + off2) * inner + i];
                }
                off2 += len;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target) {
    Shape os = detail::broadcast_shape(x.shape(), target, "broadcast_to");
    if (os != target) throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " + shape_str(target));
    auto sx = detail::broadcast_strides(x.shape(), os);
    std::vector<int64_t> zero(os.size(), 0);
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = x.data();
    T* po = out.mutable_values().data();
    detail::for_each_broadcast(os, sx, zero, [&](int64_t i, int64_t ox, int64_t) { po[i] = px[ox]; });
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, os, sx, zero] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        detail::for_each_broadcast(os, sx, zero, [&](int64_t i, int64_t ox, int64_t) {
            gx[static_cast<size_t>(ox)] += g[i];
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
    int a = detail::normalize_axis(axis, x.rank(), "sum_axis");
    int64_t outer = 1, inner = 1, len = x.dim(a);
    for (int i = 0; i < a; ++i) outer *= x.dim(i);
    for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape os;
    for (int i = 0; i < x.rank(); ++i) {
        if (i == a) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(x.dim(i));
        }
    }
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = x.data();
    T* po = out.mutable_values().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l)
            for (int64_t i = 0; i < inner; ++i) po[o * inner + i] += px[(o * len + l) * inner + i];
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, outer, inner, len] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l)
                for (int64_t i = 0; i < inner; ++i)
                    gx[static_cast<size_t>((o * len + l) * inner + i)] += g[o * inner + i];
    });
    return out;
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x, int axis) {
    int a = detail::normalize_axis(axis, x.rank(), "mean_pool");
    int64_t len = x.dim(a);
    if (len == 0) throw ShapeError("mean_pool: empty axis");
    Tensor<T> s = sum_axis(x, a, false);
    return scale(s, static_cast<T>(1.0 / static_cast<double>(len)));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1});
    T acc = T(0);
    for (T v : x.values()) acc += v;
    out.mutable_values()[0] = acc;
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on] {
        auto& gx = xn->grad_buf();
        T g = on->grad[0];
        for (auto& v : gx) v += g;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `axis`. Throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    int a = detail::normalize_axis(axis, x.rank(), "softmax");
    if (!all_finite(x)) throw NumericError("softmax: non-finite input");
    int64_t outer = 1, inner = 1, len = x.dim(a);
    for (int i = 0; i < a; ++i) outer *= x.dim(i);
    for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.mutable_values().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* row = px + o * len * inner + i;
            T* orow = po + o * len * inner + i;
            T mx = row[0];
            for (int64_t l = 1; l < len; ++l) mx = std::max(mx, row[l * inner]);
            T sum = T(0);
            for (int64_t l = 0; l < len; ++l) {
                T e = static_cast<T>(std::exp(static_cast<double>(row[l * inner] - mx)));
                orow[l * inner] = e;
                sum += e;
            }
            for (int64_t l = 0; l < len; ++l) orow[l * inner] /= sum;
        }
    }
    auto xn = x.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, on, outer, inner, len] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        const T* y = on->value.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < inner; ++i) {
                int64_t base = o * len * inner + i;
                T dot = T(0);
                for (int64_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
                for (int64_t l = 0; l < len; ++l)
                    gx[static_cast<size_t>(base + l * inner)] +=
                        y[base + l * inner] * (g[base + l * inner] - dot);
            }
        }
    });
    return out;
}

/// Per-row normalization over the last axis: zero mean, unit variance
/// (population), then gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    int r = x.rank();
    if (r < 1) throw ShapeError("layer_norm: rank must be >= 1");
    int64_t d = x.dim(-1);
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm: gamma/beta must match last axis " + std::to_string(d));
    int64_t rows = d == 0 ? 0 : x.size() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.mutable_values().data();
    for (int64_t rI = 0; rI < rows; ++rI) {
        const T* row = px + rI * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
        mean /= static_cast<double>(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            double dv = static_cast<double>(row[j]) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[static_cast<size_t>(rI)] = is;
        for (int64_t j = 0; j < d; ++j) {
            T xh = static_cast<T>((static_cast<double>(row[j]) - mean)) * is;
            (*xhat)[static_cast<size_t>(rI * d + j)] = xh;
            po[rI * d + j] = xh * pg[j] + pb[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x, &gamma, &beta}, [xn, gn, bn, on, xhat, inv_std, rows, d] {
        const T* g = on->grad.data();
        const T* pg2 = gn->value.data();
        std::vector<T>* gx = xn->requires_grad ? &xn->grad_buf() : nullptr;
        std::vector<T>* gg = gn->requires_grad ? &gn->grad_buf() : nullptr;
        std::vector<T>* gb = bn->requires_grad ? &bn->grad_buf() : nullptr;
        for (int64_t rI = 0; rI < rows; ++rI) {
            int64_t base = rI * d;
            if (gg || gb) {
                for (int64_t j = 0; j < d; ++j) {
                    if (gg) (*gg)[static_cast<size_t>(j)] += g[base + j] * (*xhat)[static_cast<size_t>(base + j)];
                    if (gb) (*gb)[static_cast<size_t>(j)] += g[base + j];
                }
            }
            if (gx) {
                double mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int64_t j = 0; j < d; ++j) {
                    double dxh = static_cast<double>(g[base + j]) * static_cast<double>(pg2[j]);
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * static_cast<double>((*xhat)[static_cast<size_t>(base + j)]);
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                T is = (*inv_std)[static_cast<size_t>(rI)];
                for (int64_t j = 0; j < d; ++j) {
                    double dxh = static_cast<double>(g[base + j]) * static_cast<double>(pg2[j]);
                    double xh = static_cast<double>((*xhat)[static_cast<size_t>(base + j)]);
                    (*gx)[static_cast<size_t>(base + j)] +=
                        static_cast<T>(static_cast<double>(is) * (dxh - mean_dxhat - xh * mean_dxhat_xhat));
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
inline void gemm_nn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (int64_t l = 0; l < k; ++l) {
            T av = ai[l];
            const T* bl = b + l * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
inline void gemm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * n;
        T* ci = c + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const T* bl = b + l * n;
            T acc = T(0);
            for (int64_t j = 0; j < n; ++j) acc += ai[j] * bl[j];
            ci[l] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * d[m,n]
template <typename T>
inline void gemm_tn_acc(const T* a, const T* d, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* di = d + i * n;
        for (int64_t l = 0; l < k; ++l) {
            T av = ai[l];
            T* cl = c + l * n;
            for (int64_t j = 0; j < n; ++j) cl[j] += av * di[j];
        }
    }
}

}  // namespace detail

/// Batched matrix product with broadcastable leading dimensions.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
    int64_t m = a.dim(-2), ka = a.dim(-1);
    int64_t kb = b.dim(-2), n = b.dim(-1);
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions do not match between " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    Shape obatch = detail::broadcast_shape(ba, bb, "matmul");
    auto sa = detail::broadcast_strides(ba, obatch);  // strides in matrix units
    auto sb = detail::broadcast_strides(bb, obatch);
    Shape os = obatch;
    os.push_back(m);
    os.push_back(n);
    Tensor<T> out = Tensor<T>::zeros(os);
    int64_t nb = numel(obatch);
    const int64_t a_mat = m * ka, b_mat = ka * n, o_mat = m * n;
    {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.mutable_values().data();
        detail::for_each_broadcast(obatch, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
            detail::gemm_nn_acc(pa + oa * a_mat, pb + ob * b_mat, po + i * o_mat, m, ka, n);
        });
        matmul_mult_counter() += static_cast<uint64_t>(nb * m * ka * n);
    }
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    detail::autodiff_record(out, {&a, &b}, [an, bn, on, obatch, sa, sb, m, ka, n, a_mat, b_mat, o_mat] {
        const T* g = on->grad.data();
        const T* pa = an->value.data();
        const T* pb = bn->value.data();
        std::vector<T>* ga = an->requires_grad ? &an->grad_buf() : nullptr;
        std::vector<T>* gb = bn->requires_grad ? &bn->grad_buf() : nullptr;
        detail::for_each_broadcast(obatch, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
            if (ga)
                detail::gemm_nt_acc(g + i * o_mat, pb + ob * b_mat, ga->data() + oa * a_mat, m, n, ka);
            if (gb)
                detail::gemm_tn_acc(pa + oa * a_mat, g + i * o_mat, gb->data() + ob * b_mat, m, ka, n);
        });
    });
    return out;
}

/// x @ w + bias, with w [d_in, d_out] and bias [d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    return add(matmul(x, w), bias);
}

// ---------------------------------------------------------------------------
// Gather / masked loss
// ---------------------------------------------------------------------------

/// out[b, j] = x[b, idx[b][j]] for a rank-2 input.
template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, const std::vector<std::vector<int64_t>>& idx) {
    if (x.rank() != 2) throw ShapeError("gather_cols: input must be rank 2");
    int64_t B = x.dim(0), M = x.dim(1);
    if (static_cast<int64_t>(idx.size()) != B) throw ShapeError("gather_cols: index rows != batch");
    int64_t k = idx.empty() ? 0 : static_cast<int64_t>(idx[0].size());
    Tensor<T> out = Tensor<T>::zeros({B, k});
    const T* px = x.data();
    T* po = out.mutable_values().data();
    for (int64_t b = 0; b < B; ++b) {
        if (static_cast<int64_t>(idx[static_cast<size_t>(b)].size()) != k)
            throw ShapeError("gather_cols: ragged index");
        for (int64_t j = 0; j < k; ++j) {
            int64_t c = idx[static_cast<size_t>(b)][static_cast<size_t>(j)];
            if (c < 0 || c >= M) throw ShapeError("gather_cols: index out of range");
            po[b * k + j] = px[b * M + c];
        }
    }
    auto xn = x.node();
    auto on = out.node();
    auto idx_copy = std::make_shared<std::vector<std::vector<int64_t>>>(idx);
    detail::autodiff_record(out, {&x}, [xn, on, idx_copy, B, M, k] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < k; ++j)
                gx[static_cast<size_t>(b * M + (*idx_copy)[static_cast<size_t>(b)][static_cast<size_t>(j)])] +=
                    g[b * k + j];
    });
    return out;
}

/// (1/B) * sum over (b, t) of mask[b,t] * weights[b] * ||pred[b,t,:] - target[b,t,:]||^2.
/// Gradients flow into pred only; target, mask and weights are treated as data.
template <typename T>
Tensor<T> mse_masked(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask,
                     const Tensor<T>& weights) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse_masked: pred " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    if (pred.rank() < 2) throw ShapeError("mse_masked: pred rank must be >= 2");
    int64_t B = pred.dim(0), L = pred.dim(1);
    int64_t D = (B * L) == 0 ? 0 : pred.size() / (B * L);
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != L)
        throw ShapeError("mse_masked: mask must be [B,L]");
    if (weights.size() != B) throw ShapeError("mse_masked: weights must be [B]");
    Tensor<T> out = Tensor<T>::zeros({1});
    const T* pp = pred.data();
    const T* pt = target.data();
    const T* pm = mask.data();
    const T* pw = weights.data();
    double acc = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l) {
            double mw = static_cast<double>(pm[b * L + l]) * static_cast<double>(pw[b]);
            if (mw == 0) continue;
            const T* pr = pp + (b * L + l) * D;
            const T* tr = pt + (b * L + l) * D;
            double sq = 0;
            for (int64_t j = 0; j < D; ++j) {
                double d = static_cast<double>(pr[j]) - static_cast<double>(tr[j]);
                sq += d * d;
            }
            acc += mw * sq;
        }
    out.mutable_values()[0] = static_cast<T>(B == 0 ? 0.0 : acc / static_cast<double>(B));
    auto pn = pred.node();
    auto tn = target.node();
    auto mn = mask.node();
    auto wn = weights.node();
    auto on = out.node();
    detail::autodiff_record(out, {&pred}, [pn, tn, mn, wn, on, B, L, D] {
        auto& gx = pn->grad_buf();
        T g = on->grad[0];
        const T* pp2 = pn->value.data();
        const T* pt2 = tn->value.data();
        const T* pm2 = mn->value.data();
        const T* pw2 = wn->value.data();
        T inv_b = static_cast<T>(1.0 / static_cast<double>(B));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l) {
                T mw = pm2[b * L + l] * pw2[b];
                if (mw == T(0)) continue;
                for (int64_t j = 0; j < D; ++j) {
                    int64_t off = (b * L + l) * D + j;
                    gx[static_cast<size_t>(off)] += g * inv_b * mw * T(2) * (pp2[off] - pt2[off]);
                }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Rotary pair rotation and multi-head attention
// ---------------------------------------------------------------------------

/// Per-position cos/sin tables for pairwise rotations, shape [L, d/2] each.
template <typename T>
struct RopeTables {
    Tensor<T> cos;
    Tensor<T> sin;
};

/// Rotates consecutive value pairs of the last axis by per-position angles.
/// x is [..., L, d]; tables are [L, d/2]. Positions index the second-to-last
/// axis. Gradient rotates by the negated angles.
template <typename T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const RopeTables<T>& tab) {
    if (x.rank() < 2) throw ShapeError("rotate_pairs: rank must be >= 2");
    int64_t d = x.dim(-1), L = x.dim(-2);
    if (d % 2 != 0) throw ShapeError("rotate_pairs: last axis must be even");
    int64_t np = d / 2;
    if (tab.cos.shape() != Shape{L, np} || tab.sin.shape() != Shape{L, np})
        throw ShapeError("rotate_pairs: tables must be [L, d/2]");
    int64_t outer = x.size() / (L * d);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    const T* pc = tab.cos.data();
    const T* ps = tab.sin.data();
    T* po = out.mutable_values().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < L; ++l) {
            const T* row = px + (o * L + l) * d;
            T* orow = po + (o * L + l) * d;
            for (int64_t p = 0; p < np; ++p) {
                T c = pc[l * np + p], s = ps[l * np + p];
                T x0 = row[2 * p], x1 = row[2 * p + 1];
                orow[2 * p] = x0 * c - x1 * s;
                orow[2 * p + 1] = x0 * s + x1 * c;
            }
        }
    auto xn = x.node();
    auto cn = tab.cos.node();
    auto sn = tab.sin.node();
    auto on = out.node();
    detail::autodiff_record(out, {&x}, [xn, cn, sn, on, outer, L, d, np] {
        auto& gx = xn->grad_buf();
        const T* g = on->grad.data();
        const T* pc2 = cn->value.data();
        const T* ps2 = sn->value.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < L; ++l) {
                const T* grow = g + (o * L + l) * d;
                T* gxr = gx.data() + (o * L + l) * d;
                for (int64_t p = 0; p < np; ++p) {
                    T c = pc2[l * np + p], s = ps2[l * np + p];
                    T g0 = grow[2 * p], g1 = grow[2 * p + 1];
                    gxr[2 * p] += g0 * c + g1 * s;
                    gxr[2 * p + 1] += -g0 * s + g1 * c;
                }
            }
    });
    return out;
}

template <typename T>
struct AttentionParams {
    Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

namespace detail {

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
    // [B, L, d] -> [B, h, L, d/h]
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    Tensor<T> r = reshape(x, {B, L, heads, d / heads});
    return transpose(r, {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    // [B, h, L, dh] -> [B, L, h*dh]
    int64_t B = x.dim(0), h = x.dim(1), L = x.dim(2), dh = x.dim(3);
    Tensor<T> t = transpose(x, {0, 2, 1, 3});
    return reshape(t, {B, L, h * dh});
}

}  // namespace detail

/// Scaled dot-product multi-head attention over projected q/k/v. Optional
/// rotary tables are applied to the projected q/k heads (used by the visual
/// self-attention path); the plain multi_head_attention entry point applies
/// no positional encoding. `probs_out`, when given, receives a detached copy
/// of the attention probabilities [B, h, Lq, Lk].
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const AttentionParams<T>& p, int64_t heads,
                         const RopeTables<T>* rope_q = nullptr, const RopeTables<T>* rope_k = nullptr,
                         Tensor<T>* probs_out = nullptr) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeError("attention: q/k/v must be [B, L, d]");
    int64_t d = q.dim(2);
    if (d % heads != 0) throw ConfigError("attention: width " + std::to_string(d) +
                                          " not divisible by " + std::to_string(heads) + " heads");
    if (k.dim(2) != d || v.dim(2) != d) throw ShapeError("attention: k/v width mismatch");
    int64_t dh = d / heads;
    Tensor<T> qh = detail::split_heads(linear(q, p.w_q, p.b_q), heads);
    Tensor<T> kh = detail::split_heads(linear(k, p.w_k, p.b_k), heads);
    Tensor<T> vh = detail::split_heads(linear(v, p.w_v, p.b_v), heads);
    if (rope_q) qh = rotate_pairs(qh, *rope_q);
    if (rope_k) kh = rotate_pairs(kh, *rope_k);
    Tensor<T> scores = scale(matmul(qh, transpose_last2(kh)),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> probs = softmax(scores, -1);
    if (probs_out) *probs_out = probs.clone();
    Tensor<T> ctx = detail::merge_heads(matmul(probs, vh));
    return linear(ctx, p.w_o, p.b_o);
}

/// Multi-head attention with no positional encoding on either side.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionParams<T>& p, int64_t heads) {
    return attention_core(q, k, v, p, heads);
}

}  // namespace cktwam

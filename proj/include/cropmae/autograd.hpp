#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cropmae/error.hpp"
#include "cropmae/rng.hpp"
#include "cropmae/tensor.hpp"

namespace cropmae {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
class Var {
public:
    Var() = default;

    Tape<T>* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, which is a topological order, so
/// reverse replay visits every consumer before its inputs. Nodes live in a
/// deque so references stay valid while the tape grows.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                              requires_grad ? std::move(backward) : BackwardFn{}});
        return Var<T>(this, nodes_.size() - 1);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Zero-initialized on first touch.
    Tensor<T>& grad_accumulator(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    Tensor<T> grad(const Var<T>& v) const {
        check_owned(v);
        const Node& n = nodes_[v.id()];
        return n.has_grad ? n.grad : Tensor<T>::zeros(n.value.shape());
    }

    bool has_grad(const Var<T>& v) const {
        check_owned(v);
        return nodes_[v.id()].has_grad;
    }

    void backward(const Var<T>& loss) {
        check_owned(loss);
        const Node& root = nodes_[loss.id()];
        if (root.value.size() != 1) {
            throw ContractError("backward() needs a scalar loss, got shape " + shape_string(root.value.shape()));
        }
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = {};
        }
        grad_accumulator(loss.id()).fill(T(1));
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad || !n.backward) continue;
            n.backward(*this, n.grad);
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
    };

    void check_owned(const Var<T>& v) const {
        if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    }

    std::deque<Node> nodes_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
    return *a.tape();
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
    return static_cast<std::size_t>(a);
}

// (outer, extent, inner) decomposition of a row-major shape around one axis.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    detail::accumulate(out, b.value());
    const std::size_t ia = a.id(), ib = b.id();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    return tape.record(std::move(out), ra || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        if (ra) detail::accumulate(t.grad_accumulator(ia), g);
        if (rb) detail::accumulate(t.grad_accumulator(ib), g);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    {
        auto o = out.data();
        auto bv = b.value().data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    return tape.record(std::move(out), ra || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        if (ra) detail::accumulate(t.grad_accumulator(ia), g);
        if (rb) {
            auto gb = t.grad_accumulator(ib).data();
            auto gd = g.data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gd[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    return tape.record(std::move(out), ra || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& x = t.value(ia);
        const auto& y = t.value(ib);
        if (ra) {
            auto& ga = t.grad_accumulator(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (rb) {
            auto& gb = t.grad_accumulator(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "div");
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    return tape.record(std::move(out), ra || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& x = t.value(ia);
        const auto& y = t.value(ib);
        if (ra) {
            auto& ga = t.grad_accumulator(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / y[i];
        }
        if (rb) {
            auto& gb = t.grad_accumulator(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= s;
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

// x[..., d] + bias[d]
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
    auto& tape = detail::same_tape(x, bias);
    const auto& xv = x.value();
    const std::size_t d = xv.rank() ? xv.shape().back() : 1;
    if (bias.value().size() != d) {
        throw DimensionError("add_bias: bias of " + std::to_string(bias.value().size()) + " elements for last extent " +
                             std::to_string(d));
    }
    Tensor<T> out = xv;
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
    const std::size_t ix = x.id(), ib = bias.id();
    const bool rx = x.requires_grad(), rb = bias.requires_grad();
    return tape.record(std::move(out), rx || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        if (rx) detail::accumulate(t.grad_accumulator(ix), g);
        if (rb) {
            auto& gb = t.grad_accumulator(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
    });
}

// Repeat a single row ([d] or [1 x d]) n times into [n x d].
template <class T>
Var<T> broadcast_rows(const Var<T>& row, std::size_t n) {
    const auto& rv = row.value();
    const std::size_t d = rv.size();
    Tensor<T> out({n, d});
    for (std::size_t r = 0; r < n; ++r) std::copy(rv.data().begin(), rv.data().end(), out.row(r).begin());
    const std::size_t ir = row.id();
    return row.tape()->record(std::move(out), row.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& gr = t.grad_accumulator(ir);
        for (std::size_t i = 0; i < g.size(); ++i) gr[i % d] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
    }
    const auto m = static_cast<Eigen::Index>(av.rows());
    const auto k = static_cast<Eigen::Index>(av.cols());
    const auto n = static_cast<Eigen::Index>(bv.cols());
    Tensor<T> out({av.rows(), bv.cols()});
    detail::MatMap<T>(out.data().data(), m, n).noalias() =
        detail::ConstMatMap<T>(av.data().data(), m, k) * detail::ConstMatMap<T>(bv.data().data(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    return tape.record(std::move(out), ra || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        detail::ConstMatMap<T> G(g.data().data(), m, n);
        if (ra) {
            detail::MatMap<T>(t.grad_accumulator(ia).data().data(), m, k).noalias() +=
                G * detail::ConstMatMap<T>(t.value(ib).data().data(), k, n).transpose();
        }
        if (rb) {
            detail::MatMap<T>(t.grad_accumulator(ib).data().data(), k, n).noalias() +=
                detail::ConstMatMap<T>(t.value(ia).data().data(), m, k).transpose() * G;
        }
    });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    const auto& av = a.value();
    if (av.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(av.shape()));
    const std::size_t r = av.rows(), c = av.cols();
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(j, i) = av(i, j);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga(i, j) += g(j, i);
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    Tape<T>& tape = *parts[0].tape();
    const Shape& first = parts[0].shape();
    const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
    Shape out_shape = first;
    out_shape[ax] = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.tape() != &tape) throw ContractError("concat operands recorded on different tapes");
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != first[i]) throw DimensionError("concat: extent mismatch on axis " + std::to_string(i));
        }
        out_shape[ax] += s[ax];
        rg = rg || p.requires_grad();
    }
    const auto split = detail::split_axis(out_shape, ax);
    Tensor<T> out(out_shape);
    std::vector<std::size_t> ids, extents;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto& pv = p.value();
        const std::size_t e = pv.shape()[ax];
        for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src = pv.data().data() + o * e * split.inner;
            T* dst = out.data().data() + (o * split.extent + offset) * split.inner;
            std::copy(src, src + e * split.inner, dst);
        }
        ids.push_back(p.id());
        extents.push_back(e);
        offset += e;
    }
    return tape.record(std::move(out), rg, [=](Tape<T>& t, const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t e = extents[k];
            if (t.requires_grad(ids[k])) {
                auto& gp = t.grad_accumulator(ids[k]);
                for (std::size_t o = 0; o < split.outer; ++o) {
                    const T* src = g.data().data() + (o * split.extent + off) * split.inner;
                    T* dst = gp.data().data() + o * e * split.inner;
                    for (std::size_t i = 0; i < e * split.inner; ++i) dst[i] += src[i];
                }
            }
            off += e;
        }
    });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts, int axis) {
    std::vector<Var<T>> v(parts);
    return concat(std::span<const Var<T>>(v), axis);
}

template <class T>
Var<T> slice(const Var<T>& a, int axis, std::size_t start, std::size_t length) {
    const auto& av = a.value();
    const std::size_t ax = detail::normalize_axis(axis, av.rank(), "slice");
    if (start + length > av.shape()[ax]) throw DimensionError("slice out of range");
    const auto split = detail::split_axis(av.shape(), ax);
    Shape out_shape = av.shape();
    out_shape[ax] = length;
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < split.outer; ++o) {
        const T* src = av.data().data() + (o * split.extent + start) * split.inner;
        std::copy(src, src + length * split.inner, out.data().data() + o * length * split.inner);
    }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src = g.data().data() + o * length * split.inner;
            T* dst = ga.data().data() + (o * split.extent + start) * split.inner;
            for (std::size_t i = 0; i < length * split.inner; ++i) dst[i] += src[i];
        }
    });
}

/// Select entries along `axis` at `indices` (out-of-range index is a contract error).
template <class T>
Var<T> gather(const Var<T>& a, int axis, std::span<const std::size_t> indices) {
    const auto& av = a.value();
    const std::size_t ax = detail::normalize_axis(axis, av.rank(), "gather");
    const auto split = detail::split_axis(av.shape(), ax);
    for (auto i : indices) {
        if (i >= split.extent) throw ContractError("gather index " + std::to_string(i) + " out of range " + std::to_string(split.extent));
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Shape out_shape = av.shape();
    out_shape[ax] = idx.size();
    Tensor<T> out(out_shape);
    const std::size_t n = idx.size();
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = av.data().data() + (o * split.extent + idx[k]) * split.inner;
            std::copy(src, src + split.inner, out.data().data() + (o * n + k) * split.inner);
        }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t k = 0; k < n; ++k) {
                const T* src = g.data().data() + (o * n + k) * split.inner;
                T* dst = ga.data().data() + (o * split.extent + idx[k]) * split.inner;
                for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
            }
    });
}

/// Place slice k of `a` at position indices[k] of a zero tensor with `extent` entries along `axis`.
/// Repeated indices accumulate.
template <class T>
Var<T> scatter(const Var<T>& a, int axis, std::span<const std::size_t> indices, std::size_t extent) {
    const auto& av = a.value();
    const std::size_t ax = detail::normalize_axis(axis, av.rank(), "scatter");
    if (av.shape()[ax] != indices.size()) throw DimensionError("scatter: index count does not match source extent");
    for (auto i : indices) {
        if (i >= extent) throw ContractError("scatter index " + std::to_string(i) + " out of range " + std::to_string(extent));
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    const auto src_split = detail::split_axis(av.shape(), ax);
    Shape out_shape = av.shape();
    out_shape[ax] = extent;
    Tensor<T> out(out_shape);
    const std::size_t n = idx.size();
    const std::size_t inner = src_split.inner;
    for (std::size_t o = 0; o < src_split.outer; ++o)
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = av.data().data() + (o * n + k) * inner;
            T* dst = out.data().data() + (o * extent + idx[k]) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    const std::size_t ia = a.id();
    const std::size_t outer = src_split.outer;
    return a.tape()->record(std::move(out), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k) {
                const T* src = g.data().data() + (o * extent + idx[k]) * inner;
                T* dst = ga.data().data() + (o * n + k) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (T v : a.value().data()) s += v;
    const std::size_t ia = a.id();
    return a.tape()->record(Tensor<T>::scalar(s), a.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_accumulator(ia);
        const T gv = g[0];
        for (auto& v : ga.data()) v += gv;
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Activations and normalization

template <class T>
Var<T> softmax(const Var<T>& x, int axis = -1) {
    const auto& xv = x.value();
    const std::size_t ax = detail::normalize_axis(axis, xv.rank(), "softmax");
    if (!xv.all_finite()) throw NumericError("softmax input contains non-finite values");
    const auto split = detail::split_axis(xv.shape(), ax);
    Tensor<T> out(xv.shape());
    const std::size_t E = split.extent, I = split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t in = 0; in < I; ++in) {
            const T* src = xv.data().data() + o * E * I + in;
            T* dst = out.data().data() + o * E * I + in;
            T m = src[0];
            for (std::size_t e = 1; e < E; ++e) m = std::max(m, src[e * I]);
            T s = 0;
            for (std::size_t e = 0; e < E; ++e) {
                dst[e * I] = std::exp(src[e * I] - m);
                s += dst[e * I];
            }
            for (std::size_t e = 0; e < E; ++e) dst[e * I] /= s;
        }
    const std::size_t ix = x.id();
    const std::size_t self = x.tape()->size();
    return x.tape()->record(std::move(out), x.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& y = t.value(self);
        auto& gx = t.grad_accumulator(ix);
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t in = 0; in < I; ++in) {
                const std::size_t base = o * E * I + in;
                T dot = 0;
                for (std::size_t e = 0; e < E; ++e) dot += g[base + e * I] * y[base + e * I];
                for (std::size_t e = 0; e < E; ++e) gx[base + e * I] += y[base + e * I] * (g[base + e * I] - dot);
            }
    });
}

/// Normalize over the last axis, then apply gamma/beta (each of last-axis length).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
    auto& tape = detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    const auto& xv = x.value();
    if (xv.rank() == 0 || xv.shape().back() == 0) throw DimensionError("layer_norm needs a non-empty last axis");
    const std::size_t d = xv.shape().back();
    if (gamma.value().size() != d || beta.value().size() != d) throw DimensionError("layer_norm affine size mismatch");
    const std::size_t rows = xv.size() / d;
    Tensor<T> out(xv.shape());
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = xv.data().data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += src[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (src[j] - mu) * rs;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
    const bool rx = x.requires_grad(), rg = gamma.requires_grad(), rb = beta.requires_grad();
    return tape.record(std::move(out), rx || rg || rb, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& gam = t.value(ig);
        if (rg) {
            auto& gg = t.grad_accumulator(ig);
            for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
        }
        if (rb) {
            auto& gb = t.grad_accumulator(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
        if (rx) {
            auto& gx = t.grad_accumulator(ix);
            std::vector<T> dh(d);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_dh = 0, mean_dh_h = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    dh[j] = g[r * d + j] * gam[j];
                    mean_dh += dh[j];
                    mean_dh_h += dh[j] * (*xhat)[r * d + j];
                }
                mean_dh /= static_cast<T>(d);
                mean_dh_h /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += (*rstd)[r] * (dh[j] - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
                }
            }
        }
    });
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
T gelu_scalar(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
Var<T> gelu(const Var<T>& x) {
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(xv[i]);
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), x.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
        const auto& v = t.value(ix);
        auto& gx = t.grad_accumulator(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T z = v[i];
            const T th = std::tanh(c * (z + T(0.044715) * z * z * z));
            const T d = T(0.5) * (T(1) + th) + T(0.5) * z * (T(1) - th * th) * c * (T(1) + T(3 * 0.044715) * z * z);
            gx[i] += g[i] * d;
        }
    });
}

/// Inverted dropout; identity when not training or p == 0.
template <class T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const auto& xv = x.value();
    auto mask = std::make_shared<std::vector<T>>(xv.size());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        (*mask)[i] = rng.uniform() < p ? T(0) : keep_scale;
        out[i] = xv[i] * (*mask)[i];
    }
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), x.requires_grad(), [=](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_accumulator(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
}

}  // namespace cropmae

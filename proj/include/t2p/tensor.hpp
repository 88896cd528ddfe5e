#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Tensor is a handle to a graph node. Ops build new nodes that remember
// their parents and a backward rule; Tensor::backward() on a scalar walks the
// graph once in reverse topological order. Nodes that do not depend on any
// tracked tensor carry no parents, so constant subgraphs are free.
//
// Leaf gradients accumulate across backward calls (call zero_grad between
// steps); intermediate gradients are reset at the start of every backward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

// Eigen's small-matrix product peels by pointer alignment, which changes the
// summation order between runs. The blocked kernel is alignment independent.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
// <resolv.h> defines `_res`, which Eigen uses as an identifier.
#pragma push_macro("_res")
#undef _res
#include <Eigen/Core>
#pragma pop_macro("_res")

#include "error.hpp"
#include "rng.hpp"

namespace t2p::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    const char* op = "leaf";

    bool is_leaf() const { return !backward; }
    std::vector<double>& g() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel_of(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                             " values");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor constant(Shape shape, std::vector<double> values) { return make(std::move(shape), std::move(values)); }
    static Tensor parameter(Shape shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), true);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor scalar(double v) { return make({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& mutable_values() { return node_->value; }
    const std::vector<double>& grad() const { return node_->g(); }
    std::vector<double>& mutable_grad() { return node_->g(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { std::fill(node_->g().begin(), node_->g().end(), 0.0); }
    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    /// Copy of the values with no graph attached.
    Tensor detach() const { return make(shape(), values()); }

    inline void backward() const;

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

/// Creates an op result. The backward rule is attached only when some input
/// is tracked.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, const char* op,
                          std::function<void(Node&)> rule) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->op = op;
    bool tracked = false;
    for (const auto& in : inputs) tracked = tracked || in.requires_grad();
    if (tracked) {
        n->requires_grad = true;
        for (auto& in : inputs) n->parents.push_back(in.node_ptr());
        n->backward = std::move(rule);
    }
    return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline MapMat mat(std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
    return MapMat(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMapMat cmat(const std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
    return ConstMapMat(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace detail

inline void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
    if (!requires_grad()) throw Error("backward: loss does not depend on any tracked tensor");

    // Iterative post-order DFS; parents precede children in `order`.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    node_->g()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) {
                auto& g = p->g();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "sub", [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            auto& g = p->g();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.g();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.g();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    return detail::make_result(a.shape(), std::move(out), {a}, "scale", [s](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + s;
    return detail::make_result(a.shape(), std::move(out), {a}, "add_scalar", [](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return detail::make_result(a.shape(), std::move(out), {a}, "relu", [](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.g();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > 0.0) g[i] += self.grad[i];
    });
}

/// Clamp with gradient passed only strictly inside (lo, hi).
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.values()[i], lo, hi);
    return detail::make_result(a.shape(), std::move(out), {a}, "clamp", [lo, hi](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.g();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > lo && p.value[i] < hi) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return detail::make_result({1}, {s}, {a}, "sum", [](Node& self) {
        auto& g = self.parents[0]->g();
        for (double& x : g) x += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    return scale(sum(a), 1.0 / n);
}

/// Mean absolute difference. Subgradient 0 where a == b.
inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "l1_loss");
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(a.values()[i] - b.values()[i]);
    return detail::make_result({1}, {s / static_cast<double>(n)}, {a, b}, "l1_loss", [n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double k = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pa.value[i] - pb.value[i];
            const double sg = d > 0.0 ? k : (d < 0.0 ? -k : 0.0);
            if (pa.requires_grad) pa.g()[i] += sg;
            if (pb.requires_grad) pb.g()[i] -= sg;
        }
    });
}

/// Cosine similarity of two same-shape tensors, treated as flat vectors.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "cosine_similarity");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        ab += a.values()[i] * b.values()[i];
        aa += a.values()[i] * a.values()[i];
        bb += b.values()[i] * b.values()[i];
    }
    if (aa == 0.0 || bb == 0.0) throw ValidationError("cosine_similarity: zero vector");
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    const double cs = std::clamp(ab / (na * nb), -1.0, 1.0);
    return detail::make_result({1}, {cs}, {a, b}, "cosine", [na, nb, cs](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double go = self.grad[0];
        // d cos / da = b / (|a||b|) - cos * a / |a|^2
        if (pa.requires_grad) {
            auto& g = pa.g();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (pb.value[i] / (na * nb) - cs * pa.value[i] / (na * na));
        }
        if (pb.requires_grad) {
            auto& g = pb.g();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (pa.value[i] / (na * nb) - cs * pb.value[i] / (nb * nb));
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return detail::make_result(std::move(shape), a.values(), {a}, "reshape", [](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const std::size_t r = a.rank();
    if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + shape_str(a.shape()));
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape().at(perm[i]);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
    // Source offset of each output element, computed once.
    std::vector<std::size_t> src(a.numel());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
        src[o] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> out(a.numel());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = a.values()[src[o]];
    return detail::make_result(std::move(out_shape), std::move(out), {a}, "permute",
                               [src = std::move(src)](Node& self) {
                                   auto& g = self.parents[0]->g();
                                   for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                               });
}

/// Contiguous slice [start, start + len) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank() || start + len > a.dim(axis))
        throw ShapeError("slice: range out of bounds for " + shape_str(a.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::size_t extent = a.dim(axis);
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::vector<double> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), len * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    return detail::make_result(std::move(out_shape), std::move(out), {a}, "slice",
                               [outer, inner, extent, start, len](Node& self) {
                                   auto& g = self.parents[0]->g();
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t i = 0; i < len * inner; ++i)
                                           g[(o * extent + start) * inner + i] += self.grad[o * len * inner + i];
                               });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Shape out_shape = s0;
    out_shape[axis] = total;
    std::vector<double> out(outer * total * inner);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t ext = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * ext * inner), ext * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + off) * inner));
        offsets.push_back(off);
        off += ext;
    }
    return detail::make_result(std::move(out_shape), std::move(out), parts, "concat",
                               [outer, inner, total, axis, offsets](Node& self) {
                                   for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                       Node& p = *self.parents[k];
                                       if (!p.requires_grad) continue;
                                       const std::size_t ext = p.shape[axis];
                                       auto& g = p.g();
                                       for (std::size_t o = 0; o < outer; ++o)
                                           for (std::size_t i = 0; i < ext * inner; ++i)
                                               g[o * ext * inner + i] +=
                                                   self.grad[(o * total + offsets[k]) * inner + i];
                                   }
                               });
}

/// Repeats `a` along a new leading axis of size n.
inline Tensor broadcast_leading(const Tensor& a, std::size_t n) {
    Shape out_shape = a.shape();
    out_shape.insert(out_shape.begin(), n);
    std::vector<double> out;
    out.reserve(n * a.numel());
    for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), a.values().begin(), a.values().end());
    const std::size_t m = a.numel();
    return detail::make_result(std::move(out_shape), std::move(out), {a}, "broadcast", [n, m](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, n] -> [..., n]; leading dimensions of `a` are flattened.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(m * n);
    detail::mat(out, 0, m, n).noalias() = detail::cmat(a.values(), 0, m, k) * detail::cmat(b.values(), 0, k, n);
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto go = detail::cmat(self.grad, 0, m, n);
        if (pa.requires_grad) detail::mat(pa.g(), 0, m, k).noalias() += go * detail::cmat(pb.value, 0, k, n).transpose();
        if (pb.requires_grad) detail::mat(pb.g(), 0, k, n).noalias() += detail::cmat(pa.value, 0, m, k).transpose() * go;
    });
}

/// Adds bias[n] to every row of x[..., n].
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.shape().back() != bias.dim(0))
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t n = bias.dim(0), rows = x.numel() / n;
    std::vector<double> out(x.values());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.values()[j];
    return detail::make_result(x.shape(), std::move(out), {x, bias}, "add_bias", [rows, n](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) {
            auto& g = px.g();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.g();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
        }
    });
}

/// x[..., in] W[in, out] + b[out].
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

/// Batched matmul: a[N, m, k] x b[N, k, n] -> [N, m, n]. With transpose_b,
/// b is [N, n, k] and used transposed.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t N = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    if (bk != k)
        throw ShapeError("bmm: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(N * m * n);
    for (std::size_t i = 0; i < N; ++i) {
        auto A = detail::cmat(a.values(), i * m * k, m, k);
        auto C = detail::mat(out, i * m * n, m, n);
        if (transpose_b)
            C.noalias() = A * detail::cmat(b.values(), i * n * k, n, k).transpose();
        else
            C.noalias() = A * detail::cmat(b.values(), i * k * n, k, n);
    }
    return detail::make_result({N, m, n}, std::move(out), {a, b}, "bmm", [N, m, k, n, transpose_b](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        for (std::size_t i = 0; i < N; ++i) {
            auto G = detail::cmat(self.grad, i * m * n, m, n);
            if (pa.requires_grad) {
                auto GA = detail::mat(pa.g(), i * m * k, m, k);
                if (transpose_b)
                    GA.noalias() += G * detail::cmat(pb.value, i * n * k, n, k);
                else
                    GA.noalias() += G * detail::cmat(pb.value, i * k * n, k, n).transpose();
            }
            if (pb.requires_grad) {
                auto A = detail::cmat(pa.value, i * m * k, m, k);
                if (transpose_b)
                    detail::mat(pb.g(), i * n * k, n, k).noalias() += G.transpose() * A;
                else
                    detail::mat(pb.g(), i * k * n, k, n).noalias() += A.transpose() * G;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and activations over the last axis

inline Tensor softmax(const Tensor& x) {
    const std::size_t d = x.shape().back(), rows = x.numel() / d;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double* o = out.data() + r * d;
        const double mx = *std::max_element(in, in + d);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < d; ++j) o[j] /= s;
    }
    return detail::make_result(x.shape(), out, {x}, "softmax", [rows, d, out](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * out[r * d + j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += out[r * d + j] * (self.grad[r * d + j] - dot);
        }
    });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t d = x.shape().back(), rows = x.numel() / d;
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + " do not match " +
                         shape_str(x.shape()));
    std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (in[j] - mu) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gamma.values()[j] + beta.values()[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node& px = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pbeta = *self.parents[2];
            for (std::size_t r = 0; r < rows; ++r) {
                const double* go = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (pg.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pg.g()[j] += go[j] * xh[j];
                if (pbeta.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pbeta.g()[j] += go[j];
                if (px.requires_grad) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gh = go[j] * pg.value[j];
                        s1 += gh;
                        s2 += gh * xh[j];
                    }
                    auto& g = px.g();
                    const double invd = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gh = go[j] * pg.value[j];
                        g[r * d + j] += inv_std[r] * (gh - invd * s1 - xh[j] * invd * s2);
                    }
                }
            }
        });
}

/// Each row of x[..., d] scaled to unit L2 norm.
inline Tensor l2_normalize(const Tensor& x) {
    const std::size_t d = x.shape().back(), rows = x.numel() / d;
    std::vector<double> out(x.numel()), norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x.values()[r * d + j] * x.values()[r * d + j];
        if (s == 0.0) throw ValidationError("l2_normalize: zero vector");
        norms[r] = std::sqrt(s);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.values()[r * d + j] / norms[r];
    }
    return detail::make_result(x.shape(), out, {x}, "l2_normalize", [rows, d, out, norms](Node& self) {
        auto& g = self.parents[0]->g();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * out[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
                g[r * d + j] += (self.grad[r * d + j] - out[r * d + j] * dot) / norms[r];
        }
    });
}

// ---------------------------------------------------------------------------
// Image ops (NCHW)

/// Non-overlapping k x k average pooling over the last two axes.
inline Tensor avg_pool2d(const Tensor& x, std::size_t k) {
    if (x.rank() < 2) throw ShapeError("avg_pool2d: need at least 2 axes, got " + shape_str(x.shape()));
    const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    if (k == 0 || h % k != 0 || w % k != 0)
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
    const std::size_t planes = x.numel() / (h * w), oh = h / k, ow = w / k;
    Shape out_shape = x.shape();
    out_shape[x.rank() - 2] = oh;
    out_shape[x.rank() - 1] = ow;
    std::vector<double> out(planes * oh * ow, 0.0);
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
                out[(p * oh + y / k) * ow + xx / k] += x.values()[(p * h + y) * w + xx] * inv;
    return detail::make_result(std::move(out_shape), std::move(out), {x}, "avg_pool2d",
                               [planes, h, w, k, oh, ow, inv](Node& self) {
                                   auto& g = self.parents[0]->g();
                                   for (std::size_t p = 0; p < planes; ++p)
                                       for (std::size_t y = 0; y < h; ++y)
                                           for (std::size_t xx = 0; xx < w; ++xx)
                                               g[(p * h + y) * w + xx] += self.grad[(p * oh + y / k) * ow + xx / k] * inv;
                               });
}

struct ConvTransposeSpec {
    std::size_t kernel = 4;
    std::size_t stride = 2;
    std::size_t padding = 1;
};

/// Transposed 2D convolution. x[B, Cin, H, W], weight[Cin, Cout, k, k],
/// bias[Cout] -> [B, Cout, (H-1)s - 2p + k, (W-1)s - 2p + k].
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                               ConvTransposeSpec spec = {}) {
    if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(2) != spec.kernel ||
        weight.dim(3) != spec.kernel || bias.rank() != 1 || bias.dim(0) != weight.dim(1))
        throw ShapeError("conv_transpose2d: incompatible shapes x" + shape_str(x.shape()) + " w" +
                         shape_str(weight.shape()) + " b" + shape_str(bias.shape()));
    const std::size_t B = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3), co = weight.dim(1);
    const std::size_t k = spec.kernel, s = spec.stride, p = spec.padding;
    if ((h - 1) * s + k < 2 * p + 1) throw ShapeError("conv_transpose2d: output would be empty");
    const std::size_t oh = (h - 1) * s + k - 2 * p, ow = (w - 1) * s + k - 2 * p;
    const std::size_t kk = co * k * k, hw = h * w, ohw = oh * ow;

    // Scatter map: for column row r = (c, ky, kx) and input pixel q, the
    // output pixel index (or -1 when it falls in the padding).
    std::vector<std::ptrdiff_t> target(k * k * hw);
    for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx)
            for (std::size_t iy = 0; iy < h; ++iy)
                for (std::size_t ix = 0; ix < w; ++ix) {
                    const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * s + ky) - static_cast<std::ptrdiff_t>(p);
                    const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * s + kx) - static_cast<std::ptrdiff_t>(p);
                    const bool ok = oy >= 0 && ox >= 0 && oy < static_cast<std::ptrdiff_t>(oh) &&
                                    ox < static_cast<std::ptrdiff_t>(ow);
                    target[(ky * k + kx) * hw + iy * w + ix] = ok ? oy * static_cast<std::ptrdiff_t>(ow) + ox : -1;
                }

    std::vector<double> out(B * co * ohw, 0.0);
    std::vector<double> cols(kk * hw);
    for (std::size_t b = 0; b < B; ++b) {
        detail::mat(cols, 0, kk, hw).noalias() =
            detail::cmat(weight.values(), 0, ci, kk).transpose() * detail::cmat(x.values(), b * ci * hw, ci, hw);
        double* o = out.data() + b * co * ohw;
        for (std::size_t c = 0; c < co; ++c) {
            double* oc = o + c * ohw;
            for (std::size_t r = 0; r < k * k; ++r) {
                const double* col = cols.data() + (c * k * k + r) * hw;
                const std::ptrdiff_t* tg = target.data() + r * hw;
                for (std::size_t q = 0; q < hw; ++q)
                    if (tg[q] >= 0) oc[tg[q]] += col[q];
            }
            const double bv = bias.values()[c];
            for (std::size_t q = 0; q < ohw; ++q) oc[q] += bv;
        }
    }
    return detail::make_result(
        {B, co, oh, ow}, std::move(out), {x, weight, bias}, "conv_transpose2d",
        [B, ci, co, k, hw, ohw, kk, target = std::move(target)](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            Node& pb = *self.parents[2];
            std::vector<double> dcols(kk * hw);
            for (std::size_t b = 0; b < B; ++b) {
                const double* go = self.grad.data() + b * co * ohw;
                for (std::size_t c = 0; c < co; ++c) {
                    const double* gc = go + c * ohw;
                    for (std::size_t r = 0; r < k * k; ++r) {
                        double* dc = dcols.data() + (c * k * k + r) * hw;
                        const std::ptrdiff_t* tg = target.data() + r * hw;
                        for (std::size_t q = 0; q < hw; ++q) dc[q] = tg[q] >= 0 ? gc[tg[q]] : 0.0;
                    }
                    if (pb.requires_grad) {
                        double acc = 0.0;
                        for (std::size_t q = 0; q < ohw; ++q) acc += gc[q];
                        pb.g()[c] += acc;
                    }
                }
                const auto DC = detail::cmat(dcols, 0, kk, hw);
                if (px.requires_grad)
                    detail::mat(px.g(), b * ci * hw, ci, hw).noalias() += detail::cmat(pw.value, 0, ci, kk) * DC;
                if (pw.requires_grad)
                    detail::mat(pw.g(), 0, ci, kk).noalias() +=
                        detail::cmat(px.value, b * ci * hw, ci, hw) * DC.transpose();
            }
        });
}

/// Per-channel normalization of x[B, C, H, W] with batch statistics.
/// The batch mean and biased variance are written to `batch_mean` /
/// `batch_var` for running-average bookkeeping.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                           std::vector<double>* batch_mean = nullptr, std::vector<double>* batch_var = nullptr) {
    if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
        throw ShapeError("batch_norm2d: incompatible shapes x" + shape_str(x.shape()) + " gamma" +
                         shape_str(gamma.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    const double n = static_cast<double>(B * hw);
    std::vector<double> mu(C, 0.0), var(C, 0.0), inv_std(C), xhat(x.numel()), out(x.numel());
    const auto& xv = x.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t q = 0; q < hw; ++q) mu[c] += xv[(b * C + c) * hw + q];
    for (auto& m : mu) m /= n;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t q = 0; q < hw; ++q) {
                const double d = xv[(b * C + c) * hw + q] - mu[c];
                var[c] += d * d;
            }
    for (std::size_t c = 0; c < C; ++c) {
        var[c] /= n;
        inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t q = 0; q < hw; ++q) {
                const std::size_t i = (b * C + c) * hw + q;
                xhat[i] = (xv[i] - mu[c]) * inv_std[c];
                out[i] = xhat[i] * gamma.values()[c] + beta.values()[c];
            }
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;
    return detail::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "batch_norm2d",
        [B, C, hw, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node& px = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pbeta = *self.parents[2];
            for (std::size_t c = 0; c < C; ++c) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t q = 0; q < hw; ++q) {
                        const std::size_t i = (b * C + c) * hw + q;
                        s1 += self.grad[i];
                        s2 += self.grad[i] * xhat[i];
                    }
                if (pg.requires_grad) pg.g()[c] += s2;
                if (pbeta.requires_grad) pbeta.g()[c] += s1;
                if (px.requires_grad) {
                    auto& g = px.g();
                    const double gm = pg.value[c] * inv_std[c];
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t q = 0; q < hw; ++q) {
                            const std::size_t i = (b * C + c) * hw + q;
                            g[i] += gm * (self.grad[i] - s1 / n - xhat[i] * s2 / n);
                        }
                }
            }
        });
}

/// y = x * scale[c] + shift[c] per channel of x[B, C, H, W]; inference-mode
/// batch normalization with frozen statistics.
inline Tensor channel_affine(const Tensor& x, const Tensor& scale_c, const Tensor& shift_c) {
    if (x.rank() != 4 || scale_c.numel() != x.dim(1) || shift_c.numel() != x.dim(1))
        throw ShapeError("channel_affine: incompatible shapes x" + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t q = 0; q < hw; ++q) {
                const std::size_t i = (b * C + c) * hw + q;
                out[i] = x.values()[i] * scale_c.values()[c] + shift_c.values()[c];
            }
    return detail::make_result(x.shape(), std::move(out), {x, scale_c, shift_c}, "channel_affine",
                               [B, C, hw](Node& self) {
                                   Node& px = *self.parents[0];
                                   Node& ps = *self.parents[1];
                                   Node& pt = *self.parents[2];
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t q = 0; q < hw; ++q) {
                                               const std::size_t i = (b * C + c) * hw + q;
                                               if (px.requires_grad) px.g()[i] += self.grad[i] * ps.value[c];
                                               if (ps.requires_grad) ps.g()[c] += self.grad[i] * px.value[i];
                                               if (pt.requires_grad) pt.g()[c] += self.grad[i];
                                           }
                               });
}

// ---------------------------------------------------------------------------
// Initialization

/// He-normal init scaled by fan-in.
inline std::vector<double> he_normal(std::size_t count, std::size_t fan_in, Rng& rng) {
    std::vector<double> v(count);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : v) x = rng.normal() * sd;
    return v;
}

inline std::vector<double> normal_init(std::size_t count, double sd, Rng& rng) {
    std::vector<double> v(count);
    for (auto& x : v) x = rng.normal() * sd;
    return v;
}

}  // namespace t2p::ad

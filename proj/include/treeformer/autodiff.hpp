#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "treeformer/array.hpp"
#include "treeformer/random.hpp"

namespace treeformer {

/// A named trainable tensor. Lives outside any tape; tapes bind leaves to it
/// and accumulate into `grad` during backward.
template <typename Real>
struct Parameter {
    std::string name;
    Array<Real> value;
    Array<Real> grad;

    Parameter() = default;
    Parameter(std::string n, Array<Real> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(Real(0)); }
};

template <typename Real>
class ParamStore {
public:
    Parameter<Real>& add(std::string name, Array<Real> v) {
        params_.push_back(std::make_unique<Parameter<Real>>(std::move(name), std::move(v)));
        return *params_.back();
    }

    Parameter<Real>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<Real>& operator[](std::size_t i) const { return *params_[i]; }
    std::size_t size() const { return params_.size(); }

    Parameter<Real>* find(const std::string& name) {
        for (auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    /// Exact trainable scalar count: sum over per-tensor products of shapes.
    std::size_t count_scalars() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<std::unique_ptr<Parameter<Real>>> params_;
};

template <typename Real>
struct Node {
    Array<Real> value;
    Array<Real> grad;
    std::vector<Node*> parents;
    std::function<void(Node&)> backward_fn;
    Parameter<Real>* param = nullptr;
    bool requires_grad = false;
    std::size_t id = 0;
    bool reached = false;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Array<Real>(value.shape());
    }
};

namespace detail {

// Trailing-aligned broadcast of two shapes, NumPy rules.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + format_shape(a) +
                                        " vs " + format_shape(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Per-output-dim element strides for an operand, 0 on broadcast dims.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t s = 1;
    const std::size_t off = out.size() - shape.size();
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i + off] = (shape[i] == 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn&& fn) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    if (rank == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        fn(o, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// C (n x m) += or = A (n x k) * B (k x m); ikj order for locality.
template <typename Real>
inline void matmul_nn(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
                      std::size_t m, bool accumulate) {
    if (!accumulate) std::fill(c, c + n * m, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const Real av = arow[kk];
            if (av == Real(0)) continue;
            const Real* brow = b + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (n x m) += A (n x k) * B^T where B is (m x k).
template <typename Real>
inline void matmul_nt(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
                      std::size_t m, bool accumulate) {
    if (!accumulate) std::fill(c, c + n * m, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const Real* brow = b + j * k;
            Real acc = Real(0);
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C (n x m) += A^T * B where A is (k x n), B is (k x m).
template <typename Real>
inline void matmul_tn(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
                      std::size_t m, bool accumulate) {
    if (!accumulate) std::fill(c, c + n * m, Real(0));
    for (std::size_t kk = 0; kk < k; ++kk) {
        const Real* arow = a + kk * n;
        const Real* brow = b + kk * m;
        for (std::size_t i = 0; i < n; ++i) {
            const Real av = arow[i];
            if (av == Real(0)) continue;
            Real* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

/// Dynamic computation graph with reverse-mode differentiation. Nodes are
/// created in topological order by construction; backward walks creation
/// order in reverse, visiting each reachable node exactly once.
template <typename Real>
class Tape {
public:
    using NodePtr = Node<Real>*;

    NodePtr constant(Array<Real> v) { return make(std::move(v), {}, nullptr, false); }

    NodePtr scalar(Real v) { return constant(Array<Real>::scalar(v)); }

    /// Differentiable input that is not a parameter (used by gradient checks).
    NodePtr input(Array<Real> v) {
        NodePtr n = make(std::move(v), {}, nullptr, true);
        return n;
    }

    /// Leaf bound to a parameter; backward() adds into the parameter's grad.
    NodePtr leaf(Parameter<Real>& p) {
        NodePtr n = make(Array<Real>(p.value), {}, nullptr, true);
        n->param = &p;
        return n;
    }

    // ---- elementwise binary, broadcasting ----

    NodePtr add(NodePtr a, NodePtr b) {
        return binary(a, b, "add", [](Real x, Real y) { return x + y; },
                      [](Real, Real, Real g, Real& da, Real& db) {
                          da += g;
                          db += g;
                      });
    }

    NodePtr sub(NodePtr a, NodePtr b) {
        return binary(a, b, "sub", [](Real x, Real y) { return x - y; },
                      [](Real, Real, Real g, Real& da, Real& db) {
                          da += g;
                          db -= g;
                      });
    }

    NodePtr mul(NodePtr a, NodePtr b) {
        return binary(a, b, "mul", [](Real x, Real y) { return x * y; },
                      [](Real x, Real y, Real g, Real& da, Real& db) {
                          da += g * y;
                          db += g * x;
                      });
    }

    NodePtr div(NodePtr a, NodePtr b) {
        return binary(a, b, "div", [](Real x, Real y) { return x / y; },
                      [](Real x, Real y, Real g, Real& da, Real& db) {
                          da += g / y;
                          db -= g * x / (y * y);
                      });
    }

    // ---- elementwise unary ----

    NodePtr neg(NodePtr a) {
        return unary(a, [](Real x) { return -x; }, [](Real, Real y) { (void)y; return Real(-1); });
    }

    NodePtr exp(NodePtr a) {
        return unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
    }

    NodePtr log(NodePtr a) {
        return unary(a, [](Real x) { return std::log(x); },
                     [](Real x, Real) { return Real(1) / x; });
    }

    NodePtr sqrt(NodePtr a) {
        return unary(a, [](Real x) { return std::sqrt(x); },
                     [](Real, Real y) { return Real(0.5) / y; });
    }

    NodePtr abs(NodePtr a) {
        return unary(a, [](Real x) { return std::fabs(x); },
                     [](Real x, Real) { return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); });
    }

    NodePtr relu(NodePtr a) {
        return unary(a, [](Real x) { return x > Real(0) ? x : Real(0); },
                     [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
    }

    NodePtr sigmoid(NodePtr a) {
        return unary(a,
                     [](Real x) {
                         // stable in both tails
                         if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
                         const Real e = std::exp(x);
                         return e / (Real(1) + e);
                     },
                     [](Real, Real y) { return y * (Real(1) - y); });
    }

    NodePtr scale(NodePtr a, Real s) {
        return unary(a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
    }

    NodePtr add_scalar(NodePtr a, Real s) {
        return unary(a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
    }

    /// Elementwise max(x, lo); gradient passes only where x > lo.
    NodePtr clamp_min(NodePtr a, Real lo) {
        return unary(a, [lo](Real x) { return x > lo ? x : lo; },
                     [lo](Real x, Real) { return x > lo ? Real(1) : Real(0); });
    }

    // ---- shape ----

    NodePtr reshape(NodePtr a, Shape shape) {
        if (shape_numel(shape) != a->value.numel()) {
            throw std::invalid_argument("reshape: shape mismatch " + format_shape(a->value.shape()) +
                                        " vs " + format_shape(shape));
        }
        Array<Real> v(shape, a->value.values());
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) a->grad[i] += self.grad[i];
        };
        return out;
    }

    NodePtr transpose(NodePtr a) {
        if (a->value.rank() != 2)
            throw std::invalid_argument("transpose: expected matrix, got " +
                                        format_shape(a->value.shape()));
        const std::size_t r = a->value.rows(), c = a->value.cols();
        Array<Real> v(Shape{c, r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) v.at(j, i) = a->value.at(i, j);
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, r, c](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) a->grad.at(i, j) += self.grad.at(j, i);
        };
        return out;
    }

    /// Rank-preserving rectangular slice: out[idx] = a[start + idx].
    NodePtr slice(NodePtr a, std::vector<std::size_t> start, Shape size) {
        const Shape& in = a->value.shape();
        if (start.size() != in.size() || size.size() != in.size())
            throw std::invalid_argument("slice: rank mismatch for " + format_shape(in));
        for (std::size_t d = 0; d < in.size(); ++d)
            if (start[d] + size[d] > in[d])
                throw std::invalid_argument("slice: out of range " + format_shape(size) + " vs " +
                                            format_shape(in));
        Array<Real> v(size);
        copy_region(a->value, v, start, /*into_slice=*/false);
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, start](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            add_region(self.grad, a->grad, start);
        };
        return out;
    }

    /// Concatenate along `axis`; all other dims must match.
    NodePtr concat(const std::vector<NodePtr>& parts, std::size_t axis) {
        if (parts.empty()) throw std::invalid_argument("concat: no inputs");
        Shape out_shape = parts[0]->value.shape();
        if (axis >= out_shape.size()) throw std::invalid_argument("concat: bad axis");
        std::size_t total = 0;
        for (NodePtr p : parts) {
            const Shape& s = p->value.shape();
            if (s.size() != out_shape.size())
                throw std::invalid_argument("concat: shape mismatch " + format_shape(s) + " vs " +
                                            format_shape(out_shape));
            for (std::size_t d = 0; d < s.size(); ++d)
                if (d != axis && s[d] != out_shape[d])
                    throw std::invalid_argument("concat: shape mismatch " + format_shape(s) +
                                                " vs " + format_shape(out_shape));
            total += s[axis];
        }
        out_shape[axis] = total;
        Array<Real> v(out_shape);
        bool any_grad = false;
        std::size_t offset = 0;
        for (NodePtr p : parts) {
            std::vector<std::size_t> start(out_shape.size(), 0);
            start[axis] = offset;
            copy_region(p->value, v, start, /*into_slice=*/true);
            offset += p->value.shape()[axis];
            any_grad = any_grad || p->requires_grad;
        }
        NodePtr out = make(std::move(v), std::vector<NodePtr>(parts), nullptr, any_grad);
        out->backward_fn = [parts, axis, out_shape](Node<Real>& self) {
            std::size_t off = 0;
            for (NodePtr p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    std::vector<std::size_t> start(out_shape.size(), 0);
                    start[axis] = off;
                    Array<Real> piece(p->value.shape());
                    copy_region(self.grad, piece, start, /*into_slice=*/false);
                    for (std::size_t i = 0; i < piece.numel(); ++i) p->grad[i] += piece[i];
                }
                off += p->value.shape()[axis];
            }
        };
        return out;
    }

    // ---- matrix ----

    NodePtr matmul(NodePtr a, NodePtr b) {
        if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.cols() != b->value.rows())
            throw std::invalid_argument("matmul: shape mismatch " + format_shape(a->value.shape()) +
                                        " vs " + format_shape(b->value.shape()));
        const std::size_t n = a->value.rows(), k = a->value.cols(), m = b->value.cols();
        Array<Real> v(Shape{n, m});
        detail::matmul_nn(a->value.data(), b->value.data(), v.data(), n, k, m, false);
        NodePtr out = make(std::move(v), {a, b}, nullptr, a->requires_grad || b->requires_grad);
        out->backward_fn = [a, b, n, k, m](Node<Real>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                detail::matmul_nt(self.grad.data(), b->value.data(), a->grad.data(), n, m, k, true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::matmul_tn(a->value.data(), self.grad.data(), b->grad.data(), k, n, m, true);
            }
        };
        return out;
    }

    // ---- reductions ----

    NodePtr reduce_sum(NodePtr a) {
        Real s = 0;
        for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
        NodePtr out = make(Array<Real>::scalar(s), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            const Real g = self.grad[0];
            for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
        };
        return out;
    }

    NodePtr reduce_mean(NodePtr a) {
        const Real inv = Real(1) / Real(a->value.numel());
        return scale(reduce_sum(a), inv);
    }

    /// Sum a matrix along an axis: axis 0 -> column sums, axis 1 -> row sums.
    NodePtr reduce_sum_axis(NodePtr a, std::size_t axis) {
        if (a->value.rank() != 2 || axis > 1)
            throw std::invalid_argument("reduce_sum_axis: expected matrix, got " +
                                        format_shape(a->value.shape()));
        const std::size_t r = a->value.rows(), c = a->value.cols();
        Array<Real> v(Shape{axis == 0 ? c : r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) v[axis == 0 ? j : i] += a->value.at(i, j);
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, r, c, axis](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    a->grad.at(i, j) += self.grad[axis == 0 ? j : i];
        };
        return out;
    }

    NodePtr reduce_mean_axis(NodePtr a, std::size_t axis) {
        const std::size_t n = axis == 0 ? a->value.rows() : a->value.cols();
        return scale(reduce_sum_axis(a, axis), Real(1) / Real(n));
    }

    // ---- structured ops ----

    /// Softmax over the last axis (rows of a matrix, or a whole vector).
    NodePtr softmax(NodePtr a) {
        const Shape& s = a->value.shape();
        if (s.empty()) throw std::invalid_argument("softmax: scalar input");
        const std::size_t width = s.back();
        const std::size_t rows = a->value.numel() / width;
        Array<Real> v(s);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* x = a->value.data() + r * width;
            Real* y = v.data() + r * width;
            Real m = x[0];
            for (std::size_t j = 1; j < width; ++j) m = std::max(m, x[j]);
            Real z = 0;
            for (std::size_t j = 0; j < width; ++j) {
                y[j] = std::exp(x[j] - m);
                z += y[j];
            }
            for (std::size_t j = 0; j < width; ++j) y[j] /= z;
        }
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, rows, width](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* y = self.value.data() + r * width;
                const Real* gy = self.grad.data() + r * width;
                Real* gx = a->grad.data() + r * width;
                Real dot = 0;
                for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < width; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
        return out;
    }

    /// Layer normalization over the last axis with learned gain and bias.
    NodePtr layer_norm(NodePtr x, NodePtr gain, NodePtr bias, Real eps = Real(1e-5)) {
        const Shape& s = x->value.shape();
        if (s.empty()) throw std::invalid_argument("layer_norm: scalar input");
        const std::size_t width = s.back();
        if (gain->value.shape() != Shape{width} || bias->value.shape() != Shape{width})
            throw std::invalid_argument("layer_norm: shape mismatch " + format_shape(s) + " vs " +
                                        format_shape(gain->value.shape()));
        const std::size_t rows = x->value.numel() / width;
        Array<Real> v(s);
        auto xhat = std::make_shared<std::vector<Real>>(x->value.numel());
        auto inv_std = std::make_shared<std::vector<Real>>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* xp = x->value.data() + r * width;
            Real mean = 0;
            for (std::size_t j = 0; j < width; ++j) mean += xp[j];
            mean /= Real(width);
            Real var = 0;
            for (std::size_t j = 0; j < width; ++j) var += (xp[j] - mean) * (xp[j] - mean);
            var /= Real(width);
            const Real istd = Real(1) / std::sqrt(var + eps);
            (*inv_std)[r] = istd;
            Real* yp = v.data() + r * width;
            for (std::size_t j = 0; j < width; ++j) {
                const Real h = (xp[j] - mean) * istd;
                (*xhat)[r * width + j] = h;
                yp[j] = gain->value[j] * h + bias->value[j];
            }
        }
        NodePtr out =
            make(std::move(v), {x, gain, bias}, nullptr,
                 x->requires_grad || gain->requires_grad || bias->requires_grad);
        out->backward_fn = [x, gain, bias, rows, width, xhat, inv_std](Node<Real>& self) {
            if (gain->requires_grad) gain->ensure_grad();
            if (bias->requires_grad) bias->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* gy = self.grad.data() + r * width;
                const Real* h = xhat->data() + r * width;
                if (gain->requires_grad || bias->requires_grad) {
                    for (std::size_t j = 0; j < width; ++j) {
                        if (gain->requires_grad) gain->grad[j] += gy[j] * h[j];
                        if (bias->requires_grad) bias->grad[j] += gy[j];
                    }
                }
                if (x->requires_grad) {
                    Real mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t j = 0; j < width; ++j) {
                        const Real dh = gy[j] * gain->value[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= Real(width);
                    mean_dh_h /= Real(width);
                    Real* gx = x->grad.data() + r * width;
                    const Real istd = (*inv_std)[r];
                    for (std::size_t j = 0; j < width; ++j) {
                        const Real dh = gy[j] * gain->value[j];
                        gx[j] += istd * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        };
        return out;
    }

    /// Inverted dropout: scales kept activations by 1/(1-p); identity when
    /// not training or p == 0.
    NodePtr dropout(NodePtr a, double p, Rng& rng, bool training) {
        if (!training || p <= 0.0) return a;
        if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
        const Real keep_scale = Real(1.0 / (1.0 - p));
        auto mask = std::make_shared<std::vector<Real>>(a->value.numel());
        Array<Real> v(a->value.shape());
        for (std::size_t i = 0; i < a->value.numel(); ++i) {
            const Real m = rng.uniform() < p ? Real(0) : keep_scale;
            (*mask)[i] = m;
            v[i] = a->value[i] * m;
        }
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, mask](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                a->grad[i] += self.grad[i] * (*mask)[i];
        };
        return out;
    }

    /// Gather rows of a matrix: out[i] = table[ids[i]].
    NodePtr embedding_lookup(NodePtr table, std::vector<std::size_t> ids) {
        if (table->value.rank() != 2)
            throw std::invalid_argument("embedding_lookup: expected matrix, got " +
                                        format_shape(table->value.shape()));
        const std::size_t v_rows = table->value.rows(), d = table->value.cols();
        for (std::size_t id : ids)
            if (id >= v_rows)
                throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                            " out of range for " + format_shape(table->value.shape()));
        Array<Real> v(Shape{ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::copy_n(table->value.data() + ids[i] * d, d, v.data() + i * d);
        NodePtr out = make(std::move(v), {table}, nullptr, table->requires_grad);
        auto ids_copy = std::make_shared<std::vector<std::size_t>>(std::move(ids));
        out->backward_fn = [table, ids_copy, d](Node<Real>& self) {
            if (!table->requires_grad) return;
            table->ensure_grad();
            for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                Real* dst = table->grad.data() + (*ids_copy)[i] * d;
                const Real* src = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
        return out;
    }

    /// Per-row column pick: out[i] = a[i, cols[i]].
    NodePtr take_per_row(NodePtr a, std::vector<std::size_t> cols) {
        if (a->value.rank() != 2 || cols.size() != a->value.rows())
            throw std::invalid_argument("take_per_row: shape mismatch " +
                                        format_shape(a->value.shape()) + " vs [" +
                                        std::to_string(cols.size()) + "]");
        const std::size_t w = a->value.cols();
        Array<Real> v(Shape{cols.size()});
        for (std::size_t i = 0; i < cols.size(); ++i) {
            if (cols[i] >= w)
                throw std::invalid_argument("take_per_row: column out of range");
            v[i] = a->value.at(i, cols[i]);
        }
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        auto cols_copy = std::make_shared<std::vector<std::size_t>>(std::move(cols));
        out->backward_fn = [a, cols_copy, w](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < cols_copy->size(); ++i)
                a->grad[i * w + (*cols_copy)[i]] += self.grad[i];
        };
        return out;
    }

    /// out = mask ? value : a. The mask is data, not a differentiable input;
    /// gradient is zero at filled positions.
    NodePtr masked_fill(NodePtr a, const std::vector<bool>& mask, Real value) {
        if (mask.size() != a->value.numel())
            throw std::invalid_argument("masked_fill: shape mismatch " +
                                        format_shape(a->value.shape()) + " vs [" +
                                        std::to_string(mask.size()) + "]");
        Array<Real> v(a->value.shape());
        for (std::size_t i = 0; i < v.numel(); ++i) v[i] = mask[i] ? value : a->value[i];
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        auto mask_copy = std::make_shared<std::vector<bool>>(mask);
        out->backward_fn = [a, mask_copy](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                if (!(*mask_copy)[i]) a->grad[i] += self.grad[i];
        };
        return out;
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates grads of every reachable
    /// node and accumulates parameter-leaf grads into their parameters.
    void backward(NodePtr loss) {
        if (loss->value.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        format_shape(loss->value.shape()));
        if (backward_done_)
            throw std::logic_error("backward: already called on this tape (build a new tape "
                                   "or call reset_backward first)");
        backward_done_ = true;

        // mark the subgraph below the loss
        for (auto& n : nodes_) n->reached = false;
        std::vector<NodePtr> stack{loss};
        loss->reached = true;
        while (!stack.empty()) {
            NodePtr n = stack.back();
            stack.pop_back();
            for (NodePtr p : n->parents) {
                if (!p->reached) {
                    p->reached = true;
                    stack.push_back(p);
                }
            }
        }

        loss->ensure_grad();
        loss->grad.fill(Real(1));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node<Real>& n = *nodes_[i];
            if (!n.reached || !n.requires_grad) continue;
            n.ensure_grad();
            if (n.backward_fn) n.backward_fn(n);
            if (n.param) {
                for (std::size_t j = 0; j < n.grad.numel(); ++j) n.param->grad[j] += n.grad[j];
            }
        }
    }

    void reset_backward() { backward_done_ = false; }

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    NodePtr make(Array<Real> v, std::vector<NodePtr> parents, Parameter<Real>* param,
                 bool requires_grad) {
        auto node = std::make_unique<Node<Real>>();
        node->value = std::move(v);
        node->parents = std::move(parents);
        node->param = param;
        node->requires_grad = requires_grad;
        node->id = nodes_.size();
        nodes_.push_back(std::move(node));
        return nodes_.back().get();
    }

    template <typename Fwd, typename Bwd>
    NodePtr binary(NodePtr a, NodePtr b, const char* name, Fwd fwd, Bwd bwd) {
        const Shape out_shape = detail::broadcast_shape(a->value.shape(), b->value.shape(), name);
        const auto sa = detail::broadcast_strides(a->value.shape(), out_shape);
        const auto sb = detail::broadcast_strides(b->value.shape(), out_shape);
        Array<Real> v(out_shape);
        const Array<Real>& av = a->value;
        const Array<Real>& bv = b->value;
        detail::for_each_broadcast(out_shape, sa, sb,
                                   [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                       v[o] = fwd(av[ia], bv[ib]);
                                   });
        NodePtr out = make(std::move(v), {a, b}, nullptr, a->requires_grad || b->requires_grad);
        out->backward_fn = [a, b, out_shape, sa, sb, bwd](Node<Real>& self) {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            Real dump = 0;  // sink for non-differentiable operands
            detail::for_each_broadcast(
                out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                    Real& da = a->requires_grad ? a->grad[ia] : dump;
                    Real& db = b->requires_grad ? b->grad[ib] : dump;
                    bwd(a->value[ia], b->value[ib], self.grad[o], da, db);
                });
        };
        return out;
    }

    template <typename Fwd, typename Dfdx>
    NodePtr unary(NodePtr a, Fwd fwd, Dfdx dfdx) {
        Array<Real> v(a->value.shape());
        for (std::size_t i = 0; i < v.numel(); ++i) v[i] = fwd(a->value[i]);
        NodePtr out = make(std::move(v), {a}, nullptr, a->requires_grad);
        out->backward_fn = [a, dfdx](Node<Real>& self) {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                a->grad[i] += self.grad[i] * dfdx(a->value[i], self.value[i]);
        };
        return out;
    }

    // region copy helpers used by slice/concat
    static void copy_region(const Array<Real>& src, Array<Real>& dst,
                            const std::vector<std::size_t>& start, bool into_slice) {
        // into_slice: src is the small array written at `start` inside dst;
        // otherwise dst is the small array read from `start` inside src.
        const Array<Real>& big = into_slice ? dst : src;
        const Array<Real>& small = into_slice ? src : dst;
        const Shape& small_shape = small.shape();
        const Shape& big_shape = big.shape();
        const std::size_t rank = big_shape.size();
        std::vector<std::size_t> big_strides(rank, 1);
        for (std::size_t d = rank - 1; d-- > 0;) big_strides[d] = big_strides[d + 1] * big_shape[d + 1];
        std::vector<std::size_t> idx(rank, 0);
        const std::size_t n = small.numel();
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t off = 0;
            for (std::size_t d = 0; d < rank; ++d) off += (start[d] + idx[d]) * big_strides[d];
            if (into_slice)
                const_cast<Array<Real>&>(big).values()[off] = small[i];
            else
                const_cast<Array<Real>&>(small).values()[i] = big[off];
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < small_shape[d]) break;
                idx[d] = 0;
            }
        }
    }

    static void add_region(const Array<Real>& small, Array<Real>& big,
                           const std::vector<std::size_t>& start) {
        const Shape& small_shape = small.shape();
        const Shape& big_shape = big.shape();
        const std::size_t rank = big_shape.size();
        std::vector<std::size_t> big_strides(rank, 1);
        for (std::size_t d = rank - 1; d-- > 0;) big_strides[d] = big_strides[d + 1] * big_shape[d + 1];
        std::vector<std::size_t> idx(rank, 0);
        for (std::size_t i = 0; i < small.numel(); ++i) {
            std::size_t off = 0;
            for (std::size_t d = 0; d < rank; ++d) off += (start[d] + idx[d]) * big_strides[d];
            big.values()[off] += small[i];
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < small_shape[d]) break;
                idx[d] = 0;
            }
        }
    }

    std::vector<std::unique_ptr<Node<Real>>> nodes_;
    bool backward_done_ = false;
};

}  // namespace treeformer

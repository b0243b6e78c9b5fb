#pragma once

// Reverse-mode autodiff on dense row-major tensors. Every op builds a node
// holding its value, parent links, and a pull-style backward closure; calling
// backward() on a scalar root runs the closures in reverse topological order.
// Gradients accumulate additively until zero_grad, so several backward passes
// against shared leaves sum their contributions (that is how batches work).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kags/errors.hpp"

namespace kags {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    bool backward_done = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backprop;

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
inline void check_finite(const char* op, const std::vector<S>& v) {
    for (S x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

inline void check_shape_valid(const char* op, const Shape& shape) {
    if (shape.empty())
        throw ShapeError(std::string(op) + ": rank-0 shape not allowed");
    for (std::size_t e : shape) {
        if (e == 0)
            throw ShapeError(std::string(op) + ": zero extent in shape " + shape_str(shape));
    }
}

template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

    static Tensor leaf(Shape shape, std::vector<S> data, bool requires_grad = false) {
        check_shape_valid("leaf", shape);
        if (data.size() != shape_numel(shape))
            throw ShapeError("leaf: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        check_finite("leaf", data);
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, S fill, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return leaf(std::move(shape), std::vector<S>(n, fill), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static Tensor scalar(S v) { return leaf({1}, {v}); }

    bool valid() const { return static_cast<bool>(node_); }
    const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rank() const { return node_->shape.size(); }

    std::size_t rows() const {
        require_rank2("rows");
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return node_->shape[1];
    }

    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<S>& grad() const {
        if (!node_->requires_grad)
            throw ContractError("grad: tensor does not require gradients");
        node_->ensure_grad();
        return node_->grad;
    }

    S item() const {
        if (numel() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->value.size(), S(0));
    }

private:
    void require_rank2(const char* what) const {
        if (node_->shape.size() != 2)
            throw ShapeError(std::string(what) + ": tensor " + shape_str(node_->shape) +
                             " is not a matrix");
    }

    std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

// Builds an op node. The backward closure is only attached when some parent
// needs gradients, so inference-time graphs carry no history at all.
template <typename S>
Tensor<S> make_op(const char* op, Shape shape, std::vector<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(TensorNode<S>&)> backprop) {
    check_shape_valid(op, shape);
    if (value.size() != shape_numel(shape))
        throw ShapeError(std::string(op) + ": internal value/shape mismatch");
    check_finite(op, value);
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<S>(std::move(n));
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename S>
void require_matrix(const char* op, const Tensor<S>& a) {
    if (a.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// C[m x n] += or = A[m x k] * B[k x n], contiguous row-major.
template <typename S>
void mm_kernel(std::size_t m, std::size_t k, std::size_t n,
               const S* a, const S* b, S* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
std::vector<S> transpose_copy(std::size_t m, std::size_t n, const S* a) {
    std::vector<S> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto* pa = a.node().get();
    auto* pb = b.node().get();
    return detail::make_op<S>("add", a.shape(), std::move(out), {a, b},
        [pa, pb](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto* pa = a.node().get();
    auto* pb = b.node().get();
    return detail::make_op<S>("sub", a.shape(), std::move(out), {a, b},
        [pa, pb](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto* pa = a.node().get();
    auto* pb = b.node().get();
    return detail::make_op<S>("mul", a.shape(), std::move(out), {a, b},
        [pa, pb](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * pb->value[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] += self.grad[i] * pa->value[i];
        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * k;
    auto* pa = a.node().get();
    return detail::make_op<S>("scale", a.shape(), std::move(out), {a},
        [pa, k](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * k;
        });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) { return scale(a, S(-1)); }

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S k) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + k;
    auto* pa = a.node().get();
    return detail::make_op<S>("add_scalar", a.shape(), std::move(out), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > S(0) ? av[i] : S(0);
    auto* pa = a.node().get();
    return detail::make_op<S>("relu", a.shape(), std::move(out), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    if (pa->value[i] > S(0)) pa->grad[i] += self.grad[i];
        });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(av[i]);
        out[i] = static_cast<S>(1.0 / (1.0 + std::exp(-x)));
    }
    auto* pa = a.node().get();
    return detail::make_op<S>("sigmoid", a.shape(), std::move(out), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    S s = self.value[i];
                    pa->grad[i] += self.grad[i] * s * (S(1) - s);
                }
        });
}

template <typename S>
Tensor<S> tanh_elem(const Tensor<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<S>(std::tanh(static_cast<double>(av[i])));
    auto* pa = a.node().get();
    return detail::make_op<S>("tanh", a.shape(), std::move(out), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    S t = self.value[i];
                    pa->grad[i] += self.grad[i] * (S(1) - t * t);
                }
        });
}

// y = 1 / sqrt(x); inputs must be strictly positive.
template <typename S>
Tensor<S> rsqrt(const Tensor<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > S(0)))
            throw NumericError("rsqrt: non-positive input");
        out[i] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(av[i])));
    }
    auto* pa = a.node().get();
    return detail::make_op<S>("rsqrt", a.shape(), std::move(out), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    S y = self.value[i];
                    pa->grad[i] += self.grad[i] * S(-0.5) * y * y * y;
                }
        });
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<S> out(m * n);
    detail::mm_kernel(m, k, n, a.values().data(), b.values().data(), out.data(), false);
    auto* pa = a.node().get();
    auto* pb = b.node().get();
    return detail::make_op<S>("matmul", {m, n}, std::move(out), {a, b},
        [pa, pb, m, k, n](TensorNode<S>& self) {
            if (pa->requires_grad) {
                auto bt = detail::transpose_copy(k, n, pb->value.data());
                detail::mm_kernel(m, n, k, self.grad.data(), bt.data(), pa->grad.data(), true);
            }
            if (pb->requires_grad) {
                auto at = detail::transpose_copy(m, k, pa->value.data());
                detail::mm_kernel(k, m, n, at.data(), self.grad.data(), pb->grad.data(), true);
            }
        });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    detail::require_matrix("transpose", a);
    std::size_t m = a.rows(), n = a.cols();
    auto out = detail::transpose_copy(m, n, a.values().data());
    auto* pa = a.node().get();
    return detail::make_op<S>("transpose", {n, m}, std::move(out), {a},
        [pa, m, n](TensorNode<S>& self) {
            if (pa->requires_grad) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        pa->grad[j * n + i] += self.grad[i * m + j];
            }
        });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
    check_shape_valid("reshape", new_shape);
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    auto* pa = a.node().get();
    return detail::make_op<S>("reshape", std::move(new_shape), a.values(), {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        });
}

// ---------------------------------------------------------------------------
// row reductions and broadcasts (matrices only)

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
    double acc = 0.0;
    for (S v : a.values()) acc += static_cast<double>(v);
    auto* pa = a.node().get();
    return detail::make_op<S>("sum_all", {1}, {static_cast<S>(acc)}, {a},
        [pa](TensorNode<S>& self) {
            if (pa->requires_grad) {
                S g = self.grad[0];
                for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
            }
        });
}

// Column means: [m x d] -> [1 x d].
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& a) {
    detail::require_matrix("mean_rows", a);
    std::size_t m = a.rows(), d = a.cols();
    std::vector<S> out(d, S(0));
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += av[i * d + j];
    S inv = S(1) / static_cast<S>(m);
    for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    auto* pa = a.node().get();
    return detail::make_op<S>("mean_rows", {1, d}, std::move(out), {a},
        [pa, m, d, inv](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        pa->grad[i * d + j] += self.grad[j] * inv;
        });
}

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& r) {
    detail::require_matrix("add_rowvec", a);
    detail::require_matrix("add_rowvec", r);
    if (r.rows() != 1 || r.cols() != a.cols())
        throw ShapeError("add_rowvec: row vector " + shape_str(r.shape()) +
                         " does not broadcast over " + shape_str(a.shape()));
    std::size_t m = a.rows(), d = a.cols();
    std::vector<S> out(m * d);
    const auto& av = a.values();
    const auto& rv = r.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] + rv[j];
    auto* pa = a.node().get();
    auto* pr = r.node().get();
    return detail::make_op<S>("add_rowvec", a.shape(), std::move(out), {a, r},
        [pa, pr, m, d](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            if (pr->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) pr->grad[j] += self.grad[i * d + j];
        });
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& a, const Tensor<S>& r) {
    detail::require_matrix("mul_rowvec", a);
    detail::require_matrix("mul_rowvec", r);
    if (r.rows() != 1 || r.cols() != a.cols())
        throw ShapeError("mul_rowvec: row vector " + shape_str(r.shape()) +
                         " does not broadcast over " + shape_str(a.shape()));
    std::size_t m = a.rows(), d = a.cols();
    std::vector<S> out(m * d);
    const auto& av = a.values();
    const auto& rv = r.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] * rv[j];
    auto* pa = a.node().get();
    auto* pr = r.node().get();
    return detail::make_op<S>("mul_rowvec", a.shape(), std::move(out), {a, r},
        [pa, pr, m, d](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        pa->grad[i * d + j] += self.grad[i * d + j] * pr->value[j];
            if (pr->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        pr->grad[j] += self.grad[i * d + j] * pa->value[i * d + j];
        });
}

// ---------------------------------------------------------------------------
// softmax family. Exponentials are max-shifted and accumulated in double so
// rows sum to 1 to near machine precision even for 32-bit tensors.

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    detail::require_matrix("softmax_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<S> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = av.data() + i * n;
        double mx = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        std::vector<double> e(n);
        for (std::size_t j = 0; j < n; ++j) {
            e[j] = std::exp(static_cast<double>(row[j]) - mx);
            denom += e[j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<S>(e[j] / denom);
    }
    auto* pa = a.node().get();
    return detail::make_op<S>("softmax_rows", a.shape(), std::move(out), {a},
        [pa, m, n](TensorNode<S>& self) {
            if (!pa->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i) {
                const S* p = self.value.data() + i * n;
                const S* g = self.grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += static_cast<double>(p[j]) * static_cast<double>(g[j]);
                for (std::size_t j = 0; j < n; ++j)
                    pa->grad[i * n + j] += p[j] * (g[j] - static_cast<S>(dot));
            }
        });
}

template <typename S>
Tensor<S> log_softmax_rows(const Tensor<S>& a) {
    detail::require_matrix("log_softmax_rows", a);
    std::size_t m = a.rows(), n = a.cols();
    std::vector<S> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = av.data() + i * n;
        double mx = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < n; ++j)
            out[i * n + j] = static_cast<S>(static_cast<double>(row[j]) - lse);
    }
    auto* pa = a.node().get();
    return detail::make_op<S>("log_softmax_rows", a.shape(), std::move(out), {a},
        [pa, m, n](TensorNode<S>& self) {
            if (!pa->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i) {
                const S* lp = self.value.data() + i * n;
                const S* g = self.grad.data() + i * n;
                double gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) gsum += static_cast<double>(g[j]);
                for (std::size_t j = 0; j < n; ++j) {
                    double p = std::exp(static_cast<double>(lp[j]));
                    pa->grad[i * n + j] += g[j] - static_cast<S>(p * gsum);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// slicing and concatenation (matrices only)

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t start, std::size_t len) {
    detail::require_matrix("slice_cols", a);
    if (len == 0 || start + len > a.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape()));
    std::size_t m = a.rows(), n = a.cols();
    std::vector<S> out(m * len);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = av[i * n + start + j];
    auto* pa = a.node().get();
    return detail::make_op<S>("slice_cols", {m, len}, std::move(out), {a},
        [pa, m, n, start, len](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < len; ++j)
                        pa->grad[i * n + start + j] += self.grad[i * len + j];
        });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t start, std::size_t len) {
    detail::require_matrix("slice_rows", a);
    if (len == 0 || start + len > a.rows())
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape()));
    std::size_t n = a.cols();
    std::vector<S> out(len * n);
    const auto& av = a.values();
    std::copy(av.begin() + start * n, av.begin() + (start + len) * n, out.begin());
    auto* pa = a.node().get();
    return detail::make_op<S>("slice_rows", {len, n}, std::move(out), {a},
        [pa, n, start, len](TensorNode<S>& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < len * n; ++i)
                    pa->grad[start * n + i] += self.grad[i];
        });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    std::size_t m = 0, total = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        detail::require_matrix("concat_cols", parts[i]);
        if (i == 0) m = parts[i].rows();
        else if (parts[i].rows() != m)
            throw ShapeError("concat_cols: row count mismatch " +
                             shape_str(parts[0].shape()) + " vs " + shape_str(parts[i].shape()));
        total += parts[i].cols();
    }
    std::vector<S> out(m * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t w = p.cols();
        const auto& pv = p.values();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(pv.begin() + i * w, pv.begin() + (i + 1) * w,
                      out.begin() + i * total + off);
        off += w;
    }
    std::vector<TensorNode<S>*> raw;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        raw.push_back(p.node().get());
        widths.push_back(p.cols());
    }
    return detail::make_op<S>("concat_cols", {m, total}, std::move(out), parts,
        [raw, widths, m, total](TensorNode<S>& self) {
            std::size_t off2 = 0;
            for (std::size_t k = 0; k < raw.size(); ++k) {
                std::size_t w = widths[k];
                if (raw[k]->requires_grad)
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            raw[k]->grad[i * w + j] += self.grad[i * total + off2 + j];
                off2 += w;
            }
        });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    std::size_t n = 0, total = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        detail::require_matrix("concat_rows", parts[i]);
        if (i == 0) n = parts[i].cols();
        else if (parts[i].cols() != n)
            throw ShapeError("concat_rows: column count mismatch " +
                             shape_str(parts[0].shape()) + " vs " + shape_str(parts[i].shape()));
        total += parts[i].rows();
    }
    std::vector<S> out;
    out.reserve(total * n);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<TensorNode<S>*> raw;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        raw.push_back(p.node().get());
        heights.push_back(p.rows());
    }
    return detail::make_op<S>("concat_rows", {total, n}, std::move(out), parts,
        [raw, heights, n](TensorNode<S>& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < raw.size(); ++k) {
                std::size_t cnt = heights[k] * n;
                if (raw[k]->requires_grad)
                    for (std::size_t i = 0; i < cnt; ++i)
                        raw[k]->grad[i] += self.grad[off + i];
                off += cnt;
            }
        });
}

// Gathers rows of an embedding table; gradient scatter-adds back into it.
template <typename S>
Tensor<S> embedding_rows(const Tensor<S>& table, const std::vector<int>& ids) {
    detail::require_matrix("embedding_rows", table);
    if (ids.empty()) throw ShapeError("embedding_rows: no ids");
    std::size_t v = table.rows(), d = table.cols();
    std::vector<S> out(ids.size() * d);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw ContractError("embedding_rows: id " + std::to_string(id) +
                                " out of range for table with " + std::to_string(v) + " rows");
        std::copy(tv.begin() + id * d, tv.begin() + (id + 1) * d, out.begin() + i * d);
    }
    auto* pt = table.node().get();
    return detail::make_op<S>("embedding_rows", {ids.size(), d}, std::move(out), {table},
        [pt, ids, d](TensorNode<S>& self) {
            if (pt->requires_grad)
                for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        pt->grad[ids[i] * d + j] += self.grad[i * d + j];
        });
}

// ---------------------------------------------------------------------------
// backward

template <typename S>
void backward(const Tensor<S>& root) {
    if (!root.valid()) throw ContractError("backward: empty tensor");
    if (root.numel() != 1)
        throw ShapeError("backward: root " + shape_str(root.shape()) + " is not a scalar");
    if (!root.requires_grad())
        throw ContractError("backward: root does not require gradients");
    TensorNode<S>* rn = root.node().get();
    if (rn->backward_done)
        throw ContractError("backward: already ran for this result; build a new graph");

    // Iterative post-order over grad-requiring ancestors.
    std::vector<TensorNode<S>*> topo;
    std::unordered_set<TensorNode<S>*> visited;
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
    stack.emplace_back(rn, 0);
    visited.insert(rn);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<S>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode<S>* n : topo) n->ensure_grad();
    rn->grad[0] += S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode<S>* n = *it;
        if (n->backprop) n->backprop(*n);
    }
    rn->backward_done = true;
}

// ---------------------------------------------------------------------------
// linear layer and batch norm, shared by every module downstream

template <typename S>
struct LinearParams {
    Tensor<S> weight; // [in x out]
    Tensor<S> bias;   // [1 x out]
};

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const LinearParams<S>& p) {
    return add_rowvec(matmul(x, p.weight), p.bias);
}

struct ForwardMode {
    bool training = false;
    bool update_bn = false;
    static ForwardMode train() { return {true, true}; }
    static ForwardMode train_frozen() { return {true, false}; }
    static ForwardMode eval() { return {false, false}; }
};

template <typename S>
struct BnParams {
    Tensor<S> gamma; // [1 x d]
    Tensor<S> beta;  // [1 x d]
};

// Non-trainable statistics carried between forward passes.
template <typename S>
struct BnState {
    Tensor<S> running_mean; // [1 x d]
    Tensor<S> running_var;  // [1 x d]
    S momentum = S(0.1);
    S eps = S(1e-5);
};

// Batch normalization over the row dimension of [m x d]. Training mode with
// m > 1 uses biased batch statistics and (optionally) folds them into the
// running estimates; eval mode, or a single-row batch, normalizes with the
// running estimates and never updates them.
template <typename S>
Tensor<S> batchnorm_rows(const Tensor<S>& x, const BnParams<S>& p, BnState<S>& state,
                         ForwardMode mode) {
    detail::require_matrix("batchnorm_rows", x);
    std::size_t m = x.rows(), d = x.cols();
    if (p.gamma.cols() != d || state.running_mean.cols() != d)
        throw ShapeError("batchnorm_rows: parameter width does not match input " +
                         shape_str(x.shape()));
    if (mode.training && m > 1) {
        Tensor<S> mean = mean_rows(x);
        Tensor<S> centered = add_rowvec(x, neg(mean));
        Tensor<S> var = mean_rows(mul(centered, centered));
        if (mode.update_bn) {
            auto& rm = state.running_mean.values();
            auto& rv = state.running_var.values();
            const auto& mv = mean.values();
            const auto& vv = var.values();
            S mom = state.momentum;
            for (std::size_t j = 0; j < d; ++j) {
                rm[j] = (S(1) - mom) * rm[j] + mom * mv[j];
                rv[j] = (S(1) - mom) * rv[j] + mom * vv[j];
            }
        }
        Tensor<S> inv = rsqrt(add_scalar(var, state.eps));
        Tensor<S> xhat = mul_rowvec(centered, inv);
        return add_rowvec(mul_rowvec(xhat, p.gamma), p.beta);
    }
    Tensor<S> inv = rsqrt(add_scalar(state.running_var, state.eps));
    Tensor<S> centered = add_rowvec(x, neg(state.running_mean));
    Tensor<S> xhat = mul_rowvec(centered, inv);
    return add_rowvec(mul_rowvec(xhat, p.gamma), p.beta);
}

// Index of the largest value; ties resolve to the lowest index.
template <typename S>
std::size_t argmax(const std::vector<S>& v) {
    if (v.empty()) throw ContractError("argmax: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace kags

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "espt/tensor.hpp"

namespace espt {

/// One recorded value in the computation graph. Leaves carry no parents;
/// interior nodes carry the parents they were computed from and the rule
/// that pushes their gradient back into those parents.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    const Shape& shape() const { return value.shape(); }
    std::size_t numel() const { return value.numel(); }
    bool is_leaf() const { return parents.empty(); }

    void accumulate(std::span<const T> g) {
        if (grad.numel() == 0) grad = Tensor<T>(value.shape());
        auto dst = grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    // Pointer to a gradient buffer the caller may add into directly.
    T* grad_buffer() {
        if (grad.numel() == 0) grad = Tensor<T>(value.shape());
        return grad.data().data();
    }

    void zero_grad() {
        if (grad.numel() != 0) grad.fill(T{0});
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return leaf(std::move(value), false);
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// While alive, operations on this thread record no graph.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Records an interior node. Parents that do not require gradients are
/// dropped, and when none remain the node is a constant.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward,
                 const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    if (!grad_enabled()) return n;
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    return n;
}

/// Nodes reachable from `root` through gradient-carrying edges, parents first.
template <typename T>
std::vector<Node<T>*> topological_order(const Var<T>& root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!root->requires_grad) return order;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate;
/// interior gradients are reset first so a graph can be swept again.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss->numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss->shape()));
    }
    auto order = topological_order(loss);
    for (auto* n : order) {
        if (!n->is_leaf()) n->zero_grad();
    }
    if (order.empty()) return;
    loss->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.numel() != 0) n->backward_fn(*n);
    }
}

/// Identity on values; blocks all gradient flow into `x`.
template <typename T>
Var<T> stop_grad(const Var<T>& x) {
    return constant(x->value);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a->shape(), b->shape(), "add");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) a->accumulate(self.grad.data());
        if (b->requires_grad) b->accumulate(self.grad.data());
    }, "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a->shape(), b->shape(), "sub");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) a->accumulate(self.grad.data());
        if (b->requires_grad) {
            T* g = b->grad_buffer();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] -= self.grad[i];
        }
    }, "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a->shape(), b->shape(), "mul");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) {
            T* g = a->grad_buffer();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            T* g = b->grad_buffer();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * a->value[i];
        }
    }, "mul");
}

/// Multiplication by a fixed constant.
template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a->value;
    for (auto& v : out.vec()) v *= c;
    return make_node<T>(std::move(out), {a}, [a, c](Node<T>& self) {
        T* g = a->grad_buffer();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += c * self.grad[i];
    }, "scale");
}

/// Multiplication of every element of `a` by the single element of `s`.
template <typename T>
Var<T> scale_by(const Var<T>& s, const Var<T>& a) {
    if (s->numel() != 1) throw ContractError("scale_by: scale must have one element");
    const T c = s->value[0];
    Tensor<T> out = a->value;
    for (auto& v : out.vec()) v *= c;
    return make_node<T>(std::move(out), {s, a}, [s, a, c](Node<T>& self) {
        if (s->requires_grad) {
            T acc{0};
            for (std::size_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * a->value[i];
            s->grad_buffer()[0] += acc;
        }
        if (a->requires_grad) {
            T* g = a->grad_buffer();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += c * self.grad[i];
        }
    }, "scale_by");
}

template <typename T>
Var<T> square(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& v : out.vec()) v *= v;
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) {
        T* g = a->grad_buffer();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += T{2} * a->value[i] * self.grad[i];
    }, "square");
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc{0};
    for (auto v : a->value.data()) acc += v;
    return make_node<T>(Tensor<T>::scalar(acc), {a}, [a](Node<T>& self) {
        const T g0 = self.grad[0];
        T* g = a->grad_buffer();
        for (std::size_t i = 0; i < a->numel(); ++i) g[i] += g0;
    }, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T{1} / static_cast<T>(a->numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a->value.reshaped(std::move(shape));
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) { a->accumulate(self.grad.data()); }, "reshape");
}

/// Rows [begin, end) along the leading axis.
template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end) {
    const std::size_t rows = a->shape()[0];
    if (begin >= end || end > rows) {
        throw ContractError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") outside " + std::to_string(rows) + " rows");
    }
    const std::size_t stride = a->numel() / rows;
    Shape shape = a->shape();
    shape[0] = end - begin;
    std::vector<T> data(a->value.vec().begin() + begin * stride, a->value.vec().begin() + end * stride);
    return make_node<T>(Tensor<T>(std::move(shape), std::move(data)), {a}, [a, begin, stride](Node<T>& self) {
        T* g = a->grad_buffer() + begin * stride;
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }, "slice_rows");
}

/// Concatenation along the leading axis.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    Shape shape = parts[0]->shape();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        Shape s = p->shape();
        if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
            throw ContractError("concat_rows: incompatible shapes " + shape_str(s) + " vs " + shape_str(shape));
        }
        rows += s[0];
    }
    shape[0] = rows;
    std::vector<T> data;
    data.reserve(shape_numel(shape));
    for (const auto& p : parts) data.insert(data.end(), p->value.vec().begin(), p->value.vec().end());
    return make_node<T>(Tensor<T>(std::move(shape), std::move(data)), parts, [parts](Node<T>& self) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) p->accumulate(self.grad.data().subspan(off, p->numel()));
            off += p->numel();
        }
    }, "concat_rows");
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
    return ConstMatMap<T>(t.data().data(), t.dim(0), t.numel() / t.dim(0));
}

/// op(a)·op(b) for rank-2 tensors, where op transposes when requested.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
    if (a->value.rank() != 2 || b->value.rank() != 2) throw ContractError("matmul: operands must be rank 2");
    const std::size_t m = trans_a ? a->shape()[1] : a->shape()[0];
    const std::size_t ka = trans_a ? a->shape()[0] : a->shape()[1];
    const std::size_t kb = trans_b ? b->shape()[1] : b->shape()[0];
    const std::size_t n = trans_b ? b->shape()[0] : b->shape()[1];
    if (ka != kb) {
        throw ContractError("matmul: inner dimensions differ (" + std::to_string(ka) + " vs " + std::to_string(kb) + ")");
    }
    Tensor<T> out(Shape{m, n});
    MatMap<T> C(out.data().data(), m, n);
    auto A = as_matrix(a->value);
    auto B = as_matrix(b->value);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();

    return make_node<T>(std::move(out), {a, b}, [a, b, trans_a, trans_b, m, n](Node<T>& self) {
        ConstMatMap<T> G(self.grad.data().data(), m, n);
        auto A = as_matrix(a->value);
        auto B = as_matrix(b->value);
        if (a->requires_grad) {
            MatMap<T> GA(a->grad_buffer(), a->shape()[0], a->shape()[1]);
            // C = op(A) op(B): dop(A) = G op(B)^T
            if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
            else if (!trans_a && trans_b) GA.noalias() += G * B;
            else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
            else GA.noalias() += B.transpose() * G.transpose();
        }
        if (b->requires_grad) {
            MatMap<T> GB(b->grad_buffer(), b->shape()[0], b->shape()[1]);
            // dop(B) = op(A)^T G
            if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
            else if (trans_a && !trans_b) GB.noalias() += A * G;
            else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
            else GB.noalias() += G.transpose() * A.transpose();
        }
    }, "matmul");
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a->value.rank() != 2) throw ContractError("transpose: operand must be rank 2");
    const std::size_t m = a->shape()[0], n = a->shape()[1];
    Tensor<T> out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->value[i * n + j];
    return make_node<T>(std::move(out), {a}, [a, m, n](Node<T>& self) {
        T* g = a->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }, "transpose");
}

/// Sum of each row: m×n -> m.
template <typename T>
Var<T> row_sum(const Var<T>& a) {
    const std::size_t m = a->shape()[0], n = a->numel() / m;
    Tensor<T> out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += a->value[i * n + j];
        out[i] = s;
    }
    return make_node<T>(std::move(out), {a}, [a, m, n](Node<T>& self) {
        T* g = a->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
    }, "row_sum");
}

/// a + c·I for a square matrix.
template <typename T>
Var<T> add_identity(const Var<T>& a, T c) {
    if (a->value.rank() != 2 || a->shape()[0] != a->shape()[1]) {
        throw ContractError("add_identity: matrix must be square, got " + shape_str(a->shape()));
    }
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.dim(0); ++i) out.at(i, i) += c;
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) { a->accumulate(self.grad.data()); },
                        "add_identity");
}

/// Adds a length-n bias to every row of an m×n matrix.
template <typename T>
Var<T> add_row_bias(const Var<T>& a, const Var<T>& bias) {
    const std::size_t m = a->shape()[0], n = a->numel() / m;
    if (bias->numel() != n) throw ContractError("add_row_bias: bias length mismatch");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias->value[j];
    return make_node<T>(std::move(out), {a, bias}, [a, bias, m, n](Node<T>& self) {
        if (a->requires_grad) a->accumulate(self.grad.data());
        if (bias->requires_grad) {
            T* g = bias->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
    }, "add_row_bias");
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits[row])[label[row]].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::vector<std::size_t> labels) {
    if (logits->value.rank() != 2) throw ContractError("softmax_cross_entropy: logits must be rank 2");
    const std::size_t rows = logits->shape()[0], cols = logits->shape()[1];
    if (labels.size() != rows) throw ContractError("softmax_cross_entropy: label count mismatch");
    Tensor<T> probs(Shape{rows, cols});
    T loss{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] >= cols) throw ContractError("softmax_cross_entropy: label out of range");
        const T* z = &logits->value[r * cols];
        T mx = *std::max_element(z, z + cols);
        T denom{0};
        for (std::size_t c = 0; c < cols; ++c) denom += std::exp(z[c] - mx);
        const T log_denom = std::log(denom);
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(z[c] - mx - log_denom);
        loss -= z[labels[r]] - mx - log_denom;
    }
    loss /= static_cast<T>(rows);
    return make_node<T>(Tensor<T>::scalar(loss), {logits},
                        [logits, probs = std::move(probs), labels = std::move(labels), rows, cols](Node<T>& self) {
        const T g0 = self.grad[0] / static_cast<T>(rows);
        T* g = logits->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                T d = probs[r * cols + c] - (c == labels[r] ? T{1} : T{0});
                g[r * cols + c] += g0 * d;
            }
        }
    }, "softmax_cross_entropy");
}

}  // namespace espt

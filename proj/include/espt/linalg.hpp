#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "espt/autograd.hpp"

namespace espt {

class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Lower-triangular factor L of a symmetric positive-definite A = L·Lᵀ.
/// Only the lower triangle of A is read.
template <typename T>
class Cholesky {
public:
    explicit Cholesky(const Tensor<T>& a) {
        if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
            throw SolverError("solve_spd: matrix must be square, got " + shape_str(a.shape()));
        }
        n_ = a.dim(0);
        l_.assign(n_ * n_, T{0});
        for (std::size_t j = 0; j < n_; ++j) {
            T d = a.at(j, j);
            for (std::size_t k = 0; k < j; ++k) d -= l_[j * n_ + k] * l_[j * n_ + k];
            if (!(d > T{0}) || !std::isfinite(d)) {
                throw SolverError("solve_spd: matrix not positive definite (pivot " + std::to_string(j) +
                                  " of " + std::to_string(n_) + " is " + std::to_string(static_cast<double>(d)) + ")");
            }
            const T ljj = std::sqrt(d);
            l_[j * n_ + j] = ljj;
            for (std::size_t i = j + 1; i < n_; ++i) {
                T s = a.at(i, j);
                for (std::size_t k = 0; k < j; ++k) s -= l_[i * n_ + k] * l_[j * n_ + k];
                l_[i * n_ + j] = s / ljj;
            }
        }
    }

    std::size_t size() const { return n_; }

    /// Solves A·X = B for an n×m right-hand side.
    Tensor<T> solve(const Tensor<T>& b) const {
        if (b.rank() != 2 || b.dim(0) != n_) {
            throw SolverError("solve_spd: right-hand side has " + std::to_string(b.dim(0)) + " rows, matrix has " +
                              std::to_string(n_));
        }
        const std::size_t m = b.dim(1);
        Tensor<T> x = b;
        // forward substitution L·Y = B
        for (std::size_t i = 0; i < n_; ++i) {
            T* xi = &x[i * m];
            for (std::size_t k = 0; k < i; ++k) {
                const T lik = l_[i * n_ + k];
                const T* xk = &x[k * m];
                for (std::size_t c = 0; c < m; ++c) xi[c] -= lik * xk[c];
            }
            const T inv = T{1} / l_[i * n_ + i];
            for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
        }
        // back substitution Lᵀ·X = Y
        for (std::size_t ii = n_; ii-- > 0;) {
            T* xi = &x[ii * m];
            for (std::size_t k = ii + 1; k < n_; ++k) {
                const T lki = l_[k * n_ + ii];
                const T* xk = &x[k * m];
                for (std::size_t c = 0; c < m; ++c) xi[c] -= lki * xk[c];
            }
            const T inv = T{1} / l_[ii * n_ + ii];
            for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
        }
        return x;
    }

private:
    std::size_t n_ = 0;
    std::vector<T> l_;
};

/// X with A·X = B for symmetric positive-definite A. The factorization is
/// kept for the backward pass: dB = A⁻¹·G and dA = -dB·Xᵀ.
template <typename T>
Var<T> solve_spd(const Var<T>& a, const Var<T>& b) {
    if (b->value.rank() != 2) throw SolverError("solve_spd: right-hand side must be rank 2");
    auto chol = std::make_shared<const Cholesky<T>>(a->value);
    Tensor<T> x = chol->solve(b->value);
    const std::size_t n = chol->size(), m = b->shape()[1];
    auto node = make_node<T>(std::move(x), {a, b}, nullptr, "solve_spd");
    if (node->requires_grad) {
        node->backward_fn = [a, b, chol, n, m](Node<T>& self) {
            Tensor<T> gb = chol->solve(self.grad);
            if (b->requires_grad) b->accumulate(gb.data());
            if (a->requires_grad) {
                ConstMatMap<T> GB(gb.data().data(), n, m);
                ConstMatMap<T> X(self.value.data().data(), n, m);
                MatMap<T> GA(a->grad_buffer(), n, n);
                GA.noalias() -= GB * X.transpose();
            }
        };
    }
    return node;
}

}  // namespace espt

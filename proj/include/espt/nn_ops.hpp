#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "espt/autograd.hpp"

namespace espt {

namespace detail {

inline void require_rank4(const Shape& s, const char* op) {
    if (s.size() != 4) throw ContractError(std::string(op) + ": expected N×C×H×W input, got " + shape_str(s));
}

// Unfolds one C×H×W image into a (C·K·K)×(H·W) matrix, zero padding K/2.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* cols) {
    const long pad = static_cast<long>(k / 2);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = cols + ((ch * k + ki) * k + kj) * h * w;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y + ki) - pad;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long sx = static_cast<long>(x + kj) - pad;
                        row[y * w + x] = (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w))
                                             ? img[(ch * h + sy) * w + sx]
                                             : T{0};
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* img) {
    const long pad = static_cast<long>(k / 2);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = cols + ((ch * k + ki) * k + kj) * h * w;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y + ki) - pad;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long sx = static_cast<long>(x + kj) - pad;
                        if (sx >= 0 && sx < static_cast<long>(w)) img[(ch * h + sy) * w + sx] += row[y * w + x];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Stride-1 "same" convolution without bias. x: N×C×H×W, weight: O×C×K×K, K odd.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight) {
    detail::require_rank4(x->shape(), "conv2d");
    detail::require_rank4(weight->shape(), "conv2d");
    const std::size_t n = x->shape()[0], c = x->shape()[1], h = x->shape()[2], w = x->shape()[3];
    const std::size_t o = weight->shape()[0], k = weight->shape()[2];
    if (weight->shape()[1] != c) {
        throw ContractError("conv2d: weight expects " + std::to_string(weight->shape()[1]) + " input channels, got " +
                            std::to_string(c));
    }
    if (k % 2 == 0 || weight->shape()[3] != k) throw ContractError("conv2d: kernel must be square with odd side");
    const std::size_t ckk = c * k * k, hw = h * w;

    Tensor<T> out(Shape{n, o, h, w});
    ConstMatMap<T> W(weight->value.data().data(), o, ckk);
    std::shared_ptr<std::vector<T>> cols;
    if (k > 1) {
        cols = std::make_shared<std::vector<T>>(n * ckk * hw);
        for (std::size_t i = 0; i < n; ++i) {
            detail::im2col(&x->value[i * c * hw], c, h, w, k, cols->data() + i * ckk * hw);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const T* src = k > 1 ? cols->data() + i * ckk * hw : &x->value[i * c * hw];
        ConstMatMap<T> X(src, ckk, hw);
        MatMap<T> Y(&out[i * o * hw], o, hw);
        Y.noalias() = W * X;
    }

    return make_node<T>(std::move(out), {x, weight}, [x, weight, cols, n, c, h, w, o, k, ckk, hw](Node<T>& self) {
        ConstMatMap<T> W(weight->value.data().data(), o, ckk);
        std::vector<T> gcols(k > 1 ? ckk * hw : 0);
        for (std::size_t i = 0; i < n; ++i) {
            ConstMatMap<T> G(&self.grad[i * o * hw], o, hw);
            const T* src = k > 1 ? cols->data() + i * ckk * hw : &x->value[i * c * hw];
            if (weight->requires_grad) {
                ConstMatMap<T> X(src, ckk, hw);
                MatMap<T> GW(weight->grad_buffer(), o, ckk);
                GW.noalias() += G * X.transpose();
            }
            if (x->requires_grad) {
                if (k > 1) {
                    MatMap<T> GC(gcols.data(), ckk, hw);
                    GC.noalias() = W.transpose() * G;
                    detail::col2im_add(gcols.data(), c, h, w, k, x->grad_buffer() + i * c * hw);
                } else {
                    MatMap<T> GX(x->grad_buffer() + i * c * hw, c, hw);
                    GX.noalias() += W.transpose() * G;
                }
            }
        }
    }, "conv2d");
}

/// Per-channel normalization with statistics over (N, H, W) of this batch,
/// followed by a per-channel affine map.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    detail::require_rank4(x->shape(), "batch_norm");
    const std::size_t n = x->shape()[0], c = x->shape()[1], hw = x->shape()[2] * x->shape()[3];
    if (gamma->numel() != c || beta->numel() != c) throw ContractError("batch_norm: affine parameters need one entry per channel");
    const T m = static_cast<T>(n * hw);

    Tensor<T> out(x->shape());
    Tensor<T> xhat(x->shape());
    std::vector<T> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        T mu{0};
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = &x->value[(i * c + ch) * hw];
            for (std::size_t j = 0; j < hw; ++j) mu += p[j];
        }
        mu /= m;
        T var{0};
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = &x->value[(i * c + ch) * hw];
            for (std::size_t j = 0; j < hw; ++j) var += (p[j] - mu) * (p[j] - mu);
        }
        var /= m;
        const T is = T{1} / std::sqrt(var + eps);
        inv_std[ch] = is;
        const T g = gamma->value[ch], b = beta->value[ch];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const T xh = (x->value[base + j] - mu) * is;
                xhat[base + j] = xh;
                out[base + j] = g * xh + b;
            }
        }
    }

    return make_node<T>(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, m](Node<T>& self) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T sum_g{0}, sum_gx{0};
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t base = (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) {
                    sum_g += self.grad[base + j];
                    sum_gx += self.grad[base + j] * xhat[base + j];
                }
            }
            if (gamma->requires_grad) gamma->grad_buffer()[ch] += sum_gx;
            if (beta->requires_grad) beta->grad_buffer()[ch] += sum_g;
            if (x->requires_grad) {
                const T g = gamma->value[ch];
                const T k = g * inv_std[ch] / m;
                T* gx = x->grad_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t base = (i * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        gx[base + j] += k * (m * self.grad[base + j] - sum_g - xhat[base + j] * sum_gx);
                    }
                }
            }
        }
    }, "batch_norm");
}

/// Records which linear piece every piecewise-linear op selected, as one
/// hash per op call. Finite-difference checks compare traces to detect
/// probes that straddle a kink. Off unless a PieceTrace is installed.
struct PieceTrace {
    std::vector<std::uint64_t> hashes;

    PieceTrace() : previous_(active()) { active() = this; }
    ~PieceTrace() { active() = previous_; }
    PieceTrace(const PieceTrace&) = delete;
    PieceTrace& operator=(const PieceTrace&) = delete;

    static PieceTrace*& active() {
        thread_local PieceTrace* current = nullptr;
        return current;
    }

    template <typename F>
    static void record(std::size_t count, F&& piece_of) {
        PieceTrace* t = active();
        if (!t) return;
        std::uint64_t h = 1469598103934665603ull;
        for (std::size_t i = 0; i < count; ++i) {
            h ^= static_cast<std::uint64_t>(piece_of(i));
            h *= 1099511628211ull;
        }
        t->hashes.push_back(h);
    }

private:
    PieceTrace* previous_;
};

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.1)) {
    Tensor<T> out = x->value;
    for (auto& v : out.vec()) v = v > T{0} ? v : slope * v;
    PieceTrace::record(out.numel(), [&](std::size_t i) { return x->value[i] > T{0}; });
    return make_node<T>(std::move(out), {x}, [x, slope](Node<T>& self) {
        T* g = x->grad_buffer();
        for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += x->value[i] > T{0} ? self.grad[i] : slope * self.grad[i];
    }, "leaky_relu");
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
    detail::require_rank4(x->shape(), "max_pool2");
    const std::size_t n = x->shape()[0], c = x->shape()[1], h = x->shape()[2], w = x->shape()[3];
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw ContractError("max_pool2: input " + shape_str(x->shape()) + " too small to pool");
    Tensor<T> out(Shape{n, c, oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const T* src = &x->value[plane * h * w];
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                std::size_t best = (2 * y) * w + 2 * xx;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = (2 * y + dy) * w + 2 * xx + dx;
                        if (src[idx] > src[best]) best = idx;
                    }
                const std::size_t o = plane * oh * ow + y * ow + xx;
                out[o] = src[best];
                argmax[o] = plane * h * w + best;
            }
        }
    }
    PieceTrace::record(argmax.size(), [&](std::size_t i) { return argmax[i]; });
    return make_node<T>(std::move(out), {x}, [x, argmax = std::move(argmax)](Node<T>& self) {
        T* g = x->grad_buffer();
        for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
    }, "max_pool2");
}

/// N×C×H×W -> N×H×W×C.
template <typename T>
Var<T> channels_last(const Var<T>& x) {
    detail::require_rank4(x->shape(), "channels_last");
    const std::size_t n = x->shape()[0], c = x->shape()[1], hw = x->shape()[2] * x->shape()[3];
    Tensor<T> out(Shape{n, x->shape()[2], x->shape()[3], c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) out[(i * hw + p) * c + ch] = x->value[(i * c + ch) * hw + p];
    return make_node<T>(std::move(out), {x}, [x, n, c, hw](Node<T>& self) {
        T* g = x->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) g[(i * c + ch) * hw + p] += self.grad[(i * hw + p) * c + ch];
    }, "channels_last");
}

/// N×C×H×W -> N×C mean over the spatial grid.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    detail::require_rank4(x->shape(), "global_avg_pool");
    const std::size_t nc = x->shape()[0] * x->shape()[1], hw = x->shape()[2] * x->shape()[3];
    Tensor<T> out(Shape{x->shape()[0], x->shape()[1]});
    for (std::size_t i = 0; i < nc; ++i) {
        T s{0};
        for (std::size_t p = 0; p < hw; ++p) s += x->value[i * hw + p];
        out[i] = s / static_cast<T>(hw);
    }
    return make_node<T>(std::move(out), {x}, [x, nc, hw](Node<T>& self) {
        T* g = x->grad_buffer();
        for (std::size_t i = 0; i < nc; ++i) {
            const T gi = self.grad[i] / static_cast<T>(hw);
            for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] += gi;
        }
    }, "global_avg_pool");
}

}  // namespace espt

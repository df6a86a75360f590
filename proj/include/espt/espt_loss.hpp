#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "espt/autograd.hpp"
#include "espt/backbone.hpp"
#include "espt/episodes.hpp"
#include "espt/linalg.hpp"
#include "espt/transforms.hpp"

namespace espt {

struct EsptHyperparams {
    double lambda_bar = 1.0;
    double alpha = 0.3;

    void validate() const {
        if (!(lambda_bar > 0.0)) throw ConfigError("lambda_bar must be positive");
        if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    }

    bool operator==(const EsptHyperparams&) const = default;
};

/// Ridge strength scaled by the size of the reconstruction problem:
/// λ = (k·h·w / d)·λ̄.
inline double effective_lambda(std::size_t k, std::size_t h, std::size_t w, std::size_t d, double lambda_bar) {
    return static_cast<double>(k * h * w) / static_cast<double>(d) * lambda_bar;
}

/// Rows [c·k·h·w, (c+1)·k·h·w) of the stacked support locations: the
/// k·h·w × d matrix of class c, ordered by (support sample, row-major cell).
template <typename T>
Var<T> class_matrix(const Var<T>& support_maps, std::size_t c, std::size_t k) {
    const Shape& s = support_maps->shape();
    if (s.size() != 4) throw ContractError("class_matrix: support maps must be N×h×w×d");
    const std::size_t hw = s[1] * s[2], d = s[3];
    auto flat = reshape(support_maps, Shape{s[0] * hw, d});
    return slice_rows(flat, c * k * hw, (c + 1) * k * hw);
}

/// Reconstruction coefficients of every query location against one class:
/// W = (X·Xᵀ + λI)⁻¹ X·Fᵀ, one column per row of `locations` (m × d).
/// Result is khw × m.
template <typename T>
Var<T> ridge_coefficients(const Var<T>& class_mat, const Var<T>& locations, double lambda) {
    if (class_mat->shape()[1] != locations->shape()[1]) {
        throw ContractError("ridge_coefficients: feature dims differ (" + std::to_string(class_mat->shape()[1]) +
                            " vs " + std::to_string(locations->shape()[1]) + ")");
    }
    auto gram = add_identity(matmul(class_mat, class_mat, false, true), static_cast<T>(lambda));
    auto rhs = matmul(class_mat, locations, false, true);
    return solve_spd(gram, rhs);
}

/// Negative mean squared reconstruction residual per query:
/// locations is (q·hw) × d, coefficients khw × (q·hw); returns q values.
template <typename T>
Var<T> class_logits(const Var<T>& locations, const Var<T>& class_mat, const Var<T>& coefficients, std::size_t hw) {
    auto recon = matmul(coefficients, class_mat, true, false);  // (q·hw) × d
    auto sq = square(sub(locations, recon));
    const std::size_t q = locations->shape()[0] / hw;
    auto per_query = row_sum(reshape(sq, Shape{q, hw * locations->shape()[1]}));
    return scale(per_query, static_cast<T>(-1.0 / static_cast<double>(hw)));
}

/// Softmax of γ·logits with max subtraction.
inline std::vector<double> predict_proba(const std::vector<double>& logits, double gamma) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    double mx = gamma * logits[0];
    for (double z : logits) mx = std::max(mx, gamma * z);
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) denom += (p[i] = std::exp(gamma * logits[i] - mx));
    for (auto& v : p) v /= denom;
    return p;
}

/// 1 - cos between matching columns of two r×m matrices, with ‖·‖ + ε in
/// the denominator. Returns m values.
template <typename T>
Var<T> cosine_distance_columns(const Var<T>& a, const Var<T>& b, T eps = T(1e-12)) {
    detail::require_same_shape(a->shape(), b->shape(), "cosine_distance_columns");
    const std::size_t r = a->shape()[0], m = a->shape()[1];
    std::vector<T> na(m, T{0}), nb(m, T{0}), dot(m, T{0});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const T x = a->value[i * m + j], y = b->value[i * m + j];
            na[j] += x * x;
            nb[j] += y * y;
            dot[j] += x * y;
        }
    }
    Tensor<T> out(Shape{m});
    for (std::size_t j = 0; j < m; ++j) {
        na[j] = std::sqrt(na[j]);
        nb[j] = std::sqrt(nb[j]);
        out[j] = T{1} - dot[j] / ((na[j] + eps) * (nb[j] + eps));
    }
    return make_node<T>(std::move(out), {a, b}, [a, b, na, nb, dot, r, m, eps](Node<T>& self) {
        // d cos / d b = a / (Da·Db) - dot·b / (Da·Db²·‖b‖), Da = ‖a‖+ε, Db = ‖b‖+ε
        auto push = [&](const Var<T>& to, const Var<T>& other, const std::vector<T>& n_to,
                        const std::vector<T>& n_other) {
            T* g = to->grad_buffer();
            for (std::size_t j = 0; j < m; ++j) {
                const T dt = n_to[j] + eps, dn = n_other[j] + eps;
                const T c1 = T{1} / (dt * dn);
                const T c2 = n_to[j] > T{0} ? dot[j] / (dt * dt * dn * n_to[j]) : T{0};
                const T go = -self.grad[j];
                for (std::size_t i = 0; i < r; ++i) {
                    g[i * m + j] += go * (other->value[i * m + j] * c1 - to->value[i * m + j] * c2);
                }
            }
        };
        if (a->requires_grad) push(a, b, na, nb);
        if (b->requires_grad) push(b, a, nb, na);
    }, "cosine_distance_columns");
}

/// Per-query spatial consistency: for query q, the mean over its hw
/// locations of the sum over classes of dis(sg[w], wᵗ). Coefficient
/// matrices are khw × (q·hw), one per class. Returns q values.
template <typename T>
Var<T> consistency_losses(const std::vector<Var<T>>& original, const std::vector<Var<T>>& transformed, std::size_t hw,
                          bool stop_gradient = true) {
    if (original.size() != transformed.size() || original.empty()) {
        throw ContractError("consistency_losses: need matching, nonempty coefficient sets");
    }
    Var<T> acc;
    for (std::size_t c = 0; c < original.size(); ++c) {
        auto src = stop_gradient ? stop_grad(original[c]) : original[c];
        auto dist = cosine_distance_columns(src, transformed[c]);
        acc = acc ? add(acc, dist) : dist;
    }
    const std::size_t q = acc->numel() / hw;
    return scale(row_sum(reshape(acc, Shape{q, hw})), static_cast<T>(1.0 / static_cast<double>(hw)));
}

/// Mean of the per-query consistency losses.
template <typename T>
Var<T> pretext_loss(const Var<T>& per_query) {
    return mean(per_query);
}

/// Cross-entropy of softmax(γ·logits) against episode labels, averaged
/// over queries. logits is q × n.
template <typename T>
Var<T> classification_loss(const Var<T>& logits, const Var<T>& gamma, const std::vector<std::size_t>& labels) {
    return softmax_cross_entropy(scale_by(gamma, logits), labels);
}

template <typename T>
Var<T> total_loss(const Var<T>& classification, const Var<T>& pretext, double alpha) {
    if (alpha < 0.0) throw ContractError("alpha must be non-negative");
    if (alpha == 0.0) return classification;
    return add(classification, scale(pretext, static_cast<T>(alpha)));
}

/// Coefficients and logits of one branch of one episode.
template <typename T>
struct BranchResult {
    std::vector<Var<T>> coefficients;  // per class, khw × (q·hw)
    Var<T> logits;                     // q × n
};

/// Ridge reconstruction of every query against every class.
/// support_maps: (n·k)×h×w×d class-major, query_maps: q×h×w×d.
template <typename T>
BranchResult<T> reconstruct_branch(const Var<T>& support_maps, const Var<T>& query_maps, std::size_t n, std::size_t k,
                                   double lambda_bar) {
    const Shape& ss = support_maps->shape();
    const Shape& qs = query_maps->shape();
    if (ss.size() != 4 || qs.size() != 4 || ss[1] != qs[1] || ss[2] != qs[2] || ss[3] != qs[3]) {
        throw ContractError("reconstruct_branch: support " + shape_str(ss) + " and query " + shape_str(qs) +
                            " maps disagree");
    }
    if (ss[0] != n * k) throw ContractError("reconstruct_branch: expected n·k support maps");
    const std::size_t h = ss[1], w = ss[2], d = ss[3], hw = h * w, q = qs[0];
    const double lambda = effective_lambda(k, h, w, d, lambda_bar);
    auto locations = reshape(query_maps, Shape{q * hw, d});

    BranchResult<T> out;
    std::vector<Var<T>> rows;
    for (std::size_t c = 0; c < n; ++c) {
        auto xc = class_matrix(support_maps, c, k);
        auto wc = ridge_coefficients(xc, locations, lambda);
        out.coefficients.push_back(wc);
        rows.push_back(reshape(class_logits(locations, xc, wc, hw), Shape{1, q}));
    }
    out.logits = transpose(concat_rows(rows));
    return out;
}

/// All loss terms of one training step on one episode.
template <typename T>
struct EsptLosses {
    Var<T> classification;
    Var<T> pretext;
    Var<T> total;
    Var<T> logits;  // original branch, q × n
    Var<T> per_query_consistency;
    BranchResult<T> original, transformed;
};

/// Two-branch forward. The original branch is T(f(x)), the transformed
/// branch f(T(x)); each branch is one backbone batch of support then query.
///
/// `frozen_original`, when given, replaces the original-branch coefficients
/// inside the consistency term by fixed values. Evaluating with the
/// coefficients of an unperturbed model gives the function whose ordinary
/// derivative equals the stop-gradient gradient, which is what
/// finite-difference checks need.
template <typename T>
EsptLosses<T> espt_losses(const Backbone<T>& model, const Episode& ep, int turns, const EsptHyperparams& hyper,
                          bool stop_gradient = true, const std::vector<Tensor<T>>* frozen_original = nullptr) {
    hyper.validate();
    const std::size_t nk = ep.way * ep.shot;
    const Tensor<T> support = ep.support.cast<T>();
    const Tensor<T> query = ep.query.cast<T>();
    const std::size_t nq = query.dim(0);

    auto batch_of = [](const Tensor<T>& a, const Tensor<T>& b) {
        return concat_rows<T>({constant(a), constant(b)});
    };

    auto maps = rotate_feature_map(model.forward(batch_of(support, query)), turns);
    auto maps_t = model.forward(batch_of(rotate_image(support, turns), rotate_image(query, turns)));

    EsptLosses<T> out;
    out.original = reconstruct_branch(slice_rows(maps, 0, nk), slice_rows(maps, nk, nk + nq), ep.way, ep.shot,
                                      hyper.lambda_bar);
    out.transformed = reconstruct_branch(slice_rows(maps_t, 0, nk), slice_rows(maps_t, nk, nk + nq), ep.way,
                                         ep.shot, hyper.lambda_bar);
    out.logits = out.original.logits;
    out.classification = classification_loss(out.logits, model.temperature(), ep.query_labels);
    const std::size_t hw = maps->shape()[1] * maps->shape()[2];
    std::vector<Var<T>> reference = out.original.coefficients;
    if (frozen_original) {
        if (frozen_original->size() != reference.size()) throw ContractError("espt_losses: frozen coefficient count");
        for (std::size_t c = 0; c < reference.size(); ++c) reference[c] = constant((*frozen_original)[c]);
    }
    out.per_query_consistency = consistency_losses(reference, out.transformed.coefficients, hw, stop_gradient);
    out.pretext = pretext_loss(out.per_query_consistency);
    out.total = total_loss(out.classification, out.pretext, hyper.alpha);
    return out;
}

/// Inference logits: original branch only, no transform. q × n.
template <typename T>
Tensor<T> episode_logits(const Backbone<T>& model, const Episode& ep, double lambda_bar) {
    const std::size_t nk = ep.way * ep.shot;
    const Tensor<T> support = ep.support.cast<T>();
    const Tensor<T> query = ep.query.cast<T>();
    auto maps = model.forward(concat_rows<T>({constant(support), constant(query)}));
    auto branch = reconstruct_branch(slice_rows(maps, 0, nk), slice_rows(maps, nk, nk + query.dim(0)), ep.way,
                                     ep.shot, lambda_bar);
    return branch.logits->value;
}

}  // namespace espt

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "espt/espt_loss.hpp"
#include "espt/nn_ops.hpp"

namespace espt {

/// Largest relative error per parameter tensor for each loss term.
struct GradcheckEntry {
    std::string name;
    std::size_t size = 0;
    std::array<double, 3> max_rel_error{};  // L_class, L_pretext, L_total
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double step = 0.0;
    double floor = 0.0;
    std::size_t coordinates = 0;
    std::size_t reprobed = 0;    // coordinates whose ±step probe straddled a kink
    std::size_t unresolved = 0;  // still straddling at the smallest step

    static constexpr std::array<const char*, 3> kLossNames{"L_class", "L_pretext", "L_total"};

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries)
            for (double v : e.max_rel_error) w = std::max(w, v);
        return w;
    }

    bool passed(double tolerance) const { return worst() < tolerance; }
};

/// |a − b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// derivative is ~0 from dividing roundoff by roundoff.
inline double relative_error(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares reverse-mode gradients of L_class, L_pretext and L_total with
/// respect to every parameter (backbone and temperature) against central
/// differences with step `h`. The stop-gradient is honored on the
/// numerical side by holding the original-branch coefficients at their
/// unperturbed values.
///
/// Leaky ReLU and max pooling are piecewise linear. A probe pair that
/// selects a different piece than the unperturbed point differentiates
/// across a kink, where the central difference is not an estimate of the
/// derivative; such coordinates are re-probed with the step divided by 10
/// until both probes stay on the base piece (down to `min_step`).
inline GradcheckReport gradient_check(Backbone<double>& model, const Episode& ep, int turns,
                                      const EsptHyperparams& hyper, double h = 1e-4, double floor = 1e-6,
                                      double min_step = 1e-8) {
    auto& params = model.params();
    std::array<std::vector<Tensor<double>>, 3> analytic;
    std::vector<Tensor<double>> frozen;
    for (std::size_t which = 0; which < 3; ++which) {
        params.zero_grad();
        auto losses = espt_losses(model, ep, turns, hyper);
        if (which == 0) {
            for (const auto& w : losses.original.coefficients) frozen.push_back(w->value);
        }
        const Var<double>& target = which == 0 ? losses.classification : which == 1 ? losses.pretext : losses.total;
        backward(target);
        for (const auto& p : params.items()) {
            analytic[which].push_back(p.var->grad.numel() ? p.var->grad : Tensor<double>(p.var->shape()));
        }
    }

    auto evaluate = [&](std::vector<std::uint64_t>* pieces) {
        NoGradGuard no_grad;
        PieceTrace trace;
        auto l = espt_losses(model, ep, turns, hyper, true, &frozen);
        if (pieces) *pieces = std::move(trace.hashes);
        return std::array<double, 3>{l.classification->value[0], l.pretext->value[0], l.total->value[0]};
    };
    std::vector<std::uint64_t> base_pieces, up_pieces, down_pieces;
    (void)evaluate(&base_pieces);

    GradcheckReport report;
    report.step = h;
    report.floor = floor;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params.items()[k];
        GradcheckEntry entry{p.name, p.var->numel(), {}};
        for (std::size_t i = 0; i < p.var->numel(); ++i) {
            const double orig = p.var->value[i];
            double step = h;
            std::array<double, 3> up{}, down{};
            for (;;) {
                p.var->value[i] = orig + step;
                up = evaluate(&up_pieces);
                p.var->value[i] = orig - step;
                down = evaluate(&down_pieces);
                p.var->value[i] = orig;
                const bool smooth = up_pieces == base_pieces && down_pieces == base_pieces;
                if (step == h && !smooth) ++report.reprobed;
                if (smooth) break;
                if (step / 10.0 < min_step) {
                    ++report.unresolved;
                    break;
                }
                step /= 10.0;
            }
            ++report.coordinates;
            for (std::size_t which = 0; which < 3; ++which) {
                const double numeric = (up[which] - down[which]) / (2.0 * step);
                entry.max_rel_error[which] =
                    std::max(entry.max_rel_error[which], relative_error(analytic[which][k][i], numeric, floor));
            }
        }
        report.entries.push_back(std::move(entry));
    }
    params.zero_grad();
    return report;
}

}  // namespace espt

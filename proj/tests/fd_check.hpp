#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "espt/autograd.hpp"

namespace testing_util {

using espt::Tensor;
using espt::Var;

inline Tensor<double> random_tensor(espt::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.vec()) v = dist(rng);
    return t;
}

/// Relative error with the denominator floored at `floor`.
inline double rel_error(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares reverse-mode gradients of `f` at `inputs` to central
/// differences. Returns the largest relative error over all coordinates.
inline double max_gradient_error(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                                 std::vector<Tensor<double>> inputs, double h = 1e-6) {
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(espt::leaf(t, true));
    auto loss = f(vars);
    espt::backward(loss);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            auto eval = [&](double delta) {
                std::vector<Var<double>> probe;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    Tensor<double> t = inputs[j];
                    if (j == k) t[i] += delta;
                    probe.push_back(espt::constant(std::move(t)));
                }
                return f(probe)->value[0];
            };
            const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
            const double analytic = vars[k]->grad.numel() ? vars[k]->grad[i] : 0.0;
            worst = std::max(worst, rel_error(analytic, numeric, 1e-6));
        }
    }
    return worst;
}

}  // namespace testing_util

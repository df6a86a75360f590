#include <gtest/gtest.h>

#include "espt/linalg.hpp"
#include "fd_check.hpp"
#include "oracles.hpp"

using namespace espt;
using testing_util::max_gradient_error;
using testing_util::random_tensor;

namespace {

Tensor<double> random_spd(std::size_t n, std::mt19937_64& rng) {
    auto m = random_tensor({n, n}, rng);
    Tensor<double> a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = i == j ? 1.0 : 0.0;
            for (std::size_t k = 0; k < n; ++k) s += m.at(i, k) * m.at(j, k);
            a.at(i, j) = s;
        }
    return a;
}

oracle::Matrix to_matrix(const Tensor<double>& t) {
    oracle::Matrix m = oracle::zeros(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
    return m;
}

}  // namespace

TEST(SolveSpd, IdentitySystemReturnsRhs) {
    Tensor<double> eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Tensor<double> b(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_EQ(solve_spd(constant(eye), constant(b))->value, b);
}

TEST(SolveSpd, DiagonalSystem) {
    Tensor<double> a(Shape{2, 2}, std::vector<double>{2, 0, 0, 4});
    Tensor<double> b(Shape{2, 1}, std::vector<double>{2, 8});
    auto x = solve_spd(constant(a), constant(b));
    EXPECT_DOUBLE_EQ(x->value[0], 1.0);
    EXPECT_DOUBLE_EQ(x->value[1], 2.0);
}

TEST(SolveSpd, MatchesGaussJordanOracle) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_spd(8, rng);
        auto b = random_tensor({8, 3}, rng);
        auto x = solve_spd(constant(a), constant(b))->value;
        auto ref = oracle::gauss_jordan_solve(to_matrix(a), to_matrix(b));
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                EXPECT_LE(std::abs(x.at(i, j) - ref[i][j]), 1e-9 * std::max(1.0, std::abs(ref[i][j])));
            }
    }
}

TEST(SolveSpd, ResidualBoundUpToConditionOneMillion) {
    std::mt19937_64 rng(9);
    const std::size_t n = 12;
    for (double cond : {1.0, 1e2, 1e4, 1e6}) {
        // A = Q diag(σ) Qᵀ with σ spanning [1, cond]; Q from Gram–Schmidt.
        auto m = random_tensor({n, n}, rng);
        std::vector<std::vector<double>> q;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(n);
            for (std::size_t j = 0; j < n; ++j) v[j] = m.at(i, j);
            for (const auto& u : q) {
                double d = 0;
                for (std::size_t j = 0; j < n; ++j) d += v[j] * u[j];
                for (std::size_t j = 0; j < n; ++j) v[j] -= d * u[j];
            }
            double nv = 0;
            for (double e : v) nv += e * e;
            for (auto& e : v) e /= std::sqrt(nv);
            q.push_back(v);
        }
        Tensor<double> a(Shape{n, n});
        for (std::size_t k = 0; k < n; ++k) {
            const double sigma = std::pow(cond, static_cast<double>(k) / static_cast<double>(n - 1));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) a.at(i, j) += sigma * q[k][i] * q[k][j];
        }
        auto b = random_tensor({n, 4}, rng);
        auto x = solve_spd(constant(a), constant(b))->value;
        double resid = 0, bmax = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double r = -b.at(i, j);
                for (std::size_t k = 0; k < n; ++k) r += a.at(i, k) * x.at(k, j);
                resid = std::max(resid, std::abs(r));
                bmax = std::max(bmax, std::abs(b.at(i, j)));
            }
        EXPECT_LE(resid / bmax, 1e-8) << "cond " << cond;
    }
}

TEST(SolveSpd, GradientsThroughSpdParameterization) {
    std::mt19937_64 rng(10);
    // A = M Mᵀ + I keeps every finite-difference probe symmetric.
    double err = max_gradient_error(
        [](const auto& v) {
            auto a = add_identity(matmul(v[0], v[0], false, true), 1.0);
            auto x = solve_spd(a, v[1]);
            return sum(mul(x, x));
        },
        {random_tensor({5, 5}, rng, 0.7), random_tensor({5, 3}, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST(SolveSpd, ErrorsNameTheProblem) {
    EXPECT_THROW(solve_spd(constant(Tensor<double>({2, 3})), constant(Tensor<double>({2, 1}))), SolverError);
    Tensor<double> a(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    EXPECT_THROW(solve_spd(constant(a), constant(Tensor<double>({3, 1}))), SolverError);
    Tensor<double> indefinite(Shape{2, 2}, std::vector<double>{1, 2, 2, 1});
    try {
        solve_spd(constant(indefinite), constant(Tensor<double>({2, 1})));
        FAIL() << "expected SolverError";
    } catch (const SolverError& e) {
        EXPECT_NE(std::string(e.what()).find("pivot 1"), std::string::npos) << e.what();
    }
}

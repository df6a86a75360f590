#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "espt/autograd.hpp"
#include "espt/nn_ops.hpp"
#include "fd_check.hpp"

using namespace espt;
using testing_util::max_gradient_error;
using testing_util::random_tensor;

TEST(Tensor, ShapeMatchesDataLength) {
    EXPECT_THROW(Tensor<double>(Shape{2, 3}, std::vector<double>(5)), ContractError);
    EXPECT_THROW(Tensor<double>(Shape{2, 0}), ContractError);
    Tensor<double> t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_THROW(t.reshaped(Shape{4}), ContractError);
    EXPECT_EQ(t.reshaped(Shape{3, 2}).shape(), (Shape{3, 2}));
}

TEST(TensorBlob, HeaderLayoutIsLittleEndian) {
    Tensor<double> t(Shape{2, 1}, std::vector<double>{1.0, -2.0});
    std::ostringstream os;
    write_blob(os, t);
    const std::string bytes = os.str();
    ASSERT_EQ(bytes.size(), 4u + 2u + 1u + 2u * 4u + 2u * 8u);
    EXPECT_EQ(bytes.substr(0, 4), "ESPT");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version, low byte first
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2);  // rank
    EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 2);  // dim 0
    EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 1);  // dim 1
    // 1.0 = 0x3FF0000000000000, least significant byte first
    EXPECT_EQ(static_cast<unsigned char>(bytes[15]), 0x00);
    EXPECT_EQ(static_cast<unsigned char>(bytes[22]), 0x3F);
}

TEST(TensorBlob, RoundTripPreservesValues) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        auto t = random_tensor(Shape{1 + rng() % 3, 1 + rng() % 4, 1 + rng() % 5}, rng);
        std::stringstream ss;
        write_blob(ss, t);
        EXPECT_EQ(read_blob<double>(ss), t);
    }
}

TEST(TensorBlob, RejectsCorruptInput) {
    std::stringstream bad("XXXX");
    EXPECT_THROW(read_blob<double>(bad), BlobError);
    std::stringstream ss;
    write_blob(ss, Tensor<double>(Shape{4}, 1.0));
    std::string truncated = ss.str().substr(0, 20);
    std::stringstream ts(truncated);
    EXPECT_THROW(read_blob<double>(ts), BlobError);
}

TEST(Autograd, SumOfSquares) {
    auto x = leaf(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}), true);
    backward(sum(square(x)));
    EXPECT_EQ(x->grad.vec(), (std::vector<double>{2, 4, 6}));
}

TEST(Autograd, NonScalarLossIsRejected) {
    auto x = leaf(Tensor<double>(Shape{3}, 1.0), true);
    EXPECT_THROW(backward(square(x)), ContractError);
}

TEST(Autograd, StopGradBlocksFlow) {
    auto x = leaf(Tensor<double>(Shape{3}, std::vector<double>{1, -2, 5}), true);
    auto y = stop_grad(x);
    EXPECT_EQ(y->value, x->value);
    backward(sum(square(y)));
    EXPECT_EQ(x->grad.numel(), 0u);
}

TEST(Autograd, StopGradCutsOneProductBranch) {
    auto x = leaf(Tensor<double>(Shape{3}, std::vector<double>{1, -2, 5}), true);
    backward(sum(mul(x, stop_grad(x))));
    EXPECT_EQ(x->grad.vec(), x->value.vec());  // sg(x), not 2x
}

TEST(Autograd, SharedSubgraphVisitedOnce) {
    auto x = leaf(Tensor<double>(Shape{2}, std::vector<double>{3, 4}), true);
    auto y = square(x);
    auto z = add(y, y);  // d/dx = 4x
    auto order = topological_order(sum(z));
    std::set<Node<double>*> unique(order.begin(), order.end());
    EXPECT_EQ(unique.size(), order.size());
    backward(sum(z));
    EXPECT_EQ(x->grad.vec(), (std::vector<double>{12, 16}));
}

TEST(Autograd, ParentsPrecedeChildren) {
    std::mt19937_64 rng(5);
    auto a = leaf(random_tensor({3, 4}, rng), true);
    auto b = leaf(random_tensor({4, 2}, rng), true);
    auto loss = sum(square(matmul(a, b)));
    auto order = topological_order(loss);
    std::map<Node<double>*, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
    for (auto* n : order)
        for (const auto& p : n->parents)
            if (p->requires_grad) EXPECT_LT(pos[p.get()], pos[n]);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    auto x = leaf(Tensor<double>(Shape{2}, 1.0), true);
    Var<double> y;
    {
        NoGradGuard guard;
        y = square(x);
    }
    EXPECT_FALSE(y->requires_grad);
    EXPECT_TRUE(square(x)->requires_grad);
}

TEST(Autograd, ForwardIsDeterministic) {
    std::mt19937_64 r1(11), r2(11);
    auto a1 = random_tensor({5, 7}, r1), a2 = random_tensor({5, 7}, r2);
    auto f = [](const Tensor<double>& a) {
        auto v = constant(a);
        return matmul(v, v, false, true)->value;
    };
    EXPECT_EQ(f(a1), f(a2));
}

// Randomized finite-difference checks for every differentiable op.
class OpGradient : public ::testing::Test {
protected:
    std::mt19937_64 rng{2024};
};

TEST_F(OpGradient, Matmul) {
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
            Shape sb = tb ? Shape{2, 4} : Shape{4, 2};
            double err = max_gradient_error(
                [&](const auto& v) { return sum(square(matmul(v[0], v[1], ta, tb))); },
                {random_tensor(sa, rng), random_tensor(sb, rng)});
            EXPECT_LT(err, 1e-4) << "ta=" << ta << " tb=" << tb;
        }
}

TEST_F(OpGradient, ElementwiseAndReductions) {
    auto a = random_tensor({3, 5}, rng), b = random_tensor({3, 5}, rng);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); }, {a, b}), 1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return mean(square(transpose(v[0]))); }, {a}), 1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(square(row_sum(v[0]))); }, {a}), 1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(square(scale_by(v[1], v[0]))); },
                                 {a, random_tensor({1}, rng)}),
              1e-4);
    EXPECT_LT(max_gradient_error(
                  [](const auto& v) {
                      auto parts = concat_rows<double>({slice_rows(v[0], 1, 3), v[1]});
                      return sum(square(reshape(parts, Shape{parts->numel()})));
                  },
                  {a, b}),
              1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(square(add_row_bias(v[0], v[1]))); },
                                 {a, random_tensor({5}, rng)}),
              1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(square(add_identity(v[0], 0.7))); },
                                 {random_tensor({4, 4}, rng)}),
              1e-4);
}

TEST_F(OpGradient, SoftmaxCrossEntropy) {
    std::vector<std::size_t> labels{0, 2, 1, 2};
    double err = max_gradient_error([&](const auto& v) { return softmax_cross_entropy(v[0], labels); },
                                    {random_tensor({4, 3}, rng, 2.0)});
    EXPECT_LT(err, 1e-4);
}

TEST_F(OpGradient, ConvolutionKernels) {
    for (std::size_t k : {1u, 3u}) {
        double err = max_gradient_error([](const auto& v) { return sum(square(conv2d(v[0], v[1]))); },
                                        {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, k, k}, rng)});
        EXPECT_LT(err, 1e-4) << "kernel " << k;
    }
}

TEST_F(OpGradient, BatchNorm) {
    auto w = random_tensor({2, 3, 4, 4}, rng);
    double err = max_gradient_error(
        [&](const auto& v) { return sum(mul(batch_norm(v[0], v[1], v[2]), constant(w))); },
        {random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST_F(OpGradient, PiecewiseLinearOps) {
    // Random inputs sit away from kinks and ties with probability ~1.
    auto w = random_tensor({2, 3, 2, 3}, rng);
    EXPECT_LT(max_gradient_error([&](const auto& v) { return sum(mul(max_pool2(v[0]), constant(w))); },
                                 {random_tensor({2, 3, 5, 6}, rng)}),
              1e-4);
    EXPECT_LT(max_gradient_error([](const auto& v) { return sum(square(leaky_relu(v[0], 0.1))); },
                                 {random_tensor({4, 5}, rng)}),
              1e-4);
}

TEST_F(OpGradient, LayoutOps) {
    EXPECT_LT(max_gradient_error(
                  [](const auto& v) {
                      auto y = channels_last(v[0]);
                      return sum(mul(y, constant(Tensor<double>(y->shape(), 0.5))) ) ;
                  },
                  {random_tensor({2, 3, 2, 2}, rng)}),
              1e-4);
    auto w = random_tensor({2, 3}, rng);
    EXPECT_LT(max_gradient_error([&](const auto& v) { return sum(mul(global_avg_pool(v[0]), constant(w))); },
                                 {random_tensor({2, 3, 3, 3}, rng)}),
              1e-4);
}

TEST(Conv2d, IdentityKernelIsIdentity) {
    std::mt19937_64 rng(1);
    auto x = random_tensor({1, 2, 4, 4}, rng);
    Tensor<double> w(Shape{2, 2, 3, 3});
    w[(0 * 2 + 0) * 9 + 4] = 1.0;
    w[(1 * 2 + 1) * 9 + 4] = 1.0;
    auto y = conv2d(constant(x), constant(w));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y->value[i], x[i], 1e-15);
}

TEST(Conv2d, RejectsChannelMismatch) {
    EXPECT_THROW(conv2d(constant(Tensor<double>({1, 2, 4, 4})), constant(Tensor<double>({3, 3, 3, 3}))), ContractError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "visirnet/nn.hpp"

using namespace visirnet;
using namespace visirnet::nn;
using testing_support::random_tensor;
using testing_support::rel_err;

namespace {

const Context kTrain{true, nullptr};
const Context kEval{false, nullptr};

// Direct 3x3 SAME convolution. Weight row index is (ki * 3 + kj) * cin + ci.
Tensor naive_conv(const Tensor& x, std::span<const double> w, std::span<const double> b, int cout) {
    const int cin = x.channels();
    Tensor y(x.batch(), {x.height(), x.width(), cout});
    for (int n = 0; n < x.batch(); ++n)
        for (int r = 0; r < x.height(); ++r)
            for (int c = 0; c < x.width(); ++c)
                for (int o = 0; o < cout; ++o) {
                    double s = b[static_cast<std::size_t>(o)];
                    for (int ki = 0; ki < 3; ++ki)
                        for (int kj = 0; kj < 3; ++kj) {
                            const int rr = r + ki - 1, cc = c + kj - 1;
                            if (rr < 0 || cc < 0 || rr >= x.height() || cc >= x.width()) continue;
                            for (int i = 0; i < cin; ++i)
                                s += x.at(n, rr, cc, i) * w[static_cast<std::size_t>(((ki * 3 + kj) * cin + i) * cout + o)];
                        }
                    y.at(n, r, c, o) = s;
                }
    return y;
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.raw()[i] * b.raw()[i];
    return s;
}

// Checks backward() of `layer` against central differences of <forward(x), g>
// on a sample of input entries and of every trainable parameter.
void check_layer_grad(Layer& layer, Tensor x, Rng& rng, int samples = 30, double tol = 1e-4) {
    const Tensor y = layer.forward(x, kTrain);
    const Tensor g = random_tensor(y.batch(), y.shape(), rng);
    for (auto* p : layer.parameters()) p->zero_grad();
    const Tensor dx = layer.backward(g);
    auto objective = [&] { return dot(layer.forward(x, kTrain), g); };
    const double h = 1e-6;
    for (int t = 0; t < samples; ++t) {
        const std::size_t i = uniform_index(rng, x.size());
        const double keep = x.raw()[i];
        x.raw()[i] = keep + h;
        const double up = objective();
        x.raw()[i] = keep - h;
        const double dn = objective();
        x.raw()[i] = keep;
        EXPECT_LT(rel_err(dx.raw()[i], (up - dn) / (2 * h), 1e-6), tol) << "input " << i;
    }
    for (auto* p : layer.parameters()) {
        if (!p->trainable) continue;
        for (int t = 0; t < samples; ++t) {
            const std::size_t i = uniform_index(rng, p->size());
            const double keep = p->value[i];
            p->value[i] = keep + h;
            const double up = objective();
            p->value[i] = keep - h;
            const double dn = objective();
            p->value[i] = keep;
            EXPECT_LT(rel_err(p->grad[i], (up - dn) / (2 * h), 1e-6), tol) << p->name << " " << i;
        }
    }
}

}  // namespace

TEST(Conv3x3Test, MatchesNaiveConvolution) {
    Rng rng(1);
    Conv3x3 conv("c", 3, 5);
    conv.init_he_uniform(rng);
    for (double& b : conv.bias().value) b = uniform(rng, -1, 1);
    const Tensor x = random_tensor(2, {7, 6, 3}, rng);
    const Tensor y = conv.forward(x, kEval);
    const Tensor o = naive_conv(x, conv.weight().value, conv.bias().value, 5);
    ASSERT_EQ(y.shape(), o.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.raw()[i], o.raw()[i], 1e-12);
}

TEST(Conv3x3Test, LargeInputCrossesBlockBoundary) {
    // more than one im2col block of pixels
    Rng rng(2);
    Conv3x3 conv("c", 2, 3);
    conv.init_he_uniform(rng);
    const Tensor x = random_tensor(3, {40, 30, 2}, rng);
    const Tensor y = conv.forward(x, kEval);
    const Tensor o = naive_conv(x, conv.weight().value, conv.bias().value, 3);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.raw()[i], o.raw()[i], 1e-12);
}

TEST(Conv3x3Test, GradientsMatchFiniteDifferences) {
    Rng rng(3);
    Conv3x3 conv("c", 3, 4);
    conv.init_he_uniform(rng);
    check_layer_grad(conv, random_tensor(2, {5, 6, 3}, rng), rng);
}

TEST(Conv3x3Test, ChannelMismatchThrows) {
    Conv3x3 conv("c", 3, 4);
    Rng rng(4);
    EXPECT_THROW(conv.forward(random_tensor(1, {4, 4, 2}, rng), kEval), ShapeMismatch);
}

TEST(BatchNormTest, TrainingNormalizesPerChannel) {
    Rng rng(5);
    BatchNorm bn("bn", 3);
    const Tensor x = random_tensor(4, {3, 3, 3}, rng, -2, 5);
    const Tensor y = bn.forward(x, kTrain);
    const std::size_t m = x.size() / 3;
    for (int k = 0; k < 3; ++k) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < m; ++i) mean += y.raw()[i * 3 + k];
        mean /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) var += std::pow(y.raw()[i * 3 + k] - mean, 2);
        var /= static_cast<double>(m);
        EXPECT_NEAR(mean, 0.0, 1e-12);
        // eps keeps the variance a hair under one
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(BatchNormTest, RunningStatisticsUpdate) {
    Rng rng(6);
    BatchNorm bn("bn", 2);
    const Tensor x = random_tensor(2, {4, 4, 2}, rng, 0, 4);
    bn.forward(x, kTrain);
    const std::size_t m = x.size() / 2;
    for (int k = 0; k < 2; ++k) {
        double mean = 0, ss = 0;
        for (std::size_t i = 0; i < m; ++i) mean += x.raw()[i * 2 + k];
        mean /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) ss += std::pow(x.raw()[i * 2 + k] - mean, 2);
        const double unbiased = ss / static_cast<double>(m - 1);
        EXPECT_NEAR(bn.running_mean().value[static_cast<std::size_t>(k)], 0.1 * mean, 1e-12);
        EXPECT_NEAR(bn.running_var().value[static_cast<std::size_t>(k)], 0.9 + 0.1 * unbiased, 1e-12);
    }
}

TEST(BatchNormTest, EvalUsesRunningStatistics) {
    Rng rng(7);
    BatchNorm bn("bn", 2);
    bn.running_mean().value = {1.0, -2.0};
    bn.running_var().value = {4.0, 0.25};
    bn.gamma().value = {2.0, 1.0};
    bn.beta().value = {0.5, 0.0};
    const Tensor x = random_tensor(1, {2, 2, 2}, rng);
    const Tensor y = bn.forward(x, kEval);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(y.raw()[2 * i], 2.0 * (x.raw()[2 * i] - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5, 1e-12);
        EXPECT_NEAR(y.raw()[2 * i + 1], (x.raw()[2 * i + 1] + 2.0) / std::sqrt(0.25 + 1e-5), 1e-12);
    }
    // eval forward leaves the statistics alone
    EXPECT_EQ(bn.running_mean().value[0], 1.0);
}

TEST(BatchNormTest, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    BatchNorm bn("bn", 3);
    for (double& g : bn.gamma().value) g = uniform(rng, 0.5, 2);
    for (double& b : bn.beta().value) b = uniform(rng, -1, 1);
    check_layer_grad(bn, random_tensor(3, {3, 2, 3}, rng), rng);
}

TEST(ReLUTest, ForwardAndBackward) {
    ReLU relu;
    Tensor x(1, {1, 1, 4});
    x.raw()[0] = -1;
    x.raw()[1] = 0;
    x.raw()[2] = 2;
    x.raw()[3] = -0.5;
    const Tensor y = relu.forward(x, kTrain);
    EXPECT_EQ(y.raw()[0], 0);
    EXPECT_EQ(y.raw()[2], 2);
    Tensor g(1, {1, 1, 4}, 1.0);
    const Tensor d = relu.backward(g);
    EXPECT_EQ(d.raw()[0], 0);
    EXPECT_EQ(d.raw()[2], 1);
    EXPECT_EQ(d.raw()[3], 0);
}

TEST(MaxPoolTest, SameModeOddSizes) {
    MaxPool2x2 pool;
    EXPECT_EQ(pool.output_shape({5, 7, 2}), (Shape3{3, 4, 2}));
    EXPECT_EQ(pool.output_shape({6, 6, 1}), (Shape3{3, 3, 1}));
    EXPECT_EQ(pool.output_shape({1, 1, 1}), (Shape3{1, 1, 1}));
    Rng rng(9);
    const Tensor x = random_tensor(2, {5, 7, 2}, rng);
    const Tensor y = pool.forward(x, kEval);
    ASSERT_EQ(y.shape(), (Shape3{3, 4, 2}));
    for (int n = 0; n < 2; ++n)
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                for (int k = 0; k < 2; ++k) {
                    double best = -1e300;
                    for (int rr = 2 * r; rr < std::min(5, 2 * r + 2); ++rr)
                        for (int cc = 2 * c; cc < std::min(7, 2 * c + 2); ++cc) best = std::max(best, x.at(n, rr, cc, k));
                    EXPECT_EQ(y.at(n, r, c, k), best);
                }
}

TEST(MaxPoolTest, BackwardRoutesToArgmax) {
    MaxPool2x2 pool;
    Tensor x(1, {3, 3, 1});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) x.at(0, r, c, 0) = r * 3 + c;
    const Tensor y = pool.forward(x, kTrain);
    EXPECT_EQ(y.at(0, 0, 0, 0), 4);
    EXPECT_EQ(y.at(0, 1, 1, 0), 8);
    Tensor g(1, {2, 2, 1});
    g.raw()[0] = 1;
    g.raw()[1] = 2;
    g.raw()[2] = 3;
    g.raw()[3] = 4;
    const Tensor dx = pool.backward(g);
    EXPECT_EQ(dx.at(0, 1, 1, 0), 1);
    EXPECT_EQ(dx.at(0, 1, 2, 0), 2);
    EXPECT_EQ(dx.at(0, 2, 1, 0), 3);
    EXPECT_EQ(dx.at(0, 2, 2, 0), 4);
    double total = 0;
    for (double v : dx.data()) total += v;
    EXPECT_EQ(total, 10);
}

TEST(DenseTest, ForwardAndGradients) {
    Rng rng(10);
    Dense d("d", 12, 5);
    d.init_glorot_uniform(rng);
    for (double& b : d.bias().value) b = uniform(rng, -1, 1);
    const Tensor x = random_tensor(3, {2, 2, 3}, rng);
    const Tensor y = d.forward(x, kEval);
    ASSERT_EQ(y.shape(), (Shape3{1, 1, 5}));
    for (int n = 0; n < 3; ++n)
        for (int o = 0; o < 5; ++o) {
            double s = d.bias().value[static_cast<std::size_t>(o)];
            for (int i = 0; i < 12; ++i) s += x.sample_data(n)[static_cast<std::size_t>(i)] * d.weight().value[static_cast<std::size_t>(i * 5 + o)];
            EXPECT_NEAR(y.at(n, 0, 0, o), s, 1e-12);
        }
    check_layer_grad(d, x, rng);
    EXPECT_THROW(d.forward(random_tensor(1, {1, 1, 11}, rng), kEval), ShapeMismatch);
}

TEST(DenseTest, GlorotLimitAndGain) {
    Rng rng(11);
    Dense d("d", 100, 20);
    d.init_glorot_uniform(rng, 1e-2);
    const double limit = 1e-2 * std::sqrt(6.0 / 120.0);
    double worst = 0;
    for (double w : d.weight().value) worst = std::max(worst, std::abs(w));
    EXPECT_LE(worst, limit);
    EXPECT_GT(worst, 0.9 * limit);
}

TEST(DropoutTest, EvalIsIdentity) {
    Rng rng(12);
    Dropout drop(0.2);
    const Tensor x = random_tensor(2, {1, 1, 50}, rng);
    const Tensor y = drop.forward(x, kEval);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(y.raw()[i], x.raw()[i]);
}

TEST(DropoutTest, TrainingUsesInvertedScaling) {
    Rng rng(13);
    Dropout drop(0.2);
    Tensor x(1, {1, 1, 20000}, 1.0);
    const Context ctx{true, &rng};
    const Tensor y = drop.forward(x, ctx);
    std::size_t zeros = 0;
    double mean = 0;
    for (double v : y.data()) {
        if (v == 0.0) {
            ++zeros;
        } else {
            ASSERT_DOUBLE_EQ(v, 1.25);
        }
        mean += v;
    }
    mean /= static_cast<double>(y.size());
    EXPECT_NEAR(static_cast<double>(zeros) / 20000.0, 0.2, 0.015);
    EXPECT_NEAR(mean, 1.0, 0.02);
    // backward applies the same mask
    const Tensor d = drop.backward(Tensor(1, {1, 1, 20000}, 1.0));
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_EQ(d.raw()[i], y.raw()[i]);
    EXPECT_THROW(Dropout(1.0), ConfigError);
    EXPECT_THROW(drop.forward(x, kTrain), Error);
}

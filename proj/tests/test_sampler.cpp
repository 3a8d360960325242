#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "visirnet/sampler.hpp"

using namespace visirnet;
using testing_support::random_map;
using testing_support::rel_err;

namespace {

// Four-term bilinear formula written out directly, zero outside the map.
double bilinear_oracle(const FeatureMap& f, double x, double y, int ch) {
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double ax = x - x0, ay = y - y0;
    auto v = [&](int r, int c) { return (r >= 0 && c >= 0 && r < f.height() && c < f.width()) ? f.at(r, c, ch) : 0.0; };
    return v(y0, x0) * (1 - ax) * (1 - ay) + v(y0, x0 + 1) * ax * (1 - ay) + v(y0 + 1, x0) * (1 - ax) * ay +
           v(y0 + 1, x0 + 1) * ax * ay;
}

// Smooth test image: a few low-frequency sinusoids.
ImageTensor band_limited(int n, Rng& rng) {
    FeatureMap m(n, n, 1);
    const double a = uniform(rng, 0.02, 0.06), b = uniform(rng, 0.02, 0.06), ph = uniform(rng, 0, 6.28);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            m.at(r, c, 0) = 0.5 + 0.25 * std::sin(a * c + ph) * std::cos(b * r) + 0.2 * std::sin(0.03 * (c + r));
    return ImageTensor(std::move(m));
}

}  // namespace

TEST(GridTest, MakeGridExamples) {
    const Grid g2 = make_grid(2);
    const std::array<Point2, 4> expect{{{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(g2.coords()[i].x, expect[i].x);
        EXPECT_EQ(g2.coords()[i].y, expect[i].y);
    }
    const Grid g128 = make_grid(128);
    EXPECT_EQ(g128.size(), 16384u);
    EXPECT_EQ(g128.at(127, 127).x, 127);
    EXPECT_EQ(g128.at(127, 127).y, 127);
    EXPECT_EQ(make_grid(3).at(1, 1).x, 1);
    EXPECT_EQ(make_grid(3).at(1, 1).y, 1);
    EXPECT_EQ(make_grid(5, 7).at(4, 6).x, 6);
    EXPECT_THROW(make_grid(1), ShapeMismatch);
}

TEST(GridTest, WarpGridExamples) {
    const Grid g = make_grid(128);
    const Grid same = warp_grid(g, identity());
    EXPECT_EQ(same.frame(), Frame::target);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(same.coords()[i].x, g.coords()[i].x);
    const Grid t = warp_grid(g, Homography::translation(10, 5));
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_DOUBLE_EQ(t.coords()[i].x, g.coords()[i].x + 10);
        EXPECT_DOUBLE_EQ(t.coords()[i].y, g.coords()[i].y + 5);
    }
    const CornerSet quad{{{{10, 20}, {150, 15}, {160, 170}, {5, 160}}}, Frame::target};
    const Homography h = from_four_points(square_corners(128), quad);
    const Grid w = warp_grid(g, h);
    for (std::size_t i = 0; i < g.size(); i += 97) {
        const Point2 p = apply(h, g.coords()[i]);
        EXPECT_EQ(w.coords()[i].x, p.x);
        EXPECT_EQ(w.coords()[i].y, p.y);
    }
}

TEST(BilinearSample, Examples) {
    Rng rng(3);
    const FeatureMap f = random_map(8, 8, 2, rng);
    const auto a = bilinear_sample(f, {2.0, 3.0});
    EXPECT_EQ(a[0], f.at(3, 2, 0));
    EXPECT_EQ(a[1], f.at(3, 2, 1));
    const auto b = bilinear_sample(f, {2.5, 3.5});
    EXPECT_NEAR(b[0], (f.at(3, 2, 0) + f.at(3, 3, 0) + f.at(4, 2, 0) + f.at(4, 3, 0)) / 4, 1e-15);
    for (int i = 0; i < 20; ++i) {
        const double x = static_cast<int>(uniform_index(rng, 7)) + 0.25, y = static_cast<int>(uniform_index(rng, 7)) + 0.75;
        const auto s = bilinear_sample(f, {x, y});
        for (int ch = 0; ch < 2; ++ch) EXPECT_NEAR(s[static_cast<std::size_t>(ch)], bilinear_oracle(f, x, y, ch), 1e-14);
    }
}

TEST(BilinearSample, ZeroPaddingOutside) {
    FeatureMap f(4, 4, 1);
    for (double& v : f.data()) v = 1.0;
    EXPECT_EQ(bilinear_sample(f, {-5, 1})[0], 0.0);
    EXPECT_EQ(bilinear_sample(f, {1, 100})[0], 0.0);
    EXPECT_DOUBLE_EQ(bilinear_sample(f, {-0.5, 1})[0], 0.5);
    EXPECT_DOUBLE_EQ(bilinear_sample(f, {3.25, 3})[0], 0.75);
    EXPECT_EQ(bilinear_sample(f, {std::nan(""), 1})[0], 0.0);
}

TEST(BilinearSample, GradientMatchesFiniteDifference) {
    Rng rng(4);
    const FeatureMap f = random_map(8, 8, 3, rng);
    const double h = 1e-6;
    for (int i = 0; i < 100; ++i) {
        Point2 p{uniform(rng, -0.9, 7.9), uniform(rng, -0.9, 7.9)};
        // keep the central difference inside one bilinear cell
        if (std::abs(p.x - std::round(p.x)) < 1e-3 || std::abs(p.y - std::round(p.y)) < 1e-3) continue;
        const auto g = bilinear_sample_grad(f, p);
        for (int ch = 0; ch < 3; ++ch) {
            const auto c = static_cast<std::size_t>(ch);
            const double fx = (bilinear_sample(f, {p.x + h, p.y})[c] - bilinear_sample(f, {p.x - h, p.y})[c]) / (2 * h);
            const double fy = (bilinear_sample(f, {p.x, p.y + h})[c] - bilinear_sample(f, {p.x, p.y - h})[c]) / (2 * h);
            EXPECT_LT(rel_err(g.d_dx[c], fx, 1e-6), 1e-3);
            EXPECT_LT(rel_err(g.d_dy[c], fy, 1e-6), 1e-3);
            EXPECT_DOUBLE_EQ(g.value[c], bilinear_sample(f, p)[c]);
        }
    }
}

TEST(Resample, IdentityGridIsExact) {
    Rng rng(5);
    const FeatureMap f = random_map(16, 16, 4, rng);
    const FeatureMap r = resample(f, make_grid(16));
    for (std::size_t i = 0; i < f.size(); ++i) ASSERT_EQ(r.data()[i], f.data()[i]);
}

TEST(Resample, ConstantMapStaysConstant) {
    FeatureMap f(12, 12, 2);
    for (double& v : f.data()) v = 0.37;
    Rng rng(6);
    const Homography h = testing_support::random_homography(8, 1.5, rng);
    const Grid g = warp_grid(make_grid(8), compose(Homography::translation(1.5, 1.5), h));
    const FeatureMap r = resample(f, g);
    for (double v : r.data()) EXPECT_NEAR(v, 0.37, 1e-14);
}

TEST(Resample, HalfPixelShiftOfRamp) {
    FeatureMap f(6, 10, 1);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 10; ++c) f.at(r, c, 0) = 2.0 * c;
    const Grid g = warp_grid(make_grid(6, 9), Homography::translation(0.5, 0));
    const FeatureMap out = resample(f, g);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 9; ++c) {
            EXPECT_DOUBLE_EQ(out.at(r, c, 0), bilinear_oracle(f, c + 0.5, r, 0));
            EXPECT_DOUBLE_EQ(out.at(r, c, 0), 2.0 * c + 1.0);
        }
    }
}

// Property: resample_backward is the adjoint of resample, <R f, g> = <f, R* g>.
TEST(Resample, BackwardIsAdjoint) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const FeatureMap f = random_map(10, 10, 3, rng);
        const Homography h = testing_support::random_homography(8, 2.0, rng);
        const Grid g = warp_grid(make_grid(8), compose(Homography::translation(uniform(rng, -2, 3), uniform(rng, -2, 3)), h));
        const FeatureMap go = random_map(8, 8, 3, rng);
        const FeatureMap rf = resample(f, g);
        const FeatureMap gi = resample_backward(f.shape(), g, go);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < rf.size(); ++i) lhs += rf.data()[i] * go.data()[i];
        for (std::size_t i = 0; i < f.size(); ++i) rhs += f.data()[i] * gi.data()[i];
        EXPECT_NEAR(lhs, rhs, 1e-11 * std::max(1.0, std::abs(lhs)));
    }
}

TEST(Resample, CoordinateGradientMatchesFiniteDifference) {
    Rng rng(8);
    const FeatureMap f = random_map(8, 8, 2, rng);
    Grid g(3, 3, Frame::target);
    for (auto r = 0; r < 3; ++r)
        for (auto c = 0; c < 3; ++c) g.at(r, c) = {uniform(rng, 0.1, 6.9), uniform(rng, 0.1, 6.9)};
    const FeatureMap go = random_map(3, 3, 2, rng);
    const auto cg = resample_coord_grad(f, g, go);
    auto objective = [&](const Grid& gg) {
        const FeatureMap r = resample(f, gg);
        double s = 0;
        for (std::size_t i = 0; i < r.size(); ++i) s += r.data()[i] * go.data()[i];
        return s;
    };
    const double h = 1e-6;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            Grid gp = g, gm = g;
            gp.at(r, c).x += h;
            gm.at(r, c).x -= h;
            const double fx = (objective(gp) - objective(gm)) / (2 * h);
            EXPECT_LT(rel_err(cg[static_cast<std::size_t>(r * 3 + c)].x, fx, 1e-6), 1e-3);
        }
    }
}

TEST(WarpImage, IdentityAndIntegerTranslation) {
    Rng rng(9);
    FeatureMap m(20, 24, 3);
    for (double& v : m.data()) v = uniform01(rng);
    const ImageTensor img(m);
    const ImageTensor same = warp_image(img, identity(), 20, 24);
    for (int r = 0; r < 20; ++r)
        for (int c = 0; c < 24; ++c)
            for (int k = 0; k < 3; ++k) ASSERT_EQ(same.at(r, c, k), img.at(r, c, k));
    const ImageTensor t = warp_image(img, Homography::translation(10, 5), 20, 24);
    for (int r = 0; r < 20; ++r) {
        for (int c = 0; c < 24; ++c) {
            const double expect = (r >= 5 && c >= 10) ? img.at(r - 5, c - 10, 1) : 0.0;
            ASSERT_NEAR(t.at(r, c, 1), expect, 1e-15);
        }
    }
}

TEST(WarpImage, ForwardThenInverseRoundTrip) {
    Rng rng(10);
    const ImageTensor img = band_limited(128, rng);
    const Homography h = testing_support::random_homography(128, 10, rng);
    const ImageTensor there = warp_image(img, h, 128, 128);
    const ImageTensor back = warp_image(there, inverse(h), 128, 128);
    double worst = 0;
    for (int r = 16; r < 112; ++r)
        for (int c = 16; c < 112; ++c) worst = std::max(worst, std::abs(back.at(r, c, 0) - img.at(r, c, 0)));
    EXPECT_LT(worst, 0.02);
}

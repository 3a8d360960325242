#pragma once

// Straightforward scalar re-implementations used as test oracles. They share
// no code with the library beyond the data containers.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "visirnet/geometry.hpp"
#include "visirnet/tensor.hpp"

namespace oracle {

using visirnet::CornerSet;
using visirnet::FeatureMap;
using visirnet::Homography;

inline std::array<double, 2> project(const Homography& h, double x, double y) {
    double m[3][3];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m[r][c] = h.params()[static_cast<std::size_t>(r * 3 + c)];
    const double u = m[0][0] * x + m[0][1] * y + m[0][2];
    const double v = m[1][0] * x + m[1][1] * y + m[1][2];
    const double w = m[2][0] * x + m[2][1] * y + m[2][2];
    return {u / w, v / w};
}

inline double texel(const FeatureMap& f, int r, int c, int ch) {
    if (r < 0 || c < 0 || r >= f.height() || c >= f.width()) return 0.0;
    return f.at(r, c, ch);
}

inline double bilinear(const FeatureMap& f, double x, double y, int ch) {
    const double fx = std::floor(x), fy = std::floor(y);
    const int c0 = static_cast<int>(fx), r0 = static_cast<int>(fy);
    const double ax = x - fx, ay = y - fy;
    return texel(f, r0, c0, ch) * (1 - ax) * (1 - ay) + texel(f, r0, c0 + 1, ch) * ax * (1 - ay) +
           texel(f, r0 + 1, c0, ch) * (1 - ax) * ay + texel(f, r0 + 1, c0 + 1, ch) * ax * ay;
}

/// f_rgb sampled at gt_h applied to every IR pixel.
inline FeatureMap warped(const FeatureMap& f_rgb, int n, const Homography& gt_h) {
    FeatureMap out(n, n, f_rgb.channels());
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const auto p = project(gt_h, c, r);
            for (int ch = 0; ch < f_rgb.channels(); ++ch) out.at(r, c, ch) = bilinear(f_rgb, p[0], p[1], ch);
        }
    }
    return out;
}

/// Similarity loss: loop over IR pixels, accumulate squared differences.
inline double sim(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h) {
    const FeatureMap w = warped(f_rgb, f_ir.height(), gt_h);
    double acc = 0;
    int count = 0;
    for (int r = 0; r < f_ir.height(); ++r)
        for (int c = 0; c < f_ir.width(); ++c)
            for (int ch = 0; ch < f_ir.channels(); ++ch) {
                const double d = w.at(r, c, ch) - f_ir.at(r, c, ch);
                acc += d * d;
                ++count;
            }
    return acc / count;
}

inline double mae(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h) {
    const FeatureMap w = warped(f_rgb, f_ir.height(), gt_h);
    double acc = 0;
    int count = 0;
    for (int r = 0; r < f_ir.height(); ++r)
        for (int c = 0; c < f_ir.width(); ++c)
            for (int ch = 0; ch < f_ir.channels(); ++ch) {
                acc += std::abs(w.at(r, c, ch) - f_ir.at(r, c, ch));
                ++count;
            }
    return acc / count;
}

/// Gaussian-window SSIM per channel, valid positions only, averaged.
inline double ssim_index(const FeatureMap& x, const FeatureMap& y, int window = 11, double sigma = 1.5) {
    int win = std::min({window, x.height(), x.width()});
    if (win % 2 == 0) --win;
    std::vector<std::vector<double>> g(static_cast<std::size_t>(win), std::vector<double>(static_cast<std::size_t>(win)));
    double gsum = 0;
    const double mid = (win - 1) / 2.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            g[i][j] = std::exp(-((i - mid) * (i - mid) + (j - mid) * (j - mid)) / (2 * sigma * sigma));
            gsum += g[i][j];
        }
    double lo = 1e300, hi = -1e300;
    for (const FeatureMap* m : {&x, &y})
        for (double v : m->data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double L = std::max(hi - lo, 1e-6);
    const double c1 = std::pow(0.01 * L, 2), c2 = std::pow(0.03 * L, 2);
    double total = 0;
    int count = 0;
    for (int ch = 0; ch < x.channels(); ++ch)
        for (int r = 0; r + win <= x.height(); ++r)
            for (int c = 0; c + win <= x.width(); ++c) {
                double mx = 0, my = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        mx += g[i][j] / gsum * x.at(r + i, c + j, ch);
                        my += g[i][j] / gsum * y.at(r + i, c + j, ch);
                    }
                double vx = 0, vy = 0, cov = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double dx = x.at(r + i, c + j, ch) - mx, dy = y.at(r + i, c + j, ch) - my;
                        vx += g[i][j] / gsum * dx * dx;
                        vy += g[i][j] / gsum * dy * dy;
                        cov += g[i][j] / gsum * dx * dy;
                    }
                total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
    return total / count;
}

inline double ssim_loss(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h) {
    return 1.0 - ssim_index(warped(f_rgb, f_ir.height(), gt_h), f_ir);
}

inline double h2(const std::array<double, 8>& pred, const Homography& gt) {
    double s = 0;
    for (int i = 0; i < 8; ++i) s += std::pow(pred[static_cast<std::size_t>(i)] - gt.params()[static_cast<std::size_t>(i)], 2);
    return s / 8;
}

inline double ace_corners(const std::array<double, 8>& pred, const CornerSet& gt) {
    double s = 0;
    for (int i = 0; i < 4; ++i) {
        const auto k = static_cast<std::size_t>(i);
        s += std::pow(pred[2 * k] - gt[k].x, 2) + std::pow(pred[2 * k + 1] - gt[k].y, 2);
    }
    return s / 4;
}

/// Warp the source corners by both homographies and compare.
inline double ace_homography(const std::array<double, 8>& pred, const Homography& gt, const CornerSet& src) {
    const Homography hp = Homography::from_params(pred);
    double s = 0;
    for (int i = 0; i < 4; ++i) {
        const auto a = project(hp, src[static_cast<std::size_t>(i)].x, src[static_cast<std::size_t>(i)].y);
        const auto b = project(gt, src[static_cast<std::size_t>(i)].x, src[static_cast<std::size_t>(i)].y);
        s += std::pow(a[0] - b[0], 2) + std::pow(a[1] - b[1], 2);
    }
    return s / 4;
}

/// Type-7 quantile by explicit sort and index arithmetic.
inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t i = static_cast<std::size_t>(pos);
    if (i + 1 >= v.size()) return v.back();
    return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

}  // namespace oracle

#pragma once

// Spatial-transformer machinery: rectilinear grids, grid warping and
// bilinear resampling with zero padding outside the map.
//
// Coordinates are (x = column, y = row) with the origin at the centre of the
// top-left pixel.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "visirnet/errors.hpp"
#include "visirnet/geometry.hpp"
#include "visirnet/tensor.hpp"

namespace visirnet {

class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, Frame frame = Frame::source)
        : rows_(rows), cols_(cols), frame_(frame), coords_(static_cast<std::size_t>(rows) * cols) {}

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    Frame frame() const noexcept { return frame_; }
    std::size_t size() const noexcept { return coords_.size(); }

    Point2& at(int r, int c) { return coords_[static_cast<std::size_t>(r) * cols_ + c]; }
    const Point2& at(int r, int c) const { return coords_[static_cast<std::size_t>(r) * cols_ + c]; }

    const std::vector<Point2>& coords() const noexcept { return coords_; }

private:
    int rows_ = 0;
    int cols_ = 0;
    Frame frame_ = Frame::source;
    std::vector<Point2> coords_;
};

/// coords[r][c] = (c, r).
inline Grid make_grid(int rows, int cols) {
    if (rows < 2 || cols < 2) throw ShapeMismatch("grid needs at least 2x2 points");
    Grid g(rows, cols, Frame::source);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) g.at(r, c) = {static_cast<double>(c), static_cast<double>(r)};
    }
    return g;
}

inline Grid make_grid(int n) { return make_grid(n, n); }

inline Grid warp_grid(const Grid& g, const Homography& h) {
    Grid out(g.rows(), g.cols(), Frame::target);
    for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) out.at(r, c) = apply(h, g.at(r, c));
    }
    return out;
}

/// The four neighbouring texels of a sample point, their blend weights and the
/// derivatives of those weights with respect to the sample coordinates.
struct BilinearTaps {
    std::array<int, 4> row{};
    std::array<int, 4> col{};
    std::array<double, 4> weight{};
    std::array<double, 4> dweight_dx{};
    std::array<double, 4> dweight_dy{};
};

/// False for coordinates too far out to ever touch a texel (or non-finite).
inline bool sampleable(Point2 p) {
    return std::isfinite(p.x) && std::isfinite(p.y) && std::abs(p.x) < 1e9 && std::abs(p.y) < 1e9;
}

inline BilinearTaps bilinear_taps(Point2 p) {
    const double x0 = std::floor(p.x);
    const double y0 = std::floor(p.y);
    const double ax = p.x - x0;
    const double ay = p.y - y0;
    const int c0 = static_cast<int>(x0);
    const int r0 = static_cast<int>(y0);
    BilinearTaps t;
    t.row = {r0, r0, r0 + 1, r0 + 1};
    t.col = {c0, c0 + 1, c0, c0 + 1};
    t.weight = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
    t.dweight_dx = {-(1 - ay), (1 - ay), -ay, ay};
    t.dweight_dy = {-(1 - ax), -ax, (1 - ax), ax};
    return t;
}

inline std::vector<double> bilinear_sample(const FeatureMap& f, Point2 p) {
    std::vector<double> out(static_cast<std::size_t>(f.channels()), 0.0);
    if (!sampleable(p)) return out;
    const auto t = bilinear_taps(p);
    for (std::size_t k = 0; k < 4; ++k) {
        if (!f.contains(t.row[k], t.col[k])) continue;
        for (int ch = 0; ch < f.channels(); ++ch) out[ch] += t.weight[k] * f.at(t.row[k], t.col[k], ch);
    }
    return out;
}

/// Per-channel partial derivatives of bilinear_sample w.r.t. the coordinates.
struct SampleGradient {
    std::vector<double> value;
    std::vector<double> d_dx;
    std::vector<double> d_dy;
};

inline SampleGradient bilinear_sample_grad(const FeatureMap& f, Point2 p) {
    const auto nch = static_cast<std::size_t>(f.channels());
    SampleGradient g{std::vector<double>(nch, 0.0), std::vector<double>(nch, 0.0), std::vector<double>(nch, 0.0)};
    if (!sampleable(p)) return g;
    const auto t = bilinear_taps(p);
    for (std::size_t k = 0; k < 4; ++k) {
        if (!f.contains(t.row[k], t.col[k])) continue;
        for (std::size_t ch = 0; ch < nch; ++ch) {
            const double v = f.at(t.row[k], t.col[k], static_cast<int>(ch));
            g.value[ch] += t.weight[k] * v;
            g.d_dx[ch] += t.dweight_dx[k] * v;
            g.d_dy[ch] += t.dweight_dy[k] * v;
        }
    }
    return g;
}

/// output[r][c] = bilinear_sample(f, g[r][c]).
inline FeatureMap resample(const FeatureMap& f, const Grid& g) {
    FeatureMap out(g.rows(), g.cols(), f.channels());
    const int nch = f.channels();
    for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) {
            const Point2 p = g.at(r, c);
            if (!sampleable(p)) continue;
            const auto t = bilinear_taps(p);
            double* dst = &out.at(r, c, 0);
            for (std::size_t k = 0; k < 4; ++k) {
                if (!f.contains(t.row[k], t.col[k])) continue;
                const double w = t.weight[k];
                if (w == 0.0) continue;
                const double* src = &f.at(t.row[k], t.col[k], 0);
                for (int ch = 0; ch < nch; ++ch) dst[ch] += w * src[ch];
            }
        }
    }
    return out;
}

/// Gradient of a scalar objective w.r.t. the resampled map's source values,
/// given its gradient w.r.t. the resampled output (adjoint of resample).
inline FeatureMap resample_backward(const Shape3& source_shape, const Grid& g, const FeatureMap& grad_out) {
    if (grad_out.height() != g.rows() || grad_out.width() != g.cols() || grad_out.channels() != source_shape.channels) {
        throw ShapeMismatch("resample_backward: gradient shape does not match grid");
    }
    FeatureMap grad_in(source_shape);
    const int nch = source_shape.channels;
    for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) {
            const Point2 p = g.at(r, c);
            if (!sampleable(p)) continue;
            const auto t = bilinear_taps(p);
            const double* go = &grad_out.at(r, c, 0);
            for (std::size_t k = 0; k < 4; ++k) {
                if (!grad_in.contains(t.row[k], t.col[k])) continue;
                const double w = t.weight[k];
                if (w == 0.0) continue;
                double* dst = &grad_in.at(t.row[k], t.col[k], 0);
                for (int ch = 0; ch < nch; ++ch) dst[ch] += w * go[ch];
            }
        }
    }
    return grad_in;
}

/// Gradient w.r.t. each grid coordinate, given the gradient w.r.t. the output.
inline std::vector<Point2> resample_coord_grad(const FeatureMap& f, const Grid& g, const FeatureMap& grad_out) {
    std::vector<Point2> out(g.size());
    const int nch = f.channels();
    for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) {
            if (!sampleable(g.at(r, c))) continue;
            const auto t = bilinear_taps(g.at(r, c));
            Point2 acc{};
            for (std::size_t k = 0; k < 4; ++k) {
                if (!f.contains(t.row[k], t.col[k])) continue;
                for (int ch = 0; ch < nch; ++ch) {
                    const double v = f.at(t.row[k], t.col[k], ch) * grad_out.at(r, c, ch);
                    acc.x += t.dweight_dx[k] * v;
                    acc.y += t.dweight_dy[k] * v;
                }
            }
            out[static_cast<std::size_t>(r) * g.cols() + c] = acc;
        }
    }
    return out;
}

/// Inverse warping: each output pixel q samples img at inverse(h)(q).
/// Pixels whose back-projection hits the horizon line are left at zero.
inline ImageTensor warp_image(const ImageTensor& img, const Homography& h, int out_height, int out_width) {
    const Homography back = inverse(h);
    Grid g(out_height, out_width, Frame::source);
    for (int r = 0; r < out_height; ++r) {
        for (int c = 0; c < out_width; ++c) {
            try {
                g.at(r, c) = apply(back, {static_cast<double>(c), static_cast<double>(r)});
            } catch (const DegenerateProjection&) {
                g.at(r, c) = {std::nan(""), std::nan("")};
            }
        }
    }
    return ImageTensor(resample(img.pixels(), g));
}

}  // namespace visirnet

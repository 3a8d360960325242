#pragma once

// Projective-transform algebra on the plane.
//
// A Homography always maps source-frame coordinates to target-frame
// coordinates. Parameters are stored row-major with the (3,3) element fixed
// to exactly 1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "visirnet/errors.hpp"

namespace visirnet {

inline constexpr double kEpsDenom = 1e-8;
inline constexpr double kEpsDet = 1e-10;
inline constexpr double kEpsArea = 1.0;

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

enum class Frame { source, target };

inline const char* to_string(Frame f) { return f == Frame::source ? "source" : "target"; }

class Homography {
public:
    using Matrix = std::array<double, 9>;
    using FreeParams = std::array<double, 8>;

    /// Identity.
    Homography() : p_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

    /// Normalizes so the (3,3) element is 1. Throws DegenerateProjection when
    /// that element is too small to divide by and SingularSystem when the
    /// normalized matrix is not invertible.
    static Homography from_matrix(const Matrix& m) {
        if (std::abs(m[8]) < kEpsDenom) {
            throw DegenerateProjection("homography (3,3) element is ~0; cannot normalize");
        }
        Homography h;
        for (std::size_t i = 0; i < 9; ++i) h.p_[i] = m[i] / m[8];
        h.p_[8] = 1.0;
        h.check_invertible();
        return h;
    }

    /// p1..p8 with p9 := 1.
    static Homography from_params(std::span<const double> p8) {
        if (p8.size() != 8) throw ShapeMismatch("homography needs exactly 8 free parameters");
        Homography h;
        for (std::size_t i = 0; i < 8; ++i) h.p_[i] = p8[i];
        h.p_[8] = 1.0;
        h.check_invertible();
        return h;
    }

    static Homography translation(double tx, double ty) {
        Homography h;
        h.p_[2] = tx;
        h.p_[5] = ty;
        return h;
    }

    const Matrix& params() const noexcept { return p_; }
    double operator[](std::size_t i) const { return p_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return p_[r * 3 + c]; }

    FreeParams free_params() const {
        FreeParams out{};
        for (std::size_t i = 0; i < 8; ++i) out[i] = p_[i];
        return out;
    }

    double determinant() const {
        const auto& m = p_;
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

private:
    void check_invertible() const {
        if (!(std::abs(determinant()) > kEpsDet)) {
            throw SingularSystem("homography is singular (|det| <= 1e-10)");
        }
    }

    Matrix p_;
};

inline Homography identity() { return Homography{}; }

/// Maps a point through h, dividing by the homogeneous coordinate.
inline Point2 apply(const Homography& h, Point2 c) {
    const auto& p = h.params();
    const double z = p[6] * c.x + p[7] * c.y + p[8];
    if (!(std::abs(z) > kEpsDenom)) {
        throw DegenerateProjection("point projects onto the horizon line");
    }
    return {(p[0] * c.x + p[1] * c.y + p[2]) / z, (p[3] * c.x + p[4] * c.y + p[5]) / z};
}

/// a after b: apply(compose(a, b), c) == apply(a, apply(b, c)).
inline Homography compose(const Homography& a, const Homography& b) {
    Homography::Matrix m{};
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += a(r, k) * b(k, c);
            m[r * 3 + c] = s;
        }
    }
    return Homography::from_matrix(m);
}

inline Homography inverse(const Homography& h) {
    const double det = h.determinant();
    if (!(std::abs(det) > kEpsDet)) throw SingularSystem("cannot invert singular homography");
    const auto& m = h.params();
    // adjugate / det
    Homography::Matrix inv{
        (m[4] * m[8] - m[5] * m[7]) / det, (m[2] * m[7] - m[1] * m[8]) / det,
        (m[1] * m[5] - m[2] * m[4]) / det, (m[5] * m[6] - m[3] * m[8]) / det,
        (m[0] * m[8] - m[2] * m[6]) / det, (m[2] * m[3] - m[0] * m[5]) / det,
        (m[3] * m[7] - m[4] * m[6]) / det, (m[1] * m[6] - m[0] * m[7]) / det,
        (m[0] * m[4] - m[1] * m[3]) / det,
    };
    return Homography::from_matrix(inv);
}

/// Four corners ordered top-left, top-right, bottom-right, bottom-left.
struct CornerSet {
    std::array<Point2, 4> corners{};
    Frame frame = Frame::source;

    const Point2& operator[](std::size_t i) const { return corners[i]; }
    Point2& operator[](std::size_t i) { return corners[i]; }

    /// Signed shoelace area (positive for clockwise order in image coordinates).
    double signed_area() const {
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& a = corners[i];
            const auto& b = corners[(i + 1) % 4];
            s += a.x * b.y - b.x * a.y;
        }
        return 0.5 * s;
    }

    bool is_self_intersecting() const;
    bool is_convex() const;

    /// Non-self-intersecting with area above kEpsArea.
    bool is_valid() const { return !is_self_intersecting() && std::abs(signed_area()) > kEpsArea; }

    /// Flattened x1,y1,...,x4,y4.
    std::array<double, 8> flat() const {
        std::array<double, 8> out{};
        for (std::size_t i = 0; i < 4; ++i) {
            out[2 * i] = corners[i].x;
            out[2 * i + 1] = corners[i].y;
        }
        return out;
    }

    static CornerSet from_flat(std::span<const double> v, Frame frame) {
        if (v.size() != 8) throw ShapeMismatch("corner set needs exactly 8 values");
        CornerSet cs;
        cs.frame = frame;
        for (std::size_t i = 0; i < 4; ++i) cs.corners[i] = {v[2 * i], v[2 * i + 1]};
        return cs;
    }
};

namespace detail {

inline double cross(Point2 o, Point2 a, Point2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool segments_cross(Point2 a, Point2 b, Point2 c, Point2 d) {
    const double d1 = cross(c, d, a);
    const double d2 = cross(c, d, b);
    const double d3 = cross(a, b, c);
    const double d4 = cross(a, b, d);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace detail

inline bool CornerSet::is_self_intersecting() const {
    const auto& c = corners;
    return detail::segments_cross(c[0], c[1], c[2], c[3]) ||
           detail::segments_cross(c[1], c[2], c[3], c[0]);
}

inline bool CornerSet::is_convex() const {
    int pos = 0;
    int neg = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double z = detail::cross(corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]);
        if (z > 0) ++pos;
        if (z < 0) ++neg;
    }
    return (pos == 4 || neg == 4);
}

/// (0,0), (n-1,0), (n-1,n-1), (0,n-1).
inline CornerSet square_corners(int n, Frame frame = Frame::source) {
    const double m = static_cast<double>(n - 1);
    return {{{{0, 0}, {m, 0}, {m, m}, {0, m}}}, frame};
}

inline CornerSet apply_corners(const Homography& h, const CornerSet& cs) {
    CornerSet out;
    out.frame = Frame::target;
    for (std::size_t i = 0; i < 4; ++i) out.corners[i] = apply(h, cs.corners[i]);
    return out;
}

/// Solves the 8x8 direct linear transform for the homography taking each
/// src corner to the matching dst corner. Gaussian elimination with partial
/// pivoting.
inline Homography from_four_points(const CornerSet& src, const CornerSet& dst) {
    for (const CornerSet* cs : {&src, &dst}) {
        if (!cs->is_valid()) throw SingularSystem("degenerate corner set (self-intersecting or ~zero area)");
    }
    for (std::size_t skip = 0; skip < 4; ++skip) {
        std::array<Point2, 3> t{};
        std::size_t k = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            if (i != skip) t[k++] = src.corners[i];
        }
        if (std::abs(detail::cross(t[0], t[1], t[2])) <= kEpsArea) {
            throw SingularSystem("three source corners are collinear");
        }
    }

    std::array<std::array<double, 9>, 8> a{};  // augmented [A | b]
    for (std::size_t i = 0; i < 4; ++i) {
        const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
        a[2 * i] = {x, y, 1, 0, 0, 0, -x * u, -y * u, u};
        a[2 * i + 1] = {0, 0, 0, x, y, 1, -x * v, -y * v, v};
    }

    double scale = 0.0;
    for (const auto& row : a) {
        for (std::size_t c = 0; c < 8; ++c) scale = std::max(scale, std::abs(row[c]));
    }
    const double tol = 1e-13 * scale;

    for (std::size_t col = 0; col < 8; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < 8; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        }
        if (!(std::abs(a[piv][col]) > tol)) throw SingularSystem("DLT system is rank-deficient");
        std::swap(a[col], a[piv]);
        for (std::size_t r = col + 1; r < 8; ++r) {
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (std::size_t c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
        }
    }
    std::array<double, 8> p{};
    for (std::size_t i = 8; i-- > 0;) {
        double s = a[i][8];
        for (std::size_t c = i + 1; c < 8; ++c) s -= a[i][c] * p[c];
        p[i] = s / a[i][i];
    }
    return Homography::from_params(p);
}

}  // namespace visirnet

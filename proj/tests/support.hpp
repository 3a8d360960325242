#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "visirnet/geometry.hpp"
#include "visirnet/random.hpp"
#include "visirnet/tensor.hpp"

namespace testing_support {

using namespace visirnet;

/// Relative error with an absolute floor, the usual gradient-check measure.
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-6) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

inline FeatureMap random_map(int h, int w, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    FeatureMap m(h, w, c);
    for (double& v : m.data()) v = uniform(rng, lo, hi);
    return m;
}

inline Tensor random_tensor(int n, Shape3 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(n, s);
    for (std::size_t i = 0; i < t.size(); ++i) t.raw()[i] = uniform(rng, lo, hi);
    return t;
}

/// A well-conditioned homography: the n x n square's corners jittered by at
/// most `jitter` pixels.
inline Homography random_homography(int n, double jitter, Rng& rng) {
    const CornerSet src = square_corners(n, Frame::source);
    for (;;) {
        CornerSet dst = src;
        dst.frame = Frame::target;
        for (auto& p : dst.corners) {
            p.x += uniform(rng, -jitter, jitter);
            p.y += uniform(rng, -jitter, jitter);
        }
        if (dst.is_valid() && dst.is_convex()) return from_four_points(src, dst);
    }
}

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("visirnet_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

}  // namespace testing_support

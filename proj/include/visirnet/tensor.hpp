#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "visirnet/errors.hpp"

namespace visirnet {

/// Storage with a fixed alignment. Eigen peels vectorized loops according to
/// the start address, so malloc-aligned buffers give run-to-run differences in
/// the last bits of sums.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Shape3 {
    int height = 0;
    int width = 0;
    int channels = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
               static_cast<std::size_t>(channels);
    }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// Dense height x width x channels grid, channels fastest.
class FeatureMap {
public:
    FeatureMap() = default;
    FeatureMap(int height, int width, int channels, double fill = 0.0) : shape_{height, width, channels} {
        if (height <= 0 || width <= 0 || channels <= 0) {
            throw ShapeMismatch("feature map dimensions must be positive");
        }
        data_.assign(shape_.size(), fill);
    }
    explicit FeatureMap(Shape3 s, double fill = 0.0) : FeatureMap(s.height, s.width, s.channels, fill) {}

    const Shape3& shape() const noexcept { return shape_; }
    int height() const noexcept { return shape_.height; }
    int width() const noexcept { return shape_.width; }
    int channels() const noexcept { return shape_.channels; }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * static_cast<std::size_t>(shape_.width) +
                static_cast<std::size_t>(col)) *
                   static_cast<std::size_t>(shape_.channels) +
               static_cast<std::size_t>(ch);
    }
    double& at(int row, int col, int ch) { return data_[index(row, col, ch)]; }
    const double& at(int row, int col, int ch) const { return data_[index(row, col, ch)]; }

    bool contains(int row, int col) const {
        return row >= 0 && row < shape_.height && col >= 0 && col < shape_.width;
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    Shape3 shape_{};
    AlignedBuffer data_;
};

/// Image with 1 or 3 channels, values in [0,1].
class ImageTensor {
public:
    ImageTensor() = default;
    explicit ImageTensor(FeatureMap pixels) : pixels_(std::move(pixels)) {
        if (pixels_.channels() != 1 && pixels_.channels() != 3) {
            throw ShapeMismatch("image must have 1 or 3 channels, got " + std::to_string(pixels_.channels()));
        }
        for (double& v : pixels_.data()) {
            if (!std::isfinite(v)) throw FormatError("image contains non-finite values");
            if (v < 0.0) v = 0.0;
            if (v > 1.0) v = 1.0;
        }
    }
    ImageTensor(int height, int width, int channels) : ImageTensor(FeatureMap(height, width, channels)) {}

    const FeatureMap& pixels() const noexcept { return pixels_; }
    int height() const noexcept { return pixels_.height(); }
    int width() const noexcept { return pixels_.width(); }
    int channels() const noexcept { return pixels_.channels(); }
    double at(int row, int col, int ch) const { return pixels_.at(row, col, ch); }

    /// Grayscale images are replicated to three channels.
    ImageTensor to_rgb() const {
        if (channels() == 3) return *this;
        FeatureMap out(height(), width(), 3);
        for (int r = 0; r < height(); ++r) {
            for (int c = 0; c < width(); ++c) {
                for (int k = 0; k < 3; ++k) out.at(r, c, k) = pixels_.at(r, c, 0);
            }
        }
        return ImageTensor(std::move(out));
    }

private:
    FeatureMap pixels_;
};

/// Batch of feature maps in NHWC order.
class Tensor {
public:
    Tensor() = default;
    Tensor(int batch, Shape3 s, double fill = 0.0) : batch_(batch), shape_(s) {
        if (batch <= 0) throw ShapeMismatch("batch size must be positive");
        data_.assign(static_cast<std::size_t>(batch) * s.size(), fill);
    }

    static Tensor stack(std::span<const FeatureMap> maps) {
        if (maps.empty()) throw ShapeMismatch("cannot stack an empty list of maps");
        Tensor t(static_cast<int>(maps.size()), maps[0].shape());
        for (std::size_t i = 0; i < maps.size(); ++i) {
            if (maps[i].shape() != t.shape_) throw ShapeMismatch("stacked maps differ in shape");
            std::copy(maps[i].data().begin(), maps[i].data().end(), t.sample_data(static_cast<int>(i)).begin());
        }
        return t;
    }

    int batch() const noexcept { return batch_; }
    const Shape3& shape() const noexcept { return shape_; }
    int height() const noexcept { return shape_.height; }
    int width() const noexcept { return shape_.width; }
    int channels() const noexcept { return shape_.channels; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t sample_size() const noexcept { return shape_.size(); }

    std::size_t index(int n, int row, int col, int ch) const {
        return static_cast<std::size_t>(n) * shape_.size() +
               (static_cast<std::size_t>(row) * static_cast<std::size_t>(shape_.width) +
                static_cast<std::size_t>(col)) *
                   static_cast<std::size_t>(shape_.channels) +
               static_cast<std::size_t>(ch);
    }
    double& at(int n, int row, int col, int ch) { return data_[index(n, row, col, ch)]; }
    double at(int n, int row, int col, int ch) const { return data_[index(n, row, col, ch)]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* raw() noexcept { return data_.data(); }
    const double* raw() const noexcept { return data_.data(); }

    std::span<double> sample_data(int n) { return {data_.data() + static_cast<std::size_t>(n) * shape_.size(), shape_.size()}; }
    std::span<const double> sample_data(int n) const {
        return {data_.data() + static_cast<std::size_t>(n) * shape_.size(), shape_.size()};
    }

    FeatureMap sample(int n) const {
        FeatureMap m(shape_);
        auto src = sample_data(n);
        std::copy(src.begin(), src.end(), m.data().begin());
        return m;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
    int batch_ = 0;
    Shape3 shape_{};
    AlignedBuffer data_;
};

}  // namespace visirnet

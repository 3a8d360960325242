#pragma once

// Minimal layer library with hand-written backward passes. Activations are
// NHWC Tensors; dense layers see them as (batch, 1, 1, features).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "visirnet/errors.hpp"
#include "visirnet/random.hpp"
#include "visirnet/tensor.hpp"

namespace visirnet::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// A named, row-major parameter or buffer. Buffers (trainable == false) are
/// state such as batch-norm running statistics; they are checkpointed but never
/// receive gradients.
struct Parameter {
    std::string name;
    std::vector<std::int64_t> shape;
    AlignedBuffer value;
    AlignedBuffer grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, std::vector<std::int64_t> s, bool train = true)
        : name(std::move(n)), shape(std::move(s)), trainable(train) {
        std::size_t count = 1;
        for (auto d : shape) count *= static_cast<std::size_t>(d);
        value.assign(count, 0.0);
        if (trainable) grad.assign(count, 0.0);
    }

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

struct Context {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // dropout masks; may be null in eval mode
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, const Context& ctx) = 0;
    /// Returns dL/dx and accumulates parameter gradients. Uses state cached by
    /// the most recent training-mode forward.
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual std::vector<Parameter*> parameters() { return {}; }
    virtual Shape3 output_shape(const Shape3& in) const { return in; }
    virtual void clear_cache() {}
};

/// 3x3, stride 1, SAME (zero) padding.
class Conv3x3 final : public Layer {
public:
    Conv3x3(const std::string& name, int in_channels, int out_channels)
        : cin_(in_channels),
          cout_(out_channels),
          weight_(name + ".weight", {9 * in_channels, out_channels}),
          bias_(name + ".bias", {out_channels}) {}

    void init_he_uniform(std::mt19937_64& rng) {
        const double limit = std::sqrt(6.0 / (9.0 * cin_));
        for (double& w : weight_.value) w = visirnet::uniform(rng, -limit, limit);
        std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
    }

    Tensor forward(const Tensor& x, const Context& ctx) override {
        check_input(x);
        Tensor y(x.batch(), output_shape(x.shape()));
        const ConstMatrixMap w(weight_.value.data(), 9 * cin_, cout_);
        const Eigen::Map<const Eigen::RowVectorXd> b(bias_.value.data(), cout_);
        const std::size_t pixels = static_cast<std::size_t>(x.batch()) * x.height() * x.width();
        RowMatrix col;
        for (std::size_t p0 = 0; p0 < pixels; p0 += kBlock) {
            const std::size_t p1 = std::min(pixels, p0 + kBlock);
            im2col(x, p0, p1, col);
            MatrixMap out(y.raw() + p0 * cout_, static_cast<Eigen::Index>(p1 - p0), cout_);
            out.noalias() = col * w;
            out.rowwise() += b;
        }
        if (ctx.training) input_ = x;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        if (input_.size() == 0) throw Error("Conv3x3::backward called without a cached training forward");
        const Tensor& x = input_;
        Tensor dx(x.batch(), x.shape());
        const ConstMatrixMap w(weight_.value.data(), 9 * cin_, cout_);
        MatrixMap dw(weight_.grad.data(), 9 * cin_, cout_);
        Eigen::Map<Eigen::RowVectorXd> db(bias_.grad.data(), cout_);
        const std::size_t pixels = static_cast<std::size_t>(x.batch()) * x.height() * x.width();
        RowMatrix col, dcol;
        for (std::size_t p0 = 0; p0 < pixels; p0 += kBlock) {
            const std::size_t p1 = std::min(pixels, p0 + kBlock);
            const auto rows = static_cast<Eigen::Index>(p1 - p0);
            const ConstMatrixMap g(dy.raw() + p0 * cout_, rows, cout_);
            im2col(x, p0, p1, col);
            dw.noalias() += col.transpose() * g;
            db += g.colwise().sum();
            dcol.noalias() = g * w.transpose();
            col2im(dcol, p0, p1, dx);
        }
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

    Shape3 output_shape(const Shape3& in) const override { return {in.height, in.width, cout_}; }

    void clear_cache() override { input_ = Tensor(); }

    Parameter& weight() { return weight_; }
    Parameter& bias() { return bias_; }

private:
    static constexpr std::size_t kBlock = 2048;

    void check_input(const Tensor& x) const {
        if (x.channels() != cin_) {
            throw ShapeMismatch("conv expects " + std::to_string(cin_) + " channels, got " + std::to_string(x.channels()));
        }
    }

    // Rows are pixels p0..p1 of the flattened (n, r, c) index; columns are
    // (ki, kj, cin).
    void im2col(const Tensor& x, std::size_t p0, std::size_t p1, RowMatrix& col) const {
        const int H = x.height(), W = x.width();
        col.resize(static_cast<Eigen::Index>(p1 - p0), 9 * cin_);
        for (std::size_t p = p0; p < p1; ++p) {
            const int n = static_cast<int>(p / (static_cast<std::size_t>(H) * W));
            const int rem = static_cast<int>(p % (static_cast<std::size_t>(H) * W));
            const int r = rem / W, c = rem % W;
            double* dst = col.data() + (p - p0) * 9 * static_cast<std::size_t>(cin_);
            for (int ki = 0; ki < 3; ++ki) {
                const int rr = r + ki - 1;
                for (int kj = 0; kj < 3; ++kj, dst += cin_) {
                    const int cc = c + kj - 1;
                    if (rr < 0 || rr >= H || cc < 0 || cc >= W) {
                        std::fill(dst, dst + cin_, 0.0);
                    } else {
                        const double* src = x.raw() + x.index(n, rr, cc, 0);
                        std::copy(src, src + cin_, dst);
                    }
                }
            }
        }
    }

    void col2im(const RowMatrix& dcol, std::size_t p0, std::size_t p1, Tensor& dx) const {
        const int H = dx.height(), W = dx.width();
        for (std::size_t p = p0; p < p1; ++p) {
            const int n = static_cast<int>(p / (static_cast<std::size_t>(H) * W));
            const int rem = static_cast<int>(p % (static_cast<std::size_t>(H) * W));
            const int r = rem / W, c = rem % W;
            const double* src = dcol.data() + (p - p0) * 9 * static_cast<std::size_t>(cin_);
            for (int ki = 0; ki < 3; ++ki) {
                const int rr = r + ki - 1;
                for (int kj = 0; kj < 3; ++kj, src += cin_) {
                    const int cc = c + kj - 1;
                    if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                    double* dst = dx.raw() + dx.index(n, rr, cc, 0);
                    for (int k = 0; k < cin_; ++k) dst[k] += src[k];
                }
            }
        }
    }

    int cin_;
    int cout_;
    Parameter weight_;
    Parameter bias_;
    Tensor input_;
};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates running estimates; eval mode uses the running
/// estimates.
class BatchNorm final : public Layer {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    BatchNorm(const std::string& name, int channels)
        : c_(channels),
          gamma_(name + ".gamma", {channels}),
          beta_(name + ".beta", {channels}),
          running_mean_(name + ".running_mean", {channels}, false),
          running_var_(name + ".running_var", {channels}, false) {
        std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
        std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0);
    }

    Tensor forward(const Tensor& x, const Context& ctx) override {
        if (x.channels() != c_) throw ShapeMismatch("batch norm channel mismatch");
        const std::size_t m = x.size() / static_cast<std::size_t>(c_);
        std::vector<double> mean(c_, 0.0), var(c_, 0.0);
        if (ctx.training) {
            const double* px = x.raw();
            for (std::size_t i = 0; i < m; ++i, px += c_) {
                for (int k = 0; k < c_; ++k) mean[k] += px[k];
            }
            for (double& v : mean) v /= static_cast<double>(m);
            px = x.raw();
            for (std::size_t i = 0; i < m; ++i, px += c_) {
                for (int k = 0; k < c_; ++k) {
                    const double d = px[k] - mean[k];
                    var[k] += d * d;
                }
            }
            for (double& v : var) v /= static_cast<double>(m);
            const double unbiased = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
            for (int k = 0; k < c_; ++k) {
                running_mean_.value[k] = (1 - kMomentum) * running_mean_.value[k] + kMomentum * mean[k];
                running_var_.value[k] = (1 - kMomentum) * running_var_.value[k] + kMomentum * var[k] * unbiased;
            }
        } else {
            mean.assign(running_mean_.value.begin(), running_mean_.value.end());
            var.assign(running_var_.value.begin(), running_var_.value.end());
        }
        inv_std_.assign(c_, 0.0);
        for (int k = 0; k < c_; ++k) inv_std_[k] = 1.0 / std::sqrt(var[k] + kEps);

        Tensor y(x.batch(), x.shape());
        Tensor xhat = ctx.training ? Tensor(x.batch(), x.shape()) : Tensor();
        const double* px = x.raw();
        double* py = y.raw();
        for (std::size_t i = 0; i < m; ++i, px += c_, py += c_) {
            for (int k = 0; k < c_; ++k) {
                const double h = (px[k] - mean[k]) * inv_std_[k];
                py[k] = gamma_.value[k] * h + beta_.value[k];
                if (ctx.training) xhat.raw()[i * c_ + k] = h;
            }
        }
        trained_forward_ = ctx.training;
        if (ctx.training) xhat_ = std::move(xhat);
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        const std::size_t m = dy.size() / static_cast<std::size_t>(c_);
        Tensor dx(dy.batch(), dy.shape());
        if (!trained_forward_) {
            for (std::size_t i = 0; i < m; ++i) {
                for (int k = 0; k < c_; ++k) dx.raw()[i * c_ + k] = dy.raw()[i * c_ + k] * gamma_.value[k] * inv_std_[k];
            }
            return dx;
        }
        if (xhat_.size() != dy.size()) throw Error("BatchNorm::backward without matching cached forward");
        std::vector<double> sum_dy(c_, 0.0), sum_dy_xhat(c_, 0.0);
        const double* pd = dy.raw();
        const double* ph = xhat_.raw();
        for (std::size_t i = 0; i < m; ++i, pd += c_, ph += c_) {
            for (int k = 0; k < c_; ++k) {
                sum_dy[k] += pd[k];
                sum_dy_xhat[k] += pd[k] * ph[k];
            }
        }
        for (int k = 0; k < c_; ++k) {
            beta_.grad[k] += sum_dy[k];
            gamma_.grad[k] += sum_dy_xhat[k];
        }
        const double inv_m = 1.0 / static_cast<double>(m);
        pd = dy.raw();
        ph = xhat_.raw();
        double* pdx = dx.raw();
        for (std::size_t i = 0; i < m; ++i, pd += c_, ph += c_, pdx += c_) {
            for (int k = 0; k < c_; ++k) {
                pdx[k] = gamma_.value[k] * inv_std_[k] * (pd[k] - inv_m * sum_dy[k] - ph[k] * inv_m * sum_dy_xhat[k]);
            }
        }
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }

    void clear_cache() override { xhat_ = Tensor(); }

    Parameter& gamma() { return gamma_; }
    Parameter& beta() { return beta_; }
    Parameter& running_mean() { return running_mean_; }
    Parameter& running_var() { return running_var_; }

private:
    int c_;
    Parameter gamma_;
    Parameter beta_;
    Parameter running_mean_;
    Parameter running_var_;
    std::vector<double> inv_std_;
    Tensor xhat_;
    bool trained_forward_ = false;
};

class ReLU final : public Layer {
public:
    Tensor forward(const Tensor& x, const Context& ctx) override {
        Tensor y(x.batch(), x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y.raw()[i] = x.raw()[i] > 0 ? x.raw()[i] : 0.0;
        if (ctx.training) output_ = y;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        Tensor dx(dy.batch(), dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) dx.raw()[i] = output_.raw()[i] > 0 ? dy.raw()[i] : 0.0;
        return dx;
    }

    void clear_cache() override { output_ = Tensor(); }

private:
    Tensor output_;
};

/// 2x2 window, stride 2, SAME padding: output is ceil(H/2) x ceil(W/2) and
/// edge windows only consider in-range texels.
class MaxPool2x2 final : public Layer {
public:
    Shape3 output_shape(const Shape3& in) const override {
        return {(in.height + 1) / 2, (in.width + 1) / 2, in.channels};
    }

    Tensor forward(const Tensor& x, const Context& ctx) override {
        const Shape3 os = output_shape(x.shape());
        Tensor y(x.batch(), os);
        std::vector<std::uint32_t> arg(y.size());
        for (int n = 0; n < x.batch(); ++n) {
            for (int r = 0; r < os.height; ++r) {
                for (int c = 0; c < os.width; ++c) {
                    for (int k = 0; k < os.channels; ++k) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_idx = 0;
                        for (int dr = 0; dr < 2; ++dr) {
                            for (int dc = 0; dc < 2; ++dc) {
                                const int rr = 2 * r + dr, cc = 2 * c + dc;
                                if (rr >= x.height() || cc >= x.width()) continue;
                                const std::size_t idx = x.index(n, rr, cc, k);
                                if (x.raw()[idx] > best) {
                                    best = x.raw()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        const std::size_t o = y.index(n, r, c, k);
                        y.raw()[o] = best;
                        arg[o] = static_cast<std::uint32_t>(best_idx);
                    }
                }
            }
        }
        if (ctx.training) {
            argmax_ = std::move(arg);
            in_batch_ = x.batch();
            in_shape_ = x.shape();
        }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        Tensor dx(in_batch_, in_shape_);
        for (std::size_t i = 0; i < dy.size(); ++i) dx.raw()[argmax_[i]] += dy.raw()[i];
        return dx;
    }

    void clear_cache() override { argmax_.clear(); }

private:
    std::vector<std::uint32_t> argmax_;
    int in_batch_ = 0;
    Shape3 in_shape_{};
};

/// Fully connected layer over the flattened per-sample activation.
class Dense final : public Layer {
public:
    Dense(const std::string& name, int in_features, int out_features)
        : in_(in_features),
          out_(out_features),
          weight_(name + ".weight", {in_features, out_features}),
          bias_(name + ".bias", {out_features}) {}

    void init_glorot_uniform(std::mt19937_64& rng, double gain = 1.0) {
        const double limit = gain * std::sqrt(6.0 / (in_ + out_));
        for (double& w : weight_.value) w = visirnet::uniform(rng, -limit, limit);
        std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
    }

    Tensor forward(const Tensor& x, const Context& ctx) override {
        if (x.sample_size() != static_cast<std::size_t>(in_)) {
            throw ShapeMismatch("dense expects " + std::to_string(in_) + " features, got " + std::to_string(x.sample_size()));
        }
        Tensor y(x.batch(), {1, 1, out_});
        const ConstMatrixMap xm(x.raw(), x.batch(), in_);
        const ConstMatrixMap w(weight_.value.data(), in_, out_);
        MatrixMap ym(y.raw(), x.batch(), out_);
        ym.noalias() = xm * w;
        ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), out_);
        if (ctx.training) input_ = x;
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        const ConstMatrixMap g(dy.raw(), dy.batch(), out_);
        const ConstMatrixMap xm(input_.raw(), input_.batch(), in_);
        const ConstMatrixMap w(weight_.value.data(), in_, out_);
        MatrixMap(weight_.grad.data(), in_, out_).noalias() += xm.transpose() * g;
        Eigen::Map<Eigen::RowVectorXd>(bias_.grad.data(), out_) += g.colwise().sum();
        Tensor dx(input_.batch(), input_.shape());
        MatrixMap(dx.raw(), input_.batch(), in_).noalias() = g * w.transpose();
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    Shape3 output_shape(const Shape3&) const override { return {1, 1, out_}; }
    void clear_cache() override { input_ = Tensor(); }

    Parameter& weight() { return weight_; }
    Parameter& bias() { return bias_; }

private:
    int in_;
    int out_;
    Parameter weight_;
    Parameter bias_;
    Tensor input_;
};

/// Inverted dropout; identity outside training.
class Dropout final : public Layer {
public:
    explicit Dropout(double rate) : rate_(rate) {
        if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    }

    Tensor forward(const Tensor& x, const Context& ctx) override {
        if (!ctx.training || rate_ == 0.0) {
            mask_.clear();
            return x;
        }
        if (ctx.rng == nullptr) throw Error("dropout in training mode needs a random generator");
        const double scale = 1.0 / (1.0 - rate_);
        mask_.resize(x.size());
        Tensor y(x.batch(), x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            mask_[i] = visirnet::uniform01(*ctx.rng) < rate_ ? 0.0 : scale;
            y.raw()[i] = x.raw()[i] * mask_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& dy) override {
        if (mask_.empty()) return dy;
        Tensor dx(dy.batch(), dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) dx.raw()[i] = dy.raw()[i] * mask_[i];
        return dx;
    }

    double rate() const noexcept { return rate_; }
    void clear_cache() override { mask_.clear(); }

private:
    double rate_;
    std::vector<double> mask_;
};

/// Layers applied in order.
class Sequential {
public:
    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    Tensor forward(Tensor x, const Context& ctx) {
        for (auto& l : layers_) x = l->forward(x, ctx);
        return x;
    }

    Tensor backward(Tensor dy) {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) dy = (*it)->backward(dy);
        return dy;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& l : layers_) {
            for (auto* p : l->parameters()) out.push_back(p);
        }
        return out;
    }

    Shape3 output_shape(Shape3 s) const {
        for (const auto& l : layers_) s = l->output_shape(s);
        return s;
    }

    void clear_cache() {
        for (auto& l : layers_) l->clear_cache();
    }

    std::size_t size() const noexcept { return layers_.size(); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace visirnet::nn

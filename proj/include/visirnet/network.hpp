#pragma once

// Two-branch feature embedding backbone, zero-pad + concat fusion and the
// regression block with either a corner head or a homography head.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "visirnet/checkpoint.hpp"
#include "visirnet/errors.hpp"
#include "visirnet/geometry.hpp"
#include "visirnet/losses.hpp"
#include "visirnet/nn.hpp"
#include "visirnet/tensor.hpp"

namespace visirnet {

struct ModelConfig {
    Head head = Head::corners;
    /// Shrinks spatial sizes and channel counts: 1, 1/2 or 1/4.
    double scale = 1.0;
    double dropout = 0.2;

    int scaled(int full) const { return static_cast<int>(std::lround(full * scale)); }
    int rgb_size() const { return scaled(192); }
    int ir_size() const { return scaled(128); }
    int embed_channels() const { return scaled(64); }
    std::array<int, 6> level_filters() const {
        return {scaled(32), scaled(64), scaled(64), scaled(128), scaled(128), scaled(256)};
    }
    int dense_units() const { return scaled(1024); }

    void validate() const {
        if (scale != 1.0 && scale != 0.5 && scale != 0.25) {
            throw ConfigError("model scale must be 1, 0.5 or 0.25");
        }
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    }

    nlohmann::json to_json() const { return {{"head", to_string(head)}, {"scale", scale}, {"dropout", dropout}}; }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.head = parse_head(j.at("head").get<std::string>());
        c.scale = j.at("scale").get<double>();
        c.dropout = j.value("dropout", 0.2);
        c.validate();
        return c;
    }
};

/// 8 raw regression outputs plus their interpretation.
struct NetworkOutput {
    std::array<double, 8> raw{};
    Head head = Head::corners;

    /// Valid for the corner head: predicted target-frame corners.
    CornerSet corners() const { return CornerSet::from_flat(raw, Frame::target); }

    /// Valid for the homography head: p1..p8 with p9 := 1.
    Homography homography() const { return Homography::from_params(raw); }
};

/// One embedding branch: conv+BN stem, three residual double conv-BN-ReLU
/// groups, conv+BN+conv tail. All convs are 3x3/stride 1/SAME with the same
/// channel count, so output spatial size equals input spatial size.
class EmbeddingBranch {
public:
    EmbeddingBranch(const std::string& name, int channels, int input_size)
        : name_(name), channels_(channels), input_size_(input_size) {
        stem_.add<nn::Conv3x3>(name + ".stem.conv", 3, channels);
        stem_.add<nn::BatchNorm>(name + ".stem.bn", channels);
        for (int b = 0; b < 3; ++b) {
            const std::string p = name + ".res" + std::to_string(b);
            auto& blk = blocks_[static_cast<std::size_t>(b)];
            blk.add<nn::Conv3x3>(p + ".conv1", channels, channels);
            blk.add<nn::BatchNorm>(p + ".bn1", channels);
            blk.add<nn::ReLU>();
            blk.add<nn::Conv3x3>(p + ".conv2", channels, channels);
            blk.add<nn::BatchNorm>(p + ".bn2", channels);
            blk.add<nn::ReLU>();
        }
        tail_.add<nn::Conv3x3>(name + ".tail.conv1", channels, channels);
        tail_.add<nn::BatchNorm>(name + ".tail.bn", channels);
        tail_.add<nn::Conv3x3>(name + ".tail.conv2", channels, channels);
    }

    void init(std::mt19937_64& rng) {
        init_convs(stem_, rng);
        for (auto& b : blocks_) init_convs(b, rng);
        init_convs(tail_, rng);
    }

    Tensor forward(const Tensor& images, const nn::Context& ctx) {
        if (images.height() != input_size_ || images.width() != input_size_ || images.channels() != 3) {
            throw ShapeMismatch(name_ + " branch expects " + std::to_string(input_size_) + "x" +
                                std::to_string(input_size_) + "x3 input, got " + to_string(images.shape()));
        }
        Tensor x = stem_.forward(images, ctx);
        for (auto& b : blocks_) {
            Tensor y = b.forward(x, ctx);
            for (std::size_t i = 0; i < y.size(); ++i) y.raw()[i] += x.raw()[i];
            x = std::move(y);
        }
        return tail_.forward(std::move(x), ctx);
    }

    /// Returns dL/d(images).
    Tensor backward(const Tensor& d_out) {
        Tensor d = tail_.backward(d_out);
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            Tensor d_inner = it->backward(d);
            for (std::size_t i = 0; i < d.size(); ++i) d.raw()[i] += d_inner.raw()[i];
        }
        return stem_.backward(std::move(d));
    }

    std::vector<nn::Parameter*> parameters() {
        std::vector<nn::Parameter*> out;
        for (auto* seq : sequences()) {
            for (auto* p : seq->parameters()) out.push_back(p);
        }
        return out;
    }

    void clear_cache() {
        for (auto* seq : sequences()) seq->clear_cache();
    }

    int channels() const noexcept { return channels_; }
    int input_size() const noexcept { return input_size_; }

private:
    std::vector<nn::Sequential*> sequences() { return {&stem_, &blocks_[0], &blocks_[1], &blocks_[2], &tail_}; }

    static void init_convs(nn::Sequential& seq, std::mt19937_64& rng) {
        for (auto* p : seq.parameters()) {
            if (p->name.ends_with(".weight")) {
                const double fan_in = static_cast<double>(p->shape[0]);
                const double limit = std::sqrt(6.0 / fan_in);
                for (double& w : p->value) w = visirnet::uniform(rng, -limit, limit);
            }
        }
    }

    std::string name_;
    int channels_;
    int input_size_;
    nn::Sequential stem_;
    std::array<nn::Sequential, 3> blocks_;
    nn::Sequential tail_;
};

/// Six levels of two conv-BN-ReLU sub-levels (max-pool after levels 1-5),
/// flatten, dense(ReLU), dense(linear), dropout, dense(8, linear).
class RegressionBlock {
public:
    RegressionBlock(const ModelConfig& cfg, Shape3 input) : input_(input) {
        const auto filters = cfg.level_filters();
        int cin = input.channels;
        for (int l = 0; l < 6; ++l) {
            const std::string p = "reg.l" + std::to_string(l + 1);
            const int f = filters[static_cast<std::size_t>(l)];
            for (int s = 0; s < 2; ++s) {
                const std::string q = p + (s == 0 ? "a" : "b");
                net_.add<nn::Conv3x3>(q + ".conv", cin, f);
                net_.add<nn::BatchNorm>(q + ".bn", f);
                net_.add<nn::ReLU>();
                cin = f;
            }
            if (l < 5) net_.add<nn::MaxPool2x2>();
        }
        const Shape3 conv_out = net_.output_shape(input);
        flatten_width_ = static_cast<int>(conv_out.size());
        dense1_ = &net_.add<nn::Dense>("reg.dense1", flatten_width_, cfg.dense_units());
        net_.add<nn::ReLU>();
        dense2_ = &net_.add<nn::Dense>("reg.dense2", cfg.dense_units(), cfg.dense_units());
        net_.add<nn::Dropout>(cfg.dropout);
        out_ = &net_.add<nn::Dense>("reg.out", cfg.dense_units(), 8);
    }

    /// He-uniform convs, Glorot dense layers. The output layer starts with small
    /// weights and a bias equal to `initial_output`.
    void init(std::mt19937_64& rng, const std::array<double, 8>& initial_output) {
        for (auto* p : net_.parameters()) {
            if (p->name.ends_with(".conv.weight")) {
                const double limit = std::sqrt(6.0 / static_cast<double>(p->shape[0]));
                for (double& w : p->value) w = visirnet::uniform(rng, -limit, limit);
            }
        }
        dense1_->init_glorot_uniform(rng);
        dense2_->init_glorot_uniform(rng);
        out_->init_glorot_uniform(rng, 1e-2);
        std::copy(initial_output.begin(), initial_output.end(), out_->bias().value.begin());
    }

    Tensor forward(const Tensor& fused, const nn::Context& ctx) {
        if (fused.shape() != input_) {
            throw ShapeMismatch("regression block expects " + to_string(input_) + ", got " + to_string(fused.shape()));
        }
        return net_.forward(fused, ctx);
    }

    Tensor backward(const Tensor& d_out) { return net_.backward(d_out); }

    std::vector<nn::Parameter*> parameters() { return net_.parameters(); }
    void clear_cache() { net_.clear_cache(); }

    int flatten_width() const noexcept { return flatten_width_; }
    const Shape3& input_shape() const noexcept { return input_; }

private:
    Shape3 input_;
    nn::Sequential net_;
    int flatten_width_ = 0;
    nn::Dense* dense1_ = nullptr;
    nn::Dense* dense2_ = nullptr;
    nn::Dense* out_ = nullptr;
};

/// Zero-pads f_ir (anchored top-left) to f_rgb's spatial size and concatenates
/// along channels: [rgb channels | ir channels].
inline Tensor fuse(const Tensor& f_rgb, const Tensor& f_ir) {
    if (f_rgb.batch() != f_ir.batch()) throw ShapeMismatch("fuse: batch sizes differ");
    if (f_ir.height() > f_rgb.height() || f_ir.width() > f_rgb.width()) {
        throw ShapeMismatch("fuse: IR map is larger than RGB map");
    }
    if (f_rgb.channels() != f_ir.channels()) throw ShapeMismatch("fuse: channel counts differ");
    const int C = f_rgb.channels();
    Tensor out(f_rgb.batch(), {f_rgb.height(), f_rgb.width(), 2 * C});
    for (int n = 0; n < f_rgb.batch(); ++n) {
        for (int r = 0; r < f_rgb.height(); ++r) {
            for (int c = 0; c < f_rgb.width(); ++c) {
                double* dst = out.raw() + out.index(n, r, c, 0);
                const double* a = f_rgb.raw() + f_rgb.index(n, r, c, 0);
                std::copy(a, a + C, dst);
                if (r < f_ir.height() && c < f_ir.width()) {
                    const double* b = f_ir.raw() + f_ir.index(n, r, c, 0);
                    std::copy(b, b + C, dst + C);
                }
            }
        }
    }
    return out;
}

inline FeatureMap fuse(const FeatureMap& f_rgb, const FeatureMap& f_ir) {
    return fuse(Tensor::stack(std::span(&f_rgb, 1)), Tensor::stack(std::span(&f_ir, 1))).sample(0);
}

/// Adjoint of fuse: splits the fused gradient back into the two branches.
inline std::pair<Tensor, Tensor> unfuse_grad(const Tensor& d_fused, const Shape3& ir_shape) {
    const int C = d_fused.channels() / 2;
    Tensor d_rgb(d_fused.batch(), {d_fused.height(), d_fused.width(), C});
    Tensor d_ir(d_fused.batch(), ir_shape);
    for (int n = 0; n < d_fused.batch(); ++n) {
        for (int r = 0; r < d_fused.height(); ++r) {
            for (int c = 0; c < d_fused.width(); ++c) {
                const double* src = d_fused.raw() + d_fused.index(n, r, c, 0);
                std::copy(src, src + C, d_rgb.raw() + d_rgb.index(n, r, c, 0));
                if (r < ir_shape.height && c < ir_shape.width) {
                    std::copy(src + C, src + 2 * C, d_ir.raw() + d_ir.index(n, r, c, 0));
                }
            }
        }
    }
    return {std::move(d_rgb), std::move(d_ir)};
}

/// Stacks images into a batch, replicating grayscale to three channels.
inline Tensor images_to_batch(std::span<const ImageTensor> images) {
    std::vector<FeatureMap> maps;
    maps.reserve(images.size());
    for (const auto& img : images) maps.push_back(img.to_rgb().pixels());
    return Tensor::stack(maps);
}

enum class ParamGroup { rgb_branch, ir_branch, regression };

class VisIRNet {
public:
    VisIRNet(const ModelConfig& cfg, std::uint64_t seed)
        : cfg_((cfg.validate(), cfg)),
          rgb_("rgb", cfg.embed_channels(), cfg.rgb_size()),
          ir_("ir", cfg.embed_channels(), cfg.ir_size()),
          reg_(cfg, {cfg.rgb_size(), cfg.rgb_size(), 2 * cfg.embed_channels()}) {
        std::mt19937_64 rng(seed);
        rgb_.init(rng);
        ir_.init(rng);
        reinit_regression(rng);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    EmbeddingBranch& rgb_branch() noexcept { return rgb_; }
    EmbeddingBranch& ir_branch() noexcept { return ir_; }
    RegressionBlock& regression() noexcept { return reg_; }

    /// Fixed source-frame corners the homography head is measured on.
    CornerSet source_corners() const { return square_corners(cfg_.ir_size(), Frame::source); }

    /// Bias of the output layer at initialization: identity parameters for the
    /// homography head, the centred un-jittered box for the corner head.
    std::array<double, 8> initial_output() const {
        if (cfg_.head == Head::homography) return {1, 0, 0, 0, 1, 0, 0, 0};
        const double off = (cfg_.rgb_size() - cfg_.ir_size()) / 2.0;
        const double m = cfg_.ir_size() - 1;
        return {off, off, off + m, off, off + m, off + m, off, off + m};
    }

    void reinit_regression(std::mt19937_64& rng) { reg_.init(rng, initial_output()); }

    Tensor branch_forward(ParamGroup which, const Tensor& images, const nn::Context& ctx) {
        if (which == ParamGroup::rgb_branch) return rgb_.forward(images, ctx);
        if (which == ParamGroup::ir_branch) return ir_.forward(images, ctx);
        throw Error("branch_forward needs an embedding branch");
    }

    Tensor regression_forward(const Tensor& fused, const nn::Context& ctx) { return reg_.forward(fused, ctx); }

    /// Raw (batch, 1, 1, 8) output.
    Tensor forward_raw(const Tensor& rgb_images, const Tensor& ir_images, const nn::Context& ctx) {
        Tensor f_rgb = rgb_.forward(rgb_images, ctx);
        Tensor f_ir = ir_.forward(ir_images, ctx);
        ir_feature_shape_ = f_ir.shape();
        return reg_.forward(fuse(f_rgb, f_ir), ctx);
    }

    std::vector<NetworkOutput> forward(const Tensor& rgb_images, const Tensor& ir_images, const nn::Context& ctx) {
        return to_outputs(forward_raw(rgb_images, ir_images, ctx));
    }

    std::vector<NetworkOutput> to_outputs(const Tensor& raw) const {
        std::vector<NetworkOutput> out(static_cast<std::size_t>(raw.batch()));
        for (int n = 0; n < raw.batch(); ++n) {
            auto& o = out[static_cast<std::size_t>(n)];
            o.head = cfg_.head;
            for (int k = 0; k < 8; ++k) o.raw[static_cast<std::size_t>(k)] = raw.at(n, 0, 0, k);
        }
        return out;
    }

    /// Backpropagates through the regression block and, when requested, both
    /// branches. Requires a preceding training-mode forward_raw.
    void backward(const Tensor& d_raw, bool through_backbone) {
        Tensor d_fused = reg_.backward(d_raw);
        if (!through_backbone) return;
        auto [d_rgb, d_ir] = unfuse_grad(d_fused, ir_feature_shape_);
        rgb_.backward(d_rgb);
        ir_.backward(d_ir);
    }

    std::vector<nn::Parameter*> parameters(ParamGroup g) {
        switch (g) {
            case ParamGroup::rgb_branch: return rgb_.parameters();
            case ParamGroup::ir_branch: return ir_.parameters();
            case ParamGroup::regression: return reg_.parameters();
        }
        return {};
    }

    std::vector<nn::Parameter*> parameters() {
        auto out = rgb_.parameters();
        for (auto* p : ir_.parameters()) out.push_back(p);
        for (auto* p : reg_.parameters()) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    void clear_cache() {
        rgb_.clear_cache();
        ir_.clear_cache();
        reg_.clear_cache();
    }

    Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) {
        Checkpoint ck;
        ck.meta = std::move(extra);
        ck.meta["model"] = cfg_.to_json();
        for (auto* p : parameters()) ck.tensors.push_back({p->name, p->shape, {p->value.begin(), p->value.end()}});
        return ck;
    }

    /// Copies every tensor of the given groups from `ck`. Shapes must match.
    void load_parameters(const Checkpoint& ck, std::initializer_list<ParamGroup> groups) {
        for (auto g : groups) {
            for (auto* p : parameters(g)) {
                const NamedTensor* t = ck.find(p->name);
                if (t == nullptr) throw FormatError("checkpoint is missing tensor '" + p->name + "'");
                if (t->shape != p->shape) throw ShapeMismatch("checkpoint tensor '" + p->name + "' has the wrong shape");
                p->value.assign(t->data.begin(), t->data.end());
            }
        }
    }

    static VisIRNet from_checkpoint(const Checkpoint& ck) {
        VisIRNet net(ModelConfig::from_json(ck.meta.at("model")), 0);
        net.load_parameters(ck, {ParamGroup::rgb_branch, ParamGroup::ir_branch, ParamGroup::regression});
        return net;
    }

private:
    ModelConfig cfg_;
    EmbeddingBranch rgb_;
    EmbeddingBranch ir_;
    RegressionBlock reg_;
    Shape3 ir_feature_shape_{};
};

}  // namespace visirnet

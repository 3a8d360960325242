#pragma once

// Training objectives.
//
// Feature-map losses (similarity, MAE, SSIM) compare the IR feature map with
// the RGB feature map resampled at the ground-truth-warped IR grid. Prediction
// losses operate on the 8 raw network outputs. Every loss can optionally fill
// in its gradient w.r.t. its inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "visirnet/errors.hpp"
#include "visirnet/geometry.hpp"
#include "visirnet/sampler.hpp"
#include "visirnet/tensor.hpp"

namespace visirnet {

enum class Head { corners, homography };

inline const char* to_string(Head h) { return h == Head::corners ? "corners" : "homography"; }

inline Head parse_head(const std::string& s) {
    if (s == "corners") return Head::corners;
    if (s == "homography") return Head::homography;
    throw ConfigError("head must be 'corners' or 'homography', got '" + s + "'");
}

struct LossValue {
    double value = 0.0;
    bool has_gradient = false;
};

/// Gradients of a feature-map loss w.r.t. both embeddings.
struct MapLossGrad {
    FeatureMap d_rgb;
    FeatureMap d_ir;
};

using PredGrad = std::array<double, 8>;

enum class MapLossKind { sim, mae, ssim };

inline const char* to_string(MapLossKind k) {
    switch (k) {
        case MapLossKind::sim: return "sim";
        case MapLossKind::mae: return "mae";
        case MapLossKind::ssim: return "ssim";
    }
    return "?";
}

inline MapLossKind parse_map_loss(const std::string& s) {
    if (s == "sim") return MapLossKind::sim;
    if (s == "mae") return MapLossKind::mae;
    if (s == "ssim") return MapLossKind::ssim;
    throw ConfigError("backbone loss must be sim, mae or ssim, got '" + s + "'");
}

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

inline void check_map_pair(const FeatureMap& f_rgb, const FeatureMap& f_ir) {
    if (f_ir.height() != f_ir.width()) throw ShapeMismatch("IR feature map must be square, got " + to_string(f_ir.shape()));
    if (f_rgb.channels() != f_ir.channels()) {
        throw ShapeMismatch("feature maps differ in channels: " + to_string(f_rgb.shape()) + " vs " + to_string(f_ir.shape()));
    }
}

/// Odd window no larger than the map.
inline int effective_window(int requested, int height, int width) {
    int w = std::min({requested, height, width});
    if (w % 2 == 0) --w;
    return std::max(w, 1);
}

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size) * size);
    const double c = (size - 1) / 2.0;
    double total = 0.0;
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double v = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
            w[static_cast<std::size_t>(i) * size + j] = v;
            total += v;
        }
    }
    for (double& v : w) v /= total;
    return w;
}

}  // namespace detail

/// Mean windowed SSIM of two equally shaped maps, averaged over channels and
/// valid window positions. The dynamic range L is the observed range of both
/// maps together. Optionally returns dSSIM/dx and dSSIM/dy.
inline double ssim(const FeatureMap& x, const FeatureMap& y, const SsimOptions& opt = {},
                   FeatureMap* d_x = nullptr, FeatureMap* d_y = nullptr) {
    if (x.shape() != y.shape()) throw ShapeMismatch("ssim: maps differ in shape");
    const int H = x.height(), W = x.width(), C = x.channels();
    const int win = detail::effective_window(opt.window, H, W);
    const auto kernel = detail::gaussian_window(win, opt.sigma);

    double lo = x.data()[0], hi = x.data()[0];
    std::size_t lo_idx = 0, hi_idx = 0;
    bool lo_in_x = true, hi_in_x = true;
    for (int which = 0; which < 2; ++which) {
        auto d = which == 0 ? x.data() : y.data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (d[i] < lo) { lo = d[i]; lo_idx = i; lo_in_x = which == 0; }
            if (d[i] > hi) { hi = d[i]; hi_idx = i; hi_in_x = which == 0; }
        }
    }
    constexpr double kMinRange = 1e-6;
    const bool range_active = (hi - lo) > kMinRange;
    const double L = range_active ? hi - lo : kMinRange;
    const double C1 = (opt.k1 * L) * (opt.k1 * L);
    const double C2 = (opt.k2 * L) * (opt.k2 * L);

    const bool want_grad = d_x != nullptr || d_y != nullptr;
    FeatureMap gx, gy;
    if (want_grad) {
        gx = FeatureMap(x.shape());
        gy = FeatureMap(x.shape());
    }
    double dS_dL = 0.0;

    const int pos_r = H - win + 1, pos_c = W - win + 1;
    const double norm = 1.0 / (static_cast<double>(pos_r) * pos_c * C);
    double total = 0.0;
    for (int ch = 0; ch < C; ++ch) {
        for (int r0 = 0; r0 < pos_r; ++r0) {
            for (int c0 = 0; c0 < pos_c; ++c0) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int i = 0; i < win; ++i) {
                    for (int j = 0; j < win; ++j) {
                        const double w = kernel[static_cast<std::size_t>(i) * win + j];
                        const double a = x.at(r0 + i, c0 + j, ch);
                        const double b = y.at(r0 + i, c0 + j, ch);
                        mx += w * a;
                        my += w * b;
                        sxx += w * a * a;
                        syy += w * b * b;
                        sxy += w * a * b;
                    }
                }
                const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
                const double A1 = 2 * mx * my + C1, A2 = 2 * cxy + C2;
                const double B1 = mx * mx + my * my + C1, B2 = vx + vy + C2;
                const double S = (A1 * A2) / (B1 * B2);
                total += S;
                if (!want_grad) continue;

                const double inv = norm / (B1 * B2);
                if (range_active) {
                    dS_dL += norm * ((A2 - S * B2) / (B1 * B2) * 2 * opt.k1 * opt.k1 * L +
                                     (A1 - S * B1) / (B1 * B2) * 2 * opt.k2 * opt.k2 * L);
                }
                for (int i = 0; i < win; ++i) {
                    for (int j = 0; j < win; ++j) {
                        const double w = kernel[static_cast<std::size_t>(i) * win + j];
                        const double a = x.at(r0 + i, c0 + j, ch);
                        const double b = y.at(r0 + i, c0 + j, ch);
                        // d/da: dA1 = 2 my w, dA2 = 2 w (b - my), dB1 = 2 mx w, dB2 = 2 w (a - mx)
                        const double ga = (2 * my * w * A2 + A1 * 2 * w * (b - my)) -
                                          S * (2 * mx * w * B2 + B1 * 2 * w * (a - mx));
                        const double gb = (2 * mx * w * A2 + A1 * 2 * w * (a - mx)) -
                                          S * (2 * my * w * B2 + B1 * 2 * w * (b - my));
                        gx.at(r0 + i, c0 + j, ch) += ga * inv;
                        gy.at(r0 + i, c0 + j, ch) += gb * inv;
                    }
                }
            }
        }
    }
    if (want_grad) {
        if (range_active) {
            (hi_in_x ? gx : gy).data()[hi_idx] += dS_dL;
            (lo_in_x ? gx : gy).data()[lo_idx] -= dS_dL;
        }
        if (d_x) *d_x = std::move(gx);
        if (d_y) *d_y = std::move(gy);
    }
    return total * norm;
}

/// Shared path for the three feature-map losses: resample f_rgb on the
/// gt-warped IR grid and compare with f_ir.
inline LossValue map_loss(MapLossKind kind, const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h,
                          MapLossGrad* grad = nullptr, const SsimOptions& ssim_opt = {}) {
    detail::check_map_pair(f_rgb, f_ir);
    const Grid grid = warp_grid(make_grid(f_ir.height()), gt_h);
    const FeatureMap warped = resample(f_rgb, grid);
    const double n = static_cast<double>(warped.size());

    LossValue out;
    FeatureMap d_warped, d_ir;
    if (grad) {
        d_warped = FeatureMap(warped.shape());
        d_ir = FeatureMap(f_ir.shape());
    }
    switch (kind) {
        case MapLossKind::sim:
        case MapLossKind::mae: {
            double acc = 0.0;
            for (std::size_t i = 0; i < warped.size(); ++i) {
                const double diff = warped.data()[i] - f_ir.data()[i];
                acc += kind == MapLossKind::sim ? diff * diff : std::abs(diff);
                if (grad) {
                    const double g = kind == MapLossKind::sim ? 2 * diff / n : (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) / n;
                    d_warped.data()[i] = g;
                    d_ir.data()[i] = -g;
                }
            }
            out.value = acc / n;
            break;
        }
        case MapLossKind::ssim: {
            FeatureMap gs_w, gs_ir;
            const double s = ssim(warped, f_ir, ssim_opt, grad ? &gs_w : nullptr, grad ? &gs_ir : nullptr);
            out.value = 1.0 - s;
            if (grad) {
                for (std::size_t i = 0; i < warped.size(); ++i) {
                    d_warped.data()[i] = -gs_w.data()[i];
                    d_ir.data()[i] = -gs_ir.data()[i];
                }
            }
            break;
        }
    }
    if (grad) {
        grad->d_rgb = resample_backward(f_rgb.shape(), grid, d_warped);
        grad->d_ir = std::move(d_ir);
        out.has_gradient = true;
    }
    return out;
}

/// Mean squared difference between the IR embedding and the warped RGB embedding.
inline LossValue sim_loss(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h,
                          MapLossGrad* grad = nullptr) {
    return map_loss(MapLossKind::sim, f_rgb, f_ir, gt_h, grad);
}

inline LossValue mae_loss(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h,
                          MapLossGrad* grad = nullptr) {
    return map_loss(MapLossKind::mae, f_rgb, f_ir, gt_h, grad);
}

inline LossValue ssim_loss(const FeatureMap& f_rgb, const FeatureMap& f_ir, const Homography& gt_h,
                           MapLossGrad* grad = nullptr, const SsimOptions& opt = {}) {
    return map_loss(MapLossKind::ssim, f_rgb, f_ir, gt_h, grad, opt);
}

namespace detail {

inline void check_pred(std::span<const double> pred) {
    if (pred.size() != 8) throw ShapeMismatch("prediction must have exactly 8 values");
}

}  // namespace detail

/// (1/8) sum (p_i - p̂_i)^2 over the free parameters.
inline LossValue h2_loss(std::span<const double> pred, const Homography& gt, PredGrad* grad = nullptr) {
    detail::check_pred(pred);
    double acc = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        const double d = pred[i] - gt[i];
        acc += d * d;
        if (grad) (*grad)[i] = d / 4.0;
    }
    return {acc / 8.0, grad != nullptr};
}

/// Mean squared Euclidean distance between predicted corners (x1,y1,...,x4,y4)
/// and the ground truth.
inline LossValue ace_loss_corners(std::span<const double> pred, const CornerSet& gt_corners, PredGrad* grad = nullptr) {
    detail::check_pred(pred);
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double dx = pred[2 * i] - gt_corners[i].x;
        const double dy = pred[2 * i + 1] - gt_corners[i].y;
        acc += dx * dx + dy * dy;
        if (grad) {
            (*grad)[2 * i] = dx / 2.0;
            (*grad)[2 * i + 1] = dy / 2.0;
        }
    }
    return {acc / 4.0, grad != nullptr};
}

/// Mean squared Euclidean distance between the fixed source corners warped by
/// the predicted parameters and by the ground truth. Throws
/// DegenerateProjection when a predicted corner hits the horizon line.
inline LossValue ace_loss_homography(std::span<const double> pred, const Homography& gt,
                                     const CornerSet& source_corners, PredGrad* grad = nullptr) {
    detail::check_pred(pred);
    double acc = 0.0;
    PredGrad g{};
    for (std::size_t i = 0; i < 4; ++i) {
        const double x = source_corners[i].x, y = source_corners[i].y;
        const double z = pred[6] * x + pred[7] * y + 1.0;
        if (!(std::abs(z) > kEpsDenom)) throw DegenerateProjection("predicted homography sends a corner to the horizon");
        const double u = (pred[0] * x + pred[1] * y + pred[2]) / z;
        const double v = (pred[3] * x + pred[4] * y + pred[5]) / z;
        const Point2 t = apply(gt, source_corners[i]);
        const double du = u - t.x, dv = v - t.y;
        acc += du * du + dv * dv;
        // d loss / d u = du / 2 (after the 1/4 mean)
        const double gu = du / 2.0, gv = dv / 2.0;
        g[0] += gu * x / z;
        g[1] += gu * y / z;
        g[2] += gu / z;
        g[3] += gv * x / z;
        g[4] += gv * y / z;
        g[5] += gv / z;
        g[6] += -(gu * u + gv * v) * x / z;
        g[7] += -(gu * u + gv * v) * y / z;
    }
    if (grad) *grad = g;
    return {acc / 4.0, grad != nullptr};
}

/// Homography head: h2 + gamma * ace_homography. Corner head: ace_corners.
inline LossValue total_loss(Head head, std::span<const double> pred, const Homography& gt_h, const CornerSet& gt_corners,
                            double gamma, const CornerSet& source_corners, PredGrad* grad = nullptr) {
    if (gamma < 0) throw ConfigError("gamma must be >= 0");
    if (head == Head::corners) return ace_loss_corners(pred, gt_corners, grad);
    PredGrad gh{}, ga{};
    const LossValue lh = h2_loss(pred, gt_h, grad ? &gh : nullptr);
    LossValue la{};
    if (gamma > 0) la = ace_loss_homography(pred, gt_h, source_corners, grad ? &ga : nullptr);
    if (grad) {
        for (std::size_t i = 0; i < 8; ++i) (*grad)[i] = gh[i] + gamma * ga[i];
    }
    return {lh.value + gamma * la.value, grad != nullptr};
}

}  // namespace visirnet

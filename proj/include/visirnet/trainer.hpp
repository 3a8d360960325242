#pragma once

// Two-stage training. Stage 1 fits both embedding branches with a
// feature-map loss; stage 2 fits the regression block (and optionally the
// backbone) with the head loss.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "visirnet/checkpoint.hpp"
#include "visirnet/datagen.hpp"
#include "visirnet/errors.hpp"
#include "visirnet/losses.hpp"
#include "visirnet/network.hpp"
#include "visirnet/optim.hpp"
#include "visirnet/random.hpp"

namespace visirnet {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 8;
    double learning_rate = 1e-4;
    double gamma = 1.0;
    Head head = Head::corners;
    double scale = 1.0;
    double dropout = 0.2;
    std::uint64_t rng_seed = 0;
    bool backbone_frozen_in_stage2 = true;
    MapLossKind backbone_loss = MapLossKind::sim;
    /// Where checkpoints and JSON logs go; empty keeps everything in memory.
    std::filesystem::path checkpoint_dir;

    ModelConfig model() const { return {head, scale, dropout}; }

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs: must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be > 0");
        if (!(gamma >= 0.0)) throw ConfigError("gamma: must be >= 0");
        model().validate();
    }
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;     // mean training objective over non-skipped samples
    double h2 = 0.0;       // mean L2 homography loss (homography head only)
    double ace_sq = 0.0;   // mean squared-corner Ace (stage 2 only)
    int samples = 0;
    int skipped = 0;
};

struct TrainReport {
    std::string stage;
    std::vector<EpochStats> epochs;
    double wall_seconds = 0.0;
    std::string checkpoint_id;
    int best_epoch = -1;  // -1: initialization kept
    int skipped_steps = 0;
};

struct TrainResult {
    TrainReport report;
    Checkpoint checkpoint;  // best-loss epoch (or initialization)
};

namespace detail {

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Line-oriented JSON event log. Silent when no directory is configured.
class EventLog {
public:
    EventLog(const std::filesystem::path& dir, const std::string& stage) : stage_(stage) {
        if (dir.empty()) return;
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
        os_.open(dir / (stage + ".log.jsonl"), std::ios::trunc);
        if (!os_) throw IoError("cannot open training log in " + dir.string());
    }

    void emit(nlohmann::ordered_json event) {
        if (!os_.is_open()) return;
        nlohmann::ordered_json line;
        line["time"] = utc_timestamp();
        line["stage"] = stage_;
        for (auto& [k, v] : event.items()) line[k] = v;
        os_ << line.dump() << '\n';
        os_.flush();
    }

private:
    std::string stage_;
    std::ofstream os_;
};

inline void check_finite(double v, const std::string& stage, int epoch, int batch) {
    if (!std::isfinite(v)) throw NonFiniteLoss(stage, epoch, batch);
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
    }
    return batches;
}

inline std::pair<Tensor, Tensor> batch_images(const std::vector<AlignmentPair>& pairs, const std::vector<std::size_t>& idx) {
    std::vector<ImageTensor> rgb, ir;
    rgb.reserve(idx.size());
    ir.reserve(idx.size());
    for (auto i : idx) {
        rgb.push_back(pairs[i].target);
        ir.push_back(pairs[i].source);
    }
    return {images_to_batch(rgb), images_to_batch(ir)};
}

inline void check_pair_sizes(const std::vector<AlignmentPair>& pairs, const ModelConfig& m) {
    for (const auto& p : pairs) {
        if (p.target.height() != m.rgb_size() || p.target.width() != m.rgb_size() || p.source.height() != m.ir_size() ||
            p.source.width() != m.ir_size()) {
            throw ShapeMismatch("pair " + p.pair_id + " does not match model scale " + std::to_string(m.scale) + " (expects " +
                                std::to_string(m.rgb_size()) + "/" + std::to_string(m.ir_size()) + " px images)");
        }
    }
}

inline std::string save_if_configured(const Checkpoint& ck, const std::filesystem::path& dir, const std::string& file) {
    if (dir.empty()) return {};
    const auto path = dir / file;
    save_checkpoint(ck, path.string());
    return path.string();
}

}  // namespace detail

/// Loads every pair of a manifest split into memory.
inline std::vector<AlignmentPair> load_pairs(const std::filesystem::path& manifest_path, std::optional<Split> split) {
    const Manifest m = read_manifest(manifest_path);
    std::vector<AlignmentPair> out;
    for (const auto& row : m.select(split)) out.push_back(load_pair(m, row));
    return out;
}

/// Stage 1: trains both embedding branches with the configured feature-map
/// loss (similarity loss by default). Each branch consumes its own modality.
inline TrainResult train_backbone(const std::vector<AlignmentPair>& pairs, const TrainConfig& cfg) {
    cfg.validate();
    const ModelConfig mcfg = cfg.model();
    detail::check_pair_sizes(pairs, mcfg);
    if (pairs.empty() && cfg.epochs > 0) throw EmptyInput("no training pairs");
    const auto t0 = std::chrono::steady_clock::now();

    VisIRNet net(mcfg, cfg.rng_seed);
    auto params = net.parameters(ParamGroup::rgb_branch);
    for (auto* p : net.parameters(ParamGroup::ir_branch)) params.push_back(p);
    Adam opt(params, cfg.learning_rate);
    Rng order_rng(substream_seed(cfg.rng_seed, 1));
    Rng dropout_rng(substream_seed(cfg.rng_seed, 2));
    detail::EventLog log(cfg.checkpoint_dir, "train_backbone");
    log.emit({{"event", "start"}, {"pairs", pairs.size()}, {"epochs", cfg.epochs}, {"loss", to_string(cfg.backbone_loss)}});

    const auto meta = nlohmann::json{{"stage", "backbone"}, {"backbone_loss", to_string(cfg.backbone_loss)}};
    TrainResult result;
    result.report.stage = "backbone";
    result.checkpoint = net.to_checkpoint(meta);
    double best = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        double total = 0.0;
        const auto batches = detail::make_batches(pairs.size(), cfg.batch_size, order_rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            auto [rgb, ir] = detail::batch_images(pairs, idx);
            opt.zero_grad();
            const nn::Context ctx{true, &dropout_rng};
            const Tensor f_rgb = net.rgb_branch().forward(rgb, ctx);
            const Tensor f_ir = net.ir_branch().forward(ir, ctx);
            Tensor d_rgb(f_rgb.batch(), f_rgb.shape());
            Tensor d_ir(f_ir.batch(), f_ir.shape());
            const double inv_b = 1.0 / static_cast<double>(idx.size());
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                MapLossGrad g;
                const auto n = static_cast<int>(i);
                const LossValue l = map_loss(cfg.backbone_loss, f_rgb.sample(n), f_ir.sample(n), pairs[idx[i]].gt_homography, &g);
                batch_loss += l.value;
                auto dr = d_rgb.sample_data(n);
                auto di = d_ir.sample_data(n);
                for (std::size_t k = 0; k < dr.size(); ++k) dr[k] = g.d_rgb.data()[k] * inv_b;
                for (std::size_t k = 0; k < di.size(); ++k) di[k] = g.d_ir.data()[k] * inv_b;
            }
            detail::check_finite(batch_loss, "train_backbone", epoch, static_cast<int>(b));
            net.rgb_branch().backward(d_rgb);
            net.ir_branch().backward(d_ir);
            opt.step();
            total += batch_loss;
            stats.samples += static_cast<int>(idx.size());
        }
        net.clear_cache();
        stats.loss = total / std::max(1, stats.samples);
        result.report.epochs.push_back(stats);
        log.emit({{"event", "epoch"}, {"epoch", epoch}, {"loss", stats.loss}});
        if (stats.loss < best) {
            best = stats.loss;
            result.report.best_epoch = epoch;
            result.checkpoint = net.to_checkpoint(meta);
        }
    }
    result.checkpoint.meta["best_epoch"] = result.report.best_epoch;
    result.report.checkpoint_id = detail::save_if_configured(result.checkpoint, cfg.checkpoint_dir, "backbone.ckpt");
    result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.emit({{"event", "done"}, {"best_epoch", result.report.best_epoch}, {"checkpoint", result.report.checkpoint_id},
              {"wall_seconds", result.report.wall_seconds}});
    return result;
}

inline TrainResult train_backbone(const std::filesystem::path& manifest, const TrainConfig& cfg) {
    cfg.validate();
    return train_backbone(load_pairs(manifest, Split::train), cfg);
}

/// Stage 2: trains the regression block on top of the backbone taken from
/// `backbone`. With a frozen backbone the branches run in inference mode
/// and their outputs are computed once.
inline TrainResult train_head(const std::vector<AlignmentPair>& pairs, const TrainConfig& cfg, const Checkpoint& backbone) {
    cfg.validate();
    const ModelConfig stored = ModelConfig::from_json(backbone.meta.at("model"));
    if (stored.scale != cfg.scale) {
        throw ConfigError("scale: backbone checkpoint was trained at scale " + std::to_string(stored.scale));
    }
    const ModelConfig mcfg = cfg.model();
    detail::check_pair_sizes(pairs, mcfg);
    if (pairs.empty() && cfg.epochs > 0) throw EmptyInput("no training pairs");
    const auto t0 = std::chrono::steady_clock::now();

    VisIRNet net(mcfg, cfg.rng_seed);
    net.load_parameters(backbone, {ParamGroup::rgb_branch, ParamGroup::ir_branch});
    const bool frozen = cfg.backbone_frozen_in_stage2;
    auto params = net.parameters(ParamGroup::regression);
    if (!frozen) {
        for (auto g : {ParamGroup::rgb_branch, ParamGroup::ir_branch}) {
            for (auto* p : net.parameters(g)) params.push_back(p);
        }
    }
    Adam opt(params, cfg.learning_rate);
    Rng order_rng(substream_seed(cfg.rng_seed, 3));
    Rng dropout_rng(substream_seed(cfg.rng_seed, 4));
    detail::EventLog log(cfg.checkpoint_dir, "train_head");
    log.emit({{"event", "start"}, {"pairs", pairs.size()}, {"epochs", cfg.epochs}, {"head", to_string(cfg.head)},
              {"frozen_backbone", frozen}, {"gamma", cfg.gamma}});

    // Frozen backbone: fused embeddings are fixed, compute them once.
    std::vector<FeatureMap> fused_cache;
    if (frozen && cfg.epochs > 0) {
        const nn::Context eval{false, nullptr};
        constexpr std::size_t kChunk = 8;
        for (std::size_t i = 0; i < pairs.size(); i += kChunk) {
            std::vector<std::size_t> idx;
            for (std::size_t k = i; k < std::min(pairs.size(), i + kChunk); ++k) idx.push_back(k);
            auto [rgb, ir] = detail::batch_images(pairs, idx);
            const Tensor fused = fuse(net.rgb_branch().forward(rgb, eval), net.ir_branch().forward(ir, eval));
            for (int n = 0; n < fused.batch(); ++n) fused_cache.push_back(fused.sample(n));
        }
    }

    const CornerSet src_corners = net.source_corners();
    const auto meta = nlohmann::json{{"stage", "head"}, {"gamma", cfg.gamma}, {"frozen_backbone", frozen}};
    TrainResult result;
    result.report.stage = "head";
    result.checkpoint = net.to_checkpoint(meta);
    double best = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        double total = 0.0, total_h2 = 0.0, total_ace = 0.0;
        const auto batches = detail::make_batches(pairs.size(), cfg.batch_size, order_rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            opt.zero_grad();
            const nn::Context ctx{true, &dropout_rng};
            Tensor raw;
            if (frozen) {
                std::vector<FeatureMap> maps;
                for (auto i : idx) maps.push_back(fused_cache[i]);
                raw = net.regression_forward(Tensor::stack(maps), ctx);
            } else {
                auto [rgb, ir] = detail::batch_images(pairs, idx);
                raw = net.forward_raw(rgb, ir, ctx);
            }
            const auto outputs = net.to_outputs(raw);

            std::vector<std::optional<PredGrad>> grads(idx.size());
            int valid = 0;
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const AlignmentPair& p = pairs[idx[i]];
                PredGrad g{};
                try {
                    const LossValue l = total_loss(cfg.head, outputs[i].raw, p.gt_homography, p.gt_corners, cfg.gamma, src_corners, &g);
                    const double h2 = cfg.head == Head::homography ? h2_loss(outputs[i].raw, p.gt_homography).value : 0.0;
                    const double ace = cfg.head == Head::corners
                                           ? l.value
                                           : ace_loss_homography(outputs[i].raw, p.gt_homography, src_corners).value;
                    batch_loss += l.value;
                    total_h2 += h2;
                    total_ace += ace;
                    grads[i] = g;
                    ++valid;
                } catch (const DegenerateProjection& e) {
                    ++stats.skipped;
                    log.emit({{"event", "skip"}, {"epoch", epoch}, {"batch", b}, {"pair_id", p.pair_id}, {"reason", e.what()}});
                }
            }
            detail::check_finite(batch_loss, "train_head", epoch, static_cast<int>(b));
            total += batch_loss;
            stats.samples += valid;
            if (valid == 0) continue;
            Tensor d_raw(raw.batch(), raw.shape());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (!grads[i]) continue;
                for (int k = 0; k < 8; ++k) d_raw.at(static_cast<int>(i), 0, 0, k) = (*grads[i])[static_cast<std::size_t>(k)] / valid;
            }
            net.backward(d_raw, !frozen);
            opt.step();
        }
        net.clear_cache();
        const double denom = std::max(1, stats.samples);
        stats.loss = total / denom;
        stats.h2 = total_h2 / denom;
        stats.ace_sq = total_ace / denom;
        result.report.skipped_steps += stats.skipped;
        result.report.epochs.push_back(stats);
        log.emit({{"event", "epoch"}, {"epoch", epoch}, {"loss", stats.loss}, {"h2", stats.h2}, {"ace_sq", stats.ace_sq},
                  {"skipped", stats.skipped}});
        if (stats.samples > 0 && stats.loss < best) {
            best = stats.loss;
            result.report.best_epoch = epoch;
            result.checkpoint = net.to_checkpoint(meta);
        }
    }
    result.checkpoint.meta["best_epoch"] = result.report.best_epoch;
    result.report.checkpoint_id = detail::save_if_configured(result.checkpoint, cfg.checkpoint_dir, "head.ckpt");
    result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.emit({{"event", "done"}, {"best_epoch", result.report.best_epoch}, {"checkpoint", result.report.checkpoint_id},
              {"skipped_steps", result.report.skipped_steps}, {"wall_seconds", result.report.wall_seconds}});
    return result;
}

inline TrainResult train_head(const std::filesystem::path& manifest, const TrainConfig& cfg,
                              const std::filesystem::path& backbone_checkpoint) {
    cfg.validate();
    if (!std::filesystem::exists(backbone_checkpoint)) {
        throw ConfigError("backbone checkpoint not found: " + backbone_checkpoint.string());
    }
    const Checkpoint backbone = load_checkpoint(backbone_checkpoint.string());
    return train_head(load_pairs(manifest, Split::train), cfg, backbone);
}

}  // namespace visirnet

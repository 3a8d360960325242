#pragma once

// Synthetic alignment corpora from registered RGB/IR pairs.
//
// For each registered pair, k times: jitter the corners of a centred
// source-sized box inside the target frame, solve the homography that maps
// those corners onto the fixed source corners, warp the IR image with it to
// produce the unregistered source patch, and record the inverse (source ->
// target) as ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "visirnet/errors.hpp"
#include "visirnet/geometry.hpp"
#include "visirnet/image_io.hpp"
#include "visirnet/random.hpp"
#include "visirnet/sampler.hpp"
#include "visirnet/tensor.hpp"

namespace visirnet {

struct DatagenConfig {
    int target_size = 192;
    int source_size = 128;
    double jitter_radius = 32.0;
    int pairs_per_image = 10;
    std::uint64_t rng_seed = 0;
    /// Fraction of registered images (not pairs) assigned to the test split.
    double test_fraction = 0.2;

    void validate() const {
        if (target_size < 2 || source_size < 2) throw ConfigError("target_size and source_size must be >= 2");
        if (source_size > target_size) throw ConfigError("source_size must not exceed target_size");
        if (!(jitter_radius >= 0.0)) throw ConfigError("jitter_radius must be >= 0");
        if (pairs_per_image < 1) throw ConfigError("pairs_per_image must be >= 1");
        if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw ConfigError("test_fraction must be in [0, 1]");
    }
};

struct AlignmentPair {
    ImageTensor target;
    ImageTensor source;
    Homography gt_homography;  // source frame -> target frame
    CornerSet gt_corners;      // target frame
    std::string pair_id;
};

inline constexpr int kMaxCornerAttempts = 1000;

/// Corners of the centred source-sized box, each moved by an independent
/// uniform offset in [-rho, rho]^2; rejection-sampled until the quad is convex,
/// non-degenerate and inside the target frame.
inline CornerSet sample_gt_corners(const DatagenConfig& cfg, Rng& rng) {
    cfg.validate();
    const double off = (cfg.target_size - cfg.source_size) / 2.0;
    const CornerSet box = [&] {
        CornerSet b = square_corners(cfg.source_size, Frame::target);
        for (auto& p : b.corners) {
            p.x += off;
            p.y += off;
        }
        return b;
    }();
    const double hi = cfg.target_size - 1;
    for (int attempt = 0; attempt < kMaxCornerAttempts; ++attempt) {
        CornerSet cs = box;
        for (auto& p : cs.corners) {
            p.x += uniform(rng, -cfg.jitter_radius, cfg.jitter_radius);
            p.y += uniform(rng, -cfg.jitter_radius, cfg.jitter_radius);
        }
        const bool in_frame = std::all_of(cs.corners.begin(), cs.corners.end(),
                                          [&](Point2 p) { return p.x >= 0 && p.x <= hi && p.y >= 0 && p.y <= hi; });
        if (in_frame && cs.is_convex() && cs.is_valid()) return cs;
    }
    throw SamplingExhausted("no valid corner set after " + std::to_string(kMaxCornerAttempts) +
                            " attempts; jitter radius " + std::to_string(cfg.jitter_radius) + " is infeasible");
}

inline AlignmentPair make_pair(const ImageTensor& registered_rgb, const ImageTensor& registered_ir,
                               const DatagenConfig& cfg, Rng& rng, std::string pair_id = {}) {
    for (const ImageTensor* img : {&registered_rgb, &registered_ir}) {
        if (img->height() != cfg.target_size || img->width() != cfg.target_size) {
            throw ShapeMismatch("registered images must be " + std::to_string(cfg.target_size) + "x" +
                                std::to_string(cfg.target_size));
        }
    }
    AlignmentPair pair;
    pair.pair_id = std::move(pair_id);
    pair.gt_corners = sample_gt_corners(cfg, rng);
    const Homography to_fixed = from_four_points(pair.gt_corners, square_corners(cfg.source_size, Frame::source));
    pair.source = warp_image(registered_ir, to_fixed, cfg.source_size, cfg.source_size);
    pair.gt_homography = inverse(to_fixed);
    pair.target = registered_rgb;
    return pair;
}

/// Smooth random RGB scene and a matching single-channel pseudo-thermal
/// rendering of the same scene (nonlinear inverted luminance plus a separate
/// low-frequency heat field), both size x size.
inline std::pair<ImageTensor, ImageTensor> synthesize_registered_pair(int size, Rng& rng) {
    constexpr int kWaves = 8;
    constexpr double kPi = 3.14159265358979323846;
    struct Wave {
        double fx, fy, phase, amp[3];
    };
    std::vector<Wave> waves(kWaves);
    for (auto& w : waves) {
        const double freq = uniform(rng, 1.0, 5.0);
        const double angle = uniform(rng, 0.0, 2 * kPi);
        w.fx = freq * std::cos(angle) / size;
        w.fy = freq * std::sin(angle) / size;
        w.phase = uniform(rng, 0.0, 2 * kPi);
        for (double& a : w.amp) a = uniform(rng, -0.12, 0.12);
    }
    const double hx = uniform(rng, 0.2, 0.8) * size, hy = uniform(rng, 0.2, 0.8) * size;
    const double hs = uniform(rng, 0.15, 0.35) * size;

    FeatureMap rgb(size, size, 3), ir(size, size, 1);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            double ch[3] = {0.5, 0.5, 0.5};
            for (const auto& w : waves) {
                const double s = std::sin(2 * kPi * (w.fx * c + w.fy * r) + w.phase);
                for (int k = 0; k < 3; ++k) ch[k] += w.amp[k] * s;
            }
            for (int k = 0; k < 3; ++k) {
                ch[k] = std::clamp(ch[k], 0.0, 1.0);
                rgb.at(r, c, k) = ch[k];
            }
            const double lum = 0.299 * ch[0] + 0.587 * ch[1] + 0.114 * ch[2];
            const double heat = std::exp(-((c - hx) * (c - hx) + (r - hy) * (r - hy)) / (2 * hs * hs));
            ir.at(r, c, 0) = std::clamp(0.1 + 0.6 * std::pow(1.0 - lum, 1.5) + 0.3 * heat, 0.0, 1.0);
        }
    }
    return {ImageTensor(std::move(rgb)), ImageTensor(std::move(ir))};
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestRow {
    std::string pair_id;
    std::string target_path;  // relative to the manifest directory
    std::string source_path;
    Homography h;
    CornerSet corners;
    Split split = Split::train;
};

inline nlohmann::ordered_json to_json(const ManifestRow& row) {
    nlohmann::ordered_json j;
    j["pair_id"] = row.pair_id;
    j["target_path"] = row.target_path;
    j["source_path"] = row.source_path;
    j["h"] = row.h.params();
    nlohmann::ordered_json corners = nlohmann::ordered_json::array();
    for (const auto& p : row.corners.corners) corners.push_back({p.x, p.y});
    j["corners"] = corners;
    j["split"] = to_string(row.split);
    return j;
}

inline ManifestRow manifest_row_from_json(const nlohmann::json& j) {
    try {
        ManifestRow row;
        row.pair_id = j.at("pair_id").get<std::string>();
        row.target_path = j.at("target_path").get<std::string>();
        row.source_path = j.at("source_path").get<std::string>();
        const auto h = j.at("h").get<std::vector<double>>();
        if (h.size() != 9) throw FormatError("manifest 'h' must have 9 values");
        Homography::Matrix m{};
        std::copy(h.begin(), h.end(), m.begin());
        row.h = Homography::from_matrix(m);
        const auto& cs = j.at("corners");
        if (!cs.is_array() || cs.size() != 4) throw FormatError("manifest 'corners' must hold 4 points");
        row.corners.frame = Frame::target;
        for (std::size_t i = 0; i < 4; ++i) row.corners.corners[i] = {cs[i].at(0).get<double>(), cs[i].at(1).get<double>()};
        const auto split = j.at("split").get<std::string>();
        if (split != "train" && split != "test") throw FormatError("manifest 'split' must be train or test");
        row.split = split == "train" ? Split::train : Split::test;
        return row;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad manifest row: ") + e.what());
    }
}

struct Manifest {
    std::filesystem::path directory;
    std::vector<ManifestRow> rows;

    std::vector<ManifestRow> select(std::optional<Split> split) const {
        if (!split) return rows;
        std::vector<ManifestRow> out;
        for (const auto& r : rows) {
            if (r.split == *split) out.push_back(r);
        }
        return out;
    }
};

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path.string());
    Manifest m;
    m.directory = path.parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            m.rows.push_back(manifest_row_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return m;
}

inline AlignmentPair load_pair(const Manifest& m, const ManifestRow& row) {
    AlignmentPair p;
    p.pair_id = row.pair_id;
    p.target = load_png((m.directory / row.target_path).string());
    p.source = load_png((m.directory / row.source_path).string());
    p.gt_homography = row.h;
    p.gt_corners = row.corners;
    return p;
}

/// Largest corner reprojection error (px) of a stored pair: the stored H
/// applied to the source image's fixed corners vs the stored corners.
inline double pair_consistency_error(const Homography& h, const CornerSet& corners, int source_size) {
    const CornerSet projected = apply_corners(h, square_corners(source_size, Frame::source));
    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, distance(projected[i], corners[i]));
    return worst;
}

struct DatasetSummary {
    std::filesystem::path manifest;
    int pairs = 0;
    int train_pairs = 0;
    int test_pairs = 0;
};

/// Registered inputs are `<name>_rgb.png` / `<name>_ir.png` pairs in one
/// directory. Returns the sorted list of names.
inline std::vector<std::string> list_registered_pairs(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("input directory does not exist: " + dir.string());
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string file = entry.path().filename().string();
        const std::string suffix = "_rgb.png";
        if (file.size() > suffix.size() && file.ends_with(suffix)) {
            const std::string name = file.substr(0, file.size() - suffix.size());
            if (!fs::exists(dir / (name + "_ir.png"))) throw IoError("missing IR partner for " + file);
            names.push_back(name);
        }
    }
    std::sort(names.begin(), names.end());
    return names;
}

/// Split assignment by registered image: round(n * test_fraction) images go to
/// test, clamped so both splits are non-empty whenever n >= 2 and the fraction
/// is strictly between 0 and 1.
inline std::vector<Split> assign_splits(std::size_t n, double test_fraction, std::uint64_t seed) {
    std::size_t n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    if (test_fraction > 0.0 && test_fraction < 1.0 && n >= 2) n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(substream_seed(seed, 0xF00DULL));
    shuffle(order, rng);
    std::vector<Split> out(n, Split::train);
    for (std::size_t i = 0; i < n_test; ++i) out[order[i]] = Split::test;
    return out;
}

/// Writes pairs/<pair_id>_target.png, pairs/<pair_id>_source.png and
/// manifest.jsonl under out_dir.
inline DatasetSummary build_dataset(const std::filesystem::path& image_pair_dir, const std::filesystem::path& out_dir,
                                    const DatagenConfig& cfg) {
    namespace fs = std::filesystem;
    cfg.validate();
    const auto names = list_registered_pairs(image_pair_dir);
    if (names.empty()) throw EmptyInput("no <name>_rgb.png / <name>_ir.png pairs in " + image_pair_dir.string());
    std::error_code ec;
    fs::create_directories(out_dir / "pairs", ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    const auto splits = assign_splits(names.size(), cfg.test_fraction, cfg.rng_seed);
    DatasetSummary summary;
    summary.manifest = out_dir / "manifest.jsonl";
    std::ostringstream manifest;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const ImageTensor rgb = load_png((image_pair_dir / (names[i] + "_rgb.png")).string());
        const ImageTensor ir = load_png((image_pair_dir / (names[i] + "_ir.png")).string());
        Rng rng(substream_seed(cfg.rng_seed, i));
        for (int k = 0; k < cfg.pairs_per_image; ++k) {
            char suffix[16];
            std::snprintf(suffix, sizeof suffix, "_%03d", k);
            const std::string id = names[i] + suffix;
            AlignmentPair pair = make_pair(rgb, ir, cfg, rng, id);
            ManifestRow row{id, "pairs/" + id + "_target.png", "pairs/" + id + "_source.png", pair.gt_homography,
                            pair.gt_corners, splits[i]};
            save_png((out_dir / row.target_path).string(), pair.target);
            save_png((out_dir / row.source_path).string(), pair.source);
            manifest << to_json(row).dump() << '\n';
            ++summary.pairs;
            (row.split == Split::train ? summary.train_pairs : summary.test_pairs)++;
        }
    }
    std::ofstream os(summary.manifest, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + summary.manifest.string());
    os << manifest.str();
    if (!os) throw IoError("failed writing manifest: " + summary.manifest.string());
    return summary;
}

/// Writes `count` synthetic registered pairs as <name>_rgb.png / <name>_ir.png.
inline void write_synthetic_registered(const std::filesystem::path& dir, int count, int size, std::uint64_t seed) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (int i = 0; i < count; ++i) {
        Rng rng(substream_seed(seed, 0x5EED0000ULL + static_cast<std::uint64_t>(i)));
        auto [rgb, ir] = synthesize_registered_pair(size, rng);
        char name[32];
        std::snprintf(name, sizeof name, "synth%04d", i);
        save_png((dir / (std::string(name) + "_rgb.png")).string(), rgb);
        save_png((dir / (std::string(name) + "_ir.png")).string(), ir);
    }
}

}  // namespace visirnet

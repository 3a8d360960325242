#pragma once

// Per-pair average corner error (Ace) and descriptive summaries.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "visirnet/checkpoint.hpp"
#include "visirnet/datagen.hpp"
#include "visirnet/errors.hpp"
#include "visirnet/geometry.hpp"
#include "visirnet/network.hpp"

namespace visirnet {

inline constexpr double kDefaultSentinel = 10000.0;

enum class MetricKind { euclidean, squared };

inline const char* to_string(MetricKind k) { return k == MetricKind::euclidean ? "euclidean" : "squared"; }

inline MetricKind parse_metric(const std::string& s) {
    if (s == "euclidean") return MetricKind::euclidean;
    if (s == "squared") return MetricKind::squared;
    throw ConfigError("metric: expected 'euclidean' or 'squared', got '" + s + "'");
}

/// Predicted corners in the target frame. For the homography head the fixed
/// source corners are pushed through the predicted parameters.
inline CornerSet predicted_corners(const NetworkOutput& pred, const CornerSet& source_corners) {
    for (double v : pred.raw) {
        if (!std::isfinite(v)) throw DegenerateProjection("non-finite network output");
    }
    if (pred.head == Head::corners) return pred.corners();
    const auto& p = pred.raw;
    CornerSet out;
    out.frame = Frame::target;
    for (std::size_t i = 0; i < 4; ++i) {
        const double x = source_corners[i].x, y = source_corners[i].y;
        const double z = p[6] * x + p[7] * y + 1.0;
        if (!(std::abs(z) > kEpsDenom)) throw DegenerateProjection("predicted homography sends a corner to the horizon");
        out.corners[i] = {(p[0] * x + p[1] * y + p[2]) / z, (p[3] * x + p[4] * y + p[5]) / z};
    }
    return out;
}

/// Mean corner displacement between two corner sets.
inline double corner_error(const CornerSet& pred, const CornerSet& gt, MetricKind kind) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double d = distance(pred[i], gt[i]);
        acc += kind == MetricKind::euclidean ? d : d * d;
    }
    return acc / 4.0;
}

struct PairAce {
    double ace = 0.0;
    bool failed = false;
};

/// Ace for one prediction. Unusable estimates (horizon hits, non-finite
/// values, errors at or beyond the sentinel) report the sentinel instead.
inline PairAce pair_ace(const NetworkOutput& pred, const CornerSet& gt_corners, const CornerSet& source_corners,
                        MetricKind kind, double sentinel = kDefaultSentinel) {
    try {
        const double e = corner_error(predicted_corners(pred, source_corners), gt_corners, kind);
        if (std::isfinite(e) && e < sentinel) return {e, false};
    } catch (const DegenerateProjection&) {
    }
    return {sentinel, true};
}

// ---------------------------------------------------------------------------
// Summary statistics

/// Type-7 quantile (linear interpolation between closest ranks) of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw EmptyInput("quantile of an empty list");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct AceSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n-1); 0 for a single value
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    int outlier_count = 0;
    int n_pairs = 0;
    int failed_count = 0;
    MetricKind metric_kind = MetricKind::euclidean;

    double iqr() const { return q3 - q1; }
    double lower_fence() const { return q1 - 1.5 * iqr(); }
    double upper_fence() const { return q3 + 1.5 * iqr(); }
    bool is_outlier(double v) const { return v < lower_fence() || v > upper_fence(); }
};

inline AceSummary summarize(const std::vector<double>& errors, MetricKind kind = MetricKind::euclidean) {
    if (errors.empty()) throw EmptyInput("cannot summarize an empty error list");
    std::vector<double> s = errors;
    std::sort(s.begin(), s.end());
    AceSummary out;
    out.metric_kind = kind;
    out.n_pairs = static_cast<int>(s.size());
    out.mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    if (s.size() > 1) {
        double ss = 0.0;
        for (double v : s) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(s.size() - 1));
    }
    out.min = s.front();
    out.max = s.back();
    out.q1 = quantile_sorted(s, 0.25);
    out.median = quantile_sorted(s, 0.5);
    out.q3 = quantile_sorted(s, 0.75);
    out.outlier_count = static_cast<int>(std::count_if(s.begin(), s.end(), [&](double v) { return out.is_outlier(v); }));
    return out;
}

inline nlohmann::ordered_json to_json(const AceSummary& s) {
    nlohmann::ordered_json j;
    j["metric_kind"] = to_string(s.metric_kind);
    j["n_pairs"] = s.n_pairs;
    j["failed_count"] = s.failed_count;
    j["mean"] = s.mean;
    j["std"] = s.std;
    j["min"] = s.min;
    j["q1"] = s.q1;
    j["median"] = s.median;
    j["q3"] = s.q3;
    j["max"] = s.max;
    j["iqr"] = s.iqr();
    j["outlier_count"] = s.outlier_count;
    return j;
}

// ---------------------------------------------------------------------------
// Model evaluation

struct PairResult {
    std::string pair_id;
    double ace = 0.0;
    bool failed = false;
};

struct EvalResult {
    std::vector<PairResult> pairs;
    AceSummary summary;

    std::vector<double> errors() const {
        std::vector<double> e;
        e.reserve(pairs.size());
        for (const auto& p : pairs) e.push_back(p.ace);
        return e;
    }
};

struct EvalOptions {
    MetricKind metric = MetricKind::euclidean;
    double sentinel = kDefaultSentinel;
    int batch_size = 8;

    void validate() const {
        if (!(sentinel > 0.0) || !std::isfinite(sentinel)) throw ConfigError("sentinel: must be a positive finite value");
        if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    }
};

/// Produces one prediction per pair; nullopt marks "no estimate".
using Predictor = std::function<std::vector<std::optional<NetworkOutput>>(const std::vector<const AlignmentPair*>&)>;

/// Eval-mode forwards of a trained network.
inline Predictor model_predictor(VisIRNet& net) {
    return [&net](const std::vector<const AlignmentPair*>& batch) {
        const int rgb = net.config().rgb_size(), ir = net.config().ir_size();
        std::vector<ImageTensor> t, s;
        for (const auto* p : batch) {
            if (p->target.height() != rgb || p->target.width() != rgb || p->source.height() != ir || p->source.width() != ir) {
                throw ShapeMismatch("pair " + p->pair_id + " does not match the model input sizes " + std::to_string(rgb) + "/" +
                                    std::to_string(ir));
            }
            t.push_back(p->target);
            s.push_back(p->source);
        }
        const auto outs = net.forward(images_to_batch(t), images_to_batch(s), nn::Context{false, nullptr});
        net.clear_cache();
        return std::vector<std::optional<NetworkOutput>>(outs.begin(), outs.end());
    };
}

/// Returns the ground truth itself, in the requested head's parameterization.
inline Predictor ground_truth_predictor(Head head) {
    return [head](const std::vector<const AlignmentPair*>& batch) {
        std::vector<std::optional<NetworkOutput>> out;
        for (const auto* p : batch) {
            NetworkOutput o;
            o.head = head;
            if (head == Head::corners) {
                const auto flat = p->gt_corners.flat();
                std::copy(flat.begin(), flat.end(), o.raw.begin());
            } else {
                const auto params = p->gt_homography.free_params();
                std::copy(params.begin(), params.end(), o.raw.begin());
            }
            out.emplace_back(o);
        }
        return out;
    };
}

inline EvalResult evaluate_pairs(const std::vector<AlignmentPair>& pairs, const Predictor& predict,
                                 const CornerSet& source_corners, const EvalOptions& opt = {}) {
    opt.validate();
    if (pairs.empty()) throw EmptyInput("no pairs to evaluate");
    EvalResult result;
    for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(opt.batch_size)) {
        std::vector<const AlignmentPair*> batch;
        for (std::size_t k = i; k < std::min(pairs.size(), i + static_cast<std::size_t>(opt.batch_size)); ++k) {
            batch.push_back(&pairs[k]);
        }
        const auto preds = predict(batch);
        if (preds.size() != batch.size()) throw ShapeMismatch("predictor returned the wrong number of outputs");
        for (std::size_t k = 0; k < batch.size(); ++k) {
            PairAce a{opt.sentinel, true};
            if (preds[k]) a = pair_ace(*preds[k], batch[k]->gt_corners, source_corners, opt.metric, opt.sentinel);
            result.pairs.push_back({batch[k]->pair_id, a.ace, a.failed});
        }
    }
    result.summary = summarize(result.errors(), opt.metric);
    result.summary.failed_count =
        static_cast<int>(std::count_if(result.pairs.begin(), result.pairs.end(), [](const PairResult& p) { return p.failed; }));
    return result;
}

inline EvalResult evaluate_model(const Checkpoint& ck, const std::filesystem::path& manifest, std::optional<Split> split,
                                 const EvalOptions& opt = {}) {
    VisIRNet net = VisIRNet::from_checkpoint(ck);
    const Manifest m = read_manifest(manifest);
    std::vector<AlignmentPair> pairs;
    for (const auto& row : m.select(split)) pairs.push_back(load_pair(m, row));
    return evaluate_pairs(pairs, model_predictor(net), net.source_corners(), opt);
}

// ---------------------------------------------------------------------------
// Output formats

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline void write_pairs_csv(const std::filesystem::path& path, const std::vector<PairResult>& rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << "pair_id,ace,failed\n";
    for (const auto& r : rows) os << r.pair_id << ',' << format_double(r.ace) << ',' << (r.failed ? "true" : "false") << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

inline std::vector<PairResult> read_pairs_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "pair_id,ace,failed") throw FormatError("unexpected CSV header in " + path.string());
    std::vector<PairResult> rows;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c1 == c2) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
        PairResult r;
        r.pair_id = line.substr(0, c1);
        const std::string ace = line.substr(c1 + 1, c2 - c1 - 1), failed = line.substr(c2 + 1);
        const auto res = std::from_chars(ace.data(), ace.data() + ace.size(), r.ace);
        if (res.ec != std::errc{} || res.ptr != ace.data() + ace.size()) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad ace value '" + ace + "'");
        }
        if (failed != "true" && failed != "false") throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad failed flag");
        r.failed = failed == "true";
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_summary_json(const std::filesystem::path& path, const AceSummary& s) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << to_json(s).dump(2) << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

/// Box-and-whisker geometry for one series: whiskers reach the most extreme
/// values still inside the 1.5 IQR fences.
struct BoxStats {
    double q1 = 0, median = 0, q3 = 0, whisker_low = 0, whisker_high = 0;
    std::vector<double> outliers;
};

inline BoxStats box_stats(const std::vector<double>& values) {
    const AceSummary s = summarize(values);
    BoxStats b{s.q1, s.median, s.q3, s.q1, s.q3, {}};
    for (double v : values) {
        if (s.is_outlier(v)) {
            b.outliers.push_back(v);
        } else {
            b.whisker_low = std::min(b.whisker_low, v);
            b.whisker_high = std::max(b.whisker_high, v);
        }
    }
    std::sort(b.outliers.begin(), b.outliers.end());
    return b;
}

struct PlotSeries {
    std::string label;
    std::vector<double> values;
};

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

/// Vertical box plots, one per series, on a shared linear axis.
inline std::string box_plot_svg(const std::vector<PlotSeries>& series, const std::string& y_label = "Ace (px)") {
    if (series.empty()) throw EmptyInput("box plot needs at least one series");
    std::vector<BoxStats> boxes;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : series) {
        boxes.push_back(box_stats(s.values));
        lo = std::min(lo, *std::min_element(s.values.begin(), s.values.end()));
        hi = std::max(hi, *std::max_element(s.values.begin(), s.values.end()));
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;

    constexpr double kLeft = 70, kTop = 20, kPlotH = 300, kSlot = 90, kBoxW = 40, kBottom = 50;
    const double width = kLeft + kSlot * static_cast<double>(series.size()) + 20;
    const double height = kTop + kPlotH + kBottom;
    auto y = [&](double v) { return kTop + kPlotH * (hi - v) / (hi - lo); };
    auto f = [](double v) {
        std::ostringstream o;
        o.precision(6);
        o << v;
        return o.str();
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + kPlotH << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 5; ++t) {
        const double v = lo + (hi - lo) * t / 5.0;
        svg << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << y(v) << "\" x2=\"" << kLeft << "\" y2=\"" << y(v) << "\" stroke=\"black\"/>"
            << "<text x=\"" << kLeft - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << f(v) << "</text>\n";
    }
    svg << "<text x=\"14\" y=\"" << kTop + kPlotH / 2 << "\" transform=\"rotate(-90 14 " << kTop + kPlotH / 2
        << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const BoxStats& b = boxes[i];
        const double cx = kLeft + kSlot * (static_cast<double>(i) + 0.5);
        const double x0 = cx - kBoxW / 2, x1 = cx + kBoxW / 2;
        svg << "<g class=\"box\" data-label=\"" << xml_escape(series[i].label) << "\">\n";
        svg << "  <line class=\"whisker\" x1=\"" << cx << "\" y1=\"" << y(b.whisker_high) << "\" x2=\"" << cx << "\" y2=\"" << y(b.q3)
            << "\" stroke=\"black\"/>\n";
        svg << "  <line class=\"whisker\" x1=\"" << cx << "\" y1=\"" << y(b.q1) << "\" x2=\"" << cx << "\" y2=\"" << y(b.whisker_low)
            << "\" stroke=\"black\"/>\n";
        for (double w : {b.whisker_low, b.whisker_high}) {
            svg << "  <line class=\"cap\" x1=\"" << cx - kBoxW / 4 << "\" y1=\"" << y(w) << "\" x2=\"" << cx + kBoxW / 4 << "\" y2=\"" << y(w)
                << "\" stroke=\"black\"/>\n";
        }
        svg << "  <rect class=\"iqr\" x=\"" << x0 << "\" y=\"" << y(b.q3) << "\" width=\"" << kBoxW << "\" height=\""
            << std::max(0.5, y(b.q1) - y(b.q3)) << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
        svg << "  <line class=\"median\" x1=\"" << x0 << "\" y1=\"" << y(b.median) << "\" x2=\"" << x1 << "\" y2=\"" << y(b.median)
            << "\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
        for (double o : b.outliers) {
            svg << "  <circle class=\"outlier\" cx=\"" << cx << "\" cy=\"" << y(o) << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
        }
        svg << "  <text x=\"" << cx << "\" y=\"" << kTop + kPlotH + 18 << "\" text-anchor=\"middle\">" << xml_escape(series[i].label)
            << "</text>\n";
        svg << "</g>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace visirnet

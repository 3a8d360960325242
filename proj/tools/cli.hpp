#pragma once

// Subcommand wiring for the visirnet tool. Kept in a header so tests can drive
// run() in-process and check exit codes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "visirnet/datagen.hpp"
#include "visirnet/errors.hpp"
#include "visirnet/evaluator.hpp"
#include "visirnet/trainer.hpp"

namespace visirnet::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kGeneric = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

/// Reads CLI11 config files written as nested JSON objects.
class ConfigJson : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        throw CLI::ConfigError("writing JSON config is not supported");
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j;
        try {
            input >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConversionError(std::string("bad JSON config: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("JSON config must be an object");
        std::vector<CLI::ConfigItem> items;
        collect(j, "", {}, items);
        return items;
    }

private:
    static void collect(const nlohmann::json& j, const std::string& name, std::vector<std::string> parents,
                        std::vector<CLI::ConfigItem>& out) {
        if (j.is_object()) {
            if (!name.empty()) parents.push_back(name);
            for (auto it = j.begin(); it != j.end(); ++it) collect(*it, it.key(), parents, out);
            return;
        }
        CLI::ConfigItem item;
        item.name = name;
        item.parents = parents;
        auto scalar = [&](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
        if (j.is_array()) {
            for (const auto& v : j) item.inputs.push_back(scalar(v));
        } else {
            item.inputs.push_back(scalar(j));
        }
        out.push_back(std::move(item));
    }
};

inline std::string sha256_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 14];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char b[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(b, sizeof b, "%02x", md[i]);
        hex += b;
    }
    return hex;
}

inline std::optional<Split> parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "all") return std::nullopt;
    throw ConfigError("split: expected train, test or all, got '" + s + "'");
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string input_dir, output_dir;
    int synthetic = 0;
    int synthetic_size = 0;  // 0: target size
    DatagenConfig cfg;
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out) {
    a.cfg.validate();
    if (a.output_dir.empty()) throw ConfigError("output-dir: required");
    if (a.synthetic < 0) throw ConfigError("synthetic: must be >= 0");
    fs::path input = a.input_dir;
    if (a.synthetic > 0) {
        if (!input.empty()) throw ConfigError("input-dir: cannot be combined with --synthetic");
        input = fs::path(a.output_dir) / "registered";
        write_synthetic_registered(input, a.synthetic, a.synthetic_size > 0 ? a.synthetic_size : a.cfg.target_size, a.cfg.rng_seed);
    } else if (input.empty()) {
        throw ConfigError("input-dir: required unless --synthetic is given");
    }
    const DatasetSummary s = build_dataset(input, a.output_dir, a.cfg);
    out << s.pairs << " pairs (train " << s.train_pairs << " / test " << s.test_pairs << ")\n";
    out << "manifest " << s.manifest.string() << "\n";
    out << "manifest sha256 " << sha256_file(s.manifest) << "\n";
    return kOk;
}

struct TrainArgs {
    std::string manifest, out_dir, backbone, head = "corners", loss = "sim";
    bool finetune_backbone = false;
    TrainConfig cfg;
};

inline void print_report(const TrainReport& r, std::ostream& out) {
    if (!r.epochs.empty()) {
        const auto& first = r.epochs.front();
        const auto& last = r.epochs.back();
        out << r.stage << ": " << r.epochs.size() << " epochs, loss " << first.loss << " -> " << last.loss << "\n";
    } else {
        out << r.stage << ": 0 epochs, checkpoint holds the initialization\n";
    }
    if (r.skipped_steps > 0) out << "skipped samples (degenerate projection): " << r.skipped_steps << "\n";
    out << "best epoch " << r.best_epoch << "\n";
    out << "checkpoint " << r.checkpoint_id << "\n";
}

inline int cmd_train_backbone(TrainArgs a, std::ostream& out) {
    a.cfg.backbone_loss = parse_map_loss(a.loss);
    a.cfg.checkpoint_dir = a.out_dir;
    a.cfg.validate();
    if (a.manifest.empty()) throw ConfigError("manifest: required");
    if (a.out_dir.empty()) throw ConfigError("out-dir: required");
    print_report(train_backbone(fs::path(a.manifest), a.cfg).report, out);
    return kOk;
}

inline int cmd_train_head(TrainArgs a, std::ostream& out) {
    a.cfg.head = parse_head(a.head);
    a.cfg.backbone_frozen_in_stage2 = !a.finetune_backbone;
    a.cfg.checkpoint_dir = a.out_dir;
    a.cfg.validate();
    if (a.manifest.empty()) throw ConfigError("manifest: required");
    if (a.out_dir.empty()) throw ConfigError("out-dir: required");
    if (a.backbone.empty()) throw ConfigError("backbone: required");
    print_report(train_head(fs::path(a.manifest), a.cfg, fs::path(a.backbone)).report, out);
    return kOk;
}

struct EvaluateArgs {
    std::string checkpoint, manifest, out_dir, split = "test", metric = "euclidean", ground_truth;
    double scale = 1.0;
    EvalOptions opt;
};

inline void print_summary(const AceSummary& s, std::ostream& out) {
    out << "n=" << s.n_pairs << " failed=" << s.failed_count << " mean=" << s.mean << " std=" << s.std << " min=" << s.min
        << " q1=" << s.q1 << " median=" << s.median << " q3=" << s.q3 << " max=" << s.max << " outliers=" << s.outlier_count
        << " (" << to_string(s.metric_kind) << ")\n";
}

inline int cmd_evaluate(EvaluateArgs a, std::ostream& out) {
    a.opt.metric = parse_metric(a.metric);
    a.opt.validate();
    const auto split = parse_split(a.split);
    if (a.manifest.empty()) throw ConfigError("manifest: required");
    if (a.out_dir.empty()) throw ConfigError("out-dir: required");
    if (a.checkpoint.empty() == a.ground_truth.empty()) throw ConfigError("exactly one of --checkpoint or --ground-truth is required");

    EvalResult r;
    if (!a.ground_truth.empty()) {
        const Head head = parse_head(a.ground_truth);
        ModelConfig m{head, a.scale, 0.0};
        m.validate();
        r = evaluate_pairs(load_pairs(a.manifest, split), ground_truth_predictor(head), square_corners(m.ir_size(), Frame::source), a.opt);
    } else {
        r = evaluate_model(load_checkpoint(a.checkpoint), a.manifest, split, a.opt);
    }
    ensure_dir(a.out_dir);
    const fs::path dir = a.out_dir;
    write_pairs_csv(dir / "pairs.csv", r.pairs);
    write_summary_json(dir / "summary.json", r.summary);
    write_text(dir / "boxplot.svg", box_plot_svg({{a.split, r.errors()}},
                                                 a.opt.metric == MetricKind::euclidean ? "Ace (px)" : "Ace (px^2)"));
    print_summary(r.summary, out);
    return kOk;
}

struct ReportArgs {
    std::vector<std::string> inputs;  // label=path.csv or path.csv
    std::string out_dir, metric = "euclidean";
};

inline int cmd_report(const ReportArgs& a, std::ostream& out) {
    const MetricKind kind = parse_metric(a.metric);
    if (a.inputs.empty()) throw ConfigError("csv: at least one per-pair CSV is required");
    if (a.out_dir.empty()) throw ConfigError("out-dir: required");
    std::vector<PlotSeries> series;
    nlohmann::ordered_json summaries = nlohmann::ordered_json::array();
    std::ostringstream table;
    table << "| series | n | failed | mean | std | min | 25% | 50% | 75% | max | outliers |\n";
    table << "|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& in : a.inputs) {
        const auto eq = in.find('=');
        const std::string label = eq == std::string::npos ? fs::path(in).parent_path().filename().string() : in.substr(0, eq);
        const fs::path path = eq == std::string::npos ? fs::path(in) : fs::path(in.substr(eq + 1));
        const auto rows = read_pairs_csv(path);
        PlotSeries s{label.empty() ? path.stem().string() : label, {}};
        int failed = 0;
        for (const auto& r : rows) {
            s.values.push_back(r.ace);
            failed += r.failed ? 1 : 0;
        }
        if (s.values.empty()) throw EmptyInput("no rows in " + path.string());
        AceSummary sum = summarize(s.values, kind);
        sum.failed_count = failed;
        auto j = to_json(sum);
        j["label"] = s.label;
        summaries.push_back(j);
        table << "| " << s.label << " | " << sum.n_pairs << " | " << failed << " | " << format_double(sum.mean) << " | "
              << format_double(sum.std) << " | " << format_double(sum.min) << " | " << format_double(sum.q1) << " | "
              << format_double(sum.median) << " | " << format_double(sum.q3) << " | " << format_double(sum.max) << " | "
              << sum.outlier_count << " |\n";
        series.push_back(std::move(s));
    }
    ensure_dir(a.out_dir);
    const fs::path dir = a.out_dir;
    write_text(dir / "report.md", table.str());
    write_text(dir / "report.json", summaries.dump(2) + "\n");
    write_text(dir / "boxplot.svg", box_plot_svg(series, kind == MetricKind::euclidean ? "Ace (px)" : "Ace (px^2)"));
    out << table.str();
    return kOk;
}

// ---------------------------------------------------------------------------

/// Files may be flat or hold one table per subcommand; flat keys belong to the
/// subcommand being run.
class SectionedConfig : public CLI::Config {
public:
    SectionedConfig(std::shared_ptr<CLI::Config> inner, std::string section)
        : inner_(std::move(inner)), section_(std::move(section)) {}

    std::string to_config(const CLI::App* app, bool defaults, bool write_desc, std::string prefix) const override {
        return inner_->to_config(app, defaults, write_desc, std::move(prefix));
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        auto items = inner_->from_config(input);
        for (auto& it : items) {
            // the TOML reader emits bookkeeping items for [table] headers
            if (it.parents.empty() && !section_.empty() && it.name != "++" && it.name != "--") it.parents = {section_};
        }
        return items;
    }

private:
    std::shared_ptr<CLI::Config> inner_;
    std::string section_;
};

inline std::string first_positional(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            ++i;
            continue;
        }
        if (!args[i].starts_with("-")) return args[i];
    }
    return {};
}

/// Chooses the JSON reader when --config names a .json file.
inline bool wants_json_config(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string v;
        if (args[i] == "--config" && i + 1 < args.size()) v = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) v = args[i].substr(9);
        if (!v.empty()) return fs::path(v).extension() == ".json";
    }
    return false;
}

/// args excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Visible/infrared homography estimation: data generation, training and evaluation"};
    app.require_subcommand(1);
    const bool json_config = wants_json_config(args);
    // CLI11 only reads the root app's config file, so --config lives there and
    // subcommands fall through to it.
    app.set_config("--config", "", "TOML (or .json) file with option values; command-line flags override it");
    std::shared_ptr<CLI::Config> reader = std::make_shared<CLI::ConfigTOML>();
    if (json_config) reader = std::make_shared<ConfigJson>();
    app.config_formatter(std::make_shared<SectionedConfig>(reader, first_positional(args)));
    auto configure = [](CLI::App* sub) {
        sub->fallthrough();
        sub->footer("Options may also come from --config FILE (TOML, or JSON when FILE ends in .json).");
    };

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Build a pair dataset and manifest from registered RGB/IR images");
    configure(g);
    g->add_option("--input-dir", gen.input_dir, "Directory of <name>_rgb.png / <name>_ir.png registered pairs");
    g->add_option("--output-dir", gen.output_dir, "Dataset output directory");
    g->add_option("--synthetic", gen.synthetic, "Render N synthetic registered pairs into <output-dir>/registered and use them");
    g->add_option("--synthetic-size", gen.synthetic_size, "Side length of synthetic registered images (default: target size)");
    g->add_option("--target-size", gen.cfg.target_size, "Target (RGB) crop side")->capture_default_str();
    g->add_option("--source-size", gen.cfg.source_size, "Source (IR) patch side")->capture_default_str();
    g->add_option("--jitter", gen.cfg.jitter_radius, "Corner jitter radius in pixels")->capture_default_str();
    g->add_option("--pairs-per-image", gen.cfg.pairs_per_image, "Pairs drawn per registered image")->capture_default_str();
    g->add_option("--test-fraction", gen.cfg.test_fraction, "Fraction of registered images held out")->capture_default_str();
    g->add_option("--seed", gen.cfg.rng_seed, "RNG seed")->capture_default_str();

    TrainArgs tb;
    auto* b = app.add_subcommand("train-backbone", "Stage 1: train both embedding branches");
    configure(b);
    TrainArgs th;
    auto* h = app.add_subcommand("train-head", "Stage 2: train the regression block on a trained backbone");
    configure(h);
    for (auto [sub, ta] : {std::pair{b, &tb}, std::pair{h, &th}}) {
        sub->add_option("--manifest", ta->manifest, "Dataset manifest (train split is used)");
        sub->add_option("--out-dir", ta->out_dir, "Directory for checkpoint and JSON log");
        sub->add_option("--epochs", ta->cfg.epochs)->capture_default_str();
        sub->add_option("--batch-size", ta->cfg.batch_size)->capture_default_str();
        sub->add_option("--lr", ta->cfg.learning_rate, "Adam learning rate")->capture_default_str();
        sub->add_option("--scale", ta->cfg.scale, "Model width/resolution scale: 1, 0.5 or 0.25")->capture_default_str();
        sub->add_option("--dropout", ta->cfg.dropout)->capture_default_str();
        sub->add_option("--seed", ta->cfg.rng_seed)->capture_default_str();
    }
    b->add_option("--loss", tb.loss, "Feature-map loss: sim, mae or ssim")->capture_default_str();
    h->add_option("--backbone", th.backbone, "Backbone checkpoint from train-backbone");
    h->add_option("--head", th.head, "Output head: corners or homography")->capture_default_str();
    h->add_option("--gamma", th.cfg.gamma, "Weight of the corner term for the homography head")->capture_default_str();
    h->add_flag("--finetune-backbone", th.finetune_backbone, "Also update the backbone (default: frozen)");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Per-pair Ace, summary statistics and box plot");
    configure(e);
    e->add_option("--checkpoint", ev.checkpoint, "Trained head checkpoint");
    e->add_option("--ground-truth", ev.ground_truth, "Score the ground truth itself in the given head format (corners|homography)");
    e->add_option("--scale", ev.scale, "Model scale assumed with --ground-truth")->capture_default_str();
    e->add_option("--manifest", ev.manifest, "Dataset manifest");
    e->add_option("--split", ev.split, "train, test or all")->capture_default_str();
    e->add_option("--metric", ev.metric, "euclidean or squared")->capture_default_str();
    e->add_option("--sentinel", ev.opt.sentinel, "Error assigned to failed estimates")->capture_default_str();
    e->add_option("--batch-size", ev.opt.batch_size)->capture_default_str();
    e->add_option("--out-dir", ev.out_dir, "Directory for pairs.csv, summary.json and boxplot.svg");

    ReportArgs rep;
    auto* r = app.add_subcommand("report", "Combine per-pair CSVs into a table and a box plot");
    configure(r);
    r->add_option("--csv", rep.inputs, "Per-pair CSV, optionally as label=path (repeatable)");
    r->add_option("--metric", rep.metric, "Metric the CSVs hold: euclidean or squared")->capture_default_str();
    r->add_option("--out-dir", rep.out_dir, "Directory for report.md, report.json and boxplot.svg");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& ex) {
        // Subcommand help arrives as a ParseError with exit code 0.
        if (ex.get_exit_code() == 0) {
            for (auto* sub : app.get_subcommands()) out << sub->help();
            return kOk;
        }
        err << "config error: " << ex.what() << "\n";
        return kConfig;
    }

    try {
        if (g->parsed()) return cmd_generate(gen, out);
        if (b->parsed()) return cmd_train_backbone(tb, out);
        if (h->parsed()) return cmd_train_head(th, out);
        if (e->parsed()) return cmd_evaluate(ev, out);
        if (r->parsed()) return cmd_report(rep, out);
    } catch (const ConfigError& ex) {
        err << "config error: " << ex.what() << "\n";
        return kConfig;
    } catch (const EmptyInput& ex) {
        err << "empty input: " << ex.what() << "\n";
        return kConfig;
    } catch (const ShapeMismatch& ex) {
        err << "shape mismatch: " << ex.what() << "\n";
        return kConfig;
    } catch (const SamplingExhausted& ex) {
        err << "sampling failed: " << ex.what() << "\n";
        return kConfig;
    } catch (const IoError& ex) {
        err << "i/o error: " << ex.what() << "\n";
        return kIo;
    } catch (const FormatError& ex) {
        err << "format error: " << ex.what() << "\n";
        return kIo;
    } catch (const NonFiniteLoss& ex) {
        err << "numeric failure: " << ex.what() << "\n";
        return kNumeric;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kGeneric;
    }
    return kGeneric;
}

}  // namespace visirnet::cli

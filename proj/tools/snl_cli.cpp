// snl: verification suites, training runs, block cost tables and attention
// heatmaps from the command line.
//
// Exit codes: 0 ok, 1 a verification suite failed, 2 usage or input error.

#include "snl/affinity.hpp"
#include "snl/blocks.hpp"
#include "snl/config.hpp"
#include "snl/io.hpp"
#include "snl/synth.hpp"
#include "snl/train.hpp"
#include "snl/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace snl;

namespace {

constexpr int kOk = 0;
constexpr int kSuiteFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string with_commas(std::uint64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return s;
}

std::vector<std::size_t> parse_positions(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || item[0] == '-') throw UsageError("bad position '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty()) throw UsageError("--positions needs at least one index");
    return out;
}

std::pair<std::size_t, std::size_t> parse_hw(const std::string& text) {
    const auto x = text.find_first_of("xX");
    try {
        if (x == std::string::npos) {
            const auto s = std::stoul(text);
            return {s, s};
        }
        return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
    } catch (const std::exception&) {
        throw UsageError("--hw expects HxW, got '" + text + "'");
    }
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
    std::vector<std::string> suites;
    std::size_t trials = 0;
    std::uint64_t seed = 1;
    std::string output_dir = "verify-failures";
    std::string replay;
    bool inject_fault = false;
};

int run_verify(const VerifyArgs& a) {
    if (a.inject_fault) fault::inject(fault::Fault::NormalizeSymSign);

    if (!a.replay.empty()) {
        const auto f = verify::read_failure(a.replay);
        const auto r = verify::replay(f.check, f.seed, f.trial);
        std::printf("replay %s seed %llu trial %zu: error %.4g (tol %.1g) %s\n", f.check.c_str(),
                    static_cast<unsigned long long>(f.seed), f.trial, r.error, r.tolerance,
                    r.passed ? "PASS" : "FAIL");
        std::printf("%s\n", r.detail.c_str());
        return r.passed ? kOk : kSuiteFailed;
    }

    std::vector<verify::Suite> suites;
    if (a.suites.empty() || (a.suites.size() == 1 && a.suites[0] == "all")) {
        suites = verify::all_suites();
    } else {
        for (const auto& name : a.suites) {
            const auto s = verify::parse_suite(name);
            if (!s) throw UsageError("unknown suite '" + name + "' (oracle, reductions, gradients, invariants, all)");
            suites.push_back(*s);
        }
    }

    verify::Options opts;
    opts.seed = a.seed;
    opts.trials = a.trials;
    std::vector<verify::SuiteResult> results;
    bool ok = true;
    for (auto s : suites) {
        results.push_back(verify::run_suite(s, opts));
        if (!results.back().passed()) {
            ok = false;
            for (const auto& p : verify::write_failures(results.back(), a.output_dir))
                std::fprintf(stderr, "failure written to %s\n", p.string().c_str());
        }
    }
    std::fputs(verify::format_report(results).c_str(), stdout);
    std::printf("%s\n", ok ? "all suites passed" : "FAILED");
    return ok ? kOk : kSuiteFailed;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string output_dir;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> train_size;
    std::optional<std::size_t> test_size;
    bool strict = false;
    bool quiet = false;
};

int run_train(const TrainArgs& a) {
    ExperimentConfig cfg;
    if (!a.config.empty()) cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (!a.variant.empty()) {
        if (a.variant == "none") {
            cfg.variant.reset();
        } else {
            const auto v = parse_variant(a.variant);
            if (!v) throw UsageError("unknown variant '" + a.variant + "'");
            cfg.variant = *v;
        }
    }
    if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
    if (a.epochs) cfg.optim.epochs = *a.epochs;
    if (a.train_size) cfg.train_size = *a.train_size;
    if (a.test_size) cfg.test_size = *a.test_size;
    cfg.validate();
    // Everything runs on one thread already, so strict mode changes nothing.
    (void)a.strict;

    TrainHooks hooks;
    if (!a.quiet) {
        hooks.on_epoch = [](const EpochMetrics& m) {
            std::printf("epoch %3zu  lr %.4g  loss %.4f  top1 %.4f  top5 %.4f\n", m.epoch, m.lr, m.train_loss, m.top1,
                        m.top5);
            std::fflush(stdout);
        };
    }
    const auto r = train(cfg, hooks);
    std::printf("metrics: %s\ncheckpoint: %s\n", r.metrics_path.string().c_str(),
                r.checkpoint_path.string().c_str());
    return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string variant = "SNL";
    std::size_t c1 = 1024;
    std::size_t cs = 512;
    std::string hw = "14x14";
    std::size_t order = 2;
};

int run_bench(const BenchArgs& a) {
    const auto v = parse_variant(a.variant);
    if (!v) throw UsageError("unknown variant '" + a.variant + "'");
    const auto [h, w] = parse_hw(a.hw);
    auto cfg = BlockConfig::make(*v, a.c1, a.cs);
    cfg.order = a.order;
    cfg.h = h;
    cfg.w = w;
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    const auto params = count_params(cfg);
    const auto macs = count_flops(cfg, h, w);
    std::printf("variant   %s\n", std::string(variant_name(*v)).c_str());
    std::printf("c1 cs     %zu %zu\n", a.c1, a.cs);
    std::printf("extent    %zux%zu\n", h, w);
    std::printf("params    %s\n", with_commas(params.weights).c_str());
    std::printf("bn params %s\n", with_commas(params.batch_norm).c_str());
    std::printf("macs      %s\n", with_commas(macs).c_str());
    std::printf("gmacs     %.4f\n", static_cast<double>(macs) / 1e9);
    return kOk;
}

// ---------------------------------------------------------------------------

struct AttnArgs {
    std::string checkpoint;
    std::string input;
    std::string positions;
    std::string output_dir = ".";
};

// Grey levels 0..255 map linearly onto [-1, 1], the range of the motifs.
ArrayF image_from_pgm(const Pgm& pgm, std::size_t side) {
    if (pgm.h != side || pgm.w != side)
        throw UsageError("input is " + std::to_string(pgm.h) + "x" + std::to_string(pgm.w) + ", model expects " +
                         std::to_string(side) + "x" + std::to_string(side));
    ArrayF x({1, side, side, 1});
    for (std::size_t i = 0; i < pgm.pixels.size(); ++i) x[i] = static_cast<float>(pgm.pixels[i] / 127.5 - 1.0);
    return x;
}

int run_attn(const AttnArgs& a) {
    const auto model = restore_model(load_checkpoint(a.checkpoint));
    if (!model.config.block) throw UsageError("checkpoint has no nonlocal block");
    const auto x = image_from_pgm(decode_pgm(read_file(a.input)), model.config.image);
    const auto out = backbone_forward(x, model.params, model.config, BnMode::Inference, true);
    const auto& att = out.attention.at(0).m;
    const std::size_t h = model.config.block->h, w = model.config.block->w, n = h * w;

    const auto positions = parse_positions(a.positions);
    for (auto p : positions)
        if (p >= n)
            throw UsageError("position " + std::to_string(p) + " out of range; valid positions are 0.." +
                             std::to_string(n - 1) + " (" + std::to_string(h) + "x" + std::to_string(w) + ")");

    fs::create_directories(a.output_dir);
    for (auto p : positions) {
        std::vector<double> row(n);
        for (std::size_t j = 0; j < n; ++j) row[j] = att(p, j);
        const auto stem = fs::path(a.output_dir) / ("attn-" + std::to_string(p));
        atomic_write(stem.string() + ".pgm", encode_pgm(heatmap_pixels(row), h, w));
        atomic_write(stem.string() + ".csv", format_grid_csv(row, h, w));
        std::printf("%s.pgm %s.csv\n", stem.string().c_str(), stem.string().c_str());
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string config;
    std::uint64_t seed = 1;
    std::size_t index = 0;
    std::string output = "sample.pgm";
};

// Writes one synthetic test image as a PGM, the inverse of image_from_pgm.
int run_sample(const SampleArgs& a) {
    ExperimentConfig cfg;
    if (!a.config.empty()) cfg = load_config(a.config);
    const auto data = generate_synth(cfg.task, a.index + 1, a.seed);
    const std::size_t side = data.image;
    std::vector<std::uint8_t> px(side * side);
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double g = std::round((data.pixels[a.index * px.size() + i] + 1.0) * 127.5);
        px[i] = static_cast<std::uint8_t>(std::clamp(g, 0.0, 255.0));
    }
    atomic_write(a.output, encode_pgm(px, side, side));
    const auto& s = data.layout[a.index];
    std::printf("%s label %zu motifs %zu %zu\n", a.output.c_str(), s.label, s.a, s.b);
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral nonlocal blocks: verification, training and inspection"};
    app.require_subcommand(1);

    VerifyArgs va;
    auto* verify_cmd = app.add_subcommand("verify", "Run the randomised verification suites");
    verify_cmd->add_option("--suite", va.suites, "oracle, reductions, gradients, invariants or all")->delimiter(',');
    verify_cmd->add_option("--trials", va.trials, "Trials per check (default: each check's own)");
    verify_cmd->add_option("--seed", va.seed, "Base seed");
    verify_cmd->add_option("--output-dir", va.output_dir, "Where failing cases are written");
    verify_cmd->add_option("--replay", va.replay, "Re-run one recorded failure file");
    verify_cmd->add_flag("--inject-fault", va.inject_fault)->group("");

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train the backbone on the synthetic task");
    train_cmd->add_option("--config", ta.config, "JSON experiment config (defaults if omitted)");
    train_cmd->add_option("--seed", ta.seed, "Override the config seed");
    train_cmd->add_option("--variant", ta.variant, "none, NL, NS, A2, CGNL, CC or SNL");
    train_cmd->add_option("--output-dir", ta.output_dir, "Override the output directory");
    train_cmd->add_option("--epochs", ta.epochs, "Override the epoch count");
    train_cmd->add_option("--train-size", ta.train_size, "Override the training set size");
    train_cmd->add_option("--test-size", ta.test_size, "Override the test set size");
    train_cmd->add_flag("--strict-deterministic", ta.strict, "Single-threaded, bit-reproducible run");
    train_cmd->add_flag("--quiet", ta.quiet, "No per-epoch lines");

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench", "Parameter and multiply-accumulate counts of one block");
    bench_cmd->add_option("--variant", ba.variant, "NL, NS, A2, CGNL, CC or SNL");
    bench_cmd->add_option("--c1", ba.c1, "Input channels");
    bench_cmd->add_option("--cs", ba.cs, "Embedding channels");
    bench_cmd->add_option("--hw", ba.hw, "Spatial extent HxW");
    bench_cmd->add_option("--order", ba.order, "Filter terms (SNL)");

    AttnArgs aa;
    auto* attn_cmd = app.add_subcommand("attn", "Export attention rows of a trained block as heatmaps");
    attn_cmd->add_option("--checkpoint", aa.checkpoint, "SNL1 checkpoint written by train")->required();
    attn_cmd->add_option("--input", aa.input, "Binary PGM input image")->required();
    attn_cmd->add_option("--positions", aa.positions, "Comma-separated query positions")->required();
    attn_cmd->add_option("--output-dir", aa.output_dir, "Where heatmaps are written");

    SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "Write one synthetic image as a PGM");
    sample_cmd->add_option("--config", sa.config, "JSON experiment config for the task parameters");
    sample_cmd->add_option("--seed", sa.seed, "Dataset seed");
    sample_cmd->add_option("--index", sa.index, "Sample index");
    sample_cmd->add_option("--output", sa.output, "Output PGM path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*verify_cmd) return run_verify(va);
        if (*train_cmd) return run_train(ta);
        if (*bench_cmd) return run_bench(ba);
        if (*attn_cmd) return run_attn(aa);
        if (*sample_cmd) return run_sample(sa);
    } catch (const FileNotFound& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const ConfigParseError& e) {
        std::fprintf(stderr, "error: line %zu, key '%s': %s\n", e.line(), e.key().c_str(), e.what());
        return kUsage;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const LockError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kSuiteFailed;
    }
    return kUsage;
}

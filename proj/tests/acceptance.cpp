// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.
//
//   acceptance <path-to-snl-cli> [--only 1,2,...] [--work-dir DIR]

#include "snl/blocks.hpp"
#include "snl/config.hpp"
#include "snl/io.hpp"
#include "snl/train.hpp"
#include "snl/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

using namespace snl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
    int id;
    std::string title;
    bool pass;
    std::string detail;
};

std::vector<Line> lines;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
    lines.push_back({id, title, pass, detail});
    std::printf("%s C%d %s: %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Run {
    int status = -1;
    std::string out;
};

Run run(const std::string& cmd) {
    Run r;
    FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    std::size_t got;
    while ((got = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), got);
    const int st = ::pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

// A check of a verify suite against a pinned tolerance, trial floor and time
// budget. Tolerances here are the criterion's, not whatever the suite uses.
struct SuiteCheck {
    const verify::SuiteResult* suite;
    std::string check;
    double tolerance;
    std::size_t min_trials;
};

bool suite_checks_pass(const std::vector<SuiteCheck>& checks, std::string& detail) {
    bool ok = true;
    std::ostringstream d;
    for (const auto& c : checks) {
        const auto* r = c.suite->find(c.check);
        if (!r) {
            d << c.check << " missing; ";
            ok = false;
            continue;
        }
        const bool within = c.tolerance == 0 ? r->worst == 0 : r->worst < c.tolerance;
        const bool good = r->failures == 0 && within && r->trials >= c.min_trials;
        ok = ok && good;
        d << c.check << " " << r->trials << " trials worst " << fmt("%.2e", r->worst) << (good ? "" : " (!)") << "; ";
    }
    detail = d.str();
    return ok;
}

// ---------------------------------------------------------------------------

void criterion_1() {
    const auto t0 = Clock::now();
    const auto r = verify::run_suite(verify::Suite::Oracle);
    const double secs = seconds_since(t0);
    std::string detail;
    const bool ok = suite_checks_pass({{&r, "chebyshev_direct", 1e-10, 200}}, detail) && secs < 10;
    report(1, "Chebyshev filter equals eigendecomposition filter", ok,
           detail + "tol 1e-10, " + fmt("%.2f", secs) + " s (limit 10 s)");
}

void criterion_2() {
    const auto t0 = Clock::now();
    const auto r = verify::run_suite(verify::Suite::Reductions);
    const double secs = seconds_since(t0);
    std::string detail;
    std::vector<SuiteCheck> checks;
    for (const char* c : {"reduction_nl", "reduction_ns", "reduction_a2", "reduction_cgnl", "reduction_cc"})
        checks.push_back({&r, c, 1e-12, 200});
    const bool ok = suite_checks_pass(checks, detail) && secs < 30;
    report(2, "variant reduction identities", ok, detail + "tol 1e-12, " + fmt("%.2f", secs) + " s (limit 30 s)");
}

void criterion_3() {
    const auto t0 = Clock::now();
    const auto r = verify::run_suite(verify::Suite::Gradients);
    const double secs = seconds_since(t0);
    std::string detail;
    const bool ok = suite_checks_pass({{&r, "gradient_snl", 1e-5, 20}}, detail) && secs < 60;
    report(3, "SNL block gradients vs central differences", ok,
           detail + "tol 1e-5 relative, " + fmt("%.2f", secs) + " s (limit 60 s)");
}

verify::SuiteResult invariants;

void criterion_4() {
    std::string detail;
    const bool ok = suite_checks_pass({{&invariants, "snl_spectrum", 1.0, 500}}, detail);
    report(4, "SNL affinity symmetric, non-negative, spectrum in [-1, 1]", ok,
           detail + "(error is the worst bound violation ratio, < 1 passes)");
}

void criterion_5(const fs::path& cli) {
    auto bench = [&](const std::string& variant) {
        const auto r = run(quote(cli) + " bench --variant " + variant + " --c1 1024 --cs 512 --hw 14x14");
        std::map<std::string, std::string> kv;
        std::istringstream in(r.out);
        std::string line;
        while (std::getline(in, line)) {
            const auto sp = line.find(' ');
            if (sp == std::string::npos) continue;
            auto v = line.substr(sp);
            v.erase(0, v.find_first_not_of(' '));
            kv[line.substr(0, sp)] = v;
        }
        return std::make_pair(r.status, kv);
    };
    const auto [s_snl, snl] = bench("SNL");
    const auto [s_nl, nl] = bench("NL");
    auto count = [](const std::map<std::string, std::string>& kv, const char* key) -> std::uint64_t {
        const auto it = kv.find(key);
        if (it == kv.end()) return 0;
        std::string digits;
        for (char c : it->second)
            if (c != ',') digits += c;
        return std::stoull(digits);
    };
    const auto p_snl = count(snl, "params"), p_nl = count(nl, "params");
    const double g_snl = static_cast<double>(count(snl, "macs")) / 1e9, g_nl = static_cast<double>(count(nl, "macs")) / 1e9;
    const bool params_ok = p_snl == 2'621'440 && p_nl == 2'097'152;
    const bool flops_ok = std::abs(g_snl - 0.51) <= 0.2 * 0.51 && std::abs(g_nl - 0.41) <= 0.2 * 0.41;
    const bool ok = s_snl == 0 && s_nl == 0 && params_ok && flops_ok;
    std::ostringstream d;
    d << "SNL params " << p_snl << " (want 2621440), NL params " << p_nl << " (want 2097152); SNL "
      << fmt("%.3f", g_snl) << " G-MACs (0.51 +-20%), NL " << fmt("%.3f", g_nl) << " G-MACs (0.41 +-20%) at 14x14";
    report(5, "bench parameter and MAC counts", ok, d.str());
}

void criterion_6(const fs::path& work) {
    const std::size_t seeds = 5;
    const std::vector<std::optional<Variant>> models{std::nullopt, Variant::NL, Variant::SNL};
    std::map<std::string, std::vector<double>> top1;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        for (const auto& v : models) {
            ExperimentConfig cfg;
            cfg.variant = v;
            cfg.seed = seed;
            const std::string name = v ? std::string(variant_name(*v)) : "none";
            cfg.output_dir = work / "training" / (name + "-seed" + std::to_string(seed));
            fs::remove_all(cfg.output_dir);
            const auto t1 = Clock::now();
            const auto r = train(cfg);
            top1[name].push_back(r.history.back().top1);
            std::printf("  training %-4s seed %llu: top1 %.4f (%.0f s)\n", name.c_str(),
                        static_cast<unsigned long long>(seed), r.history.back().top1, seconds_since(t1));
            std::fflush(stdout);
        }
    }
    const double secs = seconds_since(t0);
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    const double m_none = 100 * median(top1["none"]), m_nl = 100 * median(top1["NL"]), m_snl = 100 * median(top1["SNL"]);
    const bool ok = m_snl - m_none >= 2.0 && m_snl >= m_nl && secs < 1800;
    std::ostringstream d;
    d << "median top-1 SNL " << fmt("%.2f", m_snl) << ", NL " << fmt("%.2f", m_nl) << ", plain "
      << fmt("%.2f", m_none) << " (SNL - plain " << fmt("%.2f", m_snl - m_none) << " >= 2.0, SNL >= NL); "
      << fmt("%.0f", secs) << " s (limit 1800 s)";
    report(6, "training benefit on the synthetic long-range task", ok, d.str());
}

void criterion_7(const fs::path& cli, const fs::path& work) {
    // Reduced data and epochs keep this quick; the full-size runs of
    // criterion 6 go through the same code path.
    const auto cfg_path = work / "determinism.json";
    atomic_write(cfg_path, R"({"variant": "SNL", "task": {"train_size": 1024, "test_size": 256},
  "optim": {"epochs": 3}})");
    std::string csv[2];
    int status[2];
    for (int i = 0; i < 2; ++i) {
        const auto dir = work / ("determinism-" + std::to_string(i));
        fs::remove_all(dir);
        const auto r = run(quote(cli) + " train --config " + quote(cfg_path) + " --seed 7 --strict-deterministic --quiet" +
                           " --output-dir " + quote(dir));
        status[i] = r.status;
        csv[i] = fs::exists(dir / "metrics.csv") ? read_file(dir / "metrics.csv") : "";
    }
    const bool ok = status[0] == 0 && status[1] == 0 && !csv[0].empty() && csv[0] == csv[1];
    std::ostringstream d;
    d << "two runs, seed 7: exit " << status[0] << "/" << status[1] << ", metrics.csv " << csv[0].size() << " bytes, "
      << (csv[0] == csv[1] ? "byte-identical" : "DIFFER");
    report(7, "strict-deterministic training is reproducible", ok, d.str());
}

void criterion_8() {
    std::string detail;
    const bool ok = suite_checks_pass(
        {{&invariants, "residual_identity", 0.0, 500}, {&invariants, "permutation", 1e-12, 500}}, detail);
    report(8, "residual identity and permutation equivariance", ok,
           detail + "residual exact, permutation tol 1e-12");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string cli;
    std::vector<int> only;
    std::string work = "acceptance-work";
    app.add_option("cli", cli, "Path to the snl command-line tool")->required();
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    app.add_option("--work-dir", work, "Scratch directory for training runs");
    CLI11_PARSE(app, argc, argv);

    const std::set<int> wanted(only.begin(), only.end());
    auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };
    fs::create_directories(work);

    if (want(4) || want(8)) invariants = verify::run_suite(verify::Suite::Invariants);
    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    if (want(4)) criterion_4();
    if (want(5)) criterion_5(cli);
    if (want(6)) criterion_6(work);
    if (want(7)) criterion_7(cli, work);
    if (want(8)) criterion_8();

    std::size_t passed = 0;
    for (const auto& l : lines) passed += l.pass;
    std::printf("%zu/%zu criteria passed\n", passed, lines.size());
    return passed == lines.size() ? 0 : 1;
}

#include "snl/verify.hpp"

#include "snl/affinity.hpp"
#include "snl/blocks.hpp"
#include "snl/graph_spectral.hpp"
#include "snl/io.hpp"
#include "snl/linalg.hpp"
#include "snl/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace snl::verify {

namespace {

using json = nlohmann::json;

struct Outcome {
    double error = 0;
    json detail = json::object();
};

struct Check {
    const char* name;
    const char* description;
    double tolerance; ///< pass iff error <= tolerance; the bit-exact check uses 0
    std::size_t trials;
    std::function<Outcome(Rng&)> run;
};

std::uint64_t name_hash(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL; // FNV-1a
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

Array normal_array(Shape shape, double stddev, Rng& rng) {
    Array a(std::move(shape));
    for (auto& v : a.values()) v = stddev * rng.normal();
    return a;
}

json array_json(const Array& a) {
    return json{{"shape", a.shape()}, {"values", std::vector<double>(a.values().begin(), a.values().end())}};
}

/// Norm-wise relative error: max|a − b| over the larger of max|b| and a floor.
double relative_error(const Array& a, const Array& b, double floor = 1e-8) {
    return max_abs_diff(a, b) / std::max(max_abs(b), floor);
}

// ---------------------------------------------------------------------------
// Instance generators

/// Non-negative M with strictly positive diagonal, random sparsity and a
/// random dynamic range, symmetrically normalised.
AffinityMatrix random_sym_affinity(Rng& rng, std::size_t n, json& detail) {
    const double spread = rng.uniform(0.1, 3.0);
    const double keep = rng.uniform(0.2, 1.0);
    Array m({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i == j || rng.uniform() < keep) m(i, j) = std::exp(spread * rng.normal());
    detail["m"] = array_json(m);
    return normalize_sym(AffinityMatrix{m, Normalization::Raw, Kernel::Gaussian});
}

struct BlockInstance {
    BlockConfig cfg;
    BlockParams<double> params;
    Array x; ///< n×c1
};

/// Random block of the given variant: n ≤ max_nodes, c1 ≤ 8. CC gets a
/// random h×w covering all nodes.
BlockInstance random_block(Rng& rng, Variant v, std::size_t min_nodes, std::size_t max_nodes, bool vary_kernel) {
    BlockInstance inst;
    std::size_t h = 1, w = 1;
    std::size_t n = 0;
    if (v == Variant::CC) {
        do {
            h = pick(rng, 1, 4);
            w = pick(rng, 1, 4);
        } while (h * w < min_nodes || h * w > max_nodes);
        n = h * w;
    } else {
        n = pick(rng, min_nodes, max_nodes);
    }
    const std::size_t c1 = pick(rng, 1, 8);
    const std::size_t cs = pick(rng, 1, c1);
    inst.cfg = BlockConfig::make(v, c1, cs);
    inst.cfg.h = h;
    inst.cfg.w = w;
    if (v == Variant::SNL) inst.cfg.order = pick(rng, 2, 4);
    if (vary_kernel && v != Variant::CGNL && v != Variant::A2 && rng.uniform() < 0.5)
        inst.cfg.kernel = Kernel::Gaussian;
    inst.params = init_block_params<double>(inst.cfg, rng);
    inst.x = normal_array({n, c1}, rng.uniform(0.3, 1.5), rng);
    return inst;
}

json block_json(const BlockInstance& b) {
    json d;
    d["variant"] = std::string(variant_name(b.cfg.variant));
    d["kernel"] = std::string(kernel_name(b.cfg.kernel));
    d["c1"] = b.cfg.c1;
    d["cs"] = b.cfg.cs;
    d["order"] = b.cfg.order;
    d["h"] = b.cfg.h;
    d["w"] = b.cfg.w;
    d["x"] = array_json(b.x);
    return d;
}

/// CGNL divides by Σ vec(Ψ); a near-zero sum makes the instance
/// ill-conditioned rather than wrong, so it is redrawn.
bool cgnl_well_conditioned(const BlockInstance& b) {
    if (b.cfg.variant != Variant::CGNL) return true;
    const Array psi = matmul(b.x, b.params.w_psi);
    double sum = 0, l1 = 0;
    for (double v : psi.values()) {
        sum += v;
        l1 += std::abs(v);
    }
    return std::abs(sum) > 0.1 * l1;
}

BlockInstance random_block_conditioned(Rng& rng, Variant v, std::size_t lo, std::size_t hi, bool vary_kernel) {
    for (;;) {
        BlockInstance b = random_block(rng, v, lo, hi, vary_kernel);
        if (cgnl_well_conditioned(b)) return b;
    }
}

// ---------------------------------------------------------------------------
// Oracle

Outcome chebyshev_vs_direct(Rng& rng) {
    Outcome out;
    const std::size_t n = pick(rng, 1, 16);
    const std::size_t c = pick(rng, 1, 8);
    const AffinityMatrix a = random_sym_affinity(rng, n, out.detail);
    const Array z = normal_array({n, c}, 1.0, rng);
    const SpectralDecomposition basis = spectral_basis(a);
    for (std::size_t k : {1, 2, 3, 5}) {
        ChebCoeffs theta;
        for (std::size_t i = 0; i < k; ++i) theta.theta.push_back(rng.normal());
        const Array poly = chebyshev_filter(a, z, theta);
        const Array direct = spectral_filter_direct(basis, z, chebyshev_response(basis, theta));
        const double err = relative_error(poly, direct);
        if (err >= out.error) {
            out.error = err;
            out.detail["worst_k"] = k;
        }
    }
    out.detail["n"] = n;
    out.detail["c"] = c;
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Outcome reduction(Rng& rng, Variant v) {
    const BlockInstance b = random_block_conditioned(rng, v, 1, 16, true);
    const auto ref = forward_variant_reference(b.x, b.params, b.cfg);
    const auto uni = forward_variant_unified(b.x, b.params, b.cfg);
    return {relative_error(uni.y, ref.y), block_json(b)};
}

// ---------------------------------------------------------------------------
// Gradients

/// Every input and parameter gradient of a batched block forward (train-mode
/// batch norm) against central differences of L = Σ y ⊙ R.
Outcome block_gradients(Rng& rng, Variant v) {
    BlockInstance b = random_block_conditioned(rng, v, 4, 8, v != Variant::SNL);
    const std::size_t n = b.x.rows();
    // A CGNL branch is constant over positions, so with one sample train-mode
    // batch norm zeroes it and the weight gradients vanish identically.
    const std::size_t batch = v == Variant::CGNL ? 2 : pick(rng, 1, 2);
    Array x({batch, n, b.cfg.c1});
    for (auto& e : x.values()) e = rng.normal();
    Array r(x.shape());
    for (auto& e : r.values()) e = rng.normal();
    // Non-trivial batch-norm affine parameters so their gradients are exercised.
    for (auto& g : b.params.bn.gamma.values()) g = rng.uniform(0.5, 1.5);
    for (auto& g : b.params.bn.beta.values()) g = 0.2 * rng.normal();

    BlockParams<double> p = b.params;
    auto loss = [&]() {
        const auto o = forward_block(x, p, b.cfg, {BnMode::Train, false});
        double s = 0;
        for (std::size_t i = 0; i < r.size(); ++i) s += o.y[i] * r[i];
        return s;
    };
    const auto fwd = forward_block(x, p, b.cfg, {BnMode::Train, false});
    const BlockGrads<double> g = block_backward(r, p, b.cfg, fwd.cache);

    Outcome out;
    out.detail = block_json(b);
    out.detail["batch"] = batch;
    auto compare = [&](const char* name, Array& target, const Array& analytic) {
        if (target.empty()) return;
        auto f = [&](const Array& value) {
            const Array saved = target;
            target = value;
            const double l = loss();
            target = saved;
            return l;
        };
        const Array numeric = finite_diff_grad_scaled(f, target, 1e-5);
        const double err = relative_error(analytic, numeric);
        out.detail["errors"][name] = err;
        out.error = std::max(out.error, err);
    };
    compare("x", x, g.dx);
    compare("w_phi", p.w_phi, g.dw_phi);
    compare("w_psi", p.w_psi, g.dw_psi);
    compare("w_g", p.w_g, g.dw_g);
    for (std::size_t k = 0; k < p.w_out.size(); ++k)
        compare(("w_out" + std::to_string(k)).c_str(), p.w_out[k], g.dw_out[k]);
    compare("bn.gamma", p.bn.gamma, g.dgamma);
    compare("bn.beta", p.bn.beta, g.dbeta);
    return out;
}

// ---------------------------------------------------------------------------
// Invariants

Outcome snl_spectrum(Rng& rng) {
    BlockInstance b = random_block(rng, Variant::SNL, 2, 16, true);
    // Widen the logit range now and then so peaked graphs are covered too.
    if (rng.uniform() < 0.3) b.x = scale(b.x, rng.uniform(2.0, 6.0));
    const auto o = forward_block(b.x, b.params, b.cfg, {BnMode::Train, true});
    const Array& a = o.attention.at(0).m;
    double neg = 0;
    for (double v : a.values()) neg = std::max(neg, -v);
    const double asym = max_asymmetry(a);
    const auto eig = sym_eig(a, 1e-12);
    double outside = 0;
    for (double l : eig.eigenvalues) outside = std::max(outside, std::abs(l) - 1.0);
    Outcome out{0, block_json(b)};
    out.detail["asymmetry"] = asym;
    out.detail["most_negative"] = -neg;
    out.detail["spectrum_excess"] = outside;
    // Each bound is scaled to its own tolerance so one number carries all three.
    out.error = std::max({asym / 1e-12, neg > 0 ? 2.0 : 0.0, std::max(outside, 0.0) / 1e-10});
    return out;
}

Outcome residual_identity(Rng& rng) {
    static const Variant variants[] = {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::CC, Variant::SNL};
    const Variant v = variants[rng.below(6)];
    BlockInstance b = random_block_conditioned(rng, v, 1, 16, true);
    zero_filter_weights(b.params);
    const auto o = forward_block(b.x, b.params, b.cfg, {BnMode::Inference, false});
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < b.x.size(); ++i) mismatches += o.y[i] != b.x[i];
    Outcome out{static_cast<double>(mismatches), block_json(b)};
    out.detail["mismatched_entries"] = mismatches;
    return out;
}

Outcome permutation_equivariance(Rng& rng) {
    static const Variant variants[] = {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::SNL};
    const Variant v = variants[rng.below(5)];
    const BlockInstance b = random_block_conditioned(rng, v, 1, 16, true);
    const std::size_t n = b.x.rows(), c = b.x.cols();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    Array px({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) px(i, j) = b.x(perm[i], j);
    const auto y = forward_block(b.x, b.params, b.cfg, {BnMode::Inference, false}).y;
    const auto py = forward_block(px, b.params, b.cfg, {BnMode::Inference, false}).y;
    Array permuted_y({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) permuted_y(i, j) = y(perm[i], j);
    Outcome out{scaled_max_error(py, permuted_y), block_json(b)};
    out.detail["permutation"] = perm;
    return out;
}

// ---------------------------------------------------------------------------
// Registry

const std::vector<std::pair<Suite, Check>>& registry() {
    static const std::vector<std::pair<Suite, Check>> checks = {
        {Suite::Oracle,
         {"chebyshev_direct", "Chebyshev filter vs eigendecomposition filter, K in {1,2,3,5}", 1e-10, 200,
          chebyshev_vs_direct}},
        {Suite::Reductions,
         {"reduction_nl", "NL reference vs unified operator (0, W)", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::NL); }}},
        {Suite::Reductions,
         {"reduction_ns", "NS reference vs unified operator (-W, W)", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::NS); }}},
        {Suite::Reductions,
         {"reduction_a2", "A2 reference vs unified operator over the softmax product", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::A2); }}},
        {Suite::Reductions,
         {"reduction_cgnl", "CGNL reference vs unified operator on the NCs-node graph", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::CGNL); }}},
        {Suite::Reductions,
         {"reduction_cc", "CC reference vs unified operator over the masked graph", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::CC); }}},
        {Suite::Reductions,
         {"reduction_snl", "SNL step-by-step reference vs unified operator (W1, W2, ...)", 1e-12, 200,
          [](Rng& r) { return reduction(r, Variant::SNL); }}},
        {Suite::Gradients,
         {"gradient_snl", "SNL block adjoint vs central differences, every tensor", 1e-5, 24,
          [](Rng& r) { return block_gradients(r, Variant::SNL); }}},
        {Suite::Gradients,
         {"gradient_other", "NL/NS/A2/CGNL/CC block adjoints vs central differences", 1e-5, 20,
          [](Rng& r) {
              static const Variant vs[] = {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::CC};
              return block_gradients(r, vs[r.below(5)]);
          }}},
        // Errors are pre-divided by their bounds, hence tolerance 1.
        {Suite::Invariants,
         {"snl_spectrum", "SNL affinity symmetric, non-negative, spectrum in [-1, 1]", 1.0, 500, snl_spectrum}},
        {Suite::Invariants,
         {"residual_identity", "zero filter weights give Y == X bit-exactly", 0.0, 500, residual_identity}},
        {Suite::Invariants,
         {"permutation", "forward(PX) == P forward(X) for unmasked variants", 1e-12, 500,
          permutation_equivariance}},
    };
    return checks;
}

const Check* find_check(std::string_view name, Suite* suite = nullptr) {
    for (const auto& [s, c] : registry())
        if (name == c.name) {
            if (suite) *suite = s;
            return &c;
        }
    return nullptr;
}

Rng trial_rng(const Check& c, std::uint64_t seed, std::size_t trial) {
    return Rng(derive_seed(seed ^ name_hash(c.name), trial));
}

/// Runs one trial; exceptions count as failures with the message recorded.
Outcome run_trial(const Check& c, std::uint64_t seed, std::size_t trial) {
    Rng rng = trial_rng(c, seed, trial);
    try {
        return c.run(rng);
    } catch (const std::exception& e) {
        Outcome o;
        o.error = std::numeric_limits<double>::infinity();
        o.detail["exception"] = e.what();
        return o;
    }
}

bool within(double error, double tolerance) { return std::isfinite(error) && error <= tolerance; }

} // namespace

std::string_view suite_name(Suite s) {
    switch (s) {
    case Suite::Oracle: return "oracle";
    case Suite::Reductions: return "reductions";
    case Suite::Gradients: return "gradients";
    case Suite::Invariants: return "invariants";
    }
    return "?";
}

std::optional<Suite> parse_suite(std::string_view name) {
    for (Suite s : all_suites())
        if (suite_name(s) == name) return s;
    return std::nullopt;
}

const std::vector<Suite>& all_suites() {
    static const std::vector<Suite> s = {Suite::Oracle, Suite::Reductions, Suite::Gradients, Suite::Invariants};
    return s;
}

bool SuiteResult::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed(); });
}

const CheckResult* SuiteResult::find(std::string_view check) const {
    for (const auto& c : checks)
        if (c.name == check) return &c;
    return nullptr;
}

std::vector<std::string> check_names(Suite s) {
    std::vector<std::string> out;
    for (const auto& [suite, c] : registry())
        if (suite == s) out.emplace_back(c.name);
    return out;
}

SuiteResult run_suite(Suite s, const Options& opts) {
    using clock = std::chrono::steady_clock;
    SuiteResult result{s, {}, 0};
    const auto suite_start = clock::now();
    for (const auto& [suite, c] : registry()) {
        if (suite != s) continue;
        CheckResult cr;
        cr.name = c.name;
        cr.description = c.description;
        cr.tolerance = c.tolerance;
        const std::size_t trials = opts.trials ? opts.trials : c.trials;
        const auto start = clock::now();
        for (std::size_t t = 0; t < trials; ++t) {
            const Outcome o = run_trial(c, opts.seed, t);
            ++cr.trials;
            cr.worst = std::max(cr.worst, std::isnan(o.error) ? std::numeric_limits<double>::infinity() : o.error);
            if (!within(o.error, c.tolerance)) {
                ++cr.failures;
                if (!cr.first_failure) cr.first_failure = Failure{c.name, opts.seed, t, o.error, o.detail.dump()};
                if (opts.stop_at_first_failure) break;
            }
        }
        cr.seconds = std::chrono::duration<double>(clock::now() - start).count();
        result.checks.push_back(std::move(cr));
    }
    result.seconds = std::chrono::duration<double>(clock::now() - suite_start).count();
    return result;
}

ReplayResult replay(std::string_view check, std::uint64_t seed, std::size_t trial) {
    const Check* c = find_check(check);
    if (!c) throw std::invalid_argument("unknown check: " + std::string(check));
    const Outcome o = run_trial(*c, seed, trial);
    return {o.error, c->tolerance, within(o.error, c->tolerance), o.detail.dump()};
}

std::string format_report(const std::vector<SuiteResult>& results) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-11s %-18s %7s %6s %11s %9s %8s  %s\n", "suite", "check", "trials", "fail",
                  "worst", "tol", "time[s]", "result");
    out += line;
    for (const auto& r : results)
        for (const auto& c : r.checks) {
            std::snprintf(line, sizeof line, "%-11s %-18s %7zu %6zu %11.3e %9.1e %8.2f  %s\n",
                          std::string(suite_name(r.suite)).c_str(), c.name.c_str(), c.trials, c.failures, c.worst,
                          c.tolerance, c.seconds, c.passed() ? "PASS" : "FAIL");
            out += line;
        }
    return out;
}

std::vector<std::filesystem::path> write_failures(const SuiteResult& result, const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> written;
    for (const auto& c : result.checks) {
        if (!c.first_failure) continue;
        const Failure& f = *c.first_failure;
        json doc;
        doc["suite"] = std::string(suite_name(result.suite));
        doc["check"] = f.check;
        doc["seed"] = f.seed;
        doc["trial"] = f.trial;
        doc["error"] = std::isfinite(f.error) ? json(f.error) : json("inf");
        doc["tolerance"] = c.tolerance;
        doc["instance"] = json::parse(f.detail);
        std::filesystem::create_directories(dir);
        const auto path = dir / ("failure-" + f.check + ".json");
        atomic_write(path, doc.dump(2) + "\n");
        written.push_back(path);
    }
    return written;
}

Failure read_failure(const std::filesystem::path& path) {
    const json doc = json::parse(read_file(path));
    Failure f;
    f.check = doc.at("check").get<std::string>();
    f.seed = doc.at("seed").get<std::uint64_t>();
    f.trial = doc.at("trial").get<std::size_t>();
    if (doc.contains("instance")) f.detail = doc.at("instance").dump();
    return f;
}

} // namespace snl::verify

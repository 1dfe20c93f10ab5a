#include "oracles.hpp"
#include "snl/blocks.hpp"
#include "snl/linalg.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace snl;

namespace {

Array identity(std::size_t n) {
    Array a({n, n});
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1;
    return a;
}

BlockConfig config_for(Variant v, std::size_t c1, std::size_t cs, std::size_t h = 0, std::size_t w = 0) {
    auto cfg = BlockConfig::make(v, c1, cs);
    cfg.h = h;
    cfg.w = w;
    return cfg;
}

const Variant kAll[] = {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::CC, Variant::SNL};

/// Random block instance for the property tests: CC gets a grid, everyone
/// else a free node count.
struct Instance {
    BlockConfig cfg;
    BlockParams<double> p;
    Array x;
};

Instance random_instance(Rng& rng, Variant v) {
    std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4);
    const std::size_t n = v == Variant::CC ? h * w : 1 + rng.below(16);
    if (v != Variant::CC) h = w = 0;
    const std::size_t c1 = 1 + rng.below(8), cs = 1 + rng.below(c1);
    auto cfg = config_for(v, c1, cs, h, w);
    if (v == Variant::SNL) cfg.order = 2 + rng.below(3);
    Instance in{cfg, init_block_params<double>(cfg, rng), oracle::random_matrix(rng, n, c1)};
    return in;
}

} // namespace

TEST_CASE("unified operator examples") {
    Rng rng(41);
    const std::size_t n = 5, c = 3;
    const auto z = oracle::random_matrix(rng, n, c);
    const auto w1 = oracle::random_matrix(rng, c, c);
    const auto a = oracle::random_matrix(rng, n, n);

    CHECK(max_abs_diff(unified_operator(a, z, {w1}), oracle::matmul(z, w1)) < 1e-14);
    const Array zero({n, n});
    for (std::size_t k = 1; k <= 4; ++k) {
        std::vector<Array> ws(k, oracle::random_matrix(rng, c, c));
        ws[0] = w1;
        CHECK(max_abs_diff(unified_operator(zero, z, ws), oracle::matmul(z, w1)) < 1e-14);
    }
    const auto two = unified_operator(identity(n), z, {identity(c), identity(c)});
    CHECK(max_abs_diff(two, scale(z, 2.0)) == 0.0);
}

TEST_CASE("unified operator higher terms are powers of A") {
    Rng rng(42);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = 1 + rng.below(8), cs = 1 + rng.below(4), c1 = cs + rng.below(4), k = 1 + rng.below(5);
        const auto a = oracle::random_matrix(rng, n, n, 0.4);
        const auto z = oracle::random_matrix(rng, n, cs);
        std::vector<Array> ws;
        for (std::size_t i = 0; i < k; ++i) ws.push_back(oracle::random_matrix(rng, cs, c1));
        Array ref({n, c1});
        Array az = z;
        for (std::size_t i = 0; i < k; ++i) {
            if (i > 0) az = oracle::matmul(a, az);
            const auto term = oracle::matmul(az, ws[i]);
            for (std::size_t e = 0; e < ref.size(); ++e) ref[e] += term[e];
        }
        CHECK(oracle::rel_err(unified_operator(a, z, ws), ref) < 1e-12);
    }
}

TEST_CASE("SNL forward matches a step-by-step evaluation") {
    Rng rng(0);
    auto cfg = config_for(Variant::SNL, 2, 1);
    const auto p = init_block_params<double>(cfg, rng);
    const auto x = oracle::random_matrix(rng, 4, 2);

    const auto z = oracle::matmul(x, p.w_g);
    const auto phi = oracle::matmul(x, p.w_phi);
    const auto psi = oracle::matmul(x, p.w_psi);
    Array m({4, 4});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) m(i, j) = std::exp(phi(i, 0) * psi(j, 0));
    const auto a = oracle::normalize_sym(m);
    const auto b1 = oracle::matmul(z, p.w_out[0]);
    const auto b2 = oracle::matmul(oracle::matmul(a, z), p.w_out[1]);
    Array y = x;
    for (std::size_t e = 0; e < y.size(); ++e) y[e] += b1[e] + b2[e];

    const auto out = forward_snl(x, p, cfg, {BnMode::Off, true});
    CHECK(oracle::rel_err(out.y, y) < 1e-13);
    CHECK(oracle::rel_err(out.attention.at(0).m, a) < 1e-13);
}

TEST_CASE("SNL forward trivial cases") {
    Rng rng(43);
    auto cfg = config_for(Variant::SNL, 4, 2);
    auto p = init_block_params<double>(cfg, rng);
    const Array zero({6, 4});
    CHECK(max_abs(forward_snl(zero, p, cfg, {BnMode::Inference, false}).y) == 0.0);

    zero_filter_weights(p);
    const auto x = oracle::random_matrix(rng, 6, 4);
    CHECK(max_abs_diff(forward_snl(x, p, cfg, {BnMode::Inference, false}).y, x) == 0.0);
}

TEST_CASE("SNL rejects the dot kernel unless indefinite graphs are allowed") {
    auto cfg = config_for(Variant::SNL, 4, 2);
    cfg.kernel = Kernel::Dot;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.allow_indefinite = true;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("NL reference agrees with attention written out by hand") {
    Rng rng(44);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = 1 + rng.below(10), c1 = 1 + rng.below(6), cs = 1 + rng.below(c1);
        const auto cfg = config_for(Variant::NL, c1, cs);
        const auto p = init_block_params<double>(cfg, rng);
        const auto x = oracle::random_matrix(rng, n, c1);
        const auto att = oracle::softmax_rows(
            oracle::matmul(oracle::matmul(x, p.w_phi), oracle::transpose(oracle::matmul(x, p.w_psi))));
        const auto branch = oracle::matmul(oracle::matmul(att, oracle::matmul(x, p.w_g)), p.w_out[0]);
        Array y = x;
        for (std::size_t e = 0; e < y.size(); ++e) y[e] += branch[e];
        CHECK(oracle::rel_err(forward_variant_reference(x, p, cfg).y, y) < 1e-12);
    }
}

TEST_CASE("uniform attention reduces to mean pooling") {
    Rng rng(45);
    for (auto v : {Variant::NL, Variant::NS, Variant::SNL}) {
        const std::size_t n = 5, c1 = 3, cs = 2;
        const auto cfg = config_for(v, c1, cs);
        auto p = init_block_params<double>(cfg, rng);
        p.w_phi = Array({c1, cs});
        p.w_psi = Array({c1, cs});
        const auto x = oracle::random_matrix(rng, n, c1);
        const auto att = variant_affinity(x, p, cfg).m;
        for (auto e : att.values()) CHECK(e == doctest::Approx(1.0 / n).epsilon(1e-14));
    }
    // CC aggregates X itself over each row and column of the grid.
    const auto cfg = config_for(Variant::CC, 2, 1, 2, 3);
    auto p = init_block_params<double>(cfg, rng);
    p.w_phi = Array({2, 1});
    p.w_psi = Array({2, 1});
    const auto att = variant_affinity(oracle::random_matrix(rng, 6, 2), p, cfg).m;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            const bool share = i / 3 == j / 3 || i % 3 == j % 3;
            CHECK(att(i, j) == doctest::Approx(share ? 0.25 : 0.0));
        }
}

TEST_CASE("reduction identities: each reference equals its unified form") {
    for (auto v : kAll) {
        Rng rng(derive_seed(46, static_cast<std::uint64_t>(v)));
        double worst = 0;
        for (int t = 0; t < 200; ++t) {
            const auto in = random_instance(rng, v);
            const auto ref = forward_variant_reference(in.x, in.p, in.cfg).y;
            const auto uni = forward_variant_unified(in.x, in.p, in.cfg).y;
            worst = std::max(worst, oracle::rel_err(uni, ref));
        }
        INFO(std::string(variant_name(v)));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("unified weight lists follow the taxonomy") {
    Rng rng(47);
    const auto nl = config_for(Variant::NL, 4, 2);
    const auto pnl = init_block_params<double>(nl, rng);
    const auto wnl = unified_weights(pnl, nl);
    REQUIRE(wnl.size() == 2);
    CHECK(max_abs(wnl[0]) == 0.0);
    CHECK(max_abs_diff(wnl[1], pnl.w_out[0]) == 0.0);

    const auto ns = config_for(Variant::NS, 4, 2);
    const auto pns = init_block_params<double>(ns, rng);
    const auto wns = unified_weights(pns, ns);
    REQUIRE(wns.size() == 2);
    CHECK(max_abs_diff(wns[0], scale(wns[1], -1.0)) == 0.0);

    auto snl = config_for(Variant::SNL, 4, 2);
    snl.order = 4;
    const auto psnl = init_block_params<double>(snl, rng);
    CHECK(unified_weights(psnl, snl).size() == 4);
}

TEST_CASE("SNL affinity keeps its spectral properties on every forward") {
    Rng rng(48);
    for (int t = 0; t < 200; ++t) {
        auto in = random_instance(rng, Variant::SNL);
        if (t % 4 == 0)
            for (auto& e : in.x.values()) e *= 5;
        const auto a = forward_snl(in.x, in.p, in.cfg, {BnMode::Train, true}).attention.at(0).m;
        CHECK(max_asymmetry(a) <= 1e-12);
        for (auto e : a.values()) CHECK(e >= 0.0);
        const auto ev = oracle::eigenvalues(a);
        CHECK(ev.front() >= -1 - 1e-10);
        CHECK(ev.back() <= 1 + 1e-10);
    }
}

TEST_CASE("residual identity for every variant") {
    for (auto v : kAll) {
        Rng rng(derive_seed(49, static_cast<std::uint64_t>(v)));
        for (int t = 0; t < 100; ++t) {
            auto in = random_instance(rng, v);
            zero_filter_weights(in.p);
            const auto y = forward_block(in.x, in.p, in.cfg, {BnMode::Inference, false}).y;
            INFO(std::string(variant_name(v)), " trial ", t);
            CHECK(max_abs_diff(y, in.x) == 0.0);
        }
    }
}

TEST_CASE("permutation equivariance without spatial masks") {
    for (auto v : {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::SNL}) {
        Rng rng(derive_seed(50, static_cast<std::uint64_t>(v)));
        double worst = 0;
        for (int t = 0; t < 200; ++t) {
            const auto in = random_instance(rng, v);
            const std::size_t n = in.x.rows(), c = in.x.cols();
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            rng.shuffle(perm.begin(), perm.end());
            Array px({n, c});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) px(i, j) = in.x(perm[i], j);
            const auto y = forward_block(in.x, in.p, in.cfg, {BnMode::Inference, false}).y;
            const auto py = forward_block(px, in.p, in.cfg, {BnMode::Inference, false}).y;
            Array expect({n, c});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) expect(i, j) = y(perm[i], j);
            worst = std::max(worst, oracle::rel_err(py, expect));
        }
        INFO(std::string(variant_name(v)));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("backward trivial cases") {
    Rng rng(51);
    for (auto v : kAll) {
        auto in = random_instance(rng, v);
        Array xb({2, in.x.rows(), in.x.cols()});
        for (auto& e : xb.values()) e = rng.normal();
        const auto out = forward_block(xb, in.p, in.cfg, {BnMode::Train, false});
        const auto g0 = block_backward(Array(xb.shape()), in.p, in.cfg, out.cache);
        INFO(std::string(variant_name(v)));
        CHECK(max_abs(g0.dx) == 0.0);
        CHECK(max_abs(g0.dgamma) == 0.0);
        CHECK(max_abs(g0.dbeta) == 0.0);
        for (const auto& w : g0.dw_out) CHECK(max_abs(w) == 0.0);

        zero_filter_weights(in.p);
        const auto zout = forward_block(xb, in.p, in.cfg, {BnMode::Train, false});
        Array gy(xb.shape());
        for (auto& e : gy.values()) e = rng.normal();
        const auto g1 = block_backward(gy, in.p, in.cfg, zout.cache);
        CHECK(max_abs_diff(g1.dx, gy) == 0.0);
    }
}

namespace {

double block_loss(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg, const Array& r) {
    const auto y = forward_block(x, p, cfg, {BnMode::Train, false}).y;
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
}

double norm_rel(const Array& a, const Array& n) {
    return max_abs_diff(a, n) / std::max(max_abs(n), 1e-8);
}

} // namespace

TEST_CASE("SNL adjoint matches central differences on 4-node instances") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(derive_seed(52, seed));
        auto cfg = config_for(Variant::SNL, 2 + rng.below(3), 1);
        cfg.cs = 1 + rng.below(cfg.c1);
        cfg.order = 2 + rng.below(2);
        auto p = init_block_params<double>(cfg, rng);
        for (auto& g : p.bn.gamma.values()) g = rng.uniform(0.5, 1.5);
        for (auto& b : p.bn.beta.values()) b = 0.2 * rng.normal();
        Array x({2, 4, cfg.c1});
        for (auto& e : x.values()) e = rng.normal();
        Array r(x.shape());
        for (auto& e : r.values()) e = rng.normal();

        const auto out = forward_block(x, p, cfg, {BnMode::Train, false});
        const auto g = block_backward(r, p, cfg, out.cache);

        INFO("seed ", seed);
        auto check_tensor = [&](Array& target, const Array& analytic) {
            auto f = [&](const Array& v) {
                const Array saved = target;
                target = v;
                const double l = block_loss(x, p, cfg, r);
                target = saved;
                return l;
            };
            CHECK(norm_rel(analytic, finite_diff_grad_scaled(f, target, 1e-5)) < 1e-5);
        };
        check_tensor(x, g.dx);
        check_tensor(p.w_phi, g.dw_phi);
        check_tensor(p.w_psi, g.dw_psi);
        check_tensor(p.w_g, g.dw_g);
        for (std::size_t k = 0; k < p.w_out.size(); ++k) check_tensor(p.w_out[k], g.dw_out[k]);
        check_tensor(p.bn.gamma, g.dgamma);
        check_tensor(p.bn.beta, g.dbeta);
    }
}

TEST_CASE("parameter and MAC counts") {
    const auto snl = count_params(config_for(Variant::SNL, 1024, 512));
    CHECK(snl.weights == 2'621'440);
    CHECK(snl.batch_norm == 2048);
    CHECK(count_params(config_for(Variant::NL, 1024, 512)).weights == 2'097'152);
    const auto tiny = count_params(config_for(Variant::SNL, 2, 1));
    CHECK(tiny.weights == 10);
    CHECK(tiny.batch_norm == 4);
    CHECK_THROWS_AS(count_params(config_for(Variant::SNL, 4, 0)), ConfigError);

    // MACs by hand for SNL: three embeddings, logits, one aggregation, two output maps.
    const std::uint64_t n = 196, c1 = 1024, cs = 512;
    const std::uint64_t snl_macs = 3 * n * c1 * cs + n * n * cs + n * n * cs + 2 * n * cs * c1;
    CHECK(count_flops(config_for(Variant::SNL, 1024, 512), 14, 14) == snl_macs);
    const double snl_g = static_cast<double>(snl_macs) / 1e9;
    CHECK(std::abs(snl_g - 0.51) / 0.51 < 0.2);
    const double nl_g = static_cast<double>(count_flops(config_for(Variant::NL, 1024, 512), 14, 14)) / 1e9;
    CHECK(std::abs(nl_g - 0.41) / 0.41 < 0.2);
}

TEST_CASE("non-SNL variants have a fixed order") {
    auto cfg = config_for(Variant::NL, 4, 2);
    cfg.order = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(config_for(Variant::CC, 4, 2).validate(), ConfigError);
    CHECK_THROWS_AS(config_for(Variant::SNL, 2, 4).validate(), ConfigError);
}

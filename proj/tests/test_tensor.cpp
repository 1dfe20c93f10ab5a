#include "oracles.hpp"
#include "snl/adjoint.hpp"
#include "snl/linalg.hpp"
#include "snl/tensor.hpp"

#include <doctest.h>

#include <cmath>

using namespace snl;

TEST_CASE("construction checks extents against data") {
    CHECK_NOTHROW(Array({2, 3}, std::vector<double>(6, 1.0)));
    CHECK_THROWS_AS(Array({2, 3}, std::vector<double>(5, 1.0)), DimensionError);
    Array a({2, 2}, 7.0);
    CHECK(a.size() == 4);
    CHECK(a(1, 1) == 7.0);
}

TEST_CASE("matmul small cases") {
    const Array i2({2, 2}, std::vector<double>{1, 0, 0, 1});
    const Array m({2, 2}, std::vector<double>{1, 2, 3, 4});
    const Array z({2, 2}, 0.0);
    const Array n({2, 2}, std::vector<double>{5, 6, 7, 8});

    CHECK(max_abs_diff(matmul(i2, m), m) == 0.0);
    CHECK(max_abs(matmul(z, m)) == 0.0);
    const auto p = matmul(m, n);
    CHECK(p(0, 0) == 19);
    CHECK(p(0, 1) == 22);
    CHECK(p(1, 0) == 43);
    CHECK(p(1, 1) == 50);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    const Array a({2, 3}), b({2, 3});
    try {
        (void)matmul(a, b);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string what = e.what();
        CHECK(what.find("2x3") != std::string::npos);
    }
}

TEST_CASE("matmul variants agree with the loop oracle") {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
        const auto a = oracle::random_matrix(rng, m, k);
        const auto b = oracle::random_matrix(rng, k, n);
        const auto ref = oracle::matmul(a, b);
        CHECK(oracle::rel_err(matmul(a, b), ref) < 1e-13);
        CHECK(oracle::rel_err(matmul_tn(oracle::transpose(a), b), ref) < 1e-13);
        CHECK(oracle::rel_err(matmul_nt(a, oracle::transpose(b)), ref) < 1e-13);
        CHECK(max_abs_diff(transpose(a), oracle::transpose(a)) == 0.0);
    }
}

TEST_CASE("matmul associativity on random chains") {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        const std::size_t d0 = 1 + rng.below(8), d1 = 1 + rng.below(8), d2 = 1 + rng.below(8),
                          d3 = 1 + rng.below(8);
        const auto a = oracle::random_matrix(rng, d0, d1);
        const auto b = oracle::random_matrix(rng, d1, d2);
        const auto c = oracle::random_matrix(rng, d2, d3);
        const auto left = matmul(matmul(a, b), c);
        const auto right = matmul(a, matmul(b, c));
        CHECK(scaled_max_error(left, right) < 1e-10);
    }
}

TEST_CASE("softmax rows examples") {
    const auto a = softmax_rows(Array({1, 2}, std::vector<double>{0, 0}));
    CHECK(a(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

    for (double c : {-50.0, 0.0, 3.0, 700.0}) {
        const auto b = softmax_rows(Array({1, 3}, c));
        for (int j = 0; j < 3; ++j) CHECK(b(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-15));
    }

    const auto d = softmax_rows(Array({1, 2}, std::vector<double>{0, std::log(3.0)}));
    CHECK(d(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(d(0, 1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax rows: unit sums, shift invariance, oracle agreement") {
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(9);
        const auto m = oracle::random_matrix(rng, r, c, 3.0);
        const auto s = softmax_rows(m);
        for (std::size_t i = 0; i < r; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < c; ++j) {
                CHECK(s(i, j) >= 0.0);
                sum += s(i, j);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
        CHECK(max_abs_diff(s, oracle::softmax_rows(m)) < 1e-14);

        // Shifting a row by the value its own maximum already removes leaves
        // the stabilised input, and so the output, unchanged bit for bit.
        Array shifted = m;
        for (std::size_t i = 0; i < r; ++i) {
            double mx = m(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, m(i, j));
            for (std::size_t j = 0; j < c; ++j) shifted(i, j) = m(i, j) - mx;
        }
        CHECK(max_abs_diff(softmax_rows(shifted), s) == 0.0);
    }
}

TEST_CASE("sym_eig small cases") {
    const auto e1 = sym_eig(Array({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1}));
    for (auto v : e1.eigenvalues) CHECK(v == doctest::Approx(1.0));

    const auto e2 = sym_eig(Array({2, 2}, std::vector<double>{2, 0, 0, 5}));
    CHECK(e2.eigenvalues[0] == doctest::Approx(2.0));
    CHECK(e2.eigenvalues[1] == doctest::Approx(5.0));
    CHECK(std::abs(e2.eigenvectors(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(e2.eigenvectors(1, 1)) == doctest::Approx(1.0));

    const auto e3 = sym_eig(Array({2, 2}, std::vector<double>{0, 1, 1, 0}));
    CHECK(e3.eigenvalues[0] == doctest::Approx(-1.0));
    CHECK(e3.eigenvalues[1] == doctest::Approx(1.0));
}

TEST_CASE("sym_eig rejects asymmetric input and reports the asymmetry") {
    try {
        (void)sym_eig(Array({2, 2}, std::vector<double>{0, 1, 1.5, 0}));
        FAIL("expected a symmetry error");
    } catch (const SymmetryError& e) {
        CHECK(e.max_asymmetry() == doctest::Approx(0.5));
    }
}

TEST_CASE("sym_eig reconstruction, orthonormality, ordering vs Eigen") {
    Rng rng(14);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.below(16);
        auto s = oracle::random_matrix(rng, n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) s(j, i) = s(i, j);
        const auto d = sym_eig(s);
        CHECK(frobenius_norm(sub(reconstruct(d), s)) < 1e-10);
        const auto utu = matmul_tn(d.eigenvectors, d.eigenvectors);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(utu(i, j) - (i == j ? 1.0 : 0.0)) < 1e-10);
        const auto ref = oracle::eigenvalues(s);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(d.eigenvalues[i] - ref[i]) < 1e-10);
            if (i > 0) CHECK(d.eigenvalues[i - 1] <= d.eigenvalues[i]);
        }
    }
}

TEST_CASE("finite differences") {
    const Array x({2}, std::vector<double>{1, 2});
    const auto g = finite_diff_grad(
        [](const Array& v) {
            double s = 0;
            for (auto e : v.values()) s += e * e;
            return s;
        },
        x, 1e-5);
    CHECK(std::abs(g[0] - 2) < 1e-8);
    CHECK(std::abs(g[1] - 4) < 1e-8);

    const auto c = finite_diff_grad([](const Array&) { return 3.5; }, x, 1e-5);
    CHECK(max_abs(c) == 0.0);
}

namespace {

Array random_input_for(OpKind op, std::size_t slot, Rng& rng, std::size_t m, std::size_t k, std::size_t n) {
    switch (op) {
    case OpKind::Matmul: return slot == 0 ? oracle::random_matrix(rng, m, k) : oracle::random_matrix(rng, k, n);
    case OpKind::MatmulNT: return slot == 0 ? oracle::random_matrix(rng, m, k) : oracle::random_matrix(rng, n, k);
    default: return oracle::random_matrix(rng, m, k);
    }
}

} // namespace

TEST_CASE("every primitive's adjoint matches central differences") {
    const OpKind ops[] = {OpKind::Matmul,      OpKind::MatmulNT,    OpKind::Add,      OpKind::Hadamard,
                          OpKind::Exp,         OpKind::SoftmaxRows, OpKind::SoftmaxCols, OpKind::Transpose};
    for (auto op : ops) {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(op)));
            const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
            std::vector<Array> inputs;
            for (std::size_t s = 0; s < op_arity(op); ++s) inputs.push_back(random_input_for(op, s, rng, m, k, n));

            AdjointRecord rec;
            const auto y = apply_op(op, inputs, &rec);
            CHECK(max_abs_diff(replay(rec), y) == 0.0);
            const auto r = oracle::random_matrix(rng, y.rows(), y.cols());
            const auto grads = backward(rec, r);
            REQUIRE(grads.size() == inputs.size());

            for (std::size_t s = 0; s < inputs.size(); ++s) {
                auto f = [&](const Array& v) {
                    auto in = inputs;
                    in[s] = v;
                    const auto out = apply_op(op, in);
                    double acc = 0;
                    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * r[i];
                    return acc;
                };
                const auto num = finite_diff_grad_scaled(f, inputs[s], 1e-4);
                INFO(std::string(op_name(op)), " seed ", seed, " input ", s);
                CHECK(gradient_relative_error(grads[s], num) < 1e-5);
            }
        }
    }
}

TEST_CASE("f32 and f64 paths agree on a product") {
    Rng rng(15);
    const auto a = oracle::random_matrix(rng, 5, 7);
    const auto b = oracle::random_matrix(rng, 7, 3);
    const auto p32 = matmul(a.cast<float>(), b.cast<float>()).cast<double>();
    CHECK(scaled_max_error(p32, matmul(a, b)) < 1e-5);
}

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/autodiff.hpp"
#include "loraforge/gradcheck.hpp"
#include "loraforge/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace loraforge;

namespace {

MatrixD from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    MatrixD m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

}  // namespace

TEST_CASE("matmul identity and 1x2 by 2x1") {
    Tape<double> tape;
    auto c = matmul(tape.constant(from_rows({{1, 0}, {0, 1}})), tape.constant(from_rows({{5, 6}, {7, 8}})));
    CHECK(c.value() == from_rows({{5, 6}, {7, 8}}));
    auto d = matmul(tape.constant(from_rows({{1, 2}})), tape.constant(from_rows({{3}, {4}})));
    CHECK(d.value()(0, 0) == 11.0);
}

TEST_CASE("matmul matches a triple loop") {
    RngStream rng(7);
    const MatrixD a = gaussian_matrix<double>(4, 3, rng, 0, 1);
    const MatrixD b = gaussian_matrix<double>(3, 5, rng, 0, 1);
    Tape<double> tape;
    const MatrixD c = matmul(tape.constant(a), tape.constant(b)).value();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += a(i, k) * b(k, j);
            CHECK(std::abs(c(i, j) - acc) <= 1e-12);
        }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape<double> tape;
    try {
        matmul(tape.constant(MatrixD::Zero(2, 3)), tape.constant(MatrixD::Zero(2, 3)));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("backward of sum and sum of squares") {
    Tape<double> tape;
    auto x = tape.input(from_rows({{1, 2, 3}}));
    tape.backward(sum(x));
    CHECK(tape.grad_of(x) == from_rows({{1, 1, 1}}));

    Tape<double> t2;
    auto y = t2.input(from_rows({{1, 2, 3}}));
    t2.backward(sum(mul(y, y)));
    CHECK(t2.grad_of(y) == from_rows({{2, 4, 6}}));
}

TEST_CASE("backward rejects a non-scalar root") {
    Tape<double> tape;
    auto x = tape.input(MatrixD::Ones(2, 2));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("finite differences on x^2 at 1") {
    Parameter<double> x("x", MatrixD::Constant(1, 1, 1.0), true);
    const double err = finite_diff_check([&](Tape<double>& t) {
        auto v = t.param(x);
        return sum(mul(v, v));
    }, {&x}, 1e-5);
    CHECK(err <= 1e-9);
}

TEST_CASE("finite differences on a constant function") {
    Parameter<double> x("x", MatrixD::Constant(2, 2, 0.3), true);
    const double err = finite_diff_check([&](Tape<double>& t) {
        t.param(x);
        return t.constant(MatrixD::Constant(1, 1, 4.0));
    }, {&x}, 1e-5);
    CHECK(err == 0.0);
}

TEST_CASE("finite differences over random graphs of the closed op set") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        CAPTURE(seed);
        RngStream rng(seed);
        const int n = 2 + static_cast<int>(rng.below(3));
        const int d = 2 + static_cast<int>(rng.below(4));
        Parameter<double> table("table", gaussian_matrix<double>(6, d, rng, 0, 1), true);
        Parameter<double> w("w", gaussian_matrix<double>(d, d, rng, 0, 0.7), true);
        Parameter<double> gain("gain", gaussian_matrix<double>(1, d, rng, 1, 0.1), true);
        Parameter<double> bias("bias", gaussian_matrix<double>(1, d, rng, 0, 0.1), true);
        Parameter<double> head("head", gaussian_matrix<double>(d, 6, rng, 0, 0.7), true);
        std::vector<int> ids, targets;
        for (int i = 0; i < n; ++i) {
            ids.push_back(static_cast<int>(rng.below(6)));
            targets.push_back(static_cast<int>(rng.below(6)));
        }
        std::vector<bool> mask(static_cast<std::size_t>(n), true);
        mask[0] = false;
        const bool use_relu = seed % 2 == 0;
        const double err = finite_diff_check([&](Tape<double>& t) {
            auto x = embedding(t.param(table), std::span<const int>(ids));
            auto h = matmul(x, t.param(w));
            h = use_relu ? relu(h) : gelu(h);
            auto att = softmax_rows(matmul_nt(h, x), true);
            auto y = add(matmul(att, x), mul(h, x));
            y = layer_norm(y, t.param(gain), t.param(bias));
            y = add_row(scale(y, 0.5), t.param(bias));
            auto logits = matmul(y, t.param(head));
            return cross_entropy(logits, std::span<const int>(targets), mask);
        }, {&table, &w, &gain, &bias, &head}, 1e-5);
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("frozen parameters receive no gradient") {
    Parameter<double> frozen("f", MatrixD::Ones(2, 2), false);
    Parameter<double> live("l", MatrixD::Ones(2, 2), true);
    Tape<double> tape;
    tape.backward(sum(mul(tape.param(frozen), tape.param(live))));
    CHECK(frozen.grad.isZero());
    CHECK(live.grad == MatrixD::Ones(2, 2));
}

TEST_CASE("gaussian with zero std returns the mean") {
    RngStream rng(42);
    for (int i = 0; i < 5; ++i) CHECK(rng.gaussian(3.25, 0.0) == 3.25);
}

TEST_CASE("identical seeds give identical streams") {
    RngStream a(42), b(42);
    CHECK(a.uniform() == b.uniform());
    CHECK(a.uniform() == b.uniform());
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
}

TEST_CASE("splitmix64 reference values") {
    std::uint64_t sm = 0;
    CHECK(splitmix64(sm) == 0xe220a8397b1dcdafULL);
    CHECK(splitmix64(sm) == 0x6e789e6aa1b965f4ULL);
}

TEST_CASE("xoshiro stream matches the python oracle for seed 42") {
    RngStream rng(42);
    CHECK(rng.next() == 0xd0764d4f4476689fULL);
    CHECK(rng.next() == 0x519e4174576f3791ULL);
    CHECK(rng.next() == 0xfbe07cfb0c24ed8cULL);
    RngStream u(42);
    CHECK(u.uniform() == 0.8143051451229099);
    CHECK(u.uniform() == 0.3188210400616611);
}

TEST_CASE("sample mean of 1e5 standard normals") {
    RngStream rng(42);
    double acc = 0.0;
    for (int i = 0; i < 100000; ++i) acc += rng.gaussian(0.0, 1.0);
    CHECK(std::abs(acc / 100000.0) <= 0.02);
}

TEST_CASE("matrix fill is row-major") {
    RngStream a(9), b(9);
    const MatrixD m = gaussian_matrix<double>(2, 3, a, 0, 1);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(m(i, j) == b.gaussian(0, 1));
}

TEST_CASE("below stays in range") {
    RngStream rng(3);
    for (int i = 0; i < 1000; ++i) CHECK(rng.below(7) < 7u);
}

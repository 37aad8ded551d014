// SPDX-License-Identifier: Apache-2.0
#include "loraforge/metrics.hpp"
#include "loraforge/tasks.hpp"

#include <doctest.h>

using namespace loraforge;
using P = Prediction;

TEST_CASE("parse_label reads the first token") {
    const std::vector<int> t{vocab::TRUE_, vocab::EOS}, e{vocab::entity(3), vocab::EOS}, none{};
    CHECK(parse_label(t) == P::TRUE_);
    CHECK(parse_label(e) == P::INVALID);
    CHECK(parse_label(none) == P::INVALID);
    const std::vector<int> f{vocab::FALSE_};
    CHECK(parse_label(f) == P::FALSE_);
}

TEST_CASE("macro_prf worked example") {
    const std::vector<P> preds{P::TRUE_, P::TRUE_, P::FALSE_, P::FALSE_};
    const std::vector<P> golds{P::TRUE_, P::FALSE_, P::TRUE_, P::FALSE_};
    const auto r = macro_prf(preds, golds);
    CHECK(r.macro_f1 == doctest::Approx(0.5));
    CHECK(r.true_class.precision == doctest::Approx(0.5));
    CHECK(r.confusion[0][0] == 1);
    CHECK(r.confusion[1][0] == 1);
}

TEST_CASE("macro_prf perfect, all invalid, and length mismatch") {
    const std::vector<P> golds{P::TRUE_, P::FALSE_, P::FALSE_};
    CHECK(macro_prf(golds, golds).macro_f1 == 1.0);
    const std::vector<P> bad(3, P::INVALID);
    const auto r = macro_prf(bad, golds);
    CHECK(r.macro_f1 == 0.0);
    CHECK(r.macro_precision == 0.0);
    CHECK(r.invalid_output_count == 3);
    const std::vector<P> shorter{P::TRUE_};
    CHECK_THROWS_AS(macro_prf(shorter, golds), ContractError);
}

TEST_CASE("invalid predictions count against recall only") {
    const std::vector<P> preds{P::TRUE_, P::INVALID, P::FALSE_, P::FALSE_};
    const std::vector<P> golds{P::TRUE_, P::TRUE_, P::FALSE_, P::FALSE_};
    const auto r = macro_prf(preds, golds);
    CHECK(r.true_class.precision == 1.0);
    CHECK(r.true_class.recall == 0.5);
    CHECK(r.false_class.precision == 1.0);
    CHECK(r.false_class.recall == 1.0);
    CHECK(r.confusion[0][2] == 1);
}

TEST_CASE("macro_prf is symmetric under relabeling") {
    const std::vector<P> preds{P::TRUE_, P::TRUE_, P::FALSE_, P::INVALID, P::TRUE_};
    const std::vector<P> golds{P::TRUE_, P::FALSE_, P::FALSE_, P::FALSE_, P::TRUE_};
    auto flip = [](std::vector<P> v) {
        for (auto& p : v)
            if (p != P::INVALID) p = p == P::TRUE_ ? P::FALSE_ : P::TRUE_;
        return v;
    };
    const auto a = macro_prf(preds, golds);
    const auto b = macro_prf(flip(preds), flip(golds));
    CHECK(a.macro_f1 == doctest::Approx(b.macro_f1));
    CHECK(a.macro_precision == doctest::Approx(b.macro_precision));
    CHECK(a.true_class.f1 == doctest::Approx(b.false_class.f1));
}

TEST_CASE("token accuracy and exact match") {
    const std::vector<int> ab{20, 21}, ac{20, 22}, empty{}, three{1, 2, 3};
    CHECK(token_accuracy(ab, ab) == 1.0);
    CHECK(exact_match(ab, ab));
    CHECK(token_accuracy(ab, ac) == 0.5);
    CHECK(!exact_match(ab, ac));
    CHECK(token_accuracy(empty, three) == 0.0);
    CHECK(!exact_match(empty, three));
    const std::vector<int> longer{20, 21, 5};
    CHECK(token_accuracy(longer, ab) == 1.0);
    CHECK(!exact_match(longer, ab));
}

TEST_CASE("paired permutation test by enumeration") {
    const std::vector<double> a3{1, 1, 1}, z3{0, 0, 0};
    CHECK(paired_permutation_test(a3, z3, 1000, 1) == doctest::Approx(0.25));
    CHECK(paired_permutation_test(a3, a3, 1000, 1) == 1.0);
    const std::vector<double> a2{1, 0}, b2{0, 1};
    CHECK(paired_permutation_test(a2, b2, 1000, 1) == 1.0);
    const std::vector<double> one{1};
    CHECK_THROWS_AS(paired_permutation_test(one, one, 10, 1), ContractError);
}

TEST_CASE("monte carlo branch approaches the exact value") {
    const std::vector<double> a{0.61, 0.55, 0.72, 0.58, 0.66, 0.49, 0.7};
    const std::vector<double> b{0.52, 0.57, 0.6, 0.5, 0.61, 0.5, 0.62};
    const double exact = paired_permutation_test(a, b, 0, 1, PermutationMode::exact);
    const double mc = paired_permutation_test(a, b, 100000, 42, PermutationMode::monte_carlo);
    CHECK(exact > 0.0);
    CHECK(exact <= 1.0);
    CHECK(std::abs(exact - mc) <= 0.01);
}

TEST_CASE("mean and sample std") {
    const std::vector<double> xs{1, 2, 3, 4};
    CHECK(mean(xs) == 2.5);
    CHECK(stddev(xs) == doctest::Approx(1.2909944487));
    const std::vector<double> one{3};
    CHECK(stddev(one) == 0.0);
}

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/metrics.hpp"

#include "loraforge/errors.hpp"
#include "loraforge/rng.hpp"
#include "loraforge/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace loraforge {

Prediction parse_label(std::span<const int> generated) {
    if (generated.empty()) return Prediction::INVALID;
    if (generated.front() == vocab::TRUE_) return Prediction::TRUE_;
    if (generated.front() == vocab::FALSE_) return Prediction::FALSE_;
    return Prediction::INVALID;
}

namespace {

ClassScores scores(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    ClassScores s;
    s.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    s.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

}  // namespace

ClassReport macro_prf(std::span<const Prediction> preds, std::span<const Prediction> golds) {
    if (preds.size() != golds.size())
        throw ContractError("macro_prf: " + std::to_string(preds.size()) + " predictions vs " +
                            std::to_string(golds.size()) + " golds");
    if (preds.empty()) throw ContractError("macro_prf: empty input");
    ClassReport r;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (golds[i] == Prediction::INVALID) throw ContractError("macro_prf: gold label cannot be INVALID");
        r.confusion[static_cast<std::size_t>(golds[i])][static_cast<std::size_t>(preds[i])] += 1;
        if (preds[i] == Prediction::INVALID) ++r.invalid_output_count;
    }
    const auto& c = r.confusion;
    constexpr std::size_t T = 0, F = 1, I = 2;
    r.true_class = scores(c[T][T], c[F][T], c[T][F] + c[T][I]);
    r.false_class = scores(c[F][F], c[T][F], c[F][T] + c[F][I]);
    r.macro_precision = (r.true_class.precision + r.false_class.precision) / 2.0;
    r.macro_recall = (r.true_class.recall + r.false_class.recall) / 2.0;
    r.macro_f1 = (r.true_class.f1 + r.false_class.f1) / 2.0;
    return r;
}

double token_accuracy(std::span<const int> pred, std::span<const int> gold) {
    if (gold.empty()) throw ContractError("token_accuracy: gold sequence is empty");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i)
        if (i < pred.size() && pred[i] == gold[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

bool exact_match(std::span<const int> pred, std::span<const int> gold) {
    return pred.size() == gold.size() && std::equal(pred.begin(), pred.end(), gold.begin());
}

double paired_permutation_test(std::span<const double> a, std::span<const double> b, int resamples,
                               std::uint64_t seed, PermutationMode mode) {
    if (a.size() != b.size()) throw ContractError("paired_permutation_test: unequal lengths");
    if (a.size() < 2) throw ContractError("paired_permutation_test: need at least two pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) return 1.0;

    const double observed = std::abs(std::accumulate(d.begin(), d.end(), 0.0));
    // Sums instead of means; tolerance absorbs summation-order rounding.
    const double tol = 1e-12 * (1.0 + observed);
    auto flipped_sum = [&](auto&& sign_of) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += sign_of(i) ? -d[i] : d[i];
        return std::abs(s);
    };

    const bool exact = mode == PermutationMode::exact || (mode == PermutationMode::automatic && n <= 20);
    if (exact) {
        if (n > 30) throw ConfigError("paired_permutation_test: exact enumeration limited to 30 pairs");
        const std::uint64_t patterns = 1ULL << n;
        std::uint64_t hits = 0;
        for (std::uint64_t mask = 0; mask < patterns; ++mask)
            if (flipped_sum([&](std::size_t i) { return (mask >> i) & 1ULL; }) >= observed - tol) ++hits;
        return static_cast<double>(hits) / static_cast<double>(patterns);
    }
    if (resamples < 1) throw ConfigError("paired_permutation_test: resamples must be positive");
    RngStream rng(seed);
    std::vector<bool> signs(n);
    std::int64_t hits = 0;
    for (int r = 0; r < resamples; ++r) {
        for (std::size_t i = 0; i < n; ++i) signs[i] = rng.uniform() < 0.5;
        if (flipped_sum([&](std::size_t i) { return signs[i]; }) >= observed - tol) ++hits;
    }
    return static_cast<double>(hits + 1) / static_cast<double>(resamples + 1);
}

double mean(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double stddev(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace loraforge

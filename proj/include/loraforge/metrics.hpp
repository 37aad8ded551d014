// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace loraforge {

enum class Prediction { TRUE_, FALSE_, INVALID };

// The first generated token decides: TRUE or FALSE, anything else INVALID.
Prediction parse_label(std::span<const int> generated);

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ClassReport {
    ClassScores true_class;
    ClassScores false_class;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    // confusion[gold][pred], gold in {TRUE, FALSE}, pred in {TRUE, FALSE, INVALID}
    std::array<std::array<std::int64_t, 3>, 2> confusion{};
    std::int64_t invalid_output_count = 0;
};

// One-vs-rest precision/recall/F1 for TRUE and FALSE with unweighted macro
// means. Zero denominators give 0. An INVALID prediction is a false negative
// for its gold class and a false positive for neither. Golds must not be
// INVALID.
ClassReport macro_prf(std::span<const Prediction> preds, std::span<const Prediction> golds);

// Position-wise match rate over the gold length; pred is truncated or
// treated as padded.
double token_accuracy(std::span<const int> pred, std::span<const int> gold);
bool exact_match(std::span<const int> pred, std::span<const int> gold);

enum class PermutationMode { automatic, exact, monte_carlo };

// Two-sided paired sign-flip test on a - b. automatic enumerates all sign
// patterns for up to 20 pairs and samples `resamples` patterns otherwise
// (p = (hits + 1) / (resamples + 1)). All-zero differences give 1.
double paired_permutation_test(std::span<const double> a, std::span<const double> b, int resamples,
                               std::uint64_t seed, PermutationMode mode = PermutationMode::automatic);

double mean(std::span<const double> xs);
// Sample standard deviation (n - 1); 0 for fewer than two values.
double stddev(std::span<const double> xs);

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/metrics.hpp"
#include "loraforge/model.hpp"
#include "loraforge/tasks.hpp"

#include <vector>

namespace loraforge {

// How a factcheck prediction is read from the model.
//   free:        greedy generation, then parse_label.
//   constrained: compare the TRUE and FALSE logits at the first output
//                position (ties to TRUE, the lower id). Never INVALID.
enum class LabelDecode { free, constrained };

std::string to_string(LabelDecode d);
LabelDecode label_decode_from_string(const std::string& s);

struct GenerationScores {
    double exact_match = 0.0;
    double token_accuracy = 0.0;
    std::size_t count = 0;
};

template <typename S>
Prediction predict_label(const Model<S>& model, const TaskInstance& inst, LabelDecode decode,
                         const SiteHook<S>& hook = {});

template <typename S>
ClassReport evaluate_factcheck(const Model<S>& model, const std::vector<TaskInstance>& data, LabelDecode decode,
                               const SiteHook<S>& hook = {});

// Greedy generation with max_new = target length + 2.
template <typename S>
GenerationScores evaluate_generation(const Model<S>& model, const std::vector<TaskInstance>& data,
                                     const SiteHook<S>& hook = {});

template <typename S>
double mean_loss(const Model<S>& model, const std::vector<TaskInstance>& data, const SiteHook<S>& hook = {});

Prediction gold_prediction(const TaskInstance& inst);

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/autodiff.hpp"

#include <functional>

namespace loraforge {

using LossFn = std::function<Var<double>(Tape<double>&)>;

// Compares the tape gradient of loss_fn with central differences over every
// element of every trainable parameter in params. Returns
//   max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
// Parameter grads are zeroed before and left holding the analytic gradient.
// Throws NumericError on a non-finite loss or gradient.
double finite_diff_check(const LossFn& loss_fn, const ParamRefs<double>& params, double eps = 1e-5);

}  // namespace loraforge

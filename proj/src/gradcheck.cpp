// SPDX-License-Identifier: Apache-2.0
#include "loraforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace loraforge {

namespace {

double evaluate(const LossFn& loss_fn) {
    Tape<double> tape(false);
    const double v = loss_fn(tape).value()(0, 0);
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
    return v;
}

}  // namespace

double finite_diff_check(const LossFn& loss_fn, const ParamRefs<double>& params, double eps) {
    if (!(eps > 0)) throw ConfigError("finite_diff_check: eps must be positive");
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape(true);
        auto loss = loss_fn(tape);
        if (!std::isfinite(loss.value()(0, 0))) throw NumericError("finite_diff_check: loss is not finite");
        tape.backward(loss);
    }
    double worst = 0.0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        if (!p->grad.allFinite()) throw NumericError("finite_diff_check: non-finite gradient in " + p->name);
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double saved = x;
            x = saved + eps;
            const double up = evaluate(loss_fn);
            x = saved - eps;
            const double down = evaluate(loss_fn);
            x = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = p->grad.data()[i];
            worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

}  // namespace loraforge

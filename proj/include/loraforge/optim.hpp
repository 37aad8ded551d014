// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/adapters.hpp"
#include "loraforge/evaluate.hpp"
#include "loraforge/tasks.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace loraforge {

enum class SelectionMetric { macro_f1, loss, token_acc, exact_match };

std::string to_string(SelectionMetric m);
SelectionMetric selection_metric_from_string(const std::string& s);
bool higher_is_better(SelectionMetric m);

struct TrainConfig {
    double lr = 1e-3;
    double warmup_ratio = 0.1;
    double weight_decay = 0.01;
    int epochs = 20;
    int patience = 3;
    int grad_accum = 1;
    std::uint64_t seed = 42;
    SelectionMetric selection_metric = SelectionMetric::loss;
    // Caps the optimizer steps (0 = epochs * steps per epoch). The schedule
    // spans the capped total.
    int max_steps = 0;
    // Evaluate the dev metric on at most this many dev instances (0 = all).
    int dev_limit = 0;
    LabelDecode decode = LabelDecode::constrained;

    void validate() const;
};

// One line of the training log stream.
struct LogRecord {
    std::string phase;
    int epoch = 0;  // epoch, or generation for the ES phase
    std::int64_t step = 0;
    double loss = 0.0;
    double dev_metric = 0.0;
    double best_dev_metric = 0.0;
    double lr = 0.0;  // learning rate, or sigma for the ES phase
    std::int64_t elapsed_ms = 0;

    std::string to_json() const;
};

using LogSink = std::function<void(const LogRecord&)>;

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
// at total_steps.
double scheduled_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps);

// Adam moments with decoupled weight decay. Frozen parameters are skipped.
template <typename S>
class AdamW {
public:
    explicit AdamW(ParamRefs<S> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(double lr, double weight_decay);
    void zero_grad();
    std::int64_t steps() const { return t_; }

private:
    ParamRefs<S> params_;
    std::vector<Matrix<S>> m_, v_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

// Patience counts consecutive epochs that fail to strictly improve on the
// best value seen so far.
class EarlyStopping {
public:
    EarlyStopping(int patience, bool higher_is_better);
    // Returns true when value is a new best.
    bool update(double value);
    bool should_stop() const { return bad_epochs_ >= patience_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    bool higher_;
    double best_;
    int best_epoch_ = 0;
    int epoch_ = 0;
    int bad_epochs_ = 0;
};

struct TrainResult {
    std::vector<LogRecord> log;
    int epochs_run = 0;
    int best_epoch = 0;
    double best_dev_metric = 0.0;
    std::int64_t steps = 0;
};

// Fits the adapter's trainable parameters on train_data with the base model
// frozen, selecting the epoch with the best dev metric. On return the
// adapter holds the best epoch's weights. Throws ContractError when the
// adapter has no trainable parameter or the data is empty.
template <typename S>
TrainResult train_adapter(const Model<S>& model, ComposedAdapter<S>& adapter, const std::vector<TaskInstance>& train,
                          const std::vector<TaskInstance>& dev, const TrainConfig& cfg, const LogSink& sink = {});

// Same loop for the base model's own parameters (every parameter trainable
// for the duration of the call, frozen again afterwards).
template <typename S>
TrainResult train_model(Model<S>& model, const std::vector<TaskInstance>& train, const std::vector<TaskInstance>& dev,
                        const TrainConfig& cfg, const LogSink& sink = {});

struct EsConfig {
    int population = 16;
    int elites = 4;
    double sigma0 = 0.2;
    double sigma_decay = 0.98;
    int max_evals = 400;
    double init_coeff = 0.0;  // 0 means 1/n for hub search
    double clamp_lo = -1.5;
    double clamp_hi = 1.5;
    double l1_penalty = 0.0;
    std::uint64_t seed = 42;
    // Hub search only: the objective averages the loss over this many
    // training instances drawn once with `seed` (0 = all).
    int objective_sample = 64;

    void validate() const;
};

struct EsResult {
    Eigen::VectorXd best;
    double best_value = 0.0;  // includes the L1 penalty
    int evals = 0;
    int generations = 0;
    std::vector<double> best_history;  // best-so-far after each generation
};

using Objective = std::function<double(const Eigen::VectorXd&)>;

// (mu, lambda) evolution strategy. Each generation samples `population`
// points around the mean of the previous generation's elites with spread
// sigma, clamps them, keeps the `elites` best (ties by offspring index) and
// decays sigma. Offspring are evaluated in parallel; aggregation is
// deterministic. Throws NumericError on a non-finite objective.
EsResult es_minimize(const Objective& objective, int dim, const EsConfig& cfg,
                     std::optional<Eigen::VectorXd> start = std::nullopt, const LogSink& sink = {});

// Gradient-free search over the hub coefficients minimizing the mean
// sequence loss on the training data. Writes the best coefficients into
// hub.coeffs; constituents are untouched.
template <typename S>
EsResult train_hub(const Model<S>& model, HubAdapter<S>& hub, const std::vector<TaskInstance>& train,
                   const EsConfig& cfg, const LogSink& sink = {});

// Runs fn(i) for i in [0, n) on up to LORAFORGE_THREADS workers (default 1).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
int worker_threads();

}  // namespace loraforge

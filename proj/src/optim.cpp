// SPDX-License-Identifier: Apache-2.0
#include "loraforge/optim.hpp"

#include "loraforge/errors.hpp"
#include "loraforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <numeric>
#include <mutex>
#include <thread>
#include <utility>

namespace loraforge {

std::string to_string(SelectionMetric m) {
    switch (m) {
        case SelectionMetric::macro_f1: return "macro_f1";
        case SelectionMetric::loss: return "loss";
        case SelectionMetric::token_acc: return "token_acc";
        case SelectionMetric::exact_match: return "exact_match";
    }
    return "?";
}

SelectionMetric selection_metric_from_string(const std::string& s) {
    for (auto m : {SelectionMetric::macro_f1, SelectionMetric::loss, SelectionMetric::token_acc,
                   SelectionMetric::exact_match})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown selection metric '" + s + "'");
}

bool higher_is_better(SelectionMetric m) { return m != SelectionMetric::loss; }

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("train config: lr must be positive");
    if (!(warmup_ratio >= 0 && warmup_ratio < 1)) throw ConfigError("train config: warmup_ratio must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train config: weight_decay must be >= 0");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (patience < 1) throw ConfigError("train config: patience must be >= 1");
    if (grad_accum < 1) throw ConfigError("train config: grad_accum must be >= 1");
    if (max_steps < 0 || dev_limit < 0) throw ConfigError("train config: max_steps and dev_limit must be >= 0");
}

std::string LogRecord::to_json() const {
    nlohmann::ordered_json j;
    j["phase"] = phase;
    j["epoch"] = epoch;
    j["step"] = step;
    j["loss"] = loss;
    j["dev_metric"] = dev_metric;
    j["best_dev_metric"] = best_dev_metric;
    j["lr"] = lr;
    j["elapsed_ms"] = elapsed_ms;
    return j.dump();
}

double scheduled_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const auto decay_span = std::max<std::int64_t>(1, total_steps - warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_span));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- AdamW -----------------------------------------------------------------

template <typename S>
AdamW<S>::AdamW(ParamRefs<S> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
        m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
}

template <typename S>
void AdamW<S>::zero_grad() {
    for (auto* p : params_)
        if (p->trainable) p->zero_grad();
}

template <typename S>
void AdamW<S>::step(double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S step_size = static_cast<S>(lr / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(eps_);
    const S decay = static_cast<S>(lr * weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto* p = params_[i];
        if (!p->trainable) continue;
        m_[i] = b1 * m_[i] + (S(1) - b1) * p->grad;
        v_[i] = b2 * v_[i] + (S(1) - b2) * p->grad.cwiseAbs2();
        if (decay != S(0)) p->value -= decay * p->value;
        p->value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
}

// ---- early stopping --------------------------------------------------------

EarlyStopping::EarlyStopping(int patience, bool higher_is_better)
    : patience_(patience), higher_(higher_is_better),
      best_(higher_is_better ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity()) {}

bool EarlyStopping::update(double value) {
    ++epoch_;
    const bool improved = higher_ ? value > best_ : value < best_;
    if (improved) {
        best_ = value;
        best_epoch_ = epoch_;
        bad_epochs_ = 0;
    } else {
        ++bad_epochs_;
    }
    return improved;
}

// ---- gradient training loop ------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t ms_since(Clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count();
}

std::vector<std::size_t> shuffled(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

template <typename S>
double dev_metric(const Model<S>& model, const std::vector<TaskInstance>& dev, const TrainConfig& cfg,
                  const SiteHook<S>& hook) {
    std::vector<TaskInstance> subset;
    const std::vector<TaskInstance>* data = &dev;
    if (cfg.dev_limit > 0 && dev.size() > static_cast<std::size_t>(cfg.dev_limit)) {
        subset.assign(dev.begin(), dev.begin() + cfg.dev_limit);
        data = &subset;
    }
    switch (cfg.selection_metric) {
        case SelectionMetric::loss: return mean_loss(model, *data, hook);
        case SelectionMetric::macro_f1: return evaluate_factcheck(model, *data, cfg.decode, hook).macro_f1;
        case SelectionMetric::token_acc: return evaluate_generation(model, *data, hook).token_accuracy;
        case SelectionMetric::exact_match: return evaluate_generation(model, *data, hook).exact_match;
    }
    return 0.0;
}

// Shared epoch loop. loss_of(tape, inst) records one instance's loss;
// metric_of(dev) scores the current weights.
template <typename S, typename LossOf, typename MetricOf>
TrainResult fit(const ParamRefs<S>& trainables, const std::vector<TaskInstance>& train,
                const std::vector<TaskInstance>& dev, const TrainConfig& cfg, const std::string& phase,
                LossOf&& loss_of, MetricOf&& metric_of, const LogSink& sink) {
    cfg.validate();
    if (trainables.empty()) throw ContractError("train: no trainable parameters");
    if (train.empty()) throw ContractError("train: training data is empty");
    if (dev.empty()) throw ContractError("train: dev data is empty");

    const auto start = Clock::now();
    const auto n = static_cast<std::int64_t>(train.size());
    const std::int64_t steps_per_epoch = (n + cfg.grad_accum - 1) / cfg.grad_accum;
    std::int64_t total = steps_per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total = std::min<std::int64_t>(total, cfg.max_steps);
    const auto warmup = static_cast<std::int64_t>(std::llround(cfg.warmup_ratio * static_cast<double>(total)));

    AdamW<S> opt(trainables);
    EarlyStopping stopper(cfg.patience, higher_is_better(cfg.selection_metric));
    RngStream rng(cfg.seed);
    std::vector<Matrix<S>> best_weights;
    for (auto* p : trainables) best_weights.push_back(p->value);

    TrainResult result;
    std::int64_t step = 0;
    double lr = 0.0;
    for (int epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
        const auto order = shuffled(train.size(), rng);
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t begin = 0; begin < order.size() && step < total;
             begin += static_cast<std::size_t>(cfg.grad_accum)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.grad_accum));
            opt.zero_grad();
            const S inv = static_cast<S>(1.0 / static_cast<double>(end - begin));
            for (std::size_t i = begin; i < end; ++i) {
                Tape<S> tape(true);
                Var<S> loss = loss_of(tape, train[order[i]]);
                loss_sum += static_cast<double>(loss.value()(0, 0));
                ++seen;
                tape.backward(scale(loss, inv));
            }
            lr = scheduled_lr(cfg.lr, step, warmup, total);
            opt.step(lr, cfg.weight_decay);
            ++step;
        }
        const double metric = metric_of(dev);
        if (!std::isfinite(metric)) throw NumericError("train: dev metric is not finite at epoch " + std::to_string(epoch));
        if (stopper.update(metric))
            for (std::size_t i = 0; i < trainables.size(); ++i) best_weights[i] = trainables[i]->value;
        LogRecord rec;
        rec.phase = phase;
        rec.epoch = epoch;
        rec.step = step;
        rec.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        rec.dev_metric = metric;
        rec.best_dev_metric = stopper.best();
        rec.lr = lr;
        rec.elapsed_ms = ms_since(start);
        result.log.push_back(rec);
        if (sink) sink(rec);
        result.epochs_run = epoch;
        if (stopper.should_stop()) break;
    }
    for (std::size_t i = 0; i < trainables.size(); ++i) trainables[i]->value = best_weights[i];
    for (auto* p : trainables) p->zero_grad();
    result.best_epoch = stopper.best_epoch();
    result.best_dev_metric = stopper.best();
    result.steps = step;
    return result;
}

}  // namespace

template <typename S>
TrainResult train_adapter(const Model<S>& model, ComposedAdapter<S>& adapter, const std::vector<TaskInstance>& train,
                          const std::vector<TaskInstance>& dev, const TrainConfig& cfg, const LogSink& sink) {
    const SiteHook<S> hook = attach(adapter, model);
    auto loss_of = [&](Tape<S>& tape, const TaskInstance& inst) {
        return sequence_loss(tape, model, std::span<const int>(inst.input_tokens),
                             std::span<const int>(inst.target_tokens), hook);
    };
    auto metric_of = [&](const std::vector<TaskInstance>& d) { return dev_metric(model, d, cfg, hook); };
    return fit<S>(trainable_parameters(adapter), train, dev, cfg, "train", loss_of, metric_of, sink);
}

template <typename S>
TrainResult train_model(Model<S>& model, const std::vector<TaskInstance>& train, const std::vector<TaskInstance>& dev,
                        const TrainConfig& cfg, const LogSink& sink) {
    model.set_trainable(true);
    auto loss_of = [&](Tape<S>& tape, const TaskInstance& inst) {
        return sequence_loss(tape, model, std::span<const int>(inst.input_tokens),
                             std::span<const int>(inst.target_tokens));
    };
    auto metric_of = [&](const std::vector<TaskInstance>& d) {
        return dev_metric(std::as_const(model), d, cfg, SiteHook<S>{});
    };
    try {
        auto result = fit<S>(model.parameters(), train, dev, cfg, "pretrain", loss_of, metric_of, sink);
        model.set_trainable(false);
        return result;
    } catch (...) {
        model.set_trainable(false);
        throw;
    }
}

// ---- evolution strategy ----------------------------------------------------

void EsConfig::validate() const {
    if (population < 2 || elites < 1 || elites >= population)
        throw ConfigError("es config: need 1 <= elites < population (got elites " + std::to_string(elites) +
                          ", population " + std::to_string(population) + ")");
    if (!(sigma0 > 0)) throw ConfigError("es config: sigma0 must be positive");
    if (!(sigma_decay > 0 && sigma_decay <= 1)) throw ConfigError("es config: sigma_decay must be in (0, 1]");
    if (max_evals < 1) throw ConfigError("es config: max_evals must be positive");
    if (!(clamp_lo < clamp_hi)) throw ConfigError("es config: clamp range is empty");
    if (l1_penalty < 0) throw ConfigError("es config: l1_penalty must be >= 0");
    if (objective_sample < 0) throw ConfigError("es config: objective_sample must be >= 0");
}

int worker_threads() {
    if (const char* env = std::getenv("LORAFORGE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

EsResult es_minimize(const Objective& objective, int dim, const EsConfig& cfg, std::optional<Eigen::VectorXd> start,
                     const LogSink& sink) {
    cfg.validate();
    if (dim < 1) throw ConfigError("es_minimize: dim must be >= 1");
    const auto t0 = Clock::now();
    auto clamp = [&](Eigen::VectorXd x) { return x.cwiseMax(cfg.clamp_lo).cwiseMin(cfg.clamp_hi).eval(); };
    auto penalized = [&](const Eigen::VectorXd& x) {
        const double v = objective(x) + cfg.l1_penalty * x.lpNorm<1>();
        if (!std::isfinite(v)) throw NumericError("es_minimize: objective returned a non-finite value");
        return v;
    };

    Eigen::VectorXd mean = start ? *start : Eigen::VectorXd::Constant(dim, cfg.init_coeff);
    if (mean.size() != dim) throw DimensionError("es_minimize: start vector has wrong dimension");
    mean = clamp(mean);

    EsResult res;
    res.best = mean;
    res.best_value = penalized(mean);
    res.evals = 1;
    RngStream rng(cfg.seed);
    double sigma = cfg.sigma0;
    while (res.evals < cfg.max_evals) {
        const int lambda = std::min(cfg.population, cfg.max_evals - res.evals);
        std::vector<Eigen::VectorXd> offspring(static_cast<std::size_t>(lambda));
        for (auto& x : offspring) {
            Eigen::VectorXd z(dim);
            for (int i = 0; i < dim; ++i) z(i) = rng.normal();
            x = clamp(mean + sigma * z);
        }
        std::vector<double> values(offspring.size());
        parallel_for(offspring.size(), [&](std::size_t i) { values[i] = penalized(offspring[i]); });
        res.evals += lambda;

        std::vector<std::size_t> order(offspring.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
        const auto mu = std::min<std::size_t>(static_cast<std::size_t>(cfg.elites), order.size());
        mean.setZero();
        for (std::size_t i = 0; i < mu; ++i) mean += offspring[order[i]];
        mean /= static_cast<double>(mu);
        if (values[order.front()] < res.best_value) {
            res.best_value = values[order.front()];
            res.best = offspring[order.front()];
        }
        sigma *= cfg.sigma_decay;
        ++res.generations;
        res.best_history.push_back(res.best_value);
        if (sink) {
            LogRecord rec;
            rec.phase = "es";
            rec.epoch = res.generations;
            rec.step = res.evals;
            rec.loss = values[order.front()];
            rec.dev_metric = res.best_value;
            rec.best_dev_metric = res.best_value;
            rec.lr = sigma;
            rec.elapsed_ms = ms_since(t0);
            sink(rec);
        }
    }
    return res;
}

template <typename S>
EsResult train_hub(const Model<S>& model, HubAdapter<S>& hub, const std::vector<TaskInstance>& train,
                   const EsConfig& cfg, const LogSink& sink) {
    cfg.validate();
    if (train.empty()) throw ContractError("train_hub: training data is empty");
    std::vector<TaskInstance> sample;
    if (cfg.objective_sample > 0 && train.size() > static_cast<std::size_t>(cfg.objective_sample)) {
        RngStream rng(cfg.seed ^ 0x5bd1e995ULL);
        const auto idx = shuffled(train.size(), rng);
        for (int i = 0; i < cfg.objective_sample; ++i) sample.push_back(train[idx[static_cast<std::size_t>(i)]]);
    } else {
        sample = train;
    }

    const Eigen::Index rows = hub.coeffs.value.rows(), cols = hub.coeffs.value.cols();
    const int dim = static_cast<int>(rows * cols);
    // One private copy per worker so offspring can be scored concurrently.
    const auto workers = static_cast<std::size_t>(std::max(1, worker_threads()));
    std::vector<ComposedAdapter<S>> copies(workers, ComposedAdapter<S>(hub));
    std::vector<std::thread::id> owner(workers);
    std::mutex owner_mutex;

    auto objective = [&](const Eigen::VectorXd& w) {
        std::size_t slot = 0;
        {
            std::lock_guard<std::mutex> lock(owner_mutex);
            const auto me = std::this_thread::get_id();
            while (slot < workers && owner[slot] != me && owner[slot] != std::thread::id{}) ++slot;
            if (slot == workers) slot = 0;
            owner[slot] = me;
        }
        auto& local = std::get<HubAdapter<S>>(copies[slot]);
        for (Eigen::Index i = 0; i < dim; ++i) local.coeffs.value.data()[i] = static_cast<S>(w(i));
        const SiteHook<S> hook = attach(std::as_const(copies[slot]), model);
        return mean_loss(model, sample, hook);
    };

    Eigen::VectorXd start(dim);
    for (Eigen::Index i = 0; i < dim; ++i) start(i) = static_cast<double>(hub.coeffs.value.data()[i]);
    if (cfg.init_coeff != 0.0) start.setConstant(cfg.init_coeff);
    EsResult res = es_minimize(objective, dim, cfg, start, sink);
    for (Eigen::Index i = 0; i < dim; ++i) hub.coeffs.value.data()[i] = static_cast<S>(res.best(i));
    (void)rows;
    (void)cols;
    return res;
}

template class AdamW<float>;
template class AdamW<double>;
template TrainResult train_adapter(const Model<float>&, ComposedAdapter<float>&, const std::vector<TaskInstance>&,
                                   const std::vector<TaskInstance>&, const TrainConfig&, const LogSink&);
template TrainResult train_adapter(const Model<double>&, ComposedAdapter<double>&, const std::vector<TaskInstance>&,
                                   const std::vector<TaskInstance>&, const TrainConfig&, const LogSink&);
template TrainResult train_model(Model<float>&, const std::vector<TaskInstance>&, const std::vector<TaskInstance>&,
                                 const TrainConfig&, const LogSink&);
template EsResult train_hub(const Model<float>&, HubAdapter<float>&, const std::vector<TaskInstance>&,
                            const EsConfig&, const LogSink&);
template EsResult train_hub(const Model<double>&, HubAdapter<double>&, const std::vector<TaskInstance>&,
                            const EsConfig&, const LogSink&);

}  // namespace loraforge

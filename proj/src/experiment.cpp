// SPDX-License-Identifier: Apache-2.0
#include "loraforge/experiment.hpp"

#include "loraforge/errors.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>

namespace loraforge {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

std::string to_string(ExperimentMethod m) {
    switch (m) {
        case ExperimentMethod::zeroshot: return "zeroshot";
        case ExperimentMethod::hub: return "hub";
        case ExperimentMethod::hub_plus_distractors: return "hub_plus_distractors";
        case ExperimentMethod::concat: return "concat";
        case ExperimentMethod::map: return "map";
    }
    return "?";
}

ExperimentMethod experiment_method_from_string(const std::string& s) {
    for (auto m : {ExperimentMethod::zeroshot, ExperimentMethod::hub, ExperimentMethod::hub_plus_distractors,
                   ExperimentMethod::concat, ExperimentMethod::map})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown experiment method '" + s +
                      "' (expected zeroshot, hub, hub_plus_distractors, concat or map)");
}

void ExperimentPlan::validate() const {
    if (seeds.empty()) throw ConfigError("plan: seeds must be nonempty");
    if (methods.empty()) throw ConfigError("plan: methods must be nonempty");
    if (train_sizes.empty()) throw ConfigError("plan: train_sizes must be nonempty");
    for (int s : train_sizes)
        if (s < 0) throw ConfigError("plan: train sizes must be >= 0 (0 = full split)");
    if (run_id.empty() || run_id.find('/') != std::string::npos) throw ConfigError("plan: run_id must be a plain name");
    if (helper_tasks.empty()) throw ConfigError("plan: helper_tasks must be nonempty");
    for (const auto& t : helper_tasks) {
        const auto k = task_kind_from_string(t);
        if (k == TaskKind::factcheck || k == TaskKind::pretrain)
            throw ConfigError("plan: '" + t + "' is not a helper task");
    }
    for (const auto& subset : ablations) {
        if (subset.empty()) throw ConfigError("plan: ablation subsets must be nonempty");
        for (const auto& t : subset)
            if (std::find(helper_tasks.begin(), helper_tasks.end(), t) == helper_tasks.end())
                throw ConfigError("plan: ablation task '" + t + "' is not among the helper tasks");
    }
    for (double r : map_ratios)
        if (!(r > 0)) throw ConfigError("plan: map ratios must be positive");
    if (distractors < 0) throw ConfigError("plan: distractors must be >= 0");
    if (distractor_std < 0) throw ConfigError("plan: distractor_std must be >= 0");
    if (map_m < 0) throw ConfigError("plan: map_m must be >= 0");
    if (permutation_resamples < 1) throw ConfigError("plan: permutation_resamples must be positive");
    if (pretrain.corpus_n < 3 || pretrain.grad_accum < 1 || !(pretrain.lr > 0))
        throw ConfigError("plan: invalid pretrain settings");
    if (helpers.rank < 1 || helpers.corpus_n < 10) throw ConfigError("plan: invalid helper settings");
    model.validate();
    helpers.train.validate();
    composed.validate();
    es.validate();
}

ExperimentPlan desk_plan() {
    ExperimentPlan p;
    p.helpers.train.lr = 2e-2;
    p.helpers.train.grad_accum = 16;
    p.helpers.train.epochs = 20;
    p.helpers.train.max_steps = 2000;
    p.helpers.train.patience = 4;
    p.helpers.train.selection_metric = SelectionMetric::exact_match;
    p.helpers.train.dev_limit = 128;

    p.composed.lr = 1e-2;
    p.composed.grad_accum = 8;
    p.composed.epochs = 30;
    p.composed.patience = 10;
    p.composed.selection_metric = SelectionMetric::macro_f1;
    p.composed.decode = LabelDecode::constrained;

    p.train_sizes = {100, 1000, 0};
    p.ablations = {{"entity", "correct"}, {"diff", "correct"}, {"diff", "entity"}};
    return p;
}

// ---- plan serialization ----------------------------------------------------

namespace {

ojson train_json(const TrainConfig& c) {
    ojson j;
    j["lr"] = c.lr;
    j["warmup_ratio"] = c.warmup_ratio;
    j["weight_decay"] = c.weight_decay;
    j["epochs"] = c.epochs;
    j["patience"] = c.patience;
    j["grad_accum"] = c.grad_accum;
    j["seed"] = c.seed;
    j["selection_metric"] = to_string(c.selection_metric);
    j["max_steps"] = c.max_steps;
    j["dev_limit"] = c.dev_limit;
    j["decode"] = to_string(c.decode);
    return j;
}

TrainConfig train_from(const nlohmann::json& j, TrainConfig c) {
    c.lr = j.value("lr", c.lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.seed = j.value("seed", c.seed);
    if (j.contains("selection_metric"))
        c.selection_metric = selection_metric_from_string(j.at("selection_metric").get<std::string>());
    c.max_steps = j.value("max_steps", c.max_steps);
    c.dev_limit = j.value("dev_limit", c.dev_limit);
    if (j.contains("decode")) c.decode = label_decode_from_string(j.at("decode").get<std::string>());
    return c;
}

ojson es_json(const EsConfig& c) {
    ojson j;
    j["population"] = c.population;
    j["elites"] = c.elites;
    j["sigma0"] = c.sigma0;
    j["sigma_decay"] = c.sigma_decay;
    j["max_evals"] = c.max_evals;
    j["init_coeff"] = c.init_coeff;
    j["clamp"] = {c.clamp_lo, c.clamp_hi};
    j["l1_penalty"] = c.l1_penalty;
    j["seed"] = c.seed;
    j["objective_sample"] = c.objective_sample;
    return j;
}

EsConfig es_from(const nlohmann::json& j, EsConfig c) {
    c.population = j.value("population", c.population);
    c.elites = j.value("elites", c.elites);
    c.sigma0 = j.value("sigma0", c.sigma0);
    c.sigma_decay = j.value("sigma_decay", c.sigma_decay);
    c.max_evals = j.value("max_evals", c.max_evals);
    c.init_coeff = j.value("init_coeff", c.init_coeff);
    if (j.contains("clamp")) {
        const auto v = j.at("clamp").get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("plan: es.clamp must be [lo, hi]");
        c.clamp_lo = v[0];
        c.clamp_hi = v[1];
    }
    c.l1_penalty = j.value("l1_penalty", c.l1_penalty);
    c.seed = j.value("seed", c.seed);
    c.objective_sample = j.value("objective_sample", c.objective_sample);
    return c;
}

ojson pretrain_json(const PretrainConfig& c) {
    return ojson{{"corpus_n", c.corpus_n}, {"lr", c.lr}, {"grad_accum", c.grad_accum}, {"seed", c.seed}};
}

ojson helper_json(const HelperConfig& c) {
    return ojson{{"corpus_n", c.corpus_n}, {"rank", c.rank},         {"alpha", c.alpha},
                 {"seed", c.seed},         {"train", train_json(c.train)}};
}

}  // namespace

ojson to_json(const ExperimentPlan& p) {
    ojson j;
    j["run_id"] = p.run_id;
    j["work_dir"] = p.work_dir.string();
    j["seeds"] = p.seeds;
    ojson methods = ojson::array();
    for (auto m : p.methods) methods.push_back(to_string(m));
    j["methods"] = methods;
    j["train_sizes"] = p.train_sizes;
    j["ablations"] = p.ablations;
    j["map_ratios"] = p.map_ratios;
    j["model"] = to_json(p.model);
    j["pretrain"] = pretrain_json(p.pretrain);
    j["helpers"] = helper_json(p.helpers);
    j["helper_tasks"] = p.helper_tasks;
    j["factcheck_n"] = p.factcheck_n;
    j["factcheck_ratios"] = {p.factcheck_ratios.train, p.factcheck_ratios.dev, p.factcheck_ratios.test};
    j["data_seed"] = p.data_seed;
    j["composed"] = train_json(p.composed);
    j["es"] = es_json(p.es);
    j["distractors"] = p.distractors;
    j["distractor_std"] = p.distractor_std;
    j["map_m"] = p.map_m;
    j["map_init"] = to_string(p.map_init);
    j["hub_mode"] = to_string(p.hub_mode);
    j["permutation_resamples"] = p.permutation_resamples;
    return j;
}

ExperimentPlan plan_from_json(const nlohmann::json& j) {
    ExperimentPlan p = desk_plan();
    try {
        if (!j.is_object()) throw ConfigError("plan: expected a JSON object");
        p.run_id = j.value("run_id", p.run_id);
        if (j.contains("work_dir")) p.work_dir = j.at("work_dir").get<std::string>();
        if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("methods")) {
            p.methods.clear();
            for (const auto& m : j.at("methods")) p.methods.push_back(experiment_method_from_string(m.get<std::string>()));
        }
        if (j.contains("train_sizes")) {
            p.train_sizes.clear();
            for (const auto& s : j.at("train_sizes")) {
                if (s.is_string()) {
                    if (s.get<std::string>() != "full") throw ConfigError("plan: train size strings must be \"full\"");
                    p.train_sizes.push_back(0);
                } else {
                    p.train_sizes.push_back(s.get<int>());
                }
            }
        }
        if (j.contains("ablations")) p.ablations = j.at("ablations").get<std::vector<std::vector<std::string>>>();
        if (j.contains("map_ratios")) p.map_ratios = j.at("map_ratios").get<std::vector<double>>();
        if (j.contains("model")) p.model = model_config_from_json(j.at("model"));
        if (j.contains("pretrain")) {
            const auto& q = j.at("pretrain");
            p.pretrain.corpus_n = q.value("corpus_n", p.pretrain.corpus_n);
            p.pretrain.lr = q.value("lr", p.pretrain.lr);
            p.pretrain.grad_accum = q.value("grad_accum", p.pretrain.grad_accum);
            p.pretrain.seed = q.value("seed", p.pretrain.seed);
        }
        if (j.contains("helpers")) {
            const auto& q = j.at("helpers");
            p.helpers.corpus_n = q.value("corpus_n", p.helpers.corpus_n);
            p.helpers.rank = q.value("rank", p.helpers.rank);
            p.helpers.alpha = q.value("alpha", p.helpers.alpha);
            p.helpers.seed = q.value("seed", p.helpers.seed);
            if (q.contains("train")) p.helpers.train = train_from(q.at("train"), p.helpers.train);
        }
        if (j.contains("helper_tasks")) p.helper_tasks = j.at("helper_tasks").get<std::vector<std::string>>();
        p.factcheck_n = j.value("factcheck_n", p.factcheck_n);
        if (j.contains("factcheck_ratios")) {
            const auto v = j.at("factcheck_ratios").get<std::vector<double>>();
            if (v.size() != 3) throw ConfigError("plan: factcheck_ratios must have three entries");
            p.factcheck_ratios = {v[0], v[1], v[2]};
        }
        p.data_seed = j.value("data_seed", p.data_seed);
        if (j.contains("composed")) p.composed = train_from(j.at("composed"), p.composed);
        if (j.contains("es")) p.es = es_from(j.at("es"), p.es);
        p.distractors = j.value("distractors", p.distractors);
        p.distractor_std = j.value("distractor_std", p.distractor_std);
        p.map_m = j.value("map_m", p.map_m);
        if (j.contains("map_init")) p.map_init = map_init_from_string(j.at("map_init").get<std::string>());
        if (j.contains("hub_mode")) p.hub_mode = hub_mode_from_string(j.at("hub_mode").get<std::string>());
        p.permutation_resamples = j.value("permutation_resamples", p.permutation_resamples);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    p.validate();
    return p;
}

// ---- report helpers --------------------------------------------------------

bool ExperimentReport::all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

const RowSummary* ExperimentReport::row(const std::string& label, int train_size) const {
    for (const auto& r : rows)
        if (r.label == label && r.train_size == train_size) return &r;
    return nullptr;
}

// ---- stages ----------------------------------------------------------------

namespace {

// A stage directory is reused only when its stage.json equals `record`.
bool stage_matches(const fs::path& dir, const ojson& record) {
    std::ifstream in(dir / "stage.json");
    if (!in || !fs::exists(dir / kManifestFile)) return false;
    try {
        return ojson::parse(in) == record;
    } catch (const nlohmann::json::exception&) {
        return false;
    }
}

void write_stage(const fs::path& dir, const ojson& record) {
    std::ofstream out(dir / "stage.json");
    if (!out) throw IoError("cannot write " + (dir / "stage.json").string());
    out << record.dump(2) << "\n";
}

ojson base_record(const ExperimentPlan& p) {
    return ojson{{"stage", "base"}, {"model", to_json(p.model)}, {"pretrain", pretrain_json(p.pretrain)}};
}

ojson helper_record(const ExperimentPlan& p, const std::string& task) {
    return ojson{{"stage", "helper"}, {"task", task}, {"base", base_record(p)}, {"helper", helper_json(p.helpers)}};
}

void say(const ProgressFn& progress, const std::string& msg) {
    if (progress) progress(msg);
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

}  // namespace

Model<float> prepare_base(const ExperimentPlan& plan, ExperimentReport& report, const ProgressFn& progress) {
    const fs::path dir = stage_dir(plan.work_dir, plan.run_id, "base");
    const ojson record = base_record(plan);
    const auto t0 = Clock::now();
    if (stage_matches(dir, record)) {
        say(progress, "base: reusing " + dir.string());
        Model<float> model = load_model(dir);
        report.base_cached = true;
        report.base_parameters = model.parameter_count();
        report.base_seconds = seconds_since(t0);
        return model;
    }
    say(progress, "base: pretraining on " + std::to_string(plan.pretrain.corpus_n) + " generic instances");
    Model<float> model = build_model<float>(plan.model, plan.pretrain.seed);
    const Corpus corpus = gen_pretrain_corpus(plan.pretrain.corpus_n, plan.pretrain.seed, {0.99, 0.005, 0.005});
    TrainConfig tc;
    tc.lr = plan.pretrain.lr;
    tc.grad_accum = plan.pretrain.grad_accum;
    tc.epochs = 1;
    tc.seed = plan.pretrain.seed;
    tc.dev_limit = 200;
    train_model(model, corpus.train, corpus.dev, tc);
    SaveOptions opts;
    opts.seed_provenance = {{"model_init", plan.pretrain.seed}, {"pretrain_corpus", plan.pretrain.seed},
                            {"pretrain_shuffle", plan.pretrain.seed}};
    save(model, dir, opts);
    write_stage(dir, record);
    report.base_cached = false;
    report.base_parameters = model.parameter_count();
    report.base_seconds = seconds_since(t0);
    say(progress, "base: done in " + fixed(report.base_seconds, 1) + " s");
    return model;
}

std::vector<AdapterSet<float>> prepare_helpers(const ExperimentPlan& plan, const Model<float>& base,
                                               ExperimentReport& report, const ProgressFn& progress) {
    std::vector<AdapterSet<float>> sets;
    for (const auto& task : plan.helper_tasks) {
        const fs::path dir = stage_dir(plan.work_dir, plan.run_id, "helpers") / task;
        const ojson record = helper_record(plan, task);
        const auto kind = task_kind_from_string(task);
        const Corpus corpus = gen_corpus(kind, plan.helpers.corpus_n, plan.helpers.seed);
        HelperOutcome outcome;
        outcome.task = task;
        const auto t0 = Clock::now();
        ComposedAdapter<float> adapter;
        if (stage_matches(dir, record)) {
            say(progress, "helper " + task + ": reusing " + dir.string());
            adapter = load_adapter_set(dir);
            outcome.cached = true;
            if (std::ifstream in(dir / "train_info.json"); in) {
                const auto info = ojson::parse(in, nullptr, false);
                if (info.is_object()) {
                    outcome.steps = info.value("steps", std::int64_t{0});
                    outcome.seconds = info.value("seconds", 0.0);
                }
            }
        } else {
            say(progress, "helper " + task + ": training");
            adapter = init_lora<float>(base.sites, plan.helpers.rank, plan.helpers.alpha, plan.helpers.seed, task);
            TrainConfig tc = plan.helpers.train;
            tc.seed = plan.helpers.seed;
            const auto result = train_adapter(base, adapter, corpus.train, corpus.dev, tc);
            outcome.steps = result.steps;
            SaveOptions opts;
            opts.model_config = base.config;
            opts.seed_provenance = {{"corpus", plan.helpers.seed}, {"adapter_init", plan.helpers.seed},
                                    {"shuffle", plan.helpers.seed}};
            save(adapter, dir, opts);
            write_stage(dir, record);
            outcome.seconds = seconds_since(t0);
            std::ofstream(dir / "train_info.json") << ojson{{"steps", outcome.steps}, {"seconds", outcome.seconds}}.dump() << "\n";
        }
        outcome.dev_exact_match = evaluate_generation(base, corpus.dev, attach(std::as_const(adapter), base)).exact_match;
        if (!outcome.cached) outcome.seconds = seconds_since(t0);
        say(progress, "helper " + task + ": dev exact-match " + fixed(outcome.dev_exact_match, 4));
        report.helpers.push_back(outcome);
        sets.push_back(std::get<AdapterSet<float>>(std::move(adapter)));
    }
    return sets;
}

// ---- cells -----------------------------------------------------------------

namespace {

struct CellSpec {
    std::string label;
    ExperimentMethod method;
    std::vector<std::string> tasks;
    int train_size;
    std::uint64_t seed;
    int m = 0;
    double ratio = 0.0;  // requested ratio; 0 when m was given directly
};

std::string join(const std::vector<std::string>& xs, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? sep : "") + xs[i];
    return out;
}

std::string ratio_label(double ratio) {
    std::ostringstream os;
    os << ratio;
    return os.str();
}

double rms(const std::vector<AdapterSet<float>>& sets, bool a_side) {
    double ss = 0.0;
    std::int64_t count = 0;
    for (const auto& s : sets)
        for (const auto& p : s.pairs) {
            const auto& v = a_side ? p.A.value : p.B.value;
            ss += static_cast<double>(v.squaredNorm());
            count += v.size();
        }
    return count ? std::sqrt(ss / static_cast<double>(count)) : 0.0;
}

std::vector<AdapterSet<float>> select(const std::vector<AdapterSet<float>>& helpers,
                                      const std::vector<std::string>& tasks) {
    std::vector<AdapterSet<float>> out;
    for (const auto& t : tasks) {
        const auto it = std::find_if(helpers.begin(), helpers.end(), [&](const auto& h) { return h.task_name == t; });
        if (it == helpers.end()) throw ConfigError("no helper adapter for task '" + t + "'");
        out.push_back(*it);
    }
    return out;
}

std::string cell_dir_name(const CellSpec& c) {
    std::string name;
    for (char ch : c.label) name += std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' ? ch : '_';
    return name + "_n" + std::to_string(c.train_size) + "_s" + std::to_string(c.seed);
}

CellResult run_cell(const CellSpec& spec, const ExperimentPlan& plan, const Model<float>& base, const Corpus& fc,
                    const std::vector<AdapterSet<float>>& helpers, double a_std, double b_std) {
    CellResult r;
    r.label = spec.label;
    r.method = spec.method;
    r.tasks = spec.tasks;
    r.seed = spec.seed;
    r.ratio = spec.ratio;
    const auto t0 = Clock::now();
    try {
        std::vector<TaskInstance> train = fc.train;
        if (spec.train_size > 0 && static_cast<std::size_t>(spec.train_size) < train.size())
            train.resize(static_cast<std::size_t>(spec.train_size));
        r.train_size = static_cast<int>(train.size());
        const auto sets = select(helpers, spec.tasks);
        TrainConfig tc = plan.composed;
        tc.seed = spec.seed;
        EsConfig es = plan.es;
        es.seed = spec.seed;

        std::optional<ComposedAdapter<float>> adapter;
        switch (spec.method) {
            case ExperimentMethod::zeroshot: break;
            case ExperimentMethod::hub:
            case ExperimentMethod::hub_plus_distractors: {
                std::vector<AdapterSet<float>> all;
                if (spec.method == ExperimentMethod::hub_plus_distractors)
                    all = gen_distractor_sets<float>(base.sites, plan.distractors, spec.seed, plan.helpers.rank,
                                                     plan.helpers.alpha, a_std, b_std);
                all.insert(all.end(), sets.begin(), sets.end());
                const double init = es.init_coeff != 0.0 ? es.init_coeff : 1.0 / static_cast<double>(all.size());
                auto hub = compose_hub(all, init, plan.hub_mode);
                es.init_coeff = init;
                train_hub(base, hub, train, es);
                adapter = std::move(hub);
                break;
            }
            case ExperimentMethod::concat: {
                adapter = compose_concat(sets);
                train_adapter(base, *adapter, train, fc.dev, tc);
                break;
            }
            case ExperimentMethod::map: {
                adapter = compose_map(sets, spec.m, plan.map_init, spec.seed);
                r.m = spec.m;
                train_adapter(base, *adapter, train, fc.dev, tc);
                break;
            }
        }
        SiteHook<float> hook;
        if (adapter) {
            hook = attach(std::as_const(*adapter), base);
            r.trainable = count_trainable(*adapter);
            SaveOptions opts;
            opts.model_config = base.config;
            opts.seed_provenance = {{"data", plan.data_seed}, {"cell", spec.seed}};
            save(*adapter, stage_dir(plan.work_dir, plan.run_id, "cells") / cell_dir_name(spec), opts);
        }
        if (spec.method == ExperimentMethod::map && spec.ratio == 0.0)
            r.ratio = static_cast<double>(r.trainable) / static_cast<double>(base.parameter_count());
        r.report = evaluate_factcheck(base, fc.test, plan.composed.decode, hook);
        r.ok = true;
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
    }
    r.seconds = seconds_since(t0);
    return r;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentPlan& plan, const ProgressFn& progress) {
    plan.validate();
    const auto t0 = Clock::now();
    ExperimentReport report;
    report.plan = plan;
    const Model<float> base = prepare_base(plan, report, progress);
    const auto helpers = prepare_helpers(plan, base, report, progress);
    const Corpus fc = gen_corpus(TaskKind::factcheck, plan.factcheck_n, plan.data_seed, plan.factcheck_ratios);
    write_corpus(stage_dir(plan.work_dir, plan.run_id, "data"), TaskKind::factcheck, fc);

    const double a_std = plan.distractor_std > 0 ? plan.distractor_std : rms(helpers, true);
    const double b_std = plan.distractor_std > 0 ? plan.distractor_std : rms(helpers, false);
    const int rank = plan.helpers.rank;
    const int m_default = plan.map_m > 0 ? plan.map_m : rank;
    const auto n_sites = static_cast<std::int64_t>(base.sites.size());

    std::vector<CellSpec> specs;
    for (int size : plan.train_sizes) {
        for (auto method : plan.methods) {
            for (auto seed : plan.seeds) {
                specs.push_back({to_string(method), method, plan.helper_tasks, size, seed, m_default, 0.0});
            }
            if (method != ExperimentMethod::map) continue;
            for (double ratio : plan.map_ratios) {
                const int n = static_cast<int>(plan.helper_tasks.size());
                const int m = map_dim(ratio, base.parameter_count(), n, rank, 2 * n_sites);
                for (auto seed : plan.seeds)
                    specs.push_back({"map(ratio=" + ratio_label(ratio) + ")", method, plan.helper_tasks, size, seed, m,
                                     ratio});
            }
        }
        for (const auto& subset : plan.ablations)
            for (auto seed : plan.seeds)
                specs.push_back({"map[" + join(subset, "+") + "]", ExperimentMethod::map, subset, size, seed,
                                 m_default, 0.0});
    }

    say(progress, "running " + std::to_string(specs.size()) + " cells");
    report.cells.resize(specs.size());
    std::mutex log_mutex;
    parallel_for(specs.size(), [&](std::size_t i) {
        report.cells[i] = run_cell(specs[i], plan, base, fc, helpers, a_std, b_std);
        const auto& c = report.cells[i];
        std::lock_guard<std::mutex> lock(log_mutex);
        say(progress, c.label + " n=" + std::to_string(c.train_size) + " seed=" + std::to_string(c.seed) + ": " +
                          (c.ok ? "macro-F1 " + fixed(c.report.macro_f1, 4) : "FAILED " + c.error) + " (" +
                          fixed(c.seconds, 1) + " s)");
    });
    summarize(report);
    report.total_seconds = seconds_since(t0);
    return report;
}

void summarize(ExperimentReport& report) {
    report.rows.clear();
    report.comparisons.clear();
    // Rows keep first-appearance order of (label, requested size).
    std::vector<std::pair<std::string, int>> keys;
    std::map<std::pair<std::string, int>, std::vector<const CellResult*>> groups;
    for (const auto& c : report.cells) {
        const auto key = std::make_pair(c.label, c.train_size);
        if (!groups.count(key)) keys.push_back(key);
        groups[key].push_back(&c);
    }
    for (const auto& key : keys) {
        RowSummary row;
        row.label = key.first;
        row.train_size = key.second;
        std::vector<double> p, r, f, secs;
        for (const auto* c : groups[key]) {
            if (!c->ok) {
                ++row.cells_failed;
                continue;
            }
            ++row.cells_ok;
            p.push_back(c->report.macro_precision);
            r.push_back(c->report.macro_recall);
            f.push_back(c->report.macro_f1);
            secs.push_back(c->seconds);
            row.trainable = c->trainable;
            row.m = c->m;
            row.ratio = c->ratio;
        }
        row.mean_precision = mean(p);
        row.std_precision = stddev(p);
        row.mean_recall = mean(r);
        row.std_recall = stddev(r);
        row.mean_f1 = mean(f);
        row.std_f1 = stddev(f);
        row.mean_seconds = mean(secs);
        report.rows.push_back(row);
    }
    // Pairwise tests between rows of the same size, paired by seed.
    for (std::size_t i = 0; i < keys.size(); ++i) {
        for (std::size_t j = i + 1; j < keys.size(); ++j) {
            if (keys[i].second != keys[j].second) continue;
            std::map<std::uint64_t, double> fa, fb;
            for (const auto* c : groups[keys[i]])
                if (c->ok) fa[c->seed] = c->report.macro_f1;
            for (const auto* c : groups[keys[j]])
                if (c->ok) fb[c->seed] = c->report.macro_f1;
            std::vector<double> a, b;
            for (const auto& [seed, v] : fa)
                if (fb.count(seed)) {
                    a.push_back(v);
                    b.push_back(fb[seed]);
                }
            if (a.size() < 2) continue;
            Comparison cmp;
            cmp.label_a = keys[i].first;
            cmp.label_b = keys[j].first;
            cmp.train_size = groups[keys[i]].front()->train_size;
            cmp.mean_diff = mean(a) - mean(b);
            cmp.p_value = paired_permutation_test(a, b, report.plan.permutation_resamples, 7);
            report.comparisons.push_back(cmp);
        }
    }
}

// ---- rendering -------------------------------------------------------------

ojson to_json(const ClassReport& r) {
    ojson j;
    auto cls = [](const ClassScores& s) {
        return ojson{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
    };
    j["true"] = cls(r.true_class);
    j["false"] = cls(r.false_class);
    j["macro_precision"] = r.macro_precision;
    j["macro_recall"] = r.macro_recall;
    j["macro_f1"] = r.macro_f1;
    j["confusion"] = ojson{{"gold_true", r.confusion[0]}, {"gold_false", r.confusion[1]}};
    j["invalid_output_count"] = r.invalid_output_count;
    return j;
}

ojson to_json(const ExperimentReport& rep) {
    ojson j;
    j["plan"] = to_json(rep.plan);
    j["base"] = ojson{{"parameters", rep.base_parameters}, {"seconds", rep.base_seconds}, {"cached", rep.base_cached}};
    ojson helpers = ojson::array();
    for (const auto& h : rep.helpers)
        helpers.push_back(ojson{{"task", h.task},
                                {"dev_exact_match", h.dev_exact_match},
                                {"steps", h.steps},
                                {"seconds", h.seconds},
                                {"cached", h.cached}});
    j["helpers"] = helpers;
    ojson cells = ojson::array();
    for (const auto& c : rep.cells) {
        ojson e;
        e["label"] = c.label;
        e["method"] = to_string(c.method);
        e["tasks"] = c.tasks;
        e["train_size"] = c.train_size;
        e["seed"] = c.seed;
        e["m"] = c.m;
        e["ratio"] = c.ratio;
        e["trainable"] = c.trainable;
        e["seconds"] = c.seconds;
        e["ok"] = c.ok;
        if (c.ok)
            e["report"] = to_json(c.report);
        else
            e["error"] = c.error;
        cells.push_back(std::move(e));
    }
    j["cells"] = cells;
    ojson rows = ojson::array();
    for (const auto& r : rep.rows)
        rows.push_back(ojson{{"label", r.label},
                             {"train_size", r.train_size},
                             {"cells_ok", r.cells_ok},
                             {"cells_failed", r.cells_failed},
                             {"macro_precision", {{"mean", r.mean_precision}, {"std", r.std_precision}}},
                             {"macro_recall", {{"mean", r.mean_recall}, {"std", r.std_recall}}},
                             {"macro_f1", {{"mean", r.mean_f1}, {"std", r.std_f1}}},
                             {"trainable", r.trainable},
                             {"m", r.m},
                             {"ratio", r.ratio},
                             {"mean_seconds", r.mean_seconds}});
    j["rows"] = rows;
    ojson cmps = ojson::array();
    for (const auto& c : rep.comparisons)
        cmps.push_back(ojson{{"a", c.label_a},
                             {"b", c.label_b},
                             {"train_size", c.train_size},
                             {"mean_f1_diff", c.mean_diff},
                             {"p_value", c.p_value}});
    j["comparisons"] = cmps;
    j["total_seconds"] = rep.total_seconds;
    return j;
}

std::string render_markdown(const ExperimentReport& rep) {
    std::ostringstream os;
    const auto& p = rep.plan;
    os << "# Composition experiment: " << p.run_id << "\n\n";
    os << "Task: factcheck. Prompt `BOS CLAIM s r o EVID f1 SEP ... SEP`; the class of the claim is read as "
       << (p.composed.decode == LabelDecode::constrained ? "the larger of the TRUE and FALSE logits"
                                                         : "the first generated token")
       << " and scored on the held-out test split.\n\n";
    os << "Base model: " << rep.base_parameters << " parameters (d=" << p.model.d_model
       << ", layers=" << p.model.n_layers << ", sites=" << to_string(p.model.site_policy) << ")"
       << (rep.base_cached ? ", loaded from cache" : "") << ". Seeds: ";
    for (std::size_t i = 0; i < p.seeds.size(); ++i) os << (i ? ", " : "") << p.seeds[i];
    os << ".\n\n";

    os << "## Helper adapters\n\n| Task | Dev exact-match | Steps | Seconds |\n|---|---|---|---|\n";
    for (const auto& h : rep.helpers)
        os << "| " << h.task << " | " << fixed(h.dev_exact_match, 4) << " | " << (h.cached ? "cached" : std::to_string(h.steps))
           << " | " << fixed(h.seconds, 1) << " |\n";

    os << "\n## Results (mean ± std over seeds)\n\n"
       << "| Method | # Training instances | ratio×100 | m | Trainable params | Macro-P | Macro-R | Macro-F1 | "
          "Seconds/cell | Cells ok |\n|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rep.rows) {
        const bool is_map = r.m > 0;
        os << "| " << r.label << " | " << r.train_size << " | " << (is_map ? fixed(r.ratio * 100.0, 4) : "-") << " | "
           << (is_map ? std::to_string(r.m) : "-") << " | " << r.trainable << " | " << fixed(r.mean_precision, 4)
           << " ± " << fixed(r.std_precision, 4) << " | " << fixed(r.mean_recall, 4) << " ± "
           << fixed(r.std_recall, 4) << " | " << fixed(r.mean_f1, 4) << " ± " << fixed(r.std_f1, 4) << " | "
           << fixed(r.mean_seconds, 1) << " | " << r.cells_ok << "/" << (r.cells_ok + r.cells_failed) << " |\n";
    }

    os << "\n## Paired sign-flip permutation tests on macro-F1\n\n| A | B | # Training instances | mean F1(A) - F1(B) | p |\n|---|---|---|---|---|\n";
    for (const auto& c : rep.comparisons)
        os << "| " << c.label_a << " | " << c.label_b << " | " << c.train_size << " | " << fixed(c.mean_diff, 4)
           << " | " << fixed(c.p_value, 4) << " |\n";

    bool any_failed = false;
    for (const auto& c : rep.cells)
        if (!c.ok) {
            if (!any_failed) os << "\n## Failed cells\n\n";
            any_failed = true;
            os << "- " << c.label << " n=" << c.train_size << " seed=" << c.seed << ": " << c.error << "\n";
        }
    os << "\nTotal wall-clock: " << fixed(rep.total_seconds, 1) << " s\n";
    return os.str();
}

}  // namespace loraforge

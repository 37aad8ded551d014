// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/optim.hpp"
#include "loraforge/persist.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace loraforge {

enum class ExperimentMethod { zeroshot, hub, hub_plus_distractors, concat, map };

std::string to_string(ExperimentMethod m);
ExperimentMethod experiment_method_from_string(const std::string& s);

// Pretraining of the shared base model on the generic mix.
struct PretrainConfig {
    int corpus_n = 250000;
    double lr = 3e-3;
    int grad_accum = 16;
    std::uint64_t seed = 42;  // model init, corpus and shuffling
};

// Helper-task LoRA training.
struct HelperConfig {
    int corpus_n = 2560;
    int rank = 4;
    double alpha = 8.0;
    TrainConfig train;
    std::uint64_t seed = 42;  // corpus and adapter init
};

struct ExperimentPlan {
    std::string run_id = "desk";
    std::filesystem::path work_dir = ".";
    std::vector<std::uint64_t> seeds = {42, 64, 128, 256, 512};
    std::vector<ExperimentMethod> methods = {ExperimentMethod::zeroshot, ExperimentMethod::hub,
                                             ExperimentMethod::hub_plus_distractors, ExperimentMethod::concat,
                                             ExperimentMethod::map};
    // 0 means the full training split. Smaller sizes take a prefix, which
    // keeps labels balanced to within one instance.
    std::vector<int> train_sizes = {0};
    // Extra map rows composed over these helper subsets.
    std::vector<std::vector<std::string>> ablations;
    // Extra map rows sized by map_dim against the base parameter count.
    std::vector<double> map_ratios;

    ModelConfig model;
    PretrainConfig pretrain;
    HelperConfig helpers;
    std::vector<std::string> helper_tasks = {"diff", "entity", "correct"};

    int factcheck_n = 2550;
    SplitRatios factcheck_ratios{2036.0 / 2550.0, 258.0 / 2550.0, 256.0 / 2550.0};
    std::uint64_t data_seed = 42;

    TrainConfig composed;  // gradient methods; seed is replaced per cell
    EsConfig es;           // hub methods; seed is replaced per cell
    int distractors = 20;
    // Gaussian std of distractor A and B entries; 0 matches the RMS of the
    // trained helpers' A and B entries respectively.
    double distractor_std = 0.0;
    int map_m = 0;  // 0 means the helper rank
    MapInit map_init = MapInit::zero;
    HubMode hub_mode = HubMode::per_site;
    int permutation_resamples = 10000;

    // Throws ConfigError.
    void validate() const;
};

// The plan used by the acceptance run and `run-experiment` without --plan.
ExperimentPlan desk_plan();

// Missing keys keep their desk_plan() values. Throws ConfigError.
ExperimentPlan plan_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ExperimentPlan& plan);

struct HelperOutcome {
    std::string task;
    double dev_exact_match = 0.0;
    std::int64_t steps = 0;
    double seconds = 0.0;
    bool cached = false;
};

struct CellResult {
    std::string label;  // row name: method, or map variant
    ExperimentMethod method = ExperimentMethod::zeroshot;
    std::vector<std::string> tasks;
    int train_size = 0;  // instances actually used
    std::uint64_t seed = 0;
    int m = 0;
    double ratio = 0.0;
    std::int64_t trainable = 0;
    ClassReport report;
    double seconds = 0.0;
    bool ok = false;
    std::string error;
};

struct RowSummary {
    std::string label;
    int train_size = 0;
    int cells_ok = 0;
    int cells_failed = 0;
    double mean_precision = 0, std_precision = 0;
    double mean_recall = 0, std_recall = 0;
    double mean_f1 = 0, std_f1 = 0;
    std::int64_t trainable = 0;
    int m = 0;
    double ratio = 0.0;
    double mean_seconds = 0.0;
};

struct Comparison {
    std::string label_a, label_b;
    int train_size = 0;
    double mean_diff = 0.0;  // mean F1(a) - mean F1(b)
    double p_value = 1.0;
};

struct ExperimentReport {
    ExperimentPlan plan;
    std::int64_t base_parameters = 0;
    double base_seconds = 0.0;
    bool base_cached = false;
    std::vector<HelperOutcome> helpers;
    std::vector<CellResult> cells;
    std::vector<RowSummary> rows;
    std::vector<Comparison> comparisons;
    double total_seconds = 0.0;

    bool all_ok() const;
    const RowSummary* row(const std::string& label, int train_size) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Loads the cached base from runs/{run_id}/base when its stage record
// matches the plan, otherwise pretrains and saves it.
Model<float> prepare_base(const ExperimentPlan& plan, ExperimentReport& report, const ProgressFn& progress = {});

// Same caching for runs/{run_id}/helpers/{task}.
std::vector<AdapterSet<float>> prepare_helpers(const ExperimentPlan& plan, const Model<float>& base,
                                               ExperimentReport& report, const ProgressFn& progress = {});

// Runs every cell (methods x train sizes x seeds, plus ablation and ratio
// rows). A failing cell is recorded, not thrown. Cells run on up to
// LORAFORGE_THREADS workers; results do not depend on the worker count.
ExperimentReport run_experiment(const ExperimentPlan& plan, const ProgressFn& progress = {});

// Fills rows and comparisons from cells.
void summarize(ExperimentReport& report);

std::string render_markdown(const ExperimentReport& report);
nlohmann::ordered_json to_json(const ExperimentReport& report);
nlohmann::ordered_json to_json(const ClassReport& report);

}  // namespace loraforge

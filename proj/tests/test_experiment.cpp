// SPDX-License-Identifier: Apache-2.0
#include "loraforge/errors.hpp"
#include "loraforge/experiment.hpp"
#include "loraforge/tasks.hpp"

#include <doctest.h>

#include <cmath>

using namespace loraforge;
namespace fs = std::filesystem;

namespace {

CellResult cell(const std::string& label, ExperimentMethod m, std::uint64_t seed, double f1) {
    CellResult c;
    c.label = label;
    c.method = m;
    c.seed = seed;
    c.train_size = 100;
    c.ok = true;
    c.report.macro_f1 = f1;
    c.report.macro_precision = f1;
    c.report.macro_recall = f1;
    c.trainable = m == ExperimentMethod::map ? 384 : 6144;
    c.m = m == ExperimentMethod::map ? 4 : 0;
    return c;
}

// A grid small enough for a unit test: tiny model, short corpora, one seed.
ExperimentPlan tiny_plan(const fs::path& work) {
    ExperimentPlan p = desk_plan();
    p.work_dir = work;
    p.run_id = "tiny";
    p.seeds = {42};
    p.methods = {ExperimentMethod::zeroshot, ExperimentMethod::hub_plus_distractors, ExperimentMethod::map};
    p.train_sizes = {0};
    p.ablations = {{"entity", "correct"}};
    p.map_ratios = {0.01};
    p.model = ModelConfig{64, 16, 1, 2, 32, 48, SitePolicy::qv};
    p.pretrain.corpus_n = 200;
    p.helpers.corpus_n = 40;
    p.helpers.train.max_steps = 2;
    p.helpers.train.dev_limit = 4;
    p.factcheck_n = 60;
    p.composed.max_steps = 2;
    p.composed.dev_limit = 4;
    p.es.max_evals = 32;
    p.es.objective_sample = 4;
    p.permutation_resamples = 100;
    return p;
}

}  // namespace

TEST_CASE("desk plan is valid and survives a json round trip") {
    const auto p = desk_plan();
    CHECK_NOTHROW(p.validate());
    CHECK(p.train_sizes == std::vector<int>{100, 1000, 0});
    const auto j = to_json(p);
    CHECK(j["train_sizes"][2] == 0);
    const auto back = plan_from_json(nlohmann::json::parse(j.dump()));
    CHECK(to_json(back).dump() == j.dump());
}

TEST_CASE("plan json keeps desk values for missing keys and rejects bad input") {
    const auto p = plan_from_json(nlohmann::json::parse(R"({"seeds":[1,2],"methods":["map"],"train_sizes":["full",50]})"));
    CHECK(p.seeds == std::vector<std::uint64_t>{1, 2});
    CHECK(p.methods == std::vector<ExperimentMethod>{ExperimentMethod::map});
    CHECK(p.train_sizes == std::vector<int>{0, 50});
    CHECK(p.composed.lr == desk_plan().composed.lr);
    CHECK_THROWS_AS(plan_from_json(nlohmann::json::parse(R"({"methods":["magic"]})")), ConfigError);
    CHECK_THROWS_AS(plan_from_json(nlohmann::json::parse(R"({"seeds":"many"})")), ConfigError);

    auto bad = desk_plan();
    bad.seeds.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = desk_plan();
    bad.methods.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = desk_plan();
    bad.ablations = {{"entity", "poetry"}};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = desk_plan();
    bad.helper_tasks = {"factcheck"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(experiment_method_from_string("nope"), ConfigError);
    CHECK(experiment_method_from_string("hub_plus_distractors") == ExperimentMethod::hub_plus_distractors);
}

TEST_CASE("summarize averages rows and pairs comparisons by seed") {
    ExperimentReport rep;
    rep.plan = desk_plan();
    rep.plan.permutation_resamples = 100;
    const double map_f1[] = {0.6, 0.7, 0.65, 0.62, 0.68};
    const double cat_f1[] = {0.5, 0.55, 0.52, 0.51, 0.54};
    const std::uint64_t seeds[] = {42, 64, 128, 256, 512};
    for (int i = 0; i < 5; ++i) {
        rep.cells.push_back(cell("map", ExperimentMethod::map, seeds[i], map_f1[i]));
        rep.cells.push_back(cell("concat", ExperimentMethod::concat, seeds[i], cat_f1[i]));
    }
    auto failed = cell("concat", ExperimentMethod::concat, 7, 0.0);
    failed.ok = false;
    failed.error = "boom";
    rep.cells.push_back(failed);
    summarize(rep);

    const auto* map = rep.row("map", 100);
    const auto* cat = rep.row("concat", 100);
    REQUIRE(map);
    REQUIRE(cat);
    CHECK(map->mean_f1 == doctest::Approx(0.65));
    CHECK(cat->cells_ok == 5);
    CHECK(cat->cells_failed == 1);
    CHECK(map->m == 4);
    CHECK(map->trainable == 384);
    // sample std of {0.6, 0.7, 0.65, 0.62, 0.68}
    CHECK(map->std_f1 == doctest::Approx(std::sqrt(0.0017)).epsilon(1e-6));
    CHECK(!rep.all_ok());

    REQUIRE(rep.comparisons.size() == 1);
    const auto& c = rep.comparisons[0];
    CHECK(std::abs(c.mean_diff) == doctest::Approx(0.126));
    // five same-sign differences: 2 of the 32 sign patterns are as extreme
    CHECK(c.p_value == doctest::Approx(0.0625));
}

TEST_CASE("markdown report carries the table columns") {
    ExperimentReport rep;
    rep.plan = desk_plan();
    rep.plan.permutation_resamples = 10;
    for (std::uint64_t s : {1, 2}) {
        auto c = cell("map(ratio=0.005)", ExperimentMethod::map, s, 0.6);
        c.ratio = 0.005;
        rep.cells.push_back(c);
    }
    summarize(rep);
    const auto md = render_markdown(rep);
    CHECK(md.find("| Method | # Training instances | ratio×100 | m | Trainable params | Macro-P | Macro-R | Macro-F1") !=
          std::string::npos);
    CHECK(md.find("| map(ratio=0.005) | 100 | 0.5000 | 4 | 384 |") != std::string::npos);
    const auto j = to_json(rep);
    CHECK(j["rows"][0]["m"] == 4);
}

TEST_CASE("a tiny grid runs end to end and reuses cached stages") {
    const auto work = fs::temp_directory_path() / "loraforge_experiment_test";
    fs::remove_all(work);
    const auto plan = tiny_plan(work);
    const auto rep = run_experiment(plan);
    CHECK(rep.all_ok());
    CHECK(!rep.base_cached);
    REQUIRE(rep.helpers.size() == 3);

    const int full = rep.cells.front().train_size;
    CHECK(full == 48);
    const auto* zero = rep.row("zeroshot", full);
    const auto* hub = rep.row("hub_plus_distractors", full);
    const auto* map = rep.row("map", full);
    const auto* abl = rep.row("map[entity+correct]", full);
    REQUIRE(zero);
    REQUIRE(hub);
    REQUIRE(map);
    REQUIRE(abl);
    CHECK(zero->trainable == 0);

    // Parameter column equals the count formula for 3 helpers + 20 distractors.
    CompositionLayout hub_layout;
    hub_layout.method = Method::hub;
    hub_layout.sites = injection_sites(plan.model);
    hub_layout.n = 23;
    CHECK(hub->trainable == count_trainable(hub_layout));
    CHECK(hub->trainable == 46);
    CHECK(map->trainable == 2 * 12 * 4 * 2);
    CHECK(abl->trainable == 2 * 8 * 4 * 2);

    const RowSummary* ratio_row = nullptr;
    for (const auto& r : rep.rows)
        if (r.label.rfind("map(ratio=", 0) == 0) ratio_row = &r;
    REQUIRE(ratio_row);
    // the row keeps the requested ratio; m comes from map_dim (floored at 8 here)
    CHECK(ratio_row->ratio == 0.01);
    CHECK(ratio_row->m == map_dim(0.01, rep.base_parameters, 3, 4, 2 * static_cast<std::int64_t>(hub_layout.sites.size())));
    CHECK(ratio_row->trainable == 2 * 12 * ratio_row->m * 2);

    CHECK(fs::exists(stage_dir(work, "tiny", "base") / kManifestFile));
    CHECK(fs::exists(stage_dir(work, "tiny", "helpers") / "diff" / kManifestFile));
    CHECK(fs::exists(work / "runs" / "tiny" / "data" / "factcheck.test.jsonl"));

    // Second run: cached base and helpers, identical scores.
    const auto again = run_experiment(plan);
    CHECK(again.base_cached);
    REQUIRE(again.helpers.size() == rep.helpers.size());
    for (std::size_t i = 0; i < rep.helpers.size(); ++i) {
        CHECK(again.helpers[i].cached);
        CHECK(rep.helpers[i].steps > 0);
        CHECK(again.helpers[i].steps == rep.helpers[i].steps);
    }
    REQUIRE(again.cells.size() == rep.cells.size());
    for (std::size_t i = 0; i < rep.cells.size(); ++i)
        CHECK(again.cells[i].report.macro_f1 == rep.cells[i].report.macro_f1);
    fs::remove_all(work);
}

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/cli.hpp"
#include "loraforge/persist.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace loraforge;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

// One shared workspace: later cases reuse the data and checkpoints built by
// the pipeline case, so cases run in file order.
const fs::path& ws() {
    static const fs::path root = [] {
        auto p = fs::temp_directory_path() / "loraforge_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        std::ofstream(p / "tiny.json") << R"({"vocab_size":64,"d_model":16,"n_layers":1,"n_heads":2,"d_ff":32,"max_seq":48,"site_policy":"qv"})";
        return p;
    }();
    return root;
}

std::string at(const std::string& rel) { return (ws() / rel).string(); }

}  // namespace

TEST_CASE("gen-data writes every split and is reproducible") {
    const auto r = cli({"gen-data", "--task", "all", "--n", "60", "--seed", "1", "--out", at("data")});
    REQUIRE(r.code == 0);
    int files = 0;
    for (const auto& e : fs::directory_iterator(ws() / "data")) files += e.path().extension() == ".jsonl";
    CHECK(files == 12);
    CHECK(contains(r.out, "factcheck: 48 train, 6 dev, 6 test"));

    REQUIRE(cli({"gen-data", "--task", "all", "--n", "60", "--seed", "1", "--out", at("again")}).code == 0);
    for (const auto& e : fs::directory_iterator(ws() / "data"))
        CHECK(slurp(e.path()) == slurp(ws() / "again" / e.path().filename()));
}

TEST_CASE("gen-data rejects bad input with exit 2 and writes nothing") {
    CHECK(cli({"gen-data", "--task", "all", "--n", "3", "--out", at("small")}).code == 2);
    CHECK(!fs::exists(ws() / "small"));
    CHECK(cli({"gen-data", "--task", "poetry", "--n", "60", "--out", at("x")}).code == 2);
    CHECK(cli({"gen-data", "--task", "diff", "--n", "60", "--ratios", "0.5,0.5", "--out", at("x")}).code == 2);
}

TEST_CASE("argument errors exit 2, help exits 0") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"gen-data", "--n", "10"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
    CHECK(cli({"compose", "--help"}).code == 0);
}

TEST_CASE("train, compose, train composed and eval on a tiny model") {
    REQUIRE(fs::exists(ws() / "data" / "factcheck.train.jsonl"));
    const auto pre = cli({"pretrain-base", "--model-config", at("tiny.json"), "--n", "200", "--out", at("base")});
    REQUIRE(pre.code == 0);
    CHECK(contains(pre.out, "pretrained"));
    CHECK(fs::exists(ws() / "base" / "log.jsonl"));

    for (const std::string task : {"diff", "entity", "correct"}) {
        const auto r = cli({"train-lora", "--task", task, "--data", at("data"), "--base", at("base"), "--epochs", "1",
                            "--max-steps", "2", "--dev-limit", "4", "--quiet", "--out", at("lora_" + task)});
        REQUIRE(r.code == 0);
        CHECK(contains(r.out, task + ": "));
    }
    // exact-match selection: the best-dev column never decreases
    {
        std::ifstream log(ws() / "lora_correct" / "log.jsonl");
        double best = -1.0;
        int lines = 0;
        for (std::string line; std::getline(log, line); ++lines) {
            const double b = nlohmann::json::parse(line).at("best_dev_metric").get<double>();
            CHECK(b >= best);
            best = b;
        }
        CHECK(lines >= 1);
    }
    const std::vector<std::string> helpers = {at("lora_diff"), at("lora_entity"), at("lora_correct")};
    auto compose = [&](std::vector<std::string> extra) {
        std::vector<std::string> args = {"compose", "--adapters"};
        args.insert(args.end(), helpers.begin(), helpers.end());
        args.insert(args.end(), extra.begin(), extra.end());
        return cli(args);
    };

    // 2 sites x 2 matrices x (n r = 12) x m
    auto map = compose({"--method", "map", "--m", "16", "--out", at("map")});
    REQUIRE(map.code == 0);
    CHECK(contains(map.out, "trainable parameters: 768"));

    auto hub = compose({"--method", "hub", "--distractors", "20", "--seed", "3", "--out", at("hub")});
    REQUIRE(hub.code == 0);
    CHECK(contains(hub.out, "constituents: 23"));
    CHECK(contains(hub.out, "trainable parameters: 46"));

    REQUIRE(compose({"--method", "concat", "--out", at("concat")}).code == 0);
    CHECK(compose({"--method", "map", "--init", "identity", "--m", "8", "--out", at("bad")}).code == 2);
    CHECK(compose({"--method", "map", "--m", "8", "--ratio", "0.01", "--out", at("bad")}).code == 2);
    CHECK(compose({"--method", "blend", "--out", at("bad")}).code == 2);

    auto ratio = compose({"--method", "map", "--ratio", "0.01", "--base", at("base"), "--out", at("map_ratio")});
    REQUIRE(ratio.code == 0);
    CHECK(contains(ratio.out, "m = "));

    auto tc = cli({"train-composed", "--adapter", at("concat"), "--base", at("base"), "--data", at("data"),
                   "--train-size", "16", "--epochs", "1", "--max-steps", "2", "--dev-limit", "4", "--quiet", "--out",
                   at("concat_trained")});
    REQUIRE(tc.code == 0);
    CHECK(contains(tc.out, "test macro-F1"));

    auto th = cli({"train-composed", "--adapter", at("hub"), "--base", at("base"), "--data", at("data"),
                   "--max-evals", "32", "--objective-sample", "4", "--quiet", "--out", at("hub_trained")});
    REQUIRE(th.code == 0);
    CHECK(contains(th.out, "es: "));
    CHECK(contains(th.out, "coefficient correct "));

    auto tg = cli({"train-composed", "--adapter", at("hub"), "--base", at("base"), "--data", at("data"),
                   "--hub-gradient", "--epochs", "1", "--max-steps", "2", "--dev-limit", "4", "--quiet", "--out",
                   at("hub_grad")});
    REQUIRE(tg.code == 0);
    CHECK(!contains(tg.out, "es: "));

    auto ev = cli({"eval", "--base", at("base"), "--adapter", at("concat_trained"), "--data", at("data"), "--task",
                   "factcheck", "--split", "test", "--out", at("eval.json")});
    REQUIRE(ev.code == 0);
    const auto j = nlohmann::json::parse(slurp(ws() / "eval.json"));
    CHECK(j["count"] == 6);
    CHECK(j["report"]["macro_f1"].get<double>() >= 0.0);
    CHECK(j["trainable"] == 3 * 4 * (16 + 16) * 2);

    auto evg = cli({"eval", "--base", at("base"), "--adapter", at("lora_entity"), "--data", at("data"), "--task",
                    "entity", "--split", "dev"});
    REQUIRE(evg.code == 0);
    CHECK(contains(evg.out, "exact_match"));
}

TEST_CASE("count-params agrees between checkpoints and layouts") {
    REQUIRE(fs::exists(ws() / "map"));
    auto c = cli({"count-params", "--checkpoint", at("map")});
    REQUIRE(c.code == 0);
    CHECK(c.out == "768\n");
    auto l = cli({"count-params", "--method", "map", "--n", "3", "--rank", "4", "--m", "16", "--sites", "2", "--dim",
                  "16"});
    REQUIRE(l.code == 0);
    CHECK(l.out == "768\n");
    auto hub = cli({"count-params", "--method", "hub", "--n", "23", "--rank", "4", "--hub-mode", "global", "--sites",
                    "2", "--dim", "16"});
    CHECK(hub.out == "23\n");
    CHECK(cli({"count-params"}).code == 2);
    CHECK(cli({"count-params", "--method", "map", "--sites", "2"}).code == 2);
}

TEST_CASE("missing inputs and mixed ranks exit 2") {
    CHECK(cli({"train-lora", "--task", "diff", "--data", at("nowhere"), "--out", at("x")}).code == 2);
    CHECK(cli({"train-lora", "--task", "factcheck", "--data", at("data"), "--out", at("x")}).code == 2);

    REQUIRE(cli({"train-lora", "--task", "diff", "--data", at("data"), "--base", at("base"), "--rank", "2",
                 "--epochs", "1", "--max-steps", "1", "--dev-limit", "2", "--quiet", "--out", at("lora_r2")})
                .code == 0);
    const auto mixed = cli({"compose", "--method", "concat", "--adapters", at("lora_entity"), at("lora_r2"), "--out",
                            at("mixed")});
    CHECK(mixed.code == 2);
    CHECK(contains(mixed.err, "rank"));

    std::ofstream(ws() / "bad_plan.json") << R"({"seeds": []})";
    CHECK(cli({"run-experiment", "--plan", at("bad_plan.json"), "--report", at("r")}).code == 2);
    std::ofstream(ws() / "broken_plan.json") << "{";
    CHECK(cli({"run-experiment", "--plan", at("broken_plan.json"), "--report", at("r")}).code == 2);
}

TEST_CASE("a corrupted checkpoint is a runtime failure") {
    REQUIRE(fs::exists(ws() / "concat"));
    fs::copy(ws() / "concat", ws() / "concat_cut", fs::copy_options::recursive);
    fs::resize_file(ws() / "concat_cut" / kWeightsFile, 8);
    CHECK(cli({"count-params", "--checkpoint", at("concat_cut")}).code == 1);
}

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/cli.hpp"

#include "loraforge/errors.hpp"
#include "loraforge/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

namespace loraforge {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

ModelConfig model_config_or_default(const std::string& path) {
    if (path.empty()) return ModelConfig{};
    ModelConfig c = model_config_from_json(read_json_file(path));
    c.validate();
    return c;
}

// The three split files must exist before anything trains.
Corpus require_corpus(const fs::path& dir, TaskKind kind) {
    for (const char* split : {"train", "dev", "test"}) {
        const auto f = dir / (to_string(kind) + "." + split + ".jsonl");
        if (!fs::exists(f)) throw InputError("missing corpus file " + f.string());
    }
    return read_corpus(dir, kind);
}

// Appends one JSON line per record to dir/log.jsonl and echoes epochs.
struct JsonlLog {
    std::ofstream file;
    std::ostream* echo = nullptr;

    JsonlLog(const fs::path& dir, std::ostream* echo_to) : echo(echo_to) {
        fs::create_directories(dir);
        file.open(dir / "log.jsonl", std::ios::trunc);
        if (!file) throw IoError("cannot write " + (dir / "log.jsonl").string());
    }
    LogSink sink() {
        return [this](const LogRecord& r) {
            const auto line = r.to_json();
            file << line << "\n";
            if (echo) *echo << line << "\n";
        };
    }
};

struct TrainFlags {
    double lr = 0.0;
    int grad_accum = 0;
    int epochs = 0;
    int patience = 0;
    int max_steps = -1;
    int dev_limit = -1;
    std::string selection;
    std::string decode;

    void add(CLI::App* cmd) {
        cmd->add_option("--lr", lr, "Peak learning rate");
        cmd->add_option("--grad-accum", grad_accum, "Examples per optimizer step");
        cmd->add_option("--epochs", epochs, "Maximum epochs");
        cmd->add_option("--patience", patience, "Early-stopping patience in epochs");
        cmd->add_option("--max-steps", max_steps, "Cap on optimizer steps (0 = none)");
        cmd->add_option("--dev-limit", dev_limit, "Dev instances scored per epoch (0 = all)");
        cmd->add_option("--selection", selection, "macro_f1, loss, token_acc or exact_match");
        cmd->add_option("--decode", decode, "constrained or free label decoding");
    }
    TrainConfig apply(TrainConfig c) const {
        if (lr > 0) c.lr = lr;
        if (grad_accum > 0) c.grad_accum = grad_accum;
        if (epochs > 0) c.epochs = epochs;
        if (patience > 0) c.patience = patience;
        if (max_steps >= 0) c.max_steps = max_steps;
        if (dev_limit >= 0) c.dev_limit = dev_limit;
        if (!selection.empty()) c.selection_metric = selection_metric_from_string(selection);
        if (!decode.empty()) c.decode = label_decode_from_string(decode);
        c.validate();
        return c;
    }
};

double helper_rms(const std::vector<AdapterSet<float>>& sets, bool a_side) {
    double ss = 0.0;
    double count = 0.0;
    for (const auto& s : sets)
        for (const auto& p : s.pairs) {
            const auto& v = a_side ? p.A.value : p.B.value;
            ss += static_cast<double>(v.squaredNorm());
            count += static_cast<double>(v.size());
        }
    return count > 0 ? std::sqrt(ss / count) : 0.0;
}

SaveOptions adapter_save_options(const ModelConfig& mc, SeedProvenance seeds) {
    SaveOptions opts;
    opts.model_config = mc;
    opts.seed_provenance = std::move(seeds);
    return opts;
}

ModelConfig embedded_model_config(const fs::path& adapter_dir) {
    const auto manifest = read_manifest(adapter_dir);
    if (!manifest.config.contains("model"))
        throw ConfigError(adapter_dir.string() + ": adapter checkpoint carries no model config");
    return model_config_from_json(manifest.config.at("model"));
}

void print_report(std::ostream& out, const ojson& j) { out << j.dump(2) << "\n"; }

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"loraforge: LoRA composition on a small deterministic transformer", "loraforge"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every command");

    // gen-data
    std::string gd_task, gd_out, gd_ratios;
    int gd_n = 0;
    std::uint64_t gd_seed = 42;
    auto* gen = app.add_subcommand("gen-data", "Generate task corpora as jsonl splits");
    gen->add_option("--task", gd_task, "diff, entity, correct, factcheck, pretrain or all")->required();
    gen->add_option("--n", gd_n, "Instances per task")->required();
    gen->add_option("--seed", gd_seed, "Generator seed");
    gen->add_option("--ratios", gd_ratios, "train,dev,test split ratios (default 0.8,0.1,0.1)");
    gen->add_option("--out", gd_out, "Output directory")->required();

    // pretrain-base
    std::string pb_config, pb_out;
    PretrainConfig pb;
    auto* pre = app.add_subcommand("pretrain-base", "Pretrain the base model on the generic mix");
    pre->add_option("--model-config", pb_config, "ModelConfig JSON (default: desk config)");
    pre->add_option("--n", pb.corpus_n, "Pretraining instances");
    pre->add_option("--seed", pb.seed, "Model init, corpus and shuffle seed");
    pre->add_option("--lr", pb.lr, "Peak learning rate");
    pre->add_option("--grad-accum", pb.grad_accum, "Examples per optimizer step");
    pre->add_option("--out", pb_out, "Checkpoint directory")->required();

    // train-lora
    std::string tl_task, tl_data, tl_config, tl_base, tl_out;
    int tl_rank = 4;
    double tl_alpha = 8.0;
    std::uint64_t tl_seed = 42;
    TrainFlags tl_flags;
    bool tl_quiet = false;
    auto* tl = app.add_subcommand("train-lora", "Train one LoRA adapter set on a helper task");
    tl->add_option("--task", tl_task, "diff, entity or correct")->required();
    tl->add_option("--data", tl_data, "Directory with {task}.{split}.jsonl")->required();
    tl->add_option("--base", tl_base, "Base model checkpoint directory");
    tl->add_option("--model-config", tl_config, "ModelConfig JSON for a fresh base when --base is absent");
    tl->add_option("--rank", tl_rank, "LoRA rank");
    tl->add_option("--alpha", tl_alpha, "LoRA alpha");
    tl->add_option("--seed", tl_seed, "Adapter init and shuffle seed");
    tl->add_flag("--quiet", tl_quiet, "Do not echo log records");
    tl->add_option("--out", tl_out, "Checkpoint directory")->required();
    tl_flags.add(tl);

    // compose
    std::string co_method, co_base, co_init = "zero", co_hub_mode = "per_site", co_out;
    std::vector<std::string> co_adapters;
    std::optional<int> co_m;
    std::optional<double> co_ratio;
    int co_distractors = 0;
    double co_distractor_std = 0.0, co_coeff = 0.0;
    std::uint64_t co_seed = 42;
    auto* co = app.add_subcommand("compose", "Build an untrained composed adapter");
    co->add_option("--method", co_method, "hub, concat or map")->required();
    co->add_option("--adapters", co_adapters, "Adapter checkpoint directories")->required();
    auto* m_opt = co->add_option("--m", co_m, "Mapping dimension for map");
    co->add_option("--ratio", co_ratio, "Trainable/total ratio used to size m")->excludes(m_opt);
    co->add_option("--init", co_init, "zero or identity map init");
    co->add_option("--distractors", co_distractors, "Random constituents prepended for hub");
    co->add_option("--distractor-std", co_distractor_std, "Distractor entry std (0 = match the adapters)");
    co->add_option("--coeff", co_coeff, "Initial hub coefficient (0 = 1/n)");
    co->add_option("--hub-mode", co_hub_mode, "per_site or global hub coefficients");
    co->add_option("--base", co_base, "Base checkpoint (needed for --ratio)");
    co->add_option("--seed", co_seed, "Distractor and map init seed");
    co->add_option("--out", co_out, "Checkpoint directory")->required();

    // train-composed
    std::string tc_adapter, tc_base, tc_data, tc_out;
    std::uint64_t tc_seed = 42;
    int tc_train_size = 0;
    TrainFlags tc_flags;
    EsConfig tc_es;
    bool tc_quiet = false;
    bool tc_hub_gradient = false;
    auto* tcc = app.add_subcommand("train-composed", "Train a composed adapter on factcheck");
    tcc->add_option("--adapter", tc_adapter, "Composed adapter checkpoint")->required();
    tcc->add_option("--base", tc_base, "Base model checkpoint")->required();
    tcc->add_option("--data", tc_data, "Directory with factcheck.{split}.jsonl")->required();
    tcc->add_option("--seed", tc_seed, "Shuffle or ES seed");
    tcc->add_option("--train-size", tc_train_size, "Use only the first N training instances (0 = all)");
    tcc->add_option("--max-evals", tc_es.max_evals, "ES objective evaluations (hub)");
    tcc->add_option("--objective-sample", tc_es.objective_sample, "Training instances in the ES objective (hub)");
    tcc->add_option("--l1", tc_es.l1_penalty, "L1 penalty on hub coefficients");
    tcc->add_flag("--hub-gradient", tc_hub_gradient, "Fit hub coefficients by backpropagation instead of ES");
    tcc->add_flag("--quiet", tc_quiet, "Do not echo log records");
    tcc->add_option("--out", tc_out, "Checkpoint directory")->required();
    tc_flags.add(tcc);

    // eval
    std::string ev_base, ev_adapter, ev_data, ev_task = "factcheck", ev_split = "test", ev_decode = "constrained",
                                              ev_out;
    auto* ev = app.add_subcommand("eval", "Score a base model, optionally with an adapter");
    ev->add_option("--base", ev_base, "Base model checkpoint")->required();
    ev->add_option("--adapter", ev_adapter, "Adapter checkpoint");
    ev->add_option("--data", ev_data, "Corpus directory")->required();
    ev->add_option("--task", ev_task, "Task kind of the corpus");
    ev->add_option("--split", ev_split, "train, dev or test");
    ev->add_option("--decode", ev_decode, "constrained or free (factcheck)");
    ev->add_option("--out", ev_out, "Also write the JSON record here");

    // count-params
    std::string cp_checkpoint, cp_method, cp_config, cp_hub_mode = "per_site";
    int cp_n = 1, cp_rank = 4, cp_m = 0, cp_sites = 0, cp_dim = 0;
    auto* cp = app.add_subcommand("count-params", "Count trainable parameters");
    cp->add_option("--checkpoint", cp_checkpoint, "Model or adapter checkpoint");
    cp->add_option("--method", cp_method, "lora, hub, concat or map");
    cp->add_option("--n", cp_n, "Constituent count");
    cp->add_option("--rank", cp_rank, "Constituent rank");
    cp->add_option("--m", cp_m, "Mapping dimension");
    cp->add_option("--hub-mode", cp_hub_mode, "per_site or global");
    cp->add_option("--sites", cp_sites, "Number of square injection sites (with --dim)");
    cp->add_option("--dim", cp_dim, "Width of each square site");
    cp->add_option("--model-config", cp_config, "Take sites from this ModelConfig instead");

    // run-experiment
    std::string rx_plan, rx_report = "report", rx_work, rx_run_id;
    bool rx_quiet = false;
    auto* rx = app.add_subcommand("run-experiment", "Run the composition grid and write the report");
    rx->add_option("--plan", rx_plan, "ExperimentPlan JSON (default: desk plan)");
    rx->add_option("--report", rx_report, "Report path prefix; writes .md and .json");
    rx->add_option("--work-dir", rx_work, "Root for runs/{run_id}/...");
    rx->add_option("--run-id", rx_run_id, "Run identifier");
    rx->add_flag("--quiet", rx_quiet, "Suppress progress lines");

    std::vector<std::string> argv_storage{"loraforge"};
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_storage) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            SplitRatios ratios;
            if (!gd_ratios.empty()) {
                std::vector<double> v;
                std::stringstream ss(gd_ratios);
                for (std::string part; std::getline(ss, part, ',');) v.push_back(std::stod(part));
                if (v.size() != 3) throw ConfigError("--ratios needs three comma-separated values");
                ratios = {v[0], v[1], v[2]};
            }
            std::vector<TaskKind> kinds;
            if (gd_task == "all")
                kinds.assign(all_task_kinds().begin(), all_task_kinds().end());
            else
                kinds.push_back(task_kind_from_string(gd_task));
            // Generate everything first so a config error writes nothing.
            std::vector<Corpus> corpora;
            for (auto k : kinds) corpora.push_back(gen_corpus(k, gd_n, gd_seed, ratios));
            for (std::size_t i = 0; i < kinds.size(); ++i) {
                write_corpus(gd_out, kinds[i], corpora[i]);
                out << to_string(kinds[i]) << ": " << corpora[i].train.size() << " train, " << corpora[i].dev.size()
                    << " dev, " << corpora[i].test.size() << " test\n";
            }
            return 0;
        }

        if (*pre) {
            const ModelConfig mc = model_config_or_default(pb_config);
            Model<float> model = build_model<float>(mc, pb.seed);
            const Corpus corpus = gen_pretrain_corpus(pb.corpus_n, pb.seed, {0.99, 0.005, 0.005});
            TrainConfig tc;
            tc.lr = pb.lr;
            tc.grad_accum = pb.grad_accum;
            tc.epochs = 1;
            tc.seed = pb.seed;
            tc.dev_limit = 200;
            JsonlLog log(pb_out, nullptr);
            train_model(model, corpus.train, corpus.dev, tc, log.sink());
            SaveOptions opts;
            opts.seed_provenance = {{"model_init", pb.seed}, {"pretrain_corpus", pb.seed}, {"pretrain_shuffle", pb.seed}};
            save(model, pb_out, opts);
            const auto scores = evaluate_generation(model, corpus.test);
            out << "pretrained " << model.parameter_count() << " parameters; held-out exact-match "
                << scores.exact_match << "\n";
            return 0;
        }

        if (*tl) {
            const TaskKind kind = task_kind_from_string(tl_task);
            if (kind == TaskKind::factcheck || kind == TaskKind::pretrain)
                throw ConfigError("train-lora trains helper tasks (diff, entity, correct)");
            const Corpus corpus = require_corpus(tl_data, kind);
            Model<float> base = tl_base.empty() ? build_model<float>(model_config_or_default(tl_config), tl_seed)
                                                : load_model(tl_base);
            ComposedAdapter<float> adapter = init_lora<float>(base.sites, tl_rank, tl_alpha, tl_seed, tl_task);
            TrainConfig tc = tl_flags.apply(desk_plan().helpers.train);
            tc.seed = tl_seed;
            JsonlLog log(tl_out, tl_quiet ? nullptr : &out);
            const auto result = train_adapter(base, adapter, corpus.train, corpus.dev, tc, log.sink());
            save(adapter, tl_out,
                 adapter_save_options(base.config, {{"adapter_init", tl_seed}, {"shuffle", tl_seed}}));
            const auto scores = evaluate_generation(base, corpus.dev, attach(std::as_const(adapter), base));
            out << tl_task << ": " << result.steps << " steps, dev exact-match " << scores.exact_match
                << ", dev token accuracy " << scores.token_accuracy << "\n";
            return 0;
        }

        if (*co) {
            std::vector<AdapterSet<float>> sets;
            for (const auto& dir : co_adapters) sets.push_back(load_adapter_set(dir));
            const ModelConfig mc = embedded_model_config(co_adapters.front());
            for (const auto& s : sets)
                if (s.rank != sets.front().rank)
                    throw CompositionError("adapters have mixed ranks (" + std::to_string(sets.front().rank) + " and " +
                                           std::to_string(s.rank) + ")");
            const Method method = method_from_string(co_method);
            ComposedAdapter<float> composed;
            if (method == Method::hub) {
                std::vector<AdapterSet<float>> all;
                if (co_distractors > 0) {
                    const double a_std = co_distractor_std > 0 ? co_distractor_std : helper_rms(sets, true);
                    const double b_std = co_distractor_std > 0 ? co_distractor_std : helper_rms(sets, false);
                    const auto sites = injection_sites(mc);
                    all = gen_distractor_sets<float>(sites, co_distractors, co_seed, sets.front().rank,
                                                     sets.front().alpha, a_std, b_std);
                }
                all.insert(all.end(), sets.begin(), sets.end());
                const double init = co_coeff != 0.0 ? co_coeff : 1.0 / static_cast<double>(all.size());
                composed = compose_hub(all, init, hub_mode_from_string(co_hub_mode));
                out << "constituents: " << all.size() << "\n";
            } else if (method == Method::concat) {
                composed = compose_concat(sets);
            } else if (method == Method::map) {
                int m = sets.front().rank;
                if (co_m) m = *co_m;
                if (co_ratio) {
                    if (co_base.empty()) throw ConfigError("--ratio needs --base for the total parameter count");
                    const Model<float> base = load_model(co_base);
                    const auto n = static_cast<int>(sets.size());
                    m = map_dim(*co_ratio, base.parameter_count(), n, sets.front().rank,
                                2 * static_cast<std::int64_t>(base.sites.size()));
                    out << "m = " << m << " (ratio " << *co_ratio << " of " << base.parameter_count()
                        << " parameters)\n";
                }
                composed = compose_map(sets, m, map_init_from_string(co_init), co_seed);
            } else {
                throw ConfigError("compose --method must be hub, concat or map");
            }
            save(composed, co_out, adapter_save_options(mc, {{"compose", co_seed}}));
            out << "trainable parameters: " << count_trainable(composed) << "\n";
            return 0;
        }

        if (*tcc) {
            const Model<float> base = load_model(tc_base);
            ComposedAdapter<float> adapter = load_adapter(tc_adapter);
            Corpus corpus = require_corpus(tc_data, TaskKind::factcheck);
            if (tc_train_size > 0 && static_cast<std::size_t>(tc_train_size) < corpus.train.size())
                corpus.train.resize(static_cast<std::size_t>(tc_train_size));
            JsonlLog log(tc_out, tc_quiet ? nullptr : &out);
            auto* hub = std::get_if<HubAdapter<float>>(&adapter);
            if (hub && !tc_hub_gradient) {
                EsConfig es = tc_es;
                es.seed = tc_seed;
                es.validate();
                const auto r = train_hub(base, *hub, corpus.train, es, log.sink());
                out << "es: " << r.evals << " evaluations, best objective " << r.best_value << "\n";
            } else {
                TrainConfig tc = tc_flags.apply(desk_plan().composed);
                tc.seed = tc_seed;
                train_adapter(base, adapter, corpus.train, corpus.dev, tc, log.sink());
            }
            if (hub) {
                // coefficient per constituent, averaged over sites
                const MatrixF& w = hub->coeffs.value;
                for (std::size_t t = 0; t < hub->n(); ++t)
                    out << "coefficient " << hub->constituents[t].task_name << " "
                        << w.col(static_cast<Eigen::Index>(t)).mean() << "\n";
            }
            save(adapter, tc_out, adapter_save_options(base.config, {{"train", tc_seed}}));
            const auto report = evaluate_factcheck(base, corpus.test, desk_plan().composed.decode,
                                                   attach(std::as_const(adapter), base));
            out << "test macro-F1 " << report.macro_f1 << "\n";
            return 0;
        }

        if (*ev) {
            const Model<float> base = load_model(ev_base);
            std::optional<ComposedAdapter<float>> adapter;
            SiteHook<float> hook;
            if (!ev_adapter.empty()) {
                adapter = load_adapter(ev_adapter);
                hook = attach(std::as_const(*adapter), base);
            }
            const TaskKind kind = task_kind_from_string(ev_task);
            const Corpus corpus = require_corpus(ev_data, kind);
            const std::vector<TaskInstance>* split = nullptr;
            if (ev_split == "train") split = &corpus.train;
            else if (ev_split == "dev") split = &corpus.dev;
            else if (ev_split == "test") split = &corpus.test;
            else throw ConfigError("--split must be train, dev or test");
            ojson j;
            j["task"] = to_string(kind);
            j["split"] = ev_split;
            j["count"] = split->size();
            if (kind == TaskKind::factcheck) {
                j["decode"] = ev_decode;
                j["report"] = to_json(evaluate_factcheck(base, *split, label_decode_from_string(ev_decode), hook));
            } else {
                const auto g = evaluate_generation(base, *split, hook);
                j["exact_match"] = g.exact_match;
                j["token_accuracy"] = g.token_accuracy;
            }
            if (adapter) j["trainable"] = count_trainable(*adapter);
            print_report(out, j);
            if (!ev_out.empty()) write_text(ev_out, j.dump(2) + "\n");
            return 0;
        }

        if (*cp) {
            if (!cp_checkpoint.empty()) {
                const auto manifest = read_manifest(cp_checkpoint);
                if (manifest.kind == CheckpointKind::model) {
                    const auto model = load_model(cp_checkpoint);
                    out << model.parameter_count() << "\n";
                } else {
                    out << count_trainable(load_adapter(cp_checkpoint)) << "\n";
                }
                return 0;
            }
            if (cp_method.empty()) throw ConfigError("count-params needs --checkpoint or --method");
            CompositionLayout layout;
            layout.method = method_from_string(cp_method);
            layout.n = cp_n;
            layout.rank = cp_rank;
            layout.m = cp_m;
            layout.hub_mode = hub_mode_from_string(cp_hub_mode);
            if (cp_sites > 0) {
                if (cp_dim < 1) throw ConfigError("--sites needs --dim");
                for (int i = 0; i < cp_sites; ++i)
                    layout.sites.push_back(parse_site("layer" + std::to_string(i) + ".q", cp_dim, cp_dim));
            } else {
                layout.sites = injection_sites(model_config_or_default(cp_config));
            }
            out << count_trainable(layout) << "\n";
            return 0;
        }

        if (*rx) {
            ExperimentPlan plan = rx_plan.empty() ? desk_plan() : plan_from_json(read_json_file(rx_plan));
            if (!rx_work.empty()) plan.work_dir = rx_work;
            if (!rx_run_id.empty()) plan.run_id = rx_run_id;
            plan.validate();
            ProgressFn progress;
            if (!rx_quiet) progress = [&err](const std::string& line) { err << line << std::endl; };
            const auto report = run_experiment(plan, progress);
            write_text(rx_report + ".md", render_markdown(report));
            write_text(rx_report + ".json", to_json(report).dump(2) + "\n");
            out << render_markdown(report);
            return report.all_ok() ? 0 : 1;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace loraforge

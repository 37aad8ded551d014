// SPDX-License-Identifier: Apache-2.0
#include "loraforge/tasks.hpp"

#include "loraforge/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace loraforge {

namespace vocab {

std::string token_name(int token) {
    static const std::array<const char*, 16> kSpecial = {
        "PAD", "BOS",  "EOS",    "SEP",   "TRUE",  "FALSE",   "CLAIM",  "EVID",
        "NONE", "P_SUBJ", "P_REL", "P_OBJ", "OP_COPY", "OP_RECALL", "OP_SORT", "OP_WHO"};
    if (token >= 0 && token < 16) return kSpecial[static_cast<std::size_t>(token)];
    if (is_entity(token)) return "E" + std::to_string(token - kEntityBase);
    if (is_relation(token)) return "R" + std::to_string(token - kRelationBase);
    if (token >= kFillerBase && token < kFillerBase + kFillerCount) return "F" + std::to_string(token - kFillerBase);
    if (token == OP_HAS) return "OP_HAS";
    if (token >= 0 && token < kSize) return "RSV" + std::to_string(token);
    throw InputError("token id " + std::to_string(token) + " outside vocabulary");
}

int token_id(const std::string& name) {
    for (int t = 0; t < kSize; ++t)
        if (token_name(t) == name) return t;
    throw InputError("unknown token name '" + name + "'");
}

}  // namespace vocab

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::diff: return "diff";
        case TaskKind::entity: return "entity";
        case TaskKind::correct: return "correct";
        case TaskKind::factcheck: return "factcheck";
        case TaskKind::pretrain: return "pretrain";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    for (TaskKind k : all_task_kinds())
        if (to_string(k) == s) return k;
    if (s == "pretrain") return TaskKind::pretrain;
    throw ConfigError("unknown task kind '" + s + "' (expected diff, entity, correct or factcheck)");
}

std::string to_string(Label l) { return l == Label::TRUE_ ? "TRUE" : "FALSE"; }

const std::array<TaskKind, 4>& all_task_kinds() {
    static const std::array<TaskKind, 4> kinds = {TaskKind::diff, TaskKind::entity, TaskKind::correct,
                                                  TaskKind::factcheck};
    return kinds;
}

const std::array<TaskKind, 3>& helper_task_kinds() {
    static const std::array<TaskKind, 3> kinds = {TaskKind::diff, TaskKind::entity, TaskKind::correct};
    return kinds;
}

std::vector<Fact> gen_evidence(RngStream& rng, int k_facts) {
    if (k_facts < 1 || k_facts > vocab::kEntityCount)
        throw ConfigError("gen_evidence: k_facts " + std::to_string(k_facts) + " out of range");
    std::vector<Fact> facts;
    for (int i = 0; i < k_facts; ++i) {
        Fact f;
        do {
            f.subject = vocab::entity(static_cast<int>(rng.below(vocab::kEntityCount)));
        } while (std::any_of(facts.begin(), facts.end(), [&](const Fact& g) { return g.subject == f.subject; }));
        do {
            f.relation = vocab::relation(static_cast<int>(rng.below(vocab::kRelationCount)));
            f.object = vocab::entity(static_cast<int>(rng.below(vocab::kEntityCount)));
        } while (std::any_of(facts.begin(), facts.end(), [&](const Fact& g) {
            return g.relation == f.relation && g.object == f.object;
        }));
        facts.push_back(f);
    }
    return facts;
}

ClaimDraw gen_claim(RngStream& rng, const std::vector<Fact>& evidence, std::optional<Label> forced) {
    if (evidence.empty()) throw ContractError("gen_claim: evidence is empty");
    ClaimDraw d;
    d.label = forced ? *forced : (rng.uniform() < 0.5 ? Label::TRUE_ : Label::FALSE_);
    d.source_index = static_cast<std::size_t>(rng.below(evidence.size()));
    d.claim = evidence[d.source_index];
    if (d.label == Label::TRUE_) return d;

    const auto slot = static_cast<Slot>(rng.below(3));
    d.slot = slot;
    std::vector<int> candidates;
    switch (slot) {
        case Slot::subj:
            for (int e = 0; e < vocab::kEntityCount; ++e) {
                const int tok = vocab::entity(e);
                if (std::none_of(evidence.begin(), evidence.end(), [&](const Fact& f) { return f.subject == tok; }))
                    candidates.push_back(tok);
            }
            d.claim.subject = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
            break;
        case Slot::rel:
            for (int r = 0; r < vocab::kRelationCount; ++r)
                if (vocab::relation(r) != d.claim.relation) candidates.push_back(vocab::relation(r));
            d.claim.relation = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
            break;
        case Slot::obj:
            for (int e = 0; e < vocab::kEntityCount; ++e)
                if (vocab::entity(e) != d.claim.object) candidates.push_back(vocab::entity(e));
            d.claim.object = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
            break;
    }
    return d;
}

std::optional<std::size_t> matching_fact(const Fact& claim, const std::vector<Fact>& evidence) {
    for (std::size_t i = 0; i < evidence.size(); ++i)
        if (evidence[i].subject == claim.subject) return i;
    for (std::size_t i = 0; i < evidence.size(); ++i)
        if (evidence[i].relation == claim.relation && evidence[i].object == claim.object) return i;
    return std::nullopt;
}

std::vector<int> render_input(const Fact& claim, const std::vector<Fact>& evidence) {
    std::vector<int> in{vocab::BOS, vocab::CLAIM, claim.subject, claim.relation, claim.object, vocab::EVID};
    for (const auto& f : evidence) {
        in.insert(in.end(), {f.subject, f.relation, f.object, vocab::SEP});
    }
    return in;
}

std::vector<int> oracle_target(TaskKind kind, const Fact& claim, const std::vector<Fact>& evidence) {
    const auto match = matching_fact(claim, evidence);
    const bool verbatim = std::find(evidence.begin(), evidence.end(), claim) != evidence.end();
    switch (kind) {
        case TaskKind::factcheck:
            return {verbatim ? vocab::TRUE_ : vocab::FALSE_, vocab::EOS};
        case TaskKind::diff: {
            if (verbatim) return {vocab::NONE, vocab::EOS};
            if (!match) throw InputError("diff: claim matches no evidence fact");
            const Fact& gold = evidence[*match];
            const std::array<int, 3> markers = {vocab::P_SUBJ, vocab::P_REL, vocab::P_OBJ};
            const auto c = claim.tokens();
            const auto g = gold.tokens();
            for (std::size_t s = 0; s < 3; ++s)
                if (c[s] != g[s]) return {markers[s], c[s], g[s], vocab::EOS};
            return {vocab::NONE, vocab::EOS};
        }
        case TaskKind::entity: {
            std::set<int> in_evidence;
            for (const auto& f : evidence) {
                in_evidence.insert(f.subject);
                in_evidence.insert(f.object);
            }
            std::set<int> shared;
            for (int t : {claim.subject, claim.object})
                if (in_evidence.count(t)) shared.insert(t);
            std::vector<int> out(shared.begin(), shared.end());
            out.push_back(vocab::EOS);
            return out;
        }
        case TaskKind::correct: {
            if (!match) throw InputError("correct: claim matches no evidence fact");
            const Fact& gold = evidence[*match];
            return {gold.subject, gold.relation, gold.object, vocab::EOS};
        }
        case TaskKind::pretrain:
            throw ContractError("oracle_target: pretrain instances are not claim-based");
    }
    return {};
}

TaskInstance render(TaskKind kind, const Fact& claim, const std::vector<Fact>& evidence, Label label) {
    TaskInstance inst;
    inst.kind = kind;
    inst.input_tokens = render_input(claim, evidence);
    inst.target_tokens = oracle_target(kind, claim, evidence);
    inst.label = label;
    return inst;
}

Corpus gen_corpus(TaskKind kind, int n, std::uint64_t seed, SplitRatios ratios) {
    if (kind == TaskKind::pretrain) return gen_pretrain_corpus(n, seed, ratios);
    if (n < 1) throw ConfigError("gen_corpus: n must be positive");
    if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0 ||
        std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9)
        throw ConfigError("gen_corpus: split ratios must be non-negative and sum to 1");
    const int n_train = static_cast<int>(std::llround(n * ratios.train));
    const int n_dev = static_cast<int>(std::llround(n * ratios.dev));
    const int n_test = n - n_train - n_dev;
    if (n_test < 0) throw ConfigError("gen_corpus: split ratios round past n");
    const bool stratified = kind == TaskKind::factcheck;
    if (stratified && (n_train < 2 || n_dev < 2 || n_test < 2))
        throw ConfigError("gen_corpus: n=" + std::to_string(n) + " too small to stratify factcheck splits (" +
                          std::to_string(n_train) + "/" + std::to_string(n_dev) + "/" + std::to_string(n_test) +
                          ")");

    const auto kind_index = static_cast<std::uint64_t>(kind);
    RngStream rng(seed ^ (0x9e3779b97f4a7c15ULL * (kind_index + 1)));
    Corpus corpus;
    const std::array<std::pair<std::vector<TaskInstance>*, int>, 3> splits = {
        std::pair{&corpus.train, n_train}, std::pair{&corpus.dev, n_dev}, std::pair{&corpus.test, n_test}};
    for (const auto& [split, count] : splits) {
        split->reserve(static_cast<std::size_t>(count));
        for (int local = 0; local < count; ++local) {
            const int k = 2 + static_cast<int>(rng.below(3));
            const auto evidence = gen_evidence(rng, k);
            std::optional<Label> forced;
            if (stratified) forced = local % 2 == 0 ? Label::TRUE_ : Label::FALSE_;
            const auto draw = gen_claim(rng, evidence, forced);
            split->push_back(render(kind, draw.claim, evidence, draw.label));
        }
    }
    return corpus;
}

namespace {

TaskInstance pretrain_instance(RngStream& rng, int index) {
    TaskInstance inst;
    inst.kind = TaskKind::pretrain;
    auto& in = inst.input_tokens;
    auto& out = inst.target_tokens;
    in.push_back(vocab::BOS);
    switch (index % 5) {
        case 0: {
            in.push_back(vocab::OP_COPY);
            const int len = 3 + static_cast<int>(rng.below(7));
            // entities, relations and fillers are contiguous ids 16..47
            for (int i = 0; i < len; ++i)
                out.push_back(vocab::kEntityBase + static_cast<int>(rng.below(32)));
            in.insert(in.end(), out.begin(), out.end());
            in.push_back(vocab::SEP);
            break;
        }
        case 1:
        case 3: {
            // every fact is queried once, in shuffled order; the queried
            // token itself is unpredictable, the rest is recall
            const bool by_subject = index % 5 == 1;
            in.push_back(by_subject ? vocab::OP_RECALL : vocab::OP_WHO);
            const int k = 2 + static_cast<int>(rng.below(3));
            auto facts = gen_evidence(rng, k);
            for (const auto& f : facts) {
                const auto t = f.tokens();
                in.insert(in.end(), t.begin(), t.end());
                in.push_back(vocab::SEP);
            }
            for (std::size_t i = facts.size(); i > 1; --i) std::swap(facts[i - 1], facts[rng.below(i)]);
            for (const auto& f : facts) {
                if (by_subject)
                    out.insert(out.end(), {f.subject, f.relation, f.object});
                else
                    out.insert(out.end(), {f.relation, f.object, f.subject});
            }
            break;
        }
        case 4: {
            in.push_back(vocab::OP_HAS);
            const int len = 2 + static_cast<int>(rng.below(7));
            std::vector<int> items;
            for (int i = 0; i < len; ++i)
                items.push_back(vocab::kEntityBase + static_cast<int>(rng.below(32)));
            const bool present = rng.uniform() < 0.5;
            int query = items[rng.below(items.size())];
            if (!present)
                while (std::find(items.begin(), items.end(), query) != items.end())
                    query = vocab::kEntityBase + static_cast<int>(rng.below(32));
            in.push_back(query);
            in.push_back(vocab::SEP);
            in.insert(in.end(), items.begin(), items.end());
            in.push_back(vocab::SEP);
            out.push_back(present ? vocab::TRUE_ : vocab::FALSE_);
            break;
        }
        case 2: {
            in.push_back(vocab::OP_SORT);
            const int len = 2 + static_cast<int>(rng.below(6));
            std::set<int> seen;
            for (int i = 0; i < len; ++i) {
                const int e = vocab::entity(static_cast<int>(rng.below(vocab::kEntityCount)));
                in.push_back(e);
                seen.insert(e);
            }
            in.push_back(vocab::SEP);
            out.assign(seen.begin(), seen.end());
            break;
        }
    }
    out.push_back(vocab::EOS);
    return inst;
}

}  // namespace

Corpus gen_pretrain_corpus(int n, std::uint64_t seed, SplitRatios ratios) {
    if (n < 3) throw ConfigError("gen_pretrain_corpus: n must be at least 3");
    if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0 ||
        std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9)
        throw ConfigError("gen_pretrain_corpus: split ratios must be non-negative and sum to 1");
    const int n_train = static_cast<int>(std::llround(n * ratios.train));
    const int n_dev = static_cast<int>(std::llround(n * ratios.dev));
    RngStream rng(seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(TaskKind::pretrain) + 1)));
    Corpus corpus;
    for (int i = 0; i < n; ++i) {
        auto inst = pretrain_instance(rng, i);
        auto& split = i < n_train ? corpus.train : i < n_train + n_dev ? corpus.dev : corpus.test;
        split.push_back(std::move(inst));
    }
    return corpus;
}

std::string render_text(const TaskInstance& inst) {
    std::ostringstream os;
    for (std::size_t i = 0; i < inst.input_tokens.size(); ++i)
        os << (i ? " " : "") << vocab::token_name(inst.input_tokens[i]);
    os << " =>";
    for (int t : inst.target_tokens) os << " " << vocab::token_name(t);
    return os.str();
}

std::string to_jsonl_line(const TaskInstance& inst) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(inst.kind);
    j["input_tokens"] = inst.input_tokens;
    j["target_tokens"] = inst.target_tokens;
    j["label"] = inst.label ? nlohmann::ordered_json(to_string(*inst.label)) : nlohmann::ordered_json(nullptr);
    j["text"] = render_text(inst);
    return j.dump();
}

TaskInstance from_jsonl_line(const std::string& line) {
    try {
        const auto j = nlohmann::json::parse(line);
        TaskInstance inst;
        inst.kind = task_kind_from_string(j.at("kind").get<std::string>());
        inst.input_tokens = j.at("input_tokens").get<std::vector<int>>();
        inst.target_tokens = j.at("target_tokens").get<std::vector<int>>();
        if (j.contains("label") && !j["label"].is_null()) {
            const auto l = j["label"].get<std::string>();
            if (l != "TRUE" && l != "FALSE") throw InputError("bad label '" + l + "'");
            inst.label = l == "TRUE" ? Label::TRUE_ : Label::FALSE_;
        }
        return inst;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed corpus record: ") + e.what());
    }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& instances) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& inst : instances) out << to_jsonl_line(inst) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<TaskInstance> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus file " + path.string());
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(from_jsonl_line(line));
    }
    return out;
}

void write_corpus(const std::filesystem::path& dir, TaskKind kind, const Corpus& corpus) {
    std::filesystem::create_directories(dir);
    const auto name = to_string(kind);
    write_jsonl(dir / (name + ".train.jsonl"), corpus.train);
    write_jsonl(dir / (name + ".dev.jsonl"), corpus.dev);
    write_jsonl(dir / (name + ".test.jsonl"), corpus.test);
}

Corpus read_corpus(const std::filesystem::path& dir, TaskKind kind) {
    const auto name = to_string(kind);
    Corpus c;
    c.train = read_jsonl(dir / (name + ".train.jsonl"));
    c.dev = read_jsonl(dir / (name + ".dev.jsonl"));
    c.test = read_jsonl(dir / (name + ".test.jsonl"));
    return c;
}

template <typename S>
std::vector<AdapterSet<S>> gen_distractor_sets(const std::vector<InjectionSite>& sites, int count, std::uint64_t seed,
                                               int rank, double alpha, double a_std, double b_std) {
    if (count < 1) throw ConfigError("gen_distractor_sets: count must be >= 1");
    if (rank < 1) throw ConfigError("gen_distractor_sets: rank must be >= 1");
    RngStream rng(seed);
    std::vector<AdapterSet<S>> out;
    for (int i = 0; i < count; ++i) {
        AdapterSet<S> set;
        set.task_name = "distractor" + std::to_string(i);
        set.rank = rank;
        set.alpha = alpha;
        for (const auto& s : sites) {
            LoraPair<S> p;
            p.site = s.id;
            p.rank = rank;
            p.alpha = alpha;
            p.A = Parameter<S>(s.id + ".A", gaussian_matrix<S>(s.in_dim, rank, rng, 0.0, a_std), false);
            p.B = Parameter<S>(s.id + ".B", gaussian_matrix<S>(rank, s.out_dim, rng, 0.0, b_std), false);
            set.pairs.push_back(std::move(p));
        }
        out.push_back(std::move(set));
    }
    return out;
}

template std::vector<AdapterSet<float>> gen_distractor_sets<float>(const std::vector<InjectionSite>&, int,
                                                                   std::uint64_t, int, double, double, double);
template std::vector<AdapterSet<double>> gen_distractor_sets<double>(const std::vector<InjectionSite>&, int,
                                                                     std::uint64_t, int, double, double, double);

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/tasks.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace loraforge;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<Fact> facts_of(const TaskInstance& inst) {
    std::vector<Fact> out;
    for (std::size_t i = 6; i + 3 < inst.input_tokens.size(); i += 4)
        out.push_back({inst.input_tokens[i], inst.input_tokens[i + 1], inst.input_tokens[i + 2]});
    return out;
}

Fact claim_of(const TaskInstance& inst) { return {inst.input_tokens[2], inst.input_tokens[3], inst.input_tokens[4]}; }

}  // namespace

TEST_CASE("vocabulary table") {
    CHECK(vocab::token_name(0) == "PAD");
    CHECK(vocab::token_name(4) == "TRUE");
    CHECK(vocab::token_name(11) == "P_OBJ");
    CHECK(vocab::token_name(16) == "E0");
    CHECK(vocab::token_name(31) == "E15");
    CHECK(vocab::token_name(32) == "R0");
    CHECK(vocab::token_name(47) == "F7");
    std::set<std::string> names;
    for (int t = 0; t < vocab::kSize; ++t) {
        names.insert(vocab::token_name(t));
        CHECK(vocab::token_id(vocab::token_name(t)) == t);
    }
    CHECK(names.size() == 64);
    CHECK_THROWS_AS(vocab::token_name(64), InputError);
}

TEST_CASE("evidence has distinct subjects and is deterministic") {
    RngStream a(42), b(42);
    const auto e = gen_evidence(a, 2);
    REQUIRE(e.size() == 2);
    CHECK(e[0].subject != e[1].subject);
    CHECK(e == gen_evidence(b, 2));
    RngStream rng(1);
    int collisions = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto f = gen_evidence(rng, 2 + static_cast<int>(rng.below(3)));
        std::set<int> subjects;
        for (const auto& x : f) {
            subjects.insert(x.subject);
            CHECK(vocab::is_entity(x.subject));
            CHECK(vocab::is_relation(x.relation));
            CHECK(vocab::is_entity(x.object));
        }
        collisions += static_cast<int>(f.size() - subjects.size());
    }
    CHECK(collisions == 0);
}

TEST_CASE("claims: TRUE copies a fact, FALSE corrupts exactly one slot") {
    RngStream rng(3);
    int n_true = 0, n_false = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto ev = gen_evidence(rng, 3);
        const auto d = gen_claim(rng, ev);
        const Fact& src = ev[d.source_index];
        const auto c = d.claim.tokens(), s = src.tokens();
        int differing = 0;
        for (int k = 0; k < 3; ++k) differing += c[static_cast<std::size_t>(k)] != s[static_cast<std::size_t>(k)];
        if (d.label == Label::TRUE_) {
            ++n_true;
            CHECK(std::find(ev.begin(), ev.end(), d.claim) != ev.end());
            CHECK(!d.slot);
        } else {
            ++n_false;
            CHECK(differing == 1);
            REQUIRE(d.slot);
            if (*d.slot == Slot::subj)
                for (const auto& f : ev) CHECK(f.subject != d.claim.subject);
            else
                CHECK(matching_fact(d.claim, ev) == d.source_index);
        }
    }
    CHECK(std::abs(n_true - n_false) < 200);
}

TEST_CASE("render targets") {
    const std::vector<Fact> ev{{vocab::entity(3), vocab::relation(1), vocab::entity(9)},
                               {vocab::entity(5), vocab::relation(2), vocab::entity(6)}};
    const Fact true_claim = ev[1];
    CHECK(render(TaskKind::diff, true_claim, ev, Label::TRUE_).target_tokens ==
          std::vector<int>{vocab::NONE, vocab::EOS});
    CHECK(render(TaskKind::factcheck, true_claim, ev, Label::TRUE_).target_tokens ==
          std::vector<int>{vocab::TRUE_, vocab::EOS});
    const Fact wrong{vocab::entity(3), vocab::relation(1), vocab::entity(7)};
    CHECK(render(TaskKind::entity, wrong, ev, Label::FALSE_).target_tokens == std::vector<int>{vocab::entity(3), vocab::EOS});
    CHECK(render(TaskKind::diff, wrong, ev, Label::FALSE_).target_tokens ==
          std::vector<int>{vocab::P_OBJ, vocab::entity(7), vocab::entity(9), vocab::EOS});
    CHECK(render(TaskKind::correct, wrong, ev, Label::FALSE_).target_tokens ==
          std::vector<int>{vocab::entity(3), vocab::relation(1), vocab::entity(9), vocab::EOS});
    CHECK(render(TaskKind::factcheck, wrong, ev, Label::FALSE_).target_tokens ==
          std::vector<int>{vocab::FALSE_, vocab::EOS});
    const auto in = render_input(wrong, ev);
    CHECK(in.front() == vocab::BOS);
    CHECK(in.back() == vocab::SEP);
    CHECK(in.size() == 6 + 4 * 2);
}

TEST_CASE("every helper target equals an independent oracle and factcheck labels agree") {
    for (auto kind : all_task_kinds()) {
        const auto c = gen_corpus(kind, 600, 11);
        for (const auto* split : {&c.train, &c.dev, &c.test})
            for (const auto& inst : *split) {
                const Fact claim = claim_of(inst);
                const auto ev = facts_of(inst);
                const bool in_ev = std::find(ev.begin(), ev.end(), claim) != ev.end();
                REQUIRE(inst.label);
                CHECK((*inst.label == Label::TRUE_) == in_ev);
                CHECK(inst.target_tokens.back() == vocab::EOS);
                switch (kind) {
                    case TaskKind::diff: CHECK((inst.target_tokens[0] == vocab::NONE) == in_ev); break;
                    case TaskKind::factcheck:
                        CHECK(inst.target_tokens[0] == (in_ev ? vocab::TRUE_ : vocab::FALSE_));
                        break;
                    case TaskKind::correct: {
                        const std::vector<int> claim_tokens{claim.subject, claim.relation, claim.object, vocab::EOS};
                        CHECK((inst.target_tokens == claim_tokens) == in_ev);
                        break;
                    }
                    case TaskKind::entity: {
                        std::set<int> ents;
                        for (const auto& f : ev) ents.insert({f.subject, f.object});
                        std::vector<int> want;
                        for (int t : std::set<int>{claim.subject, claim.object})
                            if (ents.count(t)) want.push_back(t);
                        want.push_back(vocab::EOS);
                        CHECK(inst.target_tokens == want);
                        break;
                    }
                    default: break;
                }
            }
    }
}

TEST_CASE("split sizes, stratification and determinism") {
    const auto c = gen_corpus(TaskKind::factcheck, 2550, 42);
    CHECK(c.train.size() == 2040);
    CHECK(c.dev.size() == 255);
    CHECK(c.test.size() == 255);
    const auto d = gen_corpus(TaskKind::factcheck, 2550, 42, {2036.0 / 2550, 258.0 / 2550, 256.0 / 2550});
    CHECK(d.train.size() == 2036);
    int t = 0;
    for (const auto& i : d.train) t += *i.label == Label::TRUE_;
    CHECK(t == 1018);
    for (const auto* split : {&c.train, &c.dev, &c.test}) {
        int n_true = 0;
        for (const auto& i : *split) n_true += *i.label == Label::TRUE_;
        CHECK(std::abs(2 * n_true - static_cast<int>(split->size())) <= 1);
    }
    CHECK(gen_corpus(TaskKind::entity, 300, 5).train == gen_corpus(TaskKind::entity, 300, 5).train);
    CHECK(gen_corpus(TaskKind::entity, 300, 5).train != gen_corpus(TaskKind::entity, 300, 6).train);
    CHECK_THROWS_AS(gen_corpus(TaskKind::factcheck, 3, 42), ConfigError);
    CHECK_THROWS_AS(gen_corpus(TaskKind::diff, 100, 42, {0.5, 0.5, 0.5}), ConfigError);
}

TEST_CASE("jsonl round trip and byte-identical files") {
    const auto dir = fs::temp_directory_path() / "loraforge_test_tasks";
    fs::remove_all(dir);
    const auto c = gen_corpus(TaskKind::diff, 200, 9);
    write_corpus(dir / "a", TaskKind::diff, c);
    write_corpus(dir / "b", TaskKind::diff, gen_corpus(TaskKind::diff, 200, 9));
    for (const char* s : {"diff.train.jsonl", "diff.dev.jsonl", "diff.test.jsonl"})
        CHECK(slurp(dir / "a" / s) == slurp(dir / "b" / s));
    const auto back = read_corpus(dir / "a", TaskKind::diff);
    CHECK(back.train == c.train);
    CHECK(back.test == c.test);
    const auto line = to_jsonl_line(c.train[0]);
    CHECK(line.find("\"text\":\"BOS CLAIM") != std::string::npos);
    CHECK_THROWS_AS(from_jsonl_line("{not json"), InputError);
    fs::remove_all(dir);
}

TEST_CASE("pretraining mix cycles its five operations") {
    const auto c = gen_pretrain_corpus(500, 42, {0.8, 0.1, 0.1});
    CHECK(c.train.size() == 400);
    const int ops[] = {vocab::OP_COPY, vocab::OP_RECALL, vocab::OP_SORT, vocab::OP_WHO, vocab::OP_HAS};
    for (std::size_t i = 0; i < c.train.size(); ++i) {
        const auto& inst = c.train[i];
        CHECK(inst.input_tokens[1] == ops[i % 5]);
        CHECK(inst.target_tokens.back() == vocab::EOS);
        CHECK(inst.input_tokens.back() == vocab::SEP);
        // none of the mix renders a claim
        CHECK(std::find(inst.input_tokens.begin(), inst.input_tokens.end(), vocab::CLAIM) == inst.input_tokens.end());
    }
}

TEST_CASE("distractors carry nonzero deltas") {
    const auto sites = injection_sites(ModelConfig{});
    const auto d20 = gen_distractor_sets<float>(sites, 20, 42, 4, 8.0);
    CHECK(d20.size() == 20);
    CHECK(gen_distractor_sets<float>(sites, 3, 42, 4, 8.0).size() == 3);
    for (const auto& s : d20)
        for (const auto& p : s.pairs) {
            CHECK(!p.B.value.isZero());
            CHECK(!(p.A.value * p.B.value).isZero());
        }
    CHECK_THROWS_AS(gen_distractor_sets<float>(sites, 0, 42, 4, 8.0), ConfigError);
}

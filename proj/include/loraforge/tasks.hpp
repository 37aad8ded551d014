// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/adapters.hpp"
#include "loraforge/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace loraforge {

// Fixed 64-token vocabulary shared by every implementation of the corpus.
namespace vocab {
inline constexpr int kSize = 64;
inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int EOS = 2;
inline constexpr int SEP = 3;
inline constexpr int TRUE_ = 4;
inline constexpr int FALSE_ = 5;
inline constexpr int CLAIM = 6;
inline constexpr int EVID = 7;
inline constexpr int NONE = 8;
inline constexpr int P_SUBJ = 9;
inline constexpr int P_REL = 10;
inline constexpr int P_OBJ = 11;
// Instruction tokens of the base-model pretraining mix.
inline constexpr int OP_COPY = 12;
inline constexpr int OP_RECALL = 13;
inline constexpr int OP_SORT = 14;
inline constexpr int OP_WHO = 15;
inline constexpr int OP_HAS = 48;
inline constexpr int kEntityBase = 16;
inline constexpr int kEntityCount = 16;
inline constexpr int kRelationBase = 32;
inline constexpr int kRelationCount = 8;
inline constexpr int kFillerBase = 40;
inline constexpr int kFillerCount = 8;

constexpr int entity(int i) { return kEntityBase + i; }
constexpr int relation(int i) { return kRelationBase + i; }
constexpr bool is_entity(int t) { return t >= kEntityBase && t < kEntityBase + kEntityCount; }
constexpr bool is_relation(int t) { return t >= kRelationBase && t < kRelationBase + kRelationCount; }

std::string token_name(int token);
// Inverse of token_name; throws InputError for unknown names.
int token_id(const std::string& name);
}  // namespace vocab

enum class TaskKind { diff, entity, correct, factcheck, pretrain };
enum class Label { TRUE_, FALSE_ };
enum class Slot { subj, rel, obj };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);
std::string to_string(Label l);
const std::array<TaskKind, 4>& all_task_kinds();
// The three reasoning kinds, in composition order.
const std::array<TaskKind, 3>& helper_task_kinds();

struct Fact {
    int subject = 0;
    int relation = 0;
    int object = 0;

    std::array<int, 3> tokens() const { return {subject, relation, object}; }
    bool operator==(const Fact&) const = default;
};

struct ClaimDraw {
    Fact claim;
    Label label = Label::TRUE_;
    std::optional<Slot> slot;      // corrupted slot for FALSE claims
    std::size_t source_index = 0;  // evidence fact the claim was derived from
};

struct TaskInstance {
    TaskKind kind = TaskKind::factcheck;
    std::vector<int> input_tokens;
    std::vector<int> target_tokens;
    std::optional<Label> label;

    bool operator==(const TaskInstance&) const = default;
};

struct Corpus {
    std::vector<TaskInstance> train, dev, test;
};

struct SplitRatios {
    double train = 0.8;
    double dev = 0.1;
    double test = 0.1;
};

// k facts with pairwise-distinct subjects and pairwise-distinct
// (relation, object) pairs, drawn by rejection in the order subject,
// relation, object.
std::vector<Fact> gen_evidence(RngStream& rng, int k_facts);

// TRUE: copy of a uniformly chosen evidence fact. FALSE: the copy with one
// uniformly chosen slot replaced by a different token of the same category;
// a replaced subject is never an evidence subject. `forced` skips the label
// coin flip.
ClaimDraw gen_claim(RngStream& rng, const std::vector<Fact>& evidence, std::optional<Label> forced = std::nullopt);

// The evidence fact a claim refers to: same subject, else same
// (relation, object). Nullopt when neither matches.
std::optional<std::size_t> matching_fact(const Fact& claim, const std::vector<Fact>& evidence);

std::vector<int> render_input(const Fact& claim, const std::vector<Fact>& evidence);

// Ground-truth target computed from tokens alone.
std::vector<int> oracle_target(TaskKind kind, const Fact& claim, const std::vector<Fact>& evidence);

TaskInstance render(TaskKind kind, const Fact& claim, const std::vector<Fact>& evidence, Label label);

// Splits cover generation indices [0, n_train), [n_train, n_train + n_dev),
// and the rest. Factcheck labels alternate TRUE/FALSE within each split.
// Throws ConfigError for bad ratios or when a factcheck split has fewer
// than two instances.
Corpus gen_corpus(TaskKind kind, int n, std::uint64_t seed, SplitRatios ratios = {});

// Generic mix used to pretrain the base model before any adapter work:
//   copy:   BOS OP_COPY t1..tL SEP            -> t1..tL EOS
//   recall: BOS OP_RECALL f1 SEP .. fk SEP -> each fact as s r o, shuffled, EOS
//   sort:   BOS OP_SORT e1..eL SEP            -> distinct e ascending, EOS
//   who:    BOS OP_WHO f1 SEP .. fk SEP    -> each fact as r o s, shuffled, EOS
//   has:    BOS OP_HAS x SEP t1..tL SEP      -> TRUE or FALSE (x among t), EOS
// None of these reads a claim, so the helper and factcheck tasks stay
// unsolved by the base model. Instances cycle copy, recall, sort, who, has.
Corpus gen_pretrain_corpus(int n, std::uint64_t seed, SplitRatios ratios = {});

// Human-readable rendering: "<input> => <target>".
std::string render_text(const TaskInstance& inst);

std::string to_jsonl_line(const TaskInstance& inst);
TaskInstance from_jsonl_line(const std::string& line);
void write_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& instances);
std::vector<TaskInstance> read_jsonl(const std::filesystem::path& path);

// Writes {kind}.{train,dev,test}.jsonl into dir.
void write_corpus(const std::filesystem::path& dir, TaskKind kind, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir, TaskKind kind);

// Untrained stand-ins for unrelated-task adapters: A ~ Gaussian(0, a_std),
// B ~ Gaussian(0, b_std), so every distractor has a nonzero delta.
template <typename S>
std::vector<AdapterSet<S>> gen_distractor_sets(const std::vector<InjectionSite>& sites, int count, std::uint64_t seed,
                                               int rank, double alpha, double a_std = 0.02, double b_std = 0.02);

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "loraforge/autodiff.hpp"
#include "loraforge/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace loraforge {

// qv: adapters at query/value projections only. full: query, key, value,
// output and both feed-forward projections.
enum class SitePolicy { qv, full };

enum class Projection { q, k, v, o, ff_up, ff_down };

std::string to_string(SitePolicy p);
SitePolicy site_policy_from_string(const std::string& s);
std::string to_string(Projection p);
Projection projection_from_string(const std::string& s);

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 128;
    int max_seq = 48;
    SitePolicy site_policy = SitePolicy::qv;

    // Throws ConfigError.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct InjectionSite {
    std::string id;  // "layer{i}.{proj}"
    int layer = 0;
    Projection proj = Projection::q;
    int in_dim = 0;
    int out_dim = 0;
};

// Layer-major, then q, k, v, o, ff_up, ff_down filtered by the policy.
std::vector<InjectionSite> injection_sites(const ModelConfig& config);

// Rebuilds a site from its "layer{i}.{proj}" id. Throws ConfigError on a
// malformed id.
InjectionSite parse_site(const std::string& id, int in_dim, int out_dim);

template <typename S>
struct Block {
    Parameter<S> ln1_gain, ln1_bias;
    Parameter<S> wq, wk, wv, wo;
    Parameter<S> ln2_gain, ln2_bias;
    Parameter<S> ff_up, ff_down;

    const Parameter<S>& projection(Projection p) const;
    Parameter<S>& projection(Projection p);
};

// Pre-norm decoder-only transformer with learned positions and untied
// input/output embeddings. Linear projections carry no bias.
template <typename S>
struct Model {
    ModelConfig config;
    std::vector<InjectionSite> sites;
    Parameter<S> tok_emb;  // [vocab x d]
    Parameter<S> pos_emb;  // [max_seq x d]
    std::vector<Block<S>> blocks;
    Parameter<S> lnf_gain, lnf_bias;
    Parameter<S> lm_head;  // [d x vocab]

    ParamRefs<S> parameters();
    ConstParamRefs<S> parameters() const;
    std::int64_t parameter_count() const;
    void set_trainable(bool trainable);
};

// Adapter hook: returns the delta added to the output of site `site`
// (an index into Model::sites) for the site input h.
template <typename S>
using SiteHook = std::function<Var<S>(Tape<S>&, std::size_t site, const Var<S>& h)>;

// Gaussian(0, 0.02) weights drawn in parameter order from RngStream(seed);
// layer-norm gain 1, bias 0; everything frozen.
template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed);

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m);

// Logits [len x vocab]. Parameters are bound as trainable leaves only when
// the model is passed non-const and the parameter is flagged trainable.
template <typename S>
Var<S> forward(Tape<S>& tape, const Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook = {});
template <typename S>
Var<S> forward(Tape<S>& tape, Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook = {});

// Each sequence is run independently on the same tape.
template <typename S>
std::vector<Var<S>> forward_batch(Tape<S>& tape, const Model<S>& model, const std::vector<std::vector<int>>& batch,
                                  const SiteHook<S>& hook = {});

// Mean next-token cross-entropy over positions with mask set.
template <typename S>
Var<S> lm_loss(const Var<S>& logits, std::span<const int> targets, const std::vector<bool>& mask);

// Teacher-forced loss of prompt ++ target where only target tokens are scored.
template <typename S, typename M>
Var<S> sequence_loss(Tape<S>& tape, M& model, std::span<const int> prompt, std::span<const int> target,
                     const SiteHook<S>& hook = {});

// Last-position logits as a plain row.
template <typename S>
Matrix<S> next_token_logits(const Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook = {});

// Greedy decoding; ties go to the lowest token id. Stops after emitting eos
// (which is included), after max_new tokens, or at max_seq.
template <typename S>
std::vector<int> generate(const Model<S>& model, std::span<const int> prompt, int max_new, int eos,
                          const SiteHook<S>& hook = {});

template <typename S>
int argmax_lowest(const Matrix<S>& row);

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/model.hpp"

#include "loraforge/errors.hpp"
#include "loraforge/rng.hpp"

#include <array>
#include <cmath>
#include <numeric>

namespace loraforge {

std::string to_string(SitePolicy p) { return p == SitePolicy::qv ? "qv" : "full"; }

SitePolicy site_policy_from_string(const std::string& s) {
    if (s == "qv") return SitePolicy::qv;
    if (s == "full") return SitePolicy::full;
    throw ConfigError("unknown site policy '" + s + "' (expected qv or full)");
}

std::string to_string(Projection p) {
    switch (p) {
        case Projection::q: return "q";
        case Projection::k: return "k";
        case Projection::v: return "v";
        case Projection::o: return "o";
        case Projection::ff_up: return "ff_up";
        case Projection::ff_down: return "ff_down";
    }
    return "?";
}

Projection projection_from_string(const std::string& s) {
    for (auto p : {Projection::q, Projection::k, Projection::v, Projection::o, Projection::ff_up, Projection::ff_down})
        if (to_string(p) == s) return p;
    throw ConfigError("unknown projection '" + s + "'");
}

InjectionSite parse_site(const std::string& id, int in_dim, int out_dim) {
    const auto dot = id.find('.');
    if (id.rfind("layer", 0) != 0 || dot == std::string::npos || dot == 5)
        throw ConfigError("malformed site id '" + id + "'");
    InjectionSite site;
    site.id = id;
    try {
        std::size_t used = 0;
        site.layer = std::stoi(id.substr(5, dot - 5), &used);
        if (used != dot - 5 || site.layer < 0) throw ConfigError("");
    } catch (const std::exception&) {
        throw ConfigError("malformed site id '" + id + "'");
    }
    site.proj = projection_from_string(id.substr(dot + 1));
    site.in_dim = in_dim;
    site.out_dim = out_dim;
    return site;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(max_seq, "max_seq");
    if (d_model % n_heads != 0)
        throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
}

std::vector<InjectionSite> injection_sites(const ModelConfig& config) {
    static constexpr std::array<Projection, 6> kAll = {Projection::q,  Projection::k,     Projection::v,
                                                       Projection::o, Projection::ff_up, Projection::ff_down};
    std::vector<InjectionSite> sites;
    for (int layer = 0; layer < config.n_layers; ++layer) {
        for (Projection p : kAll) {
            if (config.site_policy == SitePolicy::qv && p != Projection::q && p != Projection::v) continue;
            InjectionSite s;
            s.id = "layer" + std::to_string(layer) + "." + to_string(p);
            s.layer = layer;
            s.proj = p;
            s.in_dim = p == Projection::ff_down ? config.d_ff : config.d_model;
            s.out_dim = p == Projection::ff_up ? config.d_ff : config.d_model;
            sites.push_back(std::move(s));
        }
    }
    return sites;
}

template <typename S>
const Parameter<S>& Block<S>::projection(Projection p) const {
    switch (p) {
        case Projection::q: return wq;
        case Projection::k: return wk;
        case Projection::v: return wv;
        case Projection::o: return wo;
        case Projection::ff_up: return ff_up;
        case Projection::ff_down: return ff_down;
    }
    return wq;
}

template <typename S>
Parameter<S>& Block<S>::projection(Projection p) {
    return const_cast<Parameter<S>&>(std::as_const(*this).projection(p));
}

template <typename S>
ParamRefs<S> Model<S>::parameters() {
    ParamRefs<S> out{&tok_emb, &pos_emb};
    for (auto& b : blocks) {
        for (auto* p : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.ff_up,
                        &b.ff_down})
            out.push_back(p);
    }
    out.push_back(&lnf_gain);
    out.push_back(&lnf_bias);
    out.push_back(&lm_head);
    return out;
}

template <typename S>
ConstParamRefs<S> Model<S>::parameters() const {
    auto refs = const_cast<Model<S>*>(this)->parameters();
    return ConstParamRefs<S>(refs.begin(), refs.end());
}

template <typename S>
std::int64_t Model<S>::parameter_count() const {
    return count_elements(parameters(), false);
}

template <typename S>
void Model<S>::set_trainable(bool trainable) {
    for (auto* p : parameters()) p->trainable = trainable;
}

template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    RngStream rng(seed);
    const int d = config.d_model;
    auto gauss = [&](std::string name, int rows, int cols) {
        return Parameter<S>(std::move(name), gaussian_matrix<S>(rows, cols, rng, 0.0, 0.02), false);
    };
    auto ones = [&](std::string name) { return Parameter<S>(std::move(name), Matrix<S>::Ones(1, d), false); };
    auto zeros = [&](std::string name) { return Parameter<S>(std::move(name), Matrix<S>::Zero(1, d), false); };

    Model<S> m;
    m.config = config;
    m.sites = injection_sites(config);
    m.tok_emb = gauss("tok_emb", config.vocab_size, d);
    m.pos_emb = gauss("pos_emb", config.max_seq, d);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        Block<S> b;
        b.ln1_gain = ones(pre + "ln1.gain");
        b.ln1_bias = zeros(pre + "ln1.bias");
        b.wq = gauss(pre + "q", d, d);
        b.wk = gauss(pre + "k", d, d);
        b.wv = gauss(pre + "v", d, d);
        b.wo = gauss(pre + "o", d, d);
        b.ln2_gain = ones(pre + "ln2.gain");
        b.ln2_bias = zeros(pre + "ln2.bias");
        b.ff_up = gauss(pre + "ff_up", d, config.d_ff);
        b.ff_down = gauss(pre + "ff_down", config.d_ff, d);
        m.blocks.push_back(std::move(b));
    }
    m.lnf_gain = ones("ln_f.gain");
    m.lnf_bias = zeros("ln_f.bias");
    m.lm_head = gauss("lm_head", d, config.vocab_size);
    return m;
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m) {
    Model<To> out;
    out.config = m.config;
    out.sites = m.sites;
    out.tok_emb = cast_parameter<To>(m.tok_emb);
    out.pos_emb = cast_parameter<To>(m.pos_emb);
    for (const auto& b : m.blocks) {
        Block<To> c;
        c.ln1_gain = cast_parameter<To>(b.ln1_gain);
        c.ln1_bias = cast_parameter<To>(b.ln1_bias);
        c.wq = cast_parameter<To>(b.wq);
        c.wk = cast_parameter<To>(b.wk);
        c.wv = cast_parameter<To>(b.wv);
        c.wo = cast_parameter<To>(b.wo);
        c.ln2_gain = cast_parameter<To>(b.ln2_gain);
        c.ln2_bias = cast_parameter<To>(b.ln2_bias);
        c.ff_up = cast_parameter<To>(b.ff_up);
        c.ff_down = cast_parameter<To>(b.ff_down);
        out.blocks.push_back(std::move(c));
    }
    out.lnf_gain = cast_parameter<To>(m.lnf_gain);
    out.lnf_bias = cast_parameter<To>(m.lnf_bias);
    out.lm_head = cast_parameter<To>(m.lm_head);
    return out;
}

namespace {

template <typename S, typename M>
Var<S> forward_impl(Tape<S>& tape, M& model, std::span<const int> tokens, const SiteHook<S>& hook) {
    const ModelConfig& cfg = model.config;
    const auto len = static_cast<int>(tokens.size());
    if (len == 0) throw InputError("forward: empty token sequence");
    if (len > cfg.max_seq)
        throw InputError("forward: sequence length " + std::to_string(len) + " exceeds max_seq " +
                         std::to_string(cfg.max_seq));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(cfg.vocab_size));

    // site_of[layer][proj] -> index into model.sites, or -1.
    std::vector<std::array<int, 6>> site_of(static_cast<std::size_t>(cfg.n_layers));
    for (auto& row : site_of) row.fill(-1);
    for (std::size_t i = 0; i < model.sites.size(); ++i) {
        const auto& s = model.sites[i];
        site_of[static_cast<std::size_t>(s.layer)][static_cast<std::size_t>(s.proj)] = static_cast<int>(i);
    }

    std::vector<int> positions(static_cast<std::size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    Var<S> x = add(embedding(tape.param(model.tok_emb), tokens), embedding(tape.param(model.pos_emb), std::span<const int>(positions)));

    const int heads = cfg.n_heads;
    const int dh = cfg.d_model / heads;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& blk = model.blocks[static_cast<std::size_t>(l)];
        auto project = [&](Projection p, const Var<S>& in) {
            Var<S> out = matmul(in, tape.param(blk.projection(p)));
            const int site = site_of[static_cast<std::size_t>(l)][static_cast<std::size_t>(p)];
            if (hook && site >= 0) out = add(out, hook(tape, static_cast<std::size_t>(site), in));
            return out;
        };

        Var<S> h = layer_norm(x, tape.param(blk.ln1_gain), tape.param(blk.ln1_bias));
        Var<S> q = project(Projection::q, h);
        Var<S> k = project(Projection::k, h);
        Var<S> v = project(Projection::v, h);
        std::vector<Var<S>> outs;
        outs.reserve(static_cast<std::size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            Var<S> qh = heads == 1 ? q : slice_cols(q, hd * dh, dh);
            Var<S> kh = heads == 1 ? k : slice_cols(k, hd * dh, dh);
            Var<S> vh = heads == 1 ? v : slice_cols(v, hd * dh, dh);
            Var<S> probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), true);
            outs.push_back(matmul(probs, vh));
        }
        Var<S> att = heads == 1 ? outs.front() : concat_cols(std::span<const Var<S>>(outs));
        x = add(x, project(Projection::o, att));

        Var<S> h2 = layer_norm(x, tape.param(blk.ln2_gain), tape.param(blk.ln2_bias));
        Var<S> up = gelu(project(Projection::ff_up, h2));
        x = add(x, project(Projection::ff_down, up));
    }
    Var<S> hf = layer_norm(x, tape.param(model.lnf_gain), tape.param(model.lnf_bias));
    return matmul(hf, tape.param(model.lm_head));
}

}  // namespace

template <typename S>
Var<S> forward(Tape<S>& tape, const Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook) {
    return forward_impl<S>(tape, model, tokens, hook);
}

template <typename S>
Var<S> forward(Tape<S>& tape, Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook) {
    return forward_impl<S>(tape, model, tokens, hook);
}

template <typename S>
std::vector<Var<S>> forward_batch(Tape<S>& tape, const Model<S>& model, const std::vector<std::vector<int>>& batch,
                                  const SiteHook<S>& hook) {
    std::vector<Var<S>> out;
    out.reserve(batch.size());
    for (const auto& seq : batch) out.push_back(forward(tape, model, std::span<const int>(seq), hook));
    return out;
}

template <typename S>
Var<S> lm_loss(const Var<S>& logits, std::span<const int> targets, const std::vector<bool>& mask) {
    return cross_entropy(logits, targets, mask);
}

template <typename S, typename M>
Var<S> sequence_loss(Tape<S>& tape, M& model, std::span<const int> prompt, std::span<const int> target,
                     const SiteHook<S>& hook) {
    if (prompt.empty() || target.empty()) throw ContractError("sequence_loss: prompt and target must be nonempty");
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), target.begin(), target.end());
    const std::vector<int> inputs(seq.begin(), seq.end() - 1);
    const std::vector<int> next(seq.begin() + 1, seq.end());
    std::vector<bool> mask(inputs.size(), false);
    for (std::size_t i = prompt.size() - 1; i < mask.size(); ++i) mask[i] = true;
    Var<S> logits = forward(tape, model, std::span<const int>(inputs), hook);
    return lm_loss(logits, std::span<const int>(next), mask);
}

template <typename S>
int argmax_lowest(const Matrix<S>& row) {
    int best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j)
        if (row.data()[j] > row.data()[best]) best = static_cast<int>(j);
    return best;
}

template <typename S>
Matrix<S> next_token_logits(const Model<S>& model, std::span<const int> tokens, const SiteHook<S>& hook) {
    Tape<S> tape(false);
    const auto& logits = forward(tape, model, tokens, hook).value();
    return logits.bottomRows(1);
}

template <typename S>
std::vector<int> generate(const Model<S>& model, std::span<const int> prompt, int max_new, int eos,
                          const SiteHook<S>& hook) {
    if (prompt.empty()) throw ContractError("generate: prompt must be nonempty");
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.size()) > model.config.max_seq) break;
        const int tok = argmax_lowest<S>(next_token_logits(model, std::span<const int>(seq), hook));
        out.push_back(tok);
        seq.push_back(tok);
        if (tok == eos) break;
    }
    return out;
}

#define LORAFORGE_INSTANTIATE_MODEL(S)                                                                           \
    template struct Block<S>;                                                                                    \
    template struct Model<S>;                                                                                    \
    template Model<S> build_model<S>(const ModelConfig&, std::uint64_t);                                         \
    template Var<S> forward(Tape<S>&, const Model<S>&, std::span<const int>, const SiteHook<S>&);                \
    template Var<S> forward(Tape<S>&, Model<S>&, std::span<const int>, const SiteHook<S>&);                      \
    template std::vector<Var<S>> forward_batch(Tape<S>&, const Model<S>&, const std::vector<std::vector<int>>&,   \
                                               const SiteHook<S>&);                                              \
    template Var<S> lm_loss(const Var<S>&, std::span<const int>, const std::vector<bool>&);                      \
    template Var<S> sequence_loss<S, Model<S>>(Tape<S>&, Model<S>&, std::span<const int>, std::span<const int>,  \
                                               const SiteHook<S>&);                                              \
    template Var<S> sequence_loss<S, const Model<S>>(Tape<S>&, const Model<S>&, std::span<const int>,            \
                                                     std::span<const int>, const SiteHook<S>&);                  \
    template int argmax_lowest<S>(const Matrix<S>&);                                                             \
    template Matrix<S> next_token_logits(const Model<S>&, std::span<const int>, const SiteHook<S>&);             \
    template std::vector<int> generate(const Model<S>&, std::span<const int>, int, int, const SiteHook<S>&);

LORAFORGE_INSTANTIATE_MODEL(float)
LORAFORGE_INSTANTIATE_MODEL(double)

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);

#undef LORAFORGE_INSTANTIATE_MODEL

}  // namespace loraforge

// SPDX-License-Identifier: Apache-2.0
#include "loraforge/evaluate.hpp"

#include "loraforge/errors.hpp"

namespace loraforge {

std::string to_string(LabelDecode d) { return d == LabelDecode::free ? "free" : "constrained"; }

LabelDecode label_decode_from_string(const std::string& s) {
    if (s == "free") return LabelDecode::free;
    if (s == "constrained") return LabelDecode::constrained;
    throw ConfigError("unknown label decode '" + s + "' (expected free or constrained)");
}

Prediction gold_prediction(const TaskInstance& inst) {
    if (!inst.label) throw ContractError("factcheck instance without a label");
    return *inst.label == Label::TRUE_ ? Prediction::TRUE_ : Prediction::FALSE_;
}

template <typename S>
Prediction predict_label(const Model<S>& model, const TaskInstance& inst, LabelDecode decode,
                         const SiteHook<S>& hook) {
    if (decode == LabelDecode::free) {
        const auto out = generate(model, std::span<const int>(inst.input_tokens), 2, vocab::EOS, hook);
        return parse_label(out);
    }
    const auto logits = next_token_logits(model, std::span<const int>(inst.input_tokens), hook);
    return logits(0, vocab::TRUE_) >= logits(0, vocab::FALSE_) ? Prediction::TRUE_ : Prediction::FALSE_;
}

template <typename S>
ClassReport evaluate_factcheck(const Model<S>& model, const std::vector<TaskInstance>& data, LabelDecode decode,
                               const SiteHook<S>& hook) {
    std::vector<Prediction> preds, golds;
    preds.reserve(data.size());
    golds.reserve(data.size());
    for (const auto& inst : data) {
        preds.push_back(predict_label(model, inst, decode, hook));
        golds.push_back(gold_prediction(inst));
    }
    return macro_prf(preds, golds);
}

template <typename S>
GenerationScores evaluate_generation(const Model<S>& model, const std::vector<TaskInstance>& data,
                                     const SiteHook<S>& hook) {
    GenerationScores s;
    if (data.empty()) return s;
    double em = 0, acc = 0;
    for (const auto& inst : data) {
        const int max_new = static_cast<int>(inst.target_tokens.size()) + 2;
        const auto out = generate(model, std::span<const int>(inst.input_tokens), max_new, vocab::EOS, hook);
        em += exact_match(out, inst.target_tokens) ? 1.0 : 0.0;
        acc += token_accuracy(out, inst.target_tokens);
    }
    s.count = data.size();
    s.exact_match = em / static_cast<double>(data.size());
    s.token_accuracy = acc / static_cast<double>(data.size());
    return s;
}

template <typename S>
double mean_loss(const Model<S>& model, const std::vector<TaskInstance>& data, const SiteHook<S>& hook) {
    if (data.empty()) throw ContractError("mean_loss: no data");
    double total = 0;
    for (const auto& inst : data) {
        Tape<S> tape(false);
        total += static_cast<double>(sequence_loss(tape, model, std::span<const int>(inst.input_tokens),
                                                   std::span<const int>(inst.target_tokens), hook)
                                         .value()(0, 0));
    }
    return total / static_cast<double>(data.size());
}

#define LORAFORGE_INSTANTIATE_EVAL(S)                                                                           \
    template Prediction predict_label(const Model<S>&, const TaskInstance&, LabelDecode, const SiteHook<S>&);   \
    template ClassReport evaluate_factcheck(const Model<S>&, const std::vector<TaskInstance>&, LabelDecode,      \
                                            const SiteHook<S>&);                                                \
    template GenerationScores evaluate_generation(const Model<S>&, const std::vector<TaskInstance>&,            \
                                                  const SiteHook<S>&);                                          \
    template double mean_loss(const Model<S>&, const std::vector<TaskInstance>&, const SiteHook<S>&);

LORAFORGE_INSTANTIATE_EVAL(float)
LORAFORGE_INSTANTIATE_EVAL(double)

#undef LORAFORGE_INSTANTIATE_EVAL

}  // namespace loraforge

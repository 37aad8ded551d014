// SPDX-License-Identifier: Apache-2.0
#include "loraforge/adapters.hpp"
#include "loraforge/gradcheck.hpp"
#include "loraforge/model.hpp"
#include "loraforge/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace loraforge;

namespace {

ModelConfig desk() { return ModelConfig{64, 64, 2, 4, 128, 48, SitePolicy::qv}; }

ModelConfig tiny() { return ModelConfig{16, 8, 2, 2, 12, 10, SitePolicy::full}; }

std::int64_t closed_form_count(const ModelConfig& c) {
    const std::int64_t d = c.d_model, v = c.vocab_size, s = c.max_seq, f = c.d_ff;
    const std::int64_t per_layer = 2 * d + 4 * d * d + 2 * d + 2 * d * f;
    return v * d + s * d + c.n_layers * per_layer + 2 * d + d * v;
}

}  // namespace

TEST_CASE("site enumeration under both policies") {
    auto m = build_model<float>(desk(), 42);
    REQUIRE(m.sites.size() == 4);
    CHECK(m.sites[0].id == "layer0.q");
    CHECK(m.sites[1].id == "layer0.v");
    CHECK(m.sites[3].id == "layer1.v");
    auto cfg = desk();
    cfg.site_policy = SitePolicy::full;
    const auto sites = injection_sites(cfg);
    REQUIRE(sites.size() == 12);
    const char* expect[] = {"layer0.q", "layer0.k", "layer0.v", "layer0.o", "layer0.ff_up", "layer0.ff_down"};
    for (int i = 0; i < 6; ++i) CHECK(sites[static_cast<std::size_t>(i)].id == expect[i]);
    CHECK(sites[4].out_dim == 128);
    CHECK(sites[5].in_dim == 128);
}

TEST_CASE("parameter count matches the closed form") {
    CHECK(build_model<float>(desk(), 1).parameter_count() == closed_form_count(desk()));
    CHECK(closed_form_count(desk()) == 77440);
    CHECK(build_model<float>(tiny(), 1).parameter_count() == closed_form_count(tiny()));
}

TEST_CASE("base weights are frozen and initialized as documented") {
    auto m = build_model<float>(desk(), 42);
    CHECK(count_trainable(m) == 0);
    CHECK(m.blocks[0].ln1_gain.value.isOnes());
    CHECK(m.blocks[1].ln2_bias.value.isZero());
    const double sd = std::sqrt(m.tok_emb.value.cast<double>().squaredNorm() / m.tok_emb.value.size());
    CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("invalid configs are rejected") {
    auto c = desk();
    c.n_heads = 5;
    CHECK_THROWS_AS(build_model<float>(c, 1), ConfigError);
    c = desk();
    c.d_ff = 0;
    CHECK_THROWS_AS(build_model<float>(c, 1), ConfigError);
    CHECK_THROWS_AS(parse_site("layerx.q", 4, 4), ConfigError);
    CHECK(parse_site("layer3.ff_up", 4, 8).layer == 3);
}

TEST_CASE("forward shape and input checks") {
    auto m = build_model<float>(desk(), 42);
    Tape<float> tape(false);
    const std::vector<int> bos{1};
    auto logits = forward(tape, m, bos);
    CHECK(logits.rows() == 1);
    CHECK(logits.cols() == 64);
    const std::vector<int> bad{1, 64};
    CHECK_THROWS_AS(forward(tape, m, bad), InputError);
    const std::vector<int> too_long(49, 1);
    CHECK_THROWS_AS(forward(tape, m, too_long), InputError);
}

TEST_CASE("fresh adapter leaves logits unchanged and detaching restores the base") {
    auto m = build_model<float>(desk(), 42);
    const std::vector<int> seq{1, 6, 20, 33, 21, 7, 20, 33, 21, 3};
    const MatrixF before = next_token_logits(m, seq);
    ComposedAdapter<float> lora = init_lora<float>(m.sites, 4, 8.0, 7, "t");
    const MatrixF with = next_token_logits(m, seq, attach(std::as_const(lora), m));
    CHECK((with - before).cwiseAbs().maxCoeff() <= 1e-6f);
    // nonzero delta changes the output, then detaching restores it bitwise
    for (auto& p : std::get<AdapterSet<float>>(lora).pairs) p.B.value.setConstant(0.3f);
    const MatrixF changed = next_token_logits(m, seq, attach(std::as_const(lora), m));
    CHECK((changed - before).cwiseAbs().maxCoeff() > 1e-4f);
    CHECK(next_token_logits(m, seq) == before);
}

TEST_CASE("batched forward equals per-sequence forward in any order") {
    auto m = build_model<float>(desk(), 3);
    std::vector<std::vector<int>> batch{{1, 20, 21}, {1, 6, 30, 31, 3}, {1, 2}};
    Tape<float> t1(false);
    const auto fw = forward_batch(t1, m, batch);
    std::vector<std::vector<int>> rev(batch.rbegin(), batch.rend());
    Tape<float> t2(false);
    const auto bw = forward_batch(t2, m, rev);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tape<float> t3(false);
        const MatrixF single = forward(t3, m, batch[i]).value();
        CHECK(fw[i].value() == single);
        CHECK(bw[batch.size() - 1 - i].value() == single);
    }
}

TEST_CASE("causal: logits at t ignore later tokens") {
    auto m = build_model<float>(desk(), 5);
    std::vector<int> a{1, 20, 21, 22, 23};
    auto b = a;
    b[4] = 40;
    Tape<float> t(false);
    const MatrixF la = forward(t, m, a).value();
    const MatrixF lb = forward(t, m, b).value();
    CHECK(la.topRows(4) == lb.topRows(4));
    CHECK(la.row(4) != lb.row(4));
}

TEST_CASE("uniform logits give ln 64") {
    Tape<double> t;
    auto logits = t.constant(MatrixD::Zero(3, 64));
    const std::vector<int> targets{5, 9, 60};
    const auto loss = lm_loss(logits, std::span<const int>(targets), {true, true, true});
    CHECK(loss.value()(0, 0) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("loss vanishes as the correct margin grows") {
    double prev = 1e9;
    for (double margin : {1.0, 5.0, 20.0, 60.0}) {
        Tape<double> t;
        MatrixD l = MatrixD::Zero(1, 64);
        l(0, 7) = margin;
        const std::vector<int> targets{7};
        const double v = lm_loss(t.constant(l), std::span<const int>(targets), {true}).value()(0, 0);
        CHECK(v < prev);
        prev = v;
    }
    CHECK(prev < 1e-20);
}

TEST_CASE("masked targets do not affect the loss") {
    RngStream rng(1);
    const MatrixD l = gaussian_matrix<double>(3, 64, rng, 0, 1);
    std::vector<int> a{5, 9, 60}, b{33, 9, 60};
    Tape<double> t;
    const std::vector<bool> mask{false, true, true};
    CHECK(lm_loss(t.constant(l), std::span<const int>(a), mask).value() ==
          lm_loss(t.constant(l), std::span<const int>(b), mask).value());
    CHECK_THROWS_AS(lm_loss(t.constant(l), std::span<const int>(a), {false, false, false}), ContractError);
}

TEST_CASE("greedy generation") {
    auto m = build_model<float>(desk(), 42);
    const std::vector<int> prompt{1, 6, 20, 33, 21, 7};
    CHECK(generate(m, prompt, 0, 2).empty());
    const auto g1 = generate(m, prompt, 5, 2);
    CHECK(g1 == generate(m, prompt, 5, 2));
    CHECK(g1.size() <= 5);
}

TEST_CASE("argmax ties go low and ignore constant shifts") {
    MatrixF row(1, 5);
    row << 0.5f, 2.0f, -1.0f, 2.0f, 0.0f;
    CHECK(argmax_lowest(row) == 1);
    MatrixF shifted = row.array() + 17.0f;
    CHECK(argmax_lowest(shifted) == 1);
}

TEST_CASE("full-model gradients match finite differences") {
    auto m = build_model<double>(tiny(), 11);
    m.set_trainable(true);
    // Larger weights so every path carries signal.
    RngStream rng(4);
    for (auto* p : m.parameters()) p->value += gaussian_matrix<double>(p->value.rows(), p->value.cols(), rng, 0, 0.3);
    const std::vector<int> prompt{1, 4, 7}, target{9, 2};
    const double err = finite_diff_check([&](Tape<double>& t) {
        return sequence_loss(t, m, std::span<const int>(prompt), std::span<const int>(target));
    }, m.parameters(), 1e-5);
    CHECK(err <= 1e-6);
}

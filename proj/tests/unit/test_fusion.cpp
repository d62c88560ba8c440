#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "test_support.hpp"

using namespace quietread;

namespace {

Tensor<double> seq_tensor(std::vector<double> v, std::size_t d = 1) {
    const std::size_t s = v.size() / d;
    return Tensor<double>::from({1, s, d}, std::move(v));
}

}  // namespace

TEST_CASE("sliding_pool") {
    Tape<double> tape(false);
    auto h = seq_tensor({1, 2, 3, 4});
    CHECK(sliding_pool(tape, h, 2).values() == std::vector<double>{1, 1.5, 2.5, 3.5});
    CHECK(sliding_pool(tape, h, 1).node() == h.node());
    const std::vector<double> w3{1, 1.5, 2, 3};
    for (std::size_t i = 0; i < 4; ++i) CHECK(sliding_pool(tape, h, 3).values()[i] == doctest::Approx(w3[i]));

    std::mt19937_64 rng{1};
    std::normal_distribution<double> n(0, 1);
    std::vector<double> row(5);
    for (auto& x : row) x = n(rng);
    std::vector<double> constant;
    for (int s = 0; s < 6; ++s) constant.insert(constant.end(), row.begin(), row.end());
    auto c = seq_tensor(constant, 5);
    for (std::size_t w : {2u, 4u, 64u}) {
        auto p = sliding_pool(tape, c, w);
        for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p.values()[i] == doctest::Approx(c.values()[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(sliding_pool(tape, h, 0), ConfigError);
}

TEST_CASE("sliding_pool prefix property and gradient") {
    std::mt19937_64 rng{2};
    std::normal_distribution<double> n(0, 1);
    std::vector<double> v(2 * 7 * 3);
    for (auto& x : v) x = n(rng);
    auto h = Tensor<double>::from({2, 7, 3}, v, true);
    Tape<double> tape(false);
    auto base = sliding_pool(tape, h, 3);
    for (std::size_t j = 0; j < 7; ++j) {
        auto pert = h.clone();
        pert.data()[(7 + j) * 3] += 1.0;
        auto out = sliding_pool(tape, pert, 3);
        for (std::size_t i = 0; i < j; ++i) {
            for (std::size_t d = 0; d < 3; ++d) CHECK(out.values()[(7 + i) * 3 + d] == base.values()[(7 + i) * 3 + d]);
        }
    }
    std::vector<qtest::NamedTensor> params{{"h", h}};
    auto report = qtest::grad_check(
        params, [&](Tape<double>& t) { return sum(t, gelu(t, sliding_pool(t, h, 3))); }, 30, 3);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("connect") {
    Tape<double> tape(false);
    auto zero = init_connector<double>(3, 4);
    CHECK(zero.get("weight").shape() == Shape{3, 4});
    CHECK(zero.get("bias").shape() == Shape{4});
    auto x = seq_tensor({1, 2, 3, 4, 5, 6}, 3);
    auto y0 = connect(tape, zero, x);
    for (double v : y0.values()) CHECK(v == 0.0);

    ParamStore<double> eye;
    eye.add("weight", Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    eye.add("bias", Tensor<double>::zeros({3}));
    CHECK(connect(tape, eye, x).values() == x.values());

    std::mt19937_64 rng{4};
    auto c = init_connector<double>(3, 4);
    qtest::jitter(c, rng, 1.0);
    auto y = connect(tape, c, x);
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = c.get("bias").values()[j];
            for (std::size_t i = 0; i < 3; ++i) acc += x.values()[s * 3 + i] * c.get("weight").values()[i * 4 + j];
            CHECK(y.values()[s * 4 + j] == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto wide = seq_tensor({1, 2, 3, 4}, 4);
    CHECK_THROWS_AS(connect(tape, c, wide), ShapeError);
}

TEST_CASE("buddy_encode taps the second-to-last block") {
    auto b = qtest::tiny_bundle(true, 5);
    std::mt19937_64 rng{5};
    auto ids = qtest::random_ids(2, 7, 11, rng);
    Tape<double> tape(false);
    auto tap = buddy_encode(tape, b.buddy, *b.plan, ids);
    CHECK(tap.shape() == Shape{2, 7, 6});
    auto full = forward(tape, b.buddy, b.plan->buddy_config, ids);
    CHECK(qtest::bitwise_equal(tap, full.layer_hiddens[0]));

    auto plan = *b.plan;
    plan.tap_norm = TapNorm::final_ln_copy;
    auto normed = buddy_encode(tape, b.buddy, plan, ids);
    auto ref = layernorm(tape, full.layer_hiddens[0], b.buddy.get("final_ln.gamma"), b.buddy.get("final_ln.beta"),
                         plan.buddy_config.ln_eps);
    CHECK(qtest::bitwise_equal(normed, ref));

    plan.buddy_config.n_layers = 1;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
}

TEST_CASE("buddy tap is causal") {
    auto b = qtest::tiny_bundle(true, 6);
    std::mt19937_64 rng{6};
    qtest::jitter(b.buddy, rng, 0.3);
    auto ids = qtest::random_ids(1, 7, 11, rng);
    Tape<double> tape(false);
    auto base = buddy_encode(tape, b.buddy, *b.plan, ids);
    for (std::size_t j = 0; j < 7; ++j) {
        auto pert = ids;
        pert(0, j) = (pert(0, j) + 3) % 11;
        auto out = buddy_encode(tape, b.buddy, *b.plan, pert);
        for (std::size_t i = 0; i < j; ++i) {
            for (std::size_t d = 0; d < 6; ++d) CHECK(out.values()[i * 6 + d] == base.values()[i * 6 + d]);
        }
    }
}

TEST_CASE("prefix_bidirectional lets the prompt see ahead") {
    auto b = qtest::tiny_bundle(true, 7);
    std::mt19937_64 rng{7};
    qtest::jitter(b.buddy, rng, 0.3);
    auto plan = *b.plan;
    plan.visibility = Visibility::prefix_bidirectional;
    auto ids = qtest::random_ids(1, 7, 11, rng);
    auto pert = ids;
    pert(0, 2) = (pert(0, 2) + 1) % 11;
    Tape<double> tape(false);
    auto a = buddy_encode(tape, b.buddy, plan, ids, 4);
    auto c = buddy_encode(tape, b.buddy, plan, pert, 4);
    // Position 0 is inside the prefix and now sees position 2.
    bool changed = false;
    for (std::size_t d = 0; d < 6; ++d) changed |= a.values()[d] != c.values()[d];
    CHECK(changed);
    CHECK(parse_visibility("prefix_bidirectional") == Visibility::prefix_bidirectional);
    CHECK_THROWS_AS(parse_visibility("full"), ConfigError);
    CHECK_THROWS_AS(parse_tap_norm("rms"), ConfigError);
}

TEST_CASE("zero connector reproduces the baseline bitwise") {
    auto gen_cfg = qtest::tiny_config(259, 16, 2, 2, 32);
    auto gen = init_params<float>(gen_cfg, 1);
    ModelBundle<float> fused;
    fused.config = gen_cfg;
    fused.generator = gen;
    FusionPlan plan;
    plan.buddy_config = qtest::tiny_config(259, 8, 2, 2, 32);
    fused.buddy = init_params<float>(plan.buddy_config, 2);
    fused.connector = init_connector<float>(8, 16);
    std::mt19937_64 rng{8};
    auto ids = qtest::random_ids(3, 32, 259, rng);
    Tape<float> t0(false);
    auto base = forward(t0, gen, gen_cfg, ids);
    for (std::optional<std::size_t> w : {std::optional<std::size_t>{}, std::optional<std::size_t>{1},
                                         std::optional<std::size_t>{16}, std::optional<std::size_t>{64}}) {
        plan.window = w;
        fused.plan = plan;
        Tape<float> t(false);
        auto out = fuse_forward(t, fused, ids);
        CHECK(qtest::bitwise_equal(out.logits, base.logits));
    }
}

TEST_CASE("W=1 pooling equals no pooling bitwise") {
    auto b = qtest::tiny_bundle(true, 9, 1);
    std::mt19937_64 rng{9};
    qtest::jitter(b.connector, rng, 0.5);
    auto ids = qtest::random_ids(2, 7, 11, rng);
    Tape<double> t1(false), t2(false);
    auto one = fuse_forward(t1, b, ids);
    b.plan->window.reset();
    auto none = fuse_forward(t2, b, ids);
    CHECK(qtest::bitwise_equal(one.logits, none.logits));
}

TEST_CASE("fused model gradients match central differences") {
    for (TapNorm norm : {TapNorm::none, TapNorm::final_ln_copy}) {
        auto b = qtest::tiny_bundle(true, 10, 3, norm);
        std::mt19937_64 rng{10};
        qtest::jitter(b.generator, rng, 0.3);
        qtest::jitter(b.buddy, rng, 0.3);
        qtest::jitter(b.connector, rng, 0.3);
        auto ids = qtest::random_ids(2, 7, 11, rng);
        auto targets = qtest::random_ids(2, 7, 11, rng);
        auto mask = qtest::random_mask(2, 7, rng);
        auto loss = [&](Tape<double>& tape) {
            auto out = fuse_forward(tape, b, ids);
            return qtest::mean_masked_loss(tape, out.logits, targets, mask);
        };
        auto report = qtest::grad_check(qtest::bundle_params(b), loss, 200, 11);
        INFO(report.worst);
        CHECK(report.fraction_below_1e3() >= 0.99);
        CHECK(report.max_rel_err < 1e-2);
    }
}

TEST_CASE("fused logits are causal") {
    auto b = qtest::tiny_bundle(true, 12, 3);
    std::mt19937_64 rng{12};
    qtest::jitter(b.generator, rng, 0.3);
    qtest::jitter(b.buddy, rng, 0.3);
    qtest::jitter(b.connector, rng, 0.3);
    auto ids = qtest::random_ids(1, 7, 11, rng);
    Tape<double> tape(false);
    auto base = fuse_forward(tape, b, ids);
    for (std::size_t j = 0; j < 7; ++j) {
        auto pert = ids;
        pert(0, j) = (pert(0, j) + 5) % 11;
        auto out = fuse_forward(tape, b, pert);
        for (std::size_t i = 0; i < j * 11; ++i) CHECK(out.logits.values()[i] == base.logits.values()[i]);
    }
}

TEST_CASE("every parameter group receives gradient") {
    auto b = qtest::tiny_bundle(true, 13, 3);
    std::mt19937_64 rng{13};
    qtest::jitter(b.connector, rng, 0.1);
    auto ids = qtest::random_ids(4, 7, 11, rng);
    auto targets = qtest::random_ids(4, 7, 11, rng);
    MaskGrid mask(4, 7, 1);
    for (auto& p : qtest::bundle_params(b)) {
        p.tensor.set_requires_grad(true);
        p.tensor.zero_grad();
    }
    Tape<double> tape;
    auto out = fuse_forward(tape, b, ids);
    tape.backward(qtest::mean_masked_loss(tape, out.logits, targets, mask));
    const auto reachable = buddy_tap_params(*b.plan);
    for (const auto& p : qtest::bundle_params(b)) {
        double mag = 0;
        for (double g : p.tensor.grad()) mag += std::abs(g);
        const bool buddy = p.name.rfind("buddy.", 0) == 0;
        if (buddy && !reachable.count(p.name.substr(6))) {
            CHECK(mag == 0.0);
        } else {
            INFO(p.name);
            CHECK(mag > 0.0);
        }
    }
}

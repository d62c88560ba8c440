#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace quietread;

namespace {

ModelBundle<float> plain_bundle(std::uint64_t seed, std::size_t max_seq = 32) {
    ModelBundle<float> b;
    b.config = qtest::tiny_config(vocab::kSize, 16, 2, 2, static_cast<int>(max_seq));
    b.generator = init_params<float>(b.config, seed);
    std::mt19937_64 rng{seed};
    qtest::jitter(b.generator, rng, 0.2);
    return b;
}

ModelBundle<float> fused_bundle(std::uint64_t seed, std::size_t window) {
    auto b = plain_bundle(seed);
    FusionPlan plan;
    plan.buddy_config = qtest::tiny_config(vocab::kSize, 8, 2, 2, 32);
    plan.window = window;
    b.plan = plan;
    b.buddy = init_params<float>(plan.buddy_config, seed + 1);
    b.connector = init_connector<float>(8, 16);
    std::mt19937_64 rng{seed + 2};
    qtest::jitter(b.buddy, rng, 0.2);
    qtest::jitter(b.connector, rng, 0.2);
    return b;
}

std::vector<std::string> some_docs(std::uint64_t seed, std::size_t n = 20) {
    std::mt19937_64 rng{seed};
    std::vector<std::string> docs;
    for (std::size_t i = 0; i < n; ++i) docs.push_back(qtest::random_bytes(rng, 1, 25));
    return docs;
}

RunSummary summary(const std::string& name, double ppl) {
    RunSummary s;
    s.name = name;
    s.loss_curve = {{0, 5.0}, {1, 4.0}, {2, 3.5}};
    s.final_train_loss = 4.1666666666666667;
    s.eval_config = {{"seq_len", 32}, {"bucket_k", 4}};
    s.eval_report = {{"eval_config", s.eval_config},
                     {"perplexity", {{"ppl", ppl}, {"buckets", {{"bucket_a", {{"mean_loss", 2.5}}}}}}},
                     {"mc", {{"accuracy", 0.25}, {"accuracy_sum", 0.5}, {"accuracy_length_norm", 0.25}}}};
    return s;
}

}  // namespace

TEST_CASE("uniform logits give perplexity equal to the vocabulary size") {
    auto b = plain_bundle(1);
    for (auto& v : b.generator.get("lm_head.weight").data()) v = 0.0f;
    auto r = perplexity(b, some_docs(1), 32, 4);
    CHECK(std::abs(r.ppl - 259.0) / 259.0 < 0.01);
    CHECK(r.mean_loss == doctest::Approx(std::log(259.0)).epsilon(1e-6));
    CHECK(r.buckets.mean_a == doctest::Approx(std::log(259.0)).epsilon(1e-6));
}

TEST_CASE("perplexity equals a per-token double-precision loop") {
    auto b = plain_bundle(2);
    const auto docs = some_docs(2);
    auto r = perplexity(b, docs, 32, 4, 3);
    const auto packed = pack_documents(docs, 32);
    auto gen = cast_params<double>(b.generator);
    double total = 0;
    std::size_t n = 0;
    for (std::size_t row = 0; row < packed.rows(); ++row) {
        IdGrid ids(1, 32);
        for (std::size_t s = 0; s < 32; ++s) ids(0, s) = packed.tokens(row, s);
        Tape<double> tape(false);
        auto out = forward(tape, gen, b.config, ids);
        for (std::size_t s = 0; s < 32; ++s) {
            if (!packed.base_mask(row, s)) continue;
            const double* l = out.logits.values().data() + s * vocab::kSize;
            double z = 0;
            for (int v = 0; v < vocab::kSize; ++v) z += std::exp(l[v]);
            total += std::log(z) - l[packed.targets(row, s)];
            ++n;
        }
    }
    CHECK(r.token_count == n);
    CHECK(qtest::rel_err(r.mean_loss, total / n) < 1e-5);
}

TEST_CASE("bucket counts follow the mask and the headline is k-neutral") {
    auto b = plain_bundle(3);
    const auto docs = some_docs(3, 40);
    const auto packed = pack_documents(docs, 32);
    std::size_t base = 0;
    for (auto v : packed.base_mask.values) base += v;
    const auto ref = perplexity(b, docs, 32, 0);
    CHECK(ref.buckets.count_a == 0);
    for (std::size_t k : {1u, 4u, 16u}) {
        ReadQConfig rq;
        rq.enabled = true;
        rq.k = k;
        auto stats = mask_stats(compute_loss_mask(packed, rq), packed);
        auto r = perplexity(b, docs, 32, k);
        CHECK(r.buckets.count_b == stats.masked_in);
        CHECK(r.buckets.count_a == base - stats.masked_in);
        CHECK(r.token_count == base);
        CHECK(r.ppl == ref.ppl);
        const double mixed = (r.buckets.mean_a * r.buckets.count_a + r.buckets.mean_b * r.buckets.count_b) / base;
        CHECK(mixed == doctest::Approx(r.mean_loss).epsilon(1e-12));
    }
}

TEST_CASE("argmax_first") {
    CHECK(argmax_first({1.0, 1.0, 0.5}) == 0);
    CHECK(argmax_first({0.0, 2.0, 2.0}) == 1);
    CHECK(argmax_first({-3.0}) == 0);
    std::mt19937_64 rng{4};
    std::normal_distribution<double> n(0, 1);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> s(5);
        for (auto& x : s) x = std::round(n(rng) * 2) / 2;
        auto shifted = s;
        for (auto& x : shifted) x += 8.0;
        CHECK(argmax_first(s) == argmax_first(shifted));
    }
}

TEST_CASE("multiple-choice scoring") {
    auto b = plain_bundle(5);
    std::vector<McTask> tasks{{"key=", {"aa", "bb", "cc"}, 1}, {"x", {"q", "rr"}, 0}};
    auto r = mc_eval(b, tasks, Scoring::sum);
    REQUIRE(r.tasks.size() == 2);
    // Sum scores against a direct forward of each full sequence.
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t c = 0; c < tasks[t].choices.size(); ++c) {
            std::vector<std::int32_t> ids{vocab::kBos};
            for (auto id : encode(tasks[t].prompt + tasks[t].choices[c])) ids.push_back(id);
            IdGrid g(1, ids.size());
            g.values = ids;
            Tape<float> tape(false);
            auto out = forward(tape, b.generator, b.config, g);
            double lp = 0;
            for (std::size_t p = 1 + tasks[t].prompt.size(); p < ids.size(); ++p) {
                const float* l = out.logits.values().data() + (p - 1) * vocab::kSize;
                double z = 0;
                for (int v = 0; v < vocab::kSize; ++v) z += std::exp(double(l[v]));
                lp += l[ids[p]] - std::log(z);
            }
            CHECK(r.tasks[t].scores[c].sum_logprob == doctest::Approx(lp).epsilon(1e-6));
            CHECK(r.tasks[t].scores[c].norm_logprob ==
                  doctest::Approx(lp / tasks[t].choices[c].size()).epsilon(1e-6));
        }
    }

    // Uniform model: all choices of equal length tie, so index 0 wins.
    for (auto& v : b.generator.get("lm_head.weight").data()) v = 0.0f;
    auto tied = mc_eval(b, {{"p", {"ab", "cd", "ef"}, 2}}, Scoring::length_norm);
    CHECK(tied.tasks[0].chosen == 0);
    CHECK(tied.accuracy() == 0.0);

    auto small = plain_bundle(6, 6);
    auto skipped = mc_eval(small, {{"prompt", {"a", "b"}, 0}, {"p", {"a", "b"}, 1}}, Scoring::sum);
    CHECK(skipped.skipped == 1);
    CHECK(skipped.tasks.size() == 1);

    CHECK(parse_scoring("sum") == Scoring::sum);
    CHECK_THROWS_AS(parse_scoring("mean"), ConfigError);
    CHECK_THROWS_AS(mc_eval(b, {{"p", {"a", "b"}, 2}}, Scoring::sum), ConfigError);
}

TEST_CASE("generation") {
    auto b = plain_bundle(7);
    GenerateOptions none;
    CHECK(generate(b, "abc", none).empty());

    GenerateOptions greedy;
    greedy.max_new = 8;
    CHECK(generate(b, "abc", greedy) == generate(b, "abc", greedy));

    GenerateOptions hot;
    hot.max_new = 8;
    hot.temperature = 1.5;
    hot.seed = 3;
    CHECK(generate(b, "abc", hot) == generate(b, "abc", hot));

    greedy.max_new = 40;
    CHECK_THROWS_AS(generate(b, "abc", greedy), ConfigError);
    hot.temperature = 0.0;
    CHECK_THROWS_AS(generate(b, "abc", hot), ConfigError);
}

TEST_CASE("decoding logits match a full forward of the final sequence") {
    for (bool fused : {false, true}) {
        auto b = fused ? fused_bundle(8, 4) : plain_bundle(8);
        GenerateOptions opts;
        opts.max_new = 10;
        opts.temperature = 2.0;
        opts.seed = 9;
        auto trace = generate_trace(b, "hello", opts);
        std::vector<std::int32_t> ids{vocab::kBos};
        for (auto id : encode("hello")) ids.push_back(id);
        for (auto id : trace.tokens) ids.push_back(id);
        IdGrid g(1, ids.size());
        g.values = ids;
        Tape<float> tape(false);
        auto out = bundle_forward(tape, b, g);
        REQUIRE(trace.step_logits.size() >= trace.tokens.size());
        for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
            const float* row = out.logits.values().data() + (5 + i) * vocab::kSize;
            for (int v = 0; v < vocab::kSize; ++v) CHECK(std::abs(trace.step_logits[i][v] - row[v]) < 1e-5);
        }
    }
}

TEST_CASE("an overfit model reverses its training string") {
    TrainConfig cfg;
    cfg.total_steps = 150;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.warmup_steps = 5;
    cfg.peak_lr = 1e-2;
    cfg.weight_decay = 0.0;
    cfg.readq.k = 0;
    auto model = qtest::tiny_config(vocab::kSize, 32, 2, 2, 16);
    Trainer t(cfg, model, {"abc|cba"});
    t.run();
    GenerateOptions opts;
    opts.max_new = 3;
    CHECK(generate(t.bundle(), "abc|", opts) == "cba");
}

TEST_CASE("run comparison") {
    auto a = summary("a", 10.0);
    auto b = summary("b", 12.0);
    auto t = compare_runs({a, a});
    REQUIRE(t.values.size() == 2);
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        const double x = t.values[0][c], y = t.values[1][c];
        CHECK(((std::isnan(x) && std::isnan(y)) || x == y));
    }

    t = compare_runs({a, b});
    CHECK(t.row_names == std::vector<std::string>{"a", "b"});
    CHECK(t.values[1][1] == 12.0);
    CHECK(std::isnan(t.values[0][3]));
    CHECK(parse_table_csv(table_csv(t)) == t);

    auto odd = summary("odd, \"quoted\"", 1.0 / 3.0);
    auto t2 = compare_runs({a, odd});
    CHECK(parse_table_csv(table_csv(t2)) == t2);

    auto c = summary("c", 5.0);
    c.eval_config["bucket_k"] = 8;
    CHECK_THROWS_AS(compare_runs({a, c}), ConfigError);
    CHECK_THROWS_AS(compare_runs({a}), ConfigError);

    const auto svg = loss_curve_svg({a, b});
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.rfind("</svg>\n") == svg.size() - 7);
    std::size_t polylines = 0;
    for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++polylines;
    CHECK(polylines == 2);
    CHECK(loss_curve_svg({odd}).find("&quot;quoted&quot;") != std::string::npos);
}

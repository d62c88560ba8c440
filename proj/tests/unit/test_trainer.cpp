#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "quietread/config.hpp"
#include "test_support.hpp"

using namespace quietread;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() { return qtest::tiny_config(vocab::kSize, 16, 2, 2, 32); }

TrainConfig small_train(std::size_t steps = 12) {
    TrainConfig c;
    c.total_steps = steps;
    c.batch_size = 4;
    c.seq_len = 32;
    c.warmup_steps = 2;
    c.peak_lr = 3e-3;
    c.seed = 7;
    return c;
}

FusionPlan small_plan(std::optional<std::size_t> window = std::nullopt) {
    FusionPlan p;
    p.buddy_config = qtest::tiny_config(vocab::kSize, 8, 2, 2, 32);
    p.window = window;
    return p;
}

std::vector<std::string> small_corpus() {
    KvCorpusSpec spec;
    spec.n_docs = 60;
    return synth_kv_corpus(spec).docs;
}

std::map<std::string, std::vector<float>> snapshot(const Trainer& t) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& p : t.named_params()) out[p.name] = std::vector<float>(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::vector<double> losses(const std::vector<StepMetrics>& h) {
    std::vector<double> out;
    for (const auto& m : h) out.push_back(m.loss_mean.value_or(std::nan("")));
    return out;
}

}  // namespace

TEST_CASE("lr schedule") {
    TrainConfig c;
    c.total_steps = 1000;
    c.warmup_steps = 100;
    c.peak_lr = 1e-3;
    c.min_lr_frac = 0.1;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(50, c) == doctest::Approx(5e-4));
    CHECK(lr_at(100, c) == 1e-3);
    CHECK(std::abs(lr_at(550, c) - 1e-3 * 1.1 / 2) < 1e-9);
    CHECK(std::abs(lr_at(1000, c) - 1e-4) < 1e-12);
    for (std::size_t s = 101; s <= 1000; ++s) CHECK(lr_at(s, c) <= lr_at(s - 1, c));
}

TEST_CASE("adamw hand-executed step") {
    auto w = Tensor<float>::from({1}, {1.0f}, true);
    w.grad()[0] = 1.0f;
    w.node()->grad_touched = true;
    TrainConfig c;
    c.beta1 = 0.9;
    c.beta2 = 0.999;
    c.adam_eps = 1e-8;
    c.weight_decay = 0.0;
    OptimState st;
    adamw_step({{"w.weight", w}}, st, {}, 0.1, c);
    // m̂ = 1, v̂ = 1 -> w = 1 - 0.1 * 1 / (1 + 1e-8)
    CHECK(std::abs(w.data()[0] - 0.9) < 1e-6);
    CHECK(st.moments["w.weight"].steps == 1);
    CHECK(st.step == 1);
}

TEST_CASE("adamw freeze, zero grads and decay rules") {
    std::mt19937_64 rng{1};
    auto a = Tensor<float>::from({3}, {1, 2, 3}, true);
    auto b = Tensor<float>::from({3}, {4, 5, 6}, true);
    const auto a0 = std::vector<float>(a.data().begin(), a.data().end());
    TrainConfig c;
    OptimState st;
    std::normal_distribution<float> n(0, 1);
    for (int i = 0; i < 100; ++i) {
        for (auto& g : a.grad()) g = n(rng);
        for (auto& g : b.grad()) g = n(rng);
        a.node()->grad_touched = b.node()->grad_touched = true;
        adamw_step({{"a.weight", a}, {"b.weight", b}}, st, {"a.weight"}, 1e-2, c);
    }
    CHECK(same_bits(std::vector<float>(a.data().begin(), a.data().end()), a0));
    CHECK_FALSE(st.moments.count("a.weight"));
    CHECK(st.moments.at("b.weight").steps == 100);

    auto z = Tensor<float>::from({2}, {0.5f, -0.5f}, true);
    z.zero_grad();
    z.node()->grad_touched = true;
    c.weight_decay = 0.0;
    OptimState s2;
    adamw_step({{"z.weight", z}}, s2, {}, 0.1, c);
    CHECK(z.data()[0] == 0.5f);
    CHECK(z.data()[1] == -0.5f);

    CHECK(decays("generator.blocks.0.attn.qkv.weight"));
    CHECK(decays("connector.weight"));
    CHECK_FALSE(decays("generator.blocks.0.attn.qkv.bias"));
    CHECK_FALSE(decays("generator.final_ln.gamma"));
    CHECK_FALSE(decays("generator.token_embedding"));

    auto missing = Tensor<float>::from({1}, {1.0f}, true);
    OptimState s3;
    CHECK_THROWS_AS(adamw_step({{"m.weight", missing}}, s3, {}, 0.1, c), ContractError);
}

TEST_CASE("clip_grad_norm") {
    auto g = Tensor<float>::from({2}, {0, 0}, true);
    g.grad()[0] = 3;
    g.grad()[1] = 4;
    CHECK(clip_grad_norm({{"g", g}}, {}, 1.0) == doctest::Approx(5.0));
    CHECK(g.grad()[0] == doctest::Approx(0.6));
    CHECK(g.grad()[1] == doctest::Approx(0.8));
    CHECK(clip_grad_norm({{"g", g}}, {}, 10.0) == doctest::Approx(1.0));
    CHECK(g.grad()[0] == doctest::Approx(0.6));

    std::mt19937_64 rng{2};
    std::normal_distribution<float> n(0, 3);
    for (int i = 0; i < 20; ++i) {
        auto t = Tensor<float>::zeros({10}, true);
        for (auto& v : t.grad()) v = n(rng);
        const double pre = clip_grad_norm({{"t", t}}, {}, 2.0);
        double post = 0;
        for (float v : t.grad()) post += double(v) * v;
        CHECK(std::abs(std::sqrt(post) - std::min(pre, 2.0)) < 1e-5);
    }
}

TEST_CASE("config validation rules") {
    auto model = small_model();
    auto c = small_train();
    c.phase1_steps = 3;
    CHECK_THROWS_AS(c.validate(model), ConfigError);
    c = small_train();
    c.fusion = small_plan(64);
    CHECK_THROWS_AS(c.validate(model), ConfigError);
    c.fusion = small_plan(16);
    c.fusion->visibility = Visibility::prefix_bidirectional;
    CHECK_THROWS_AS(c.validate(model), ConfigError);
    c = small_train();
    c.readq.k = 32;
    CHECK_THROWS_AS(c.validate(model), ConfigError);
}

TEST_CASE("training is deterministic") {
    auto cfg = small_train();
    cfg.readq.enabled = true;
    cfg.readq.k = 4;
    auto a = train(cfg, small_model(), small_corpus());
    auto b = train(cfg, small_model(), small_corpus());
    REQUIRE(a.history.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::memcmp(&*a.history[i].loss_mean, &*b.history[i].loss_mean, 8) == 0);
    CHECK(a.final_loss == b.final_loss);
    CHECK(a.final_loss == doctest::Approx(trailing_loss(a.history)));
}

TEST_CASE("loss goes down") {
    auto cfg = small_train(40);
    auto r = train(cfg, small_model(), small_corpus());
    CHECK(*r.history.back().loss_mean < *r.history.front().loss_mean - 0.5);
}

TEST_CASE("batches cover every row once per epoch") {
    auto cfg = small_train();
    Trainer t(cfg, small_model(), small_corpus());
    const auto n = t.packed().rows();
    std::multiset<std::vector<std::int32_t>> seen, all;
    for (std::size_t r = 0; r < n; ++r) {
        all.insert(std::vector<std::int32_t>(t.packed().tokens.values.begin() + r * 32,
                                             t.packed().tokens.values.begin() + (r + 1) * 32));
    }
    std::size_t got = 0;
    for (std::size_t s = 0; got < n; ++s) {
        auto b = t.batch_for_step(s);
        for (std::size_t r = 0; r < b.rows() && got < n; ++r, ++got) {
            seen.insert(std::vector<std::int32_t>(b.tokens.values.begin() + r * 32, b.tokens.values.begin() + (r + 1) * 32));
        }
    }
    CHECK(seen == all);
}

TEST_CASE("corrupting masked-out targets leaves the update unchanged") {
    auto cfg = small_train(1);
    cfg.warmup_steps = 0;
    cfg.readq.enabled = true;
    cfg.readq.k = 6;
    cfg.fusion = small_plan(4);
    cfg.phase1_steps = 0;
    Trainer clean(cfg, small_model(), small_corpus());
    Trainer dirty(cfg, small_model(), small_corpus());
    std::mt19937_64 rng{3};
    std::size_t corrupted = 0;
    dirty.set_batch_transform([&](PackedBatch& b, const LossMask& m) {
        std::uniform_int_distribution<int> pick(0, vocab::kSize - 1);
        for (std::size_t i = 0; i < b.targets.size(); ++i) {
            if (!m.mask.values[i]) {
                b.targets.values[i] = pick(rng);
                ++corrupted;
            }
        }
    });
    // Zero connector would make the buddy gradient vanish; start from a live one.
    for (auto* t : {&clean, &dirty}) {
        std::mt19937_64 r{4};
        qtest::jitter(t->bundle().connector, r, 0.05);
    }
    clean.step();
    dirty.step();
    CHECK(corrupted > 0);
    const auto a = snapshot(clean);
    const auto b = snapshot(dirty);
    for (const auto& [name, v] : a) {
        INFO(name);
        CHECK(same_bits(v, b.at(name)));
    }
}

TEST_CASE("two-phase schedule") {
    auto cfg = small_train(16);
    cfg.fusion = small_plan();
    cfg.phase1_steps = 5;
    Trainer t(cfg, small_model(), small_corpus());
    const auto init = snapshot(t);
    CHECK(t.phase_at(0) == 1);
    CHECK(t.phase_at(4) == 1);
    CHECK(t.phase_at(5) == 2);
    t.run_until(5);
    auto after1 = snapshot(t);
    for (const auto& [name, v] : after1) {
        INFO(name);
        if (name.rfind("connector.", 0) == 0) CHECK_FALSE(same_bits(v, init.at(name)));
        else CHECK(same_bits(v, init.at(name)));
    }
    for (const auto& [name, m] : t.optim().moments) CHECK(name.rfind("connector.", 0) == 0);
    CHECK(t.optim().moments.at("connector.weight").steps == 5);

    t.step();
    CHECK(t.optim().moments.at("generator.lm_head.weight").steps == 1);
    CHECK(t.optim().moments.at("connector.weight").steps == 6);
    t.run_until(15);
    const auto after2 = snapshot(t);
    const auto reachable = buddy_tap_params(*cfg.fusion);
    for (const auto& [name, v] : after2) {
        INFO(name);
        const bool off_path = name.rfind("buddy.", 0) == 0 && !reachable.count(name.substr(6));
        if (off_path) CHECK(same_bits(v, init.at(name)));
        else CHECK_FALSE(same_bits(v, after1.at(name)));
    }
    for (const auto& m : t.history()) CHECK(m.phase == (m.step < 5 ? 1 : 2));
}

TEST_CASE("freeze_buddy keeps the buddy at init") {
    auto cfg = small_train(6);
    cfg.fusion = small_plan(8);
    cfg.fusion->freeze_buddy = true;
    cfg.phase1_steps = 2;
    Trainer t(cfg, small_model(), small_corpus());
    const auto init = snapshot(t);
    t.run();
    for (const auto& [name, v] : snapshot(t)) {
        if (name.rfind("buddy.", 0) == 0) CHECK(same_bits(v, init.at(name)));
    }
}

TEST_CASE("metrics, checkpoints and resume") {
    const auto dir = qtest::scratch_dir("trainer_resume");
    auto cfg = small_train(12);
    cfg.fusion = small_plan(4);
    cfg.phase1_steps = 3;
    cfg.checkpoint_every = 5;
    auto full = train(cfg, small_model(), small_corpus(), dir / "full");

    std::ifstream metrics(dir / "full" / "metrics.jsonl");
    std::vector<nlohmann::json> lines;
    for (std::string line; std::getline(metrics, line);) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
        CHECK(lines[i].at("step") == i);
        for (const char* key : {"phase", "lr", "loss_mean", "masked_in_tokens", "grad_norm_preclip", "wallclock_ms"}) {
            CHECK(lines[i].contains(key));
        }
    }
    for (const char* s : {"step_5", "step_10", "step_12"}) {
        CHECK(fs::exists(dir / "full" / "checkpoints" / s / "generator" / "manifest.json"));
        CHECK(fs::exists(dir / "full" / "checkpoints" / s / "buddy" / "weights.bin"));
        CHECK(fs::exists(dir / "full" / "checkpoints" / s / "connector" / "optim.bin"));
        CHECK(fs::exists(dir / "full" / "checkpoints" / s / "trainer_state.json"));
    }

    // Interrupted run: copy the run directory as it stood at step 5 and continue.
    fs::copy(dir / "full", dir / "resumed", fs::copy_options::recursive);
    auto resumed = Trainer::resume(cfg, small_model(), small_corpus(), dir / "resumed", 5);
    CHECK(resumed.current_step() == 5);
    auto report = resumed.run();
    REQUIRE(report.history.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
        INFO(i);
        CHECK(std::memcmp(&*report.history[i].loss_mean, &*full.history[i].loss_mean, 8) == 0);
    }
    CHECK(report.final_loss == full.final_loss);

    auto a = load_bundle(dir / "full" / "checkpoints" / "step_12", cfg.fusion);
    CHECK(qtest::stores_bitwise_equal(a.generator, resumed.bundle().generator));
    CHECK(qtest::stores_bitwise_equal(a.connector, resumed.bundle().connector));

    CHECK_THROWS_AS(Trainer::resume(cfg, small_model(), small_corpus(), dir / "full", 7), ConfigError);
}

TEST_CASE("all-masked batches are skipped and counted") {
    auto cfg = small_train(3);
    cfg.seq_len = 6;
    cfg.readq.enabled = true;
    cfg.readq.k = 5;
    auto r = train(cfg, small_model(), {"abcd", "efgh", "ijkl"});
    CHECK(r.skipped_steps == 3);
    for (const auto& m : r.history) CHECK_FALSE(m.loss_mean.has_value());
    CHECK(std::isnan(r.final_loss));
}

TEST_CASE("non-finite training aborts with a diagnostic checkpoint") {
    const auto dir = qtest::scratch_dir("trainer_numeric");
    auto cfg = small_train(30);
    cfg.peak_lr = 1e36;
    cfg.warmup_steps = 0;
    cfg.grad_clip_norm = 1.0;
    CHECK_THROWS_AS(train(cfg, small_model(), small_corpus(), dir), NumericError);
    bool diag = false;
    for (const auto& e : fs::directory_iterator(dir / "checkpoints")) {
        diag |= e.path().filename().string().rfind("diag_step_", 0) == 0;
    }
    CHECK(diag);
}

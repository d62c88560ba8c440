#include "quietread/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include "quietread/ops.hpp"

namespace quietread {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

void TrainConfig::validate(const ModelConfig& model) const {
    model.validate();
    if (total_steps == 0) throw ConfigError("train.total_steps must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (seq_len < 4) throw ConfigError("train.seq_len must be >= 4");
    if (seq_len > static_cast<std::size_t>(model.max_seq)) {
        throw ConfigError("train.seq_len (" + std::to_string(seq_len) + ") exceeds model.max_seq (" +
                          std::to_string(model.max_seq) + ")");
    }
    if (!(peak_lr >= 0.0)) throw ConfigError("train.peak_lr must be >= 0");
    if (warmup_steps > total_steps) throw ConfigError("train.warmup_steps must be <= train.total_steps");
    if (!(min_lr_frac >= 0.0 && min_lr_frac <= 1.0)) throw ConfigError("train.min_lr_frac must be in [0, 1]");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("train.grad_clip_norm must be positive");
    if (phase1_steps > total_steps) throw ConfigError("train.phase1_steps must be <= train.total_steps");
    if (phase1_steps > 0 && !fusion) throw ConfigError("train.phase1_steps > 0 requires a buddy section");
    if (!(phase1_lr_scale > 0.0)) throw ConfigError("train.phase1_lr_scale must be positive");
    if (readq.k >= seq_len) {
        throw ConfigError("train.readq.k (" + std::to_string(readq.k) + ") must be smaller than train.seq_len (" +
                          std::to_string(seq_len) + ")");
    }
    if (fusion) {
        fusion->validate();
        if (fusion->visibility != Visibility::causal) {
            throw ConfigError("buddy.visibility must be causal for training on packed data");
        }
        if (fusion->window && *fusion->window > seq_len) {
            throw ConfigError("buddy.window (" + std::to_string(*fusion->window) + ") exceeds train.seq_len (" +
                              std::to_string(seq_len) + ")");
        }
        if (seq_len > static_cast<std::size_t>(fusion->buddy_config.max_seq)) {
            throw ConfigError("train.seq_len exceeds buddy.model.max_seq");
        }
        if (fusion->buddy_config.vocab_size != model.vocab_size) {
            throw ConfigError("buddy.model.vocab_size must equal model.vocab_size");
        }
    }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    const double peak = cfg.peak_lr;
    if (step < cfg.warmup_steps) {
        return peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.total_steps <= cfg.warmup_steps) return peak;
    const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) /
                                              static_cast<double>(cfg.total_steps - cfg.warmup_steps));
    const double floor = cfg.min_lr_frac * peak;
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const std::string& name) {
    constexpr std::string_view suffix = ".weight";
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void adamw_step(const std::vector<NamedParam>& params, OptimState& optim, const FreezeSet& freeze, double lr,
                const TrainConfig& cfg) {
    for (const auto& p : params) {
        if (freeze.count(p.name)) continue;
        if (!p.tensor.has_grad()) throw ContractError("no gradient for unfrozen parameter " + p.name);
    }
    const float b1 = static_cast<float>(cfg.beta1);
    const float b2 = static_cast<float>(cfg.beta2);
    const float eps = static_cast<float>(cfg.adam_eps);
    const float rate = static_cast<float>(lr);
    for (const auto& p : params) {
        if (freeze.count(p.name)) continue;
        auto& st = optim.moments[p.name];
        const std::size_t n = p.tensor.numel();
        if (st.m.size() != n) {
            st.m.assign(n, 0.0f);
            st.v.assign(n, 0.0f);
        }
        st.steps += 1;
        const auto t = static_cast<double>(st.steps);
        const float c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
        const float c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
        const float decay = decays(p.name) ? static_cast<float>(cfg.weight_decay) : 0.0f;
        auto w = p.tensor.data();
        auto g = p.tensor.grad();
        for (std::size_t i = 0; i < n; ++i) {
            st.m[i] = b1 * st.m[i] + (1.0f - b1) * g[i];
            st.v[i] = b2 * st.v[i] + (1.0f - b2) * g[i] * g[i];
            const float mhat = st.m[i] / c1;
            const float vhat = st.v[i] / c2;
            w[i] -= rate * (mhat / (std::sqrt(vhat) + eps) + decay * w[i]);
        }
    }
    optim.step += 1;
}

double clip_grad_norm(const std::vector<NamedParam>& params, const FreezeSet& freeze, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& p : params) {
        if (freeze.count(p.name)) continue;
        for (float g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const auto factor = static_cast<float>(max_norm / norm);
        for (const auto& p : params) {
            if (freeze.count(p.name)) continue;
            for (auto& g : p.tensor.grad()) g *= factor;
        }
    }
    return norm;
}

std::string metrics_line(const StepMetrics& m) {
    ojson j;
    j["step"] = m.step;
    j["phase"] = m.phase;
    j["lr"] = m.lr;
    j["loss_mean"] = m.loss_mean ? ojson(*m.loss_mean) : ojson(nullptr);
    j["masked_in_tokens"] = m.masked_in_tokens;
    j["grad_norm_preclip"] = m.grad_norm_preclip;
    j["wallclock_ms"] = m.wallclock_ms;
    return j.dump();
}

namespace {

StepMetrics parse_metrics_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    StepMetrics m;
    m.step = j.at("step").get<std::size_t>();
    m.phase = j.at("phase").get<int>();
    m.lr = j.at("lr").get<double>();
    if (!j.at("loss_mean").is_null()) m.loss_mean = j.at("loss_mean").get<double>();
    m.masked_in_tokens = j.at("masked_in_tokens").get<std::size_t>();
    m.grad_norm_preclip = j.at("grad_norm_preclip").get<double>();
    m.wallclock_ms = j.at("wallclock_ms").get<double>();
    return m;
}

std::string qualified(std::string_view group, const std::string& name) {
    return std::string{group} + "." + name;
}

}  // namespace

double trailing_loss(const std::vector<StepMetrics>& history, std::size_t window) {
    double total = 0.0;
    std::size_t n = 0;
    for (auto it = history.rbegin(); it != history.rend() && n < window; ++it) {
        if (!it->loss_mean) continue;
        total += *it->loss_mean;
        ++n;
    }
    return n ? total / static_cast<double>(n) : std::nan("");
}

std::uint64_t generator_seed(std::uint64_t seed) { return seed; }
std::uint64_t buddy_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ull; }

Trainer::Trainer(TrainConfig cfg, ModelConfig model, const std::vector<std::string>& corpus,
                 std::optional<fs::path> out_dir)
    : cfg_{std::move(cfg)}, out_dir_{std::move(out_dir)} {
    cfg_.validate(model);
    if (corpus.empty()) throw ConfigError("training corpus is empty");
    packed_ = pack_documents(corpus, cfg_.seq_len);
    bundle_.config = model;
    bundle_.generator = init_params<float>(model, generator_seed(cfg_.seed));
    if (cfg_.fusion) {
        bundle_.plan = cfg_.fusion;
        bundle_.buddy = init_params<float>(cfg_.fusion->buddy_config, buddy_seed(cfg_.seed));
        bundle_.connector = init_connector<float>(static_cast<std::size_t>(cfg_.fusion->buddy_config.d_model),
                                                  static_cast<std::size_t>(model.d_model));
    }
    if (out_dir_) {
        std::error_code ec;
        fs::create_directories(*out_dir_, ec);
        if (ec) throw IoError("cannot create run directory " + out_dir_->string() + ": " + ec.message());
        std::ofstream(*out_dir_ / "metrics.jsonl", std::ios::trunc);
    }
}

Trainer Trainer::resume(TrainConfig cfg, ModelConfig model, const std::vector<std::string>& corpus,
                        const fs::path& out_dir, std::size_t step) {
    const auto dir = out_dir / "checkpoints" / ("step_" + std::to_string(step));
    if (!fs::exists(dir / "trainer_state.json")) {
        throw ConfigError("no checkpoint to resume from at " + dir.string());
    }
    // Construct without truncating the existing metrics file.
    Trainer t(std::move(cfg), std::move(model), corpus, std::nullopt);
    t.out_dir_ = out_dir;
    t.load_from(dir);

    const auto metrics_path = out_dir / "metrics.jsonl";
    std::vector<std::string> kept;
    if (std::ifstream in{metrics_path}) {
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto m = parse_metrics_line(line);
            if (m.step >= step) continue;
            t.history_.push_back(m);
            kept.push_back(line);
        }
    }
    std::ofstream out(metrics_path, std::ios::trunc);
    for (const auto& line : kept) out << line << '\n';
    t.skipped_ = static_cast<std::size_t>(
        std::count_if(t.history_.begin(), t.history_.end(), [](const StepMetrics& m) { return !m.loss_mean; }));
    return t;
}

int Trainer::phase_at(std::size_t step) const {
    if (cfg_.phase1_steps == 0) return 0;
    return step < cfg_.phase1_steps ? 1 : 2;
}

FreezeSet Trainer::freeze_set_at(std::size_t step) const {
    FreezeSet freeze;
    if (!bundle_.fused()) return freeze;
    if (phase_at(step) == 1) {
        for (const auto& [name, t] : bundle_.generator.entries()) freeze.insert(qualified("generator", name));
        for (const auto& [name, t] : bundle_.buddy.entries()) freeze.insert(qualified("buddy", name));
        return freeze;
    }
    const auto reachable = buddy_tap_params(*bundle_.plan);
    for (const auto& [name, t] : bundle_.buddy.entries()) {
        if (bundle_.plan->freeze_buddy || !reachable.count(name)) freeze.insert(qualified("buddy", name));
    }
    return freeze;
}

std::vector<NamedParam> Trainer::named_params() const {
    std::vector<NamedParam> out;
    for (const auto& [name, t] : bundle_.generator.entries()) out.push_back({qualified("generator", name), t});
    if (bundle_.fused()) {
        for (const auto& [name, t] : bundle_.buddy.entries()) out.push_back({qualified("buddy", name), t});
        for (const auto& [name, t] : bundle_.connector.entries()) out.push_back({qualified("connector", name), t});
    }
    return out;
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
    auto it = order_cache_.find(epoch);
    if (it != order_cache_.end()) return it->second;
    std::vector<std::size_t> order(packed_.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed & 0xffffffffu), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng{seq};
    std::shuffle(order.begin(), order.end(), rng);
    if (order_cache_.size() > 4) order_cache_.erase(order_cache_.begin());
    order_cache_.emplace(epoch, order);
    return order;
}

PackedBatch Trainer::batch_for_step(std::size_t step) const {
    const std::size_t n = packed_.rows();
    std::vector<std::size_t> rows;
    rows.reserve(cfg_.batch_size);
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
        const std::size_t g = step * cfg_.batch_size + i;
        rows.push_back(epoch_order(g / n)[g % n]);
    }
    return select_rows(packed_, rows);
}

StepMetrics Trainer::step() {
    if (step_ >= cfg_.total_steps) throw ContractError("training already finished");
    const auto start = std::chrono::steady_clock::now();
    StepMetrics m;
    m.step = step_;
    m.phase = phase_at(step_);
    m.lr = lr_at(step_, cfg_) * (m.phase == 1 ? cfg_.phase1_lr_scale : 1.0);

    auto batch = batch_for_step(step_);
    const auto mask = compute_loss_mask(batch, cfg_.readq);
    if (batch_transform_) batch_transform_(batch, mask);
    m.masked_in_tokens = mask.masked_in_count;

    const auto freeze = freeze_set_at(step_);
    const auto params = named_params();
    for (const auto& p : params) {
        p.tensor.zero_grad();
        p.tensor.set_requires_grad(!freeze.count(p.name));
    }

    if (mask.masked_in_count == 0) {
        std::cerr << "warning: step " << step_ << " has no masked-in tokens; skipped\n";
        ++skipped_;
    } else {
        try {
            Tape<float> tape;
            auto out = bundle_forward(tape, bundle_, batch.tokens);
            auto ce = cross_entropy_masked(tape, out.logits, batch.targets, mask.mask);
            auto loss = scale(tape, ce.loss_sum, 1.0f / static_cast<float>(ce.token_count));
            tape.backward(loss);
            m.loss_mean = static_cast<double>(loss.item());
            m.grad_norm_preclip = clip_grad_norm(params, freeze, cfg_.grad_clip_norm);
            if (!std::isfinite(m.grad_norm_preclip)) throw NumericError("non-finite gradient norm");
            adamw_step(params, optim_, freeze, m.lr, cfg_);
        } catch (const NumericError& e) {
            if (out_dir_) {
                const auto diag = *out_dir_ / "checkpoints" / ("diag_step_" + std::to_string(step_));
                save_checkpoint(diag);
                throw NumericError(std::string{e.what()} + " at step " + std::to_string(step_) +
                                   "; diagnostic checkpoint in " + diag.string());
            }
            throw NumericError(std::string{e.what()} + " at step " + std::to_string(step_));
        }
    }
    ++step_;
    m.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    history_.push_back(m);

    if (out_dir_) {
        std::ofstream out(*out_dir_ / "metrics.jsonl", std::ios::app);
        out << metrics_line(m) << '\n';
        if (!out) throw IoError("failed appending metrics in " + out_dir_->string());
        const bool periodic = cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0;
        if (periodic || step_ == cfg_.total_steps) {
            save_checkpoint(*out_dir_ / "checkpoints" / ("step_" + std::to_string(step_)));
        }
    }
    if (eval_hook_ && cfg_.eval_every > 0 && (step_ % cfg_.eval_every == 0 || step_ == cfg_.total_steps)) {
        eval_hook_(step_, bundle_);
    }
    return m;
}

void Trainer::run_until(std::size_t step) {
    while (step_ < std::min(step, cfg_.total_steps)) this->step();
}

TrainReport Trainer::run() {
    run_until(cfg_.total_steps);
    TrainReport r;
    r.steps_completed = step_;
    r.skipped_steps = skipped_;
    r.history = history_;
    r.final_loss = trailing_loss(history_);
    return r;
}

void Trainer::save_checkpoint(const fs::path& dir) const {
    auto moments_for = [&](std::string_view group, const ParamStore<float>& store) {
        StoreMoments out;
        for (const auto& [name, t] : store.entries()) {
            auto it = optim_.moments.find(qualified(group, name));
            if (it != optim_.moments.end()) out.emplace(name, it->second);
        }
        return out;
    };
    const auto gen_moments = moments_for("generator", bundle_.generator);
    quietread::save_checkpoint(dir / "generator", bundle_.generator, bundle_.config, &gen_moments);
    if (bundle_.fused()) {
        const auto buddy_moments = moments_for("buddy", bundle_.buddy);
        quietread::save_checkpoint(dir / "buddy", bundle_.buddy, bundle_.plan->buddy_config, &buddy_moments);
        const auto conn_moments = moments_for("connector", bundle_.connector);
        ojson conn_cfg;
        conn_cfg["d_in"] = bundle_.plan->buddy_config.d_model;
        conn_cfg["d_out"] = bundle_.config.d_model;
        save_store(dir / "connector", conn_cfg, bundle_.connector, &conn_moments);
    }
    ojson state;
    state["format_version"] = kCheckpointFormatVersion;
    state["step"] = step_;
    state["optim_step"] = optim_.step;
    state["skipped_steps"] = skipped_;
    std::ofstream out(dir / "trainer_state.json", std::ios::trunc);
    out << state.dump(2) << '\n';
    if (!out) throw IoError("failed writing trainer state in " + dir.string());
}

ModelBundle<float> load_bundle(const fs::path& step_dir, const std::optional<FusionPlan>& plan) {
    ModelBundle<float> bundle;
    auto gen = load_checkpoint(step_dir / "generator");
    bundle.config = gen.config;
    bundle.generator = std::move(gen.params);
    if (plan) {
        auto buddy = load_checkpoint(step_dir / "buddy");
        if (!(buddy.config == plan->buddy_config)) {
            throw ConfigError("buddy checkpoint config does not match buddy.model in the run config");
        }
        bundle.plan = plan;
        bundle.buddy = std::move(buddy.params);
        const auto layout = connector_layout(static_cast<std::size_t>(plan->buddy_config.d_model),
                                             static_cast<std::size_t>(bundle.config.d_model));
        bundle.connector = load_store(step_dir / "connector", &layout).params;
    }
    return bundle;
}

void Trainer::load_from(const fs::path& dir) {
    std::ifstream in(dir / "trainer_state.json");
    if (!in) throw IoError("cannot read " + (dir / "trainer_state.json").string());
    const auto state = nlohmann::json::parse(in);
    step_ = state.at("step").get<std::size_t>();
    optim_.step = state.at("optim_step").get<std::uint64_t>();

    auto absorb = [&](std::string_view group, const fs::path& sub, ParamStore<float>& target,
                      const std::vector<std::pair<std::string, Shape>>& layout) {
        auto ck = load_store(sub, &layout);
        target = std::move(ck.params);
        if (ck.moments) {
            for (auto& [name, st] : *ck.moments) optim_.moments[qualified(group, name)] = std::move(st);
        }
    };
    optim_.moments.clear();
    absorb("generator", dir / "generator", bundle_.generator, param_layout(bundle_.config));
    if (bundle_.fused()) {
        absorb("buddy", dir / "buddy", bundle_.buddy, param_layout(bundle_.plan->buddy_config));
        absorb("connector", dir / "connector", bundle_.connector,
               connector_layout(static_cast<std::size_t>(bundle_.plan->buddy_config.d_model),
                                static_cast<std::size_t>(bundle_.config.d_model)));
    }
}

TrainReport train(const TrainConfig& cfg, const ModelConfig& model, const std::vector<std::string>& corpus,
                  const std::optional<fs::path>& out_dir) {
    Trainer t(cfg, model, corpus, out_dir);
    return t.run();
}

}  // namespace quietread

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "quietread/checkpoint.hpp"
#include "quietread/fusion.hpp"
#include "quietread/readq.hpp"

namespace quietread {

struct TrainConfig {
    std::size_t total_steps{300};
    std::size_t batch_size{8};
    std::size_t seq_len{128};
    double peak_lr{3e-3};
    std::size_t warmup_steps{9};
    double min_lr_frac{0.1};
    double weight_decay{0.1};
    double beta1{0.9};
    double beta2{0.95};
    double adam_eps{1e-8};
    double grad_clip_norm{1.0};
    std::uint64_t seed{0};
    // Connector-only steps at the start of a fused run; 0 disables.
    std::size_t phase1_steps{0};
    double phase1_lr_scale{1.0};
    ReadQConfig readq;
    std::optional<FusionPlan> fusion;
    std::size_t eval_every{0};
    std::size_t checkpoint_every{0};

    void validate(const ModelConfig& model) const;
};

// Linear warmup 0 -> peak over warmup_steps, then cosine decay to
// min_lr_frac * peak at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct NamedParam {
    std::string name;
    Tensor<float> tensor;
};

using FreezeSet = std::set<std::string>;

struct OptimState {
    // Keyed by qualified parameter name; absent until the parameter is
    // first updated, so newly unfrozen parameters start from zero moments.
    std::map<std::string, MomentState> moments;
    std::uint64_t step{0};
};

// Decoupled weight decay applies to names ending in ".weight" only.
bool decays(const std::string& name);

// AdamW with bias correction. Frozen parameters and their moments are not
// touched. Throws ContractError if an unfrozen parameter has no gradient.
void adamw_step(const std::vector<NamedParam>& params, OptimState& optim, const FreezeSet& freeze, double lr,
                const TrainConfig& cfg);

// Global L2 norm over unfrozen gradients; rescales them when above max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(const std::vector<NamedParam>& params, const FreezeSet& freeze, double max_norm);

struct StepMetrics {
    std::size_t step{0};
    // 0 = single-phase run, 1 = connector-only, 2 = full.
    int phase{0};
    double lr{0.0};
    std::optional<double> loss_mean;
    std::size_t masked_in_tokens{0};
    double grad_norm_preclip{0.0};
    double wallclock_ms{0.0};
};

std::string metrics_line(const StepMetrics& m);

struct TrainReport {
    std::size_t steps_completed{0};
    std::size_t skipped_steps{0};
    std::vector<StepMetrics> history;
    // Mean loss over the last (up to) ten non-skipped steps.
    double final_loss{0.0};
};

double trailing_loss(const std::vector<StepMetrics>& history, std::size_t window = 10);

class Trainer {
public:
    using EvalHook = std::function<void(std::size_t step, const ModelBundle<float>& bundle)>;

    // Fresh run. out_dir, when set, receives metrics.jsonl and checkpoints/.
    Trainer(TrainConfig cfg, ModelConfig model, const std::vector<std::string>& corpus,
            std::optional<std::filesystem::path> out_dir = std::nullopt);

    // Continues from out_dir/checkpoints/step_<step>.
    static Trainer resume(TrainConfig cfg, ModelConfig model, const std::vector<std::string>& corpus,
                          const std::filesystem::path& out_dir, std::size_t step);

    StepMetrics step();
    void run_until(std::size_t step);
    TrainReport run();

    std::size_t current_step() const { return step_; }
    int phase_at(std::size_t step) const;
    FreezeSet freeze_set_at(std::size_t step) const;
    std::vector<NamedParam> named_params() const;

    const TrainConfig& config() const { return cfg_; }
    const ModelBundle<float>& bundle() const { return bundle_; }
    ModelBundle<float>& bundle() { return bundle_; }
    const OptimState& optim() const { return optim_; }
    const PackedBatch& packed() const { return packed_; }
    const std::vector<StepMetrics>& history() const { return history_; }
    std::size_t skipped_steps() const { return skipped_; }

    PackedBatch batch_for_step(std::size_t step) const;

    // Optional hook fired after steps that are multiples of eval_every.
    void set_eval_hook(EvalHook hook) { eval_hook_ = std::move(hook); }
    // Replaces the next batches' targets; testing hook for mask invariance.
    void set_batch_transform(std::function<void(PackedBatch&, const LossMask&)> fn) {
        batch_transform_ = std::move(fn);
    }

    void save_checkpoint(const std::filesystem::path& dir) const;

private:
    void load_from(const std::filesystem::path& dir);
    std::vector<std::size_t> epoch_order(std::size_t epoch) const;

    TrainConfig cfg_;
    PackedBatch packed_;
    ModelBundle<float> bundle_;
    OptimState optim_;
    std::optional<std::filesystem::path> out_dir_;
    std::size_t step_{0};
    std::size_t skipped_{0};
    std::vector<StepMetrics> history_;
    EvalHook eval_hook_;
    std::function<void(PackedBatch&, const LossMask&)> batch_transform_;
    mutable std::map<std::size_t, std::vector<std::size_t>> order_cache_;
};

// Runs a full training job and returns its report.
TrainReport train(const TrainConfig& cfg, const ModelConfig& model, const std::vector<std::string>& corpus,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Generator seed and buddy seed derived from the run seed.
std::uint64_t generator_seed(std::uint64_t seed);
std::uint64_t buddy_seed(std::uint64_t seed);

// Loads the bundle saved under run_dir/checkpoints/step_<step>.
ModelBundle<float> load_bundle(const std::filesystem::path& step_dir, const std::optional<FusionPlan>& plan);

}  // namespace quietread

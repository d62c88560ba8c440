#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quietread/config.hpp"

namespace quietread::app {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kNumeric = 3, kIo = 4 };

// What to evaluate a checkpoint on. Empty sources are simply not reported.
struct EvalRequest {
    std::optional<std::filesystem::path> corpus_path;
    std::optional<std::filesystem::path> tasks_path;
    std::optional<SynthSpec> synth;
    std::size_t bucket_k{16};
    Scoring scoring{Scoring::length_norm};
    std::size_t seq_len{128};

    nlohmann::ordered_json describe() const;
};

EvalRequest eval_request_from(const RunConfig& config);

// Full report object as written to reports/eval_step_N.json.
nlohmann::ordered_json eval_report(const ModelBundle<float>& bundle, const EvalRequest& request, std::size_t step);
std::filesystem::path write_eval_report(const std::filesystem::path& run_dir, std::size_t step,
                                        const nlohmann::ordered_json& report);

// Two aligned lines per packed row: token glyphs and mask glyphs.
std::string render_mask(const PackedBatch& batch, const LossMask& mask);

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::optional<std::size_t> resume, std::ostream& out);
int cmd_eval(const std::filesystem::path& run_dir, std::size_t step,
             const std::optional<std::filesystem::path>& corpus, const std::optional<std::filesystem::path>& tasks,
             std::optional<std::size_t> bucket_k, std::optional<std::string> scoring, std::ostream& out);
int cmd_generate(const std::filesystem::path& run_dir, std::size_t step, const std::string& prompt,
                 std::size_t max_new, std::optional<double> temperature, std::uint64_t seed, std::ostream& out);
int cmd_mask_inspect(const std::filesystem::path& config_path, const std::string& text, std::ostream& out);
int cmd_synth(const std::string& kind, std::uint64_t seed, std::size_t n, const std::filesystem::path& out_path,
              const std::optional<std::filesystem::path>& tasks_out);
int cmd_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out_path,
               std::ostream& out);

// Parses argv, runs the subcommand and maps exceptions onto exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Reads QUIETREAD_THREADS and caps OpenMP threads accordingly.
void apply_thread_env();

}  // namespace quietread::app

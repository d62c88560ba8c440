#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "quietread/fusion.hpp"
#include "quietread/readq.hpp"

namespace quietread {

// Bucket A: masked-in positions within the first k predictions after a BOS.
// Bucket B: every other masked-in position.
struct BucketReport {
    std::size_t k{0};
    double mean_a{0.0};
    std::size_t count_a{0};
    double mean_b{0.0};
    std::size_t count_b{0};
};

struct PerplexityResult {
    double ppl{0.0};
    double mean_loss{0.0};
    double loss_sum{0.0};
    std::size_t token_count{0};
    BucketReport buckets;
};

// Evaluates over base_mask only; the ReadQ window is used for bucketing,
// never for excluding tokens.
PerplexityResult perplexity(const ModelBundle<float>& bundle, const std::vector<std::string>& corpus,
                            std::size_t seq_len, std::size_t bucket_k, std::size_t rows_per_batch = 8);

enum class Scoring { sum, length_norm };
std::string to_string(Scoring s);
Scoring parse_scoring(const std::string& s);

struct ChoiceScore {
    double sum_logprob{0.0};
    double norm_logprob{0.0};
};

struct TaskResult {
    std::size_t chosen{0};
    bool correct{false};
    std::vector<ChoiceScore> scores;
};

struct McResult {
    Scoring scoring{Scoring::length_norm};
    std::vector<TaskResult> tasks;
    std::size_t skipped{0};
    double accuracy_sum{0.0};
    double accuracy_norm{0.0};

    double accuracy() const { return scoring == Scoring::sum ? accuracy_sum : accuracy_norm; }
};

// Index of the highest score; ties go to the lowest index.
std::size_t argmax_first(const std::vector<double>& scores);

// log P(choice | BOS + prompt) per choice; tasks that do not fit max_seq are
// skipped and counted.
McResult mc_eval(const ModelBundle<float>& bundle, const std::vector<McTask>& tasks, Scoring scoring);

struct GenerateOptions {
    std::size_t max_new{0};
    // Greedy when empty.
    std::optional<double> temperature;
    std::uint64_t seed{0};
};

struct GenerateTrace {
    std::string text;
    std::vector<std::int32_t> tokens;
    // Last-position logits at each decoding step.
    std::vector<std::vector<float>> step_logits;
};

// Decodes after [BOS + prompt] until max_new tokens or a special token.
GenerateTrace generate_trace(const ModelBundle<float>& bundle, std::string_view prompt, const GenerateOptions& opts);
std::string generate(const ModelBundle<float>& bundle, std::string_view prompt, const GenerateOptions& opts);

nlohmann::ordered_json to_json(const PerplexityResult& r);
nlohmann::ordered_json to_json(const McResult& r);

struct ComparisonTable {
    std::vector<std::string> columns;
    std::vector<std::string> row_names;
    // NaN marks a missing value.
    std::vector<std::vector<double>> values;

    bool operator==(const ComparisonTable& other) const;
};

struct RunSummary {
    std::string name;
    std::vector<std::pair<std::size_t, double>> loss_curve;
    double final_train_loss{0.0};
    nlohmann::json eval_config;
    nlohmann::json eval_report;
};

// Reads config.resolved.json, metrics.jsonl and the latest reports/eval_step_N.json.
RunSummary load_run_summary(const std::filesystem::path& run_dir);

// One row per run in the given order; throws ConfigError when eval configs differ.
ComparisonTable compare_runs(const std::vector<RunSummary>& runs);

std::string table_csv(const ComparisonTable& table);
ComparisonTable parse_table_csv(const std::string& csv);
std::string loss_curve_svg(const std::vector<RunSummary>& runs);

}  // namespace quietread

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quietread/data.hpp"
#include "quietread/eval.hpp"
#include "quietread/trainer.hpp"

namespace quietread {

struct SynthSpec {
    std::string kind;  // "kv" or "reverse"
    KvCorpusSpec kv;
    ReverseCorpusSpec reverse;
};

struct DataSection {
    std::optional<std::filesystem::path> corpus_path;
    std::optional<SynthSpec> synth;
};

struct EvalSection {
    std::optional<std::filesystem::path> corpus_path;
    std::optional<std::filesystem::path> tasks_path;
    std::optional<SynthSpec> synth;
    std::size_t bucket_k{16};
    Scoring scoring{Scoring::length_norm};
    bool present{false};
};

// Parsed and default-filled run configuration. Unknown keys are rejected and
// errors name the offending key path (e.g. "model.d_model").
struct RunConfig {
    std::string name;
    ModelConfig model;
    TrainConfig train;
    DataSection data;
    EvalSection eval;
};

// Relative paths resolve against base_dir.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Fully resolved configuration; parse_run_config(resolved_json(c)) == c.
nlohmann::ordered_json resolved_json(const RunConfig& config);

nlohmann::ordered_json synth_json(const SynthSpec& spec);

std::vector<std::string> synth_docs(const SynthSpec& spec);
std::vector<McTask> synth_tasks(const SynthSpec& spec);

std::vector<std::string> load_training_corpus(const RunConfig& config);

}  // namespace quietread

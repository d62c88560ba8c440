#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quietread/model.hpp"

namespace quietread {

inline constexpr int kCheckpointFormatVersion = 1;

// Adam moments for one parameter store, keyed by parameter name.
struct MomentState {
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t steps{0};

    bool operator==(const MomentState&) const = default;
};

using StoreMoments = std::map<std::string, MomentState>;

struct StoreCheckpoint {
    nlohmann::ordered_json config;
    ParamStore<float> params;
    std::optional<StoreMoments> moments;
};

// Writes <dir>/manifest.json and <dir>/weights.bin (little-endian float32,
// row-major, concatenated in manifest order). Moments go to optim.bin with
// their own manifest section.
void save_store(const std::filesystem::path& dir, const nlohmann::ordered_json& config,
                const ParamStore<float>& params, const StoreMoments* moments = nullptr);

// expected_layout, when given, must match the manifest name for name and
// shape for shape.
StoreCheckpoint load_store(const std::filesystem::path& dir,
                           const std::vector<std::pair<std::string, Shape>>* expected_layout = nullptr);

struct ModelCheckpoint {
    ModelConfig config;
    ParamStore<float> params;
    std::optional<StoreMoments> moments;
};

void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& params, const ModelConfig& config,
                     const StoreMoments* moments = nullptr);
ModelCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace quietread

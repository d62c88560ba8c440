#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "quietread/data.hpp"
#include "quietread/tensor.hpp"

namespace quietread {

struct ModelConfig {
    int vocab_size{vocab::kSize};
    int d_model{64};
    int n_layers{2};
    int n_heads{4};
    int d_ff{256};
    int max_seq{128};
    double ln_eps{1e-5};
    double init_std{0.02};

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void to_json(nlohmann::ordered_json& j, const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Named parameter tensors in insertion order. Names are unique.
template <typename T>
class ParamStore {
public:
    void add(const std::string& name, Tensor<T> tensor);
    const Tensor<T>& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

    void zero_grad() const;
    void set_requires_grad(bool flag) const;
    std::size_t num_values() const;

    // Deep copy of every tensor.
    ParamStore clone() const;

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Parameter names and shapes derived from a config, in canonical order.
std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& config);

// Normal(0, init_std^2) weights, residual output projections scaled by
// 1/sqrt(2 n_layers), LayerNorm gamma=1 beta=0, zero biases.
template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct ForwardOutput {
    Tensor<T> logits;
    // Residual stream after each executed block; index 0 is after block 1.
    std::vector<Tensor<T>> layer_hiddens;
};

struct ForwardOptions {
    // Number of blocks to run; negative runs all of them.
    int n_blocks{-1};
    bool compute_logits{true};
    // Positions [0, prefix) attend to each other bidirectionally.
    std::size_t bidirectional_prefix{0};
};

// input = E[tokens] + P[0..S) + extra_input; pre-norm blocks with causal
// attention; logits = final_ln(x) * lm_head.
template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const ParamStore<T>& params, const ModelConfig& config,
                         const IdGrid& tokens, const Tensor<T>* extra_input = nullptr,
                         const ForwardOptions& options = {});

// Runs one pre-norm block on x.
template <typename T>
Tensor<T> transformer_block(Tape<T>& tape, const ParamStore<T>& params, const ModelConfig& config, int layer,
                            const Tensor<T>& x, std::size_t bidirectional_prefix);

// Converts a store between precisions (float64 gradient checks reuse float32 weights).
template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params);

}  // namespace quietread

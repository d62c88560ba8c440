#pragma once

#include <optional>
#include <set>
#include <string>

#include "quietread/model.hpp"

namespace quietread {

enum class Visibility { causal, prefix_bidirectional };
enum class TapNorm { none, final_ln_copy };

std::string to_string(Visibility v);
std::string to_string(TapNorm t);
Visibility parse_visibility(const std::string& s);
TapNorm parse_tap_norm(const std::string& s);

struct FusionPlan {
    ModelConfig buddy_config;
    // Trailing mean-pooling width over the tap; empty means no pooling.
    std::optional<std::size_t> window;
    Visibility visibility{Visibility::causal};
    TapNorm tap_norm{TapNorm::none};
    bool freeze_buddy{false};

    void validate() const;
    bool operator==(const FusionPlan&) const = default;
};

// Single affine projection d_b -> d_g, zero-initialized ("weight" [d_b x d_g],
// "bias" [d_g]).
template <typename T>
ParamStore<T> init_connector(std::size_t d_buddy, std::size_t d_gen);

std::vector<std::pair<std::string, Shape>> connector_layout(std::size_t d_buddy, std::size_t d_gen);

// Buddy residual stream after its second-to-last block, with the buddy's
// final LayerNorm applied when tap_norm == final_ln_copy. `prompt_prefix` is
// only honoured under prefix_bidirectional visibility.
template <typename T>
Tensor<T> buddy_encode(Tape<T>& tape, const ParamStore<T>& buddy, const FusionPlan& plan, const IdGrid& tokens,
                       std::size_t prompt_prefix = 0);

// pooled[b][i] = mean(h[b][max(0, i-W+1) .. i]). W == 1 returns h itself.
template <typename T>
Tensor<T> sliding_pool(Tape<T>& tape, const Tensor<T>& h, std::size_t window);

// pooled * weight + bias at every position.
template <typename T>
Tensor<T> connect(Tape<T>& tape, const ParamStore<T>& connector, const Tensor<T>& pooled);

// Generator, optionally paired with a buddy reader and connector.
template <typename T>
struct ModelBundle {
    ModelConfig config;
    ParamStore<T> generator;
    std::optional<FusionPlan> plan;
    ParamStore<T> buddy;
    ParamStore<T> connector;

    bool fused() const { return plan.has_value(); }
};

// Generator forward with extra_input = connect(sliding_pool(buddy_encode(tokens))).
template <typename T>
ForwardOutput<T> fuse_forward(Tape<T>& tape, const ModelBundle<T>& bundle, const IdGrid& tokens,
                              std::size_t prompt_prefix = 0);

// fuse_forward for fused bundles, plain forward otherwise.
template <typename T>
ForwardOutput<T> bundle_forward(Tape<T>& tape, const ModelBundle<T>& bundle, const IdGrid& tokens,
                                std::size_t prompt_prefix = 0);

// Buddy parameters that lie on the path to the tap. The rest (last block,
// lm_head, and final_ln unless copied) never receive gradient.
std::set<std::string> buddy_tap_params(const FusionPlan& plan);

}  // namespace quietread

#pragma once

#include <cstddef>

#include "quietread/tensor.hpp"

namespace quietread {

// GELU tanh approximation: 0.5 x (1 + tanh(kGeluC (x + kGeluCubic x^3))).
inline constexpr double kGeluC = 0.7978845608;
inline constexpr double kGeluCubic = 0.044715;

// Attention visibility: row i sees columns j <= i, and additionally every
// column inside the first `prefix` positions when i itself is inside it.
// prefix == 0 is plain causal attention.
inline std::size_t last_visible(std::size_t row, std::size_t prefix) {
    return (row < prefix && prefix > 0) ? (prefix - 1 > row ? prefix - 1 : row) : row;
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// x[..., k] * w[k, n] (+ bias[n]) over all leading dimensions.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {});

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> layernorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps);

// table[V, d] gathered by ids[B, S] into [B, S, d]. Backward scatter-adds.
template <typename T>
Tensor<T> embedding_gather(Tape<T>& tape, const Tensor<T>& table, const IdGrid& ids);

// x[B, S, d] + table[s, :] for s < S. Requires S <= rows of table.
template <typename T>
Tensor<T> add_positions(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& table);

// Scaled dot-product scores from a packed qkv[B, S, 3d] into [B, H, S, S].
// Entries that are not visible are left at zero.
template <typename T>
Tensor<T> attention_scores(Tape<T>& tape, const Tensor<T>& qkv, std::size_t n_heads, std::size_t prefix = 0);

// Softmax over the visible part of each row of [..., S, S]; invisible
// entries are exactly zero.
template <typename T>
Tensor<T> softmax_causal(Tape<T>& tape, const Tensor<T>& scores, std::size_t prefix = 0);

// probs[B, H, S, S] applied to the value block of qkv[B, S, 3d] -> [B, S, d].
template <typename T>
Tensor<T> attention_mix(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& qkv, std::size_t n_heads,
                        std::size_t prefix = 0);

template <typename T>
struct MaskedLoss {
    Tensor<T> loss_sum;
    std::size_t token_count{0};
};

// Sum of -log softmax(logits)[target] over positions where mask is set.
// Gradient rows at masked-out positions are left exactly zero.
template <typename T>
MaskedLoss<T> cross_entropy_masked(Tape<T>& tape, const Tensor<T>& logits, const IdGrid& targets,
                                   const MaskGrid& mask);

}  // namespace quietread

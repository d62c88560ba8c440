#pragma once

#include <cstddef>
#include <vector>

#include "quietread/data.hpp"

namespace quietread {

struct ReadQConfig {
    bool enabled{false};
    // Masked predictions per BOS. Prediction position p predicts target p+1,
    // so a BOS at j silences positions j .. j+k-1.
    std::size_t k{16};

    std::size_t effective_k() const { return enabled ? k : 0; }
    bool operator==(const ReadQConfig&) const = default;
};

struct LossMask {
    MaskGrid mask;
    std::size_t masked_in_count{0};
};

// base_mask with the first k predictions after every BOS removed. Windows
// are clipped at the row end and overlapping windows union.
LossMask compute_loss_mask(const PackedBatch& batch, const ReadQConfig& cfg);

// The silenced window alone (true = inside the first k predictions after a
// BOS), independent of base_mask.
MaskGrid readq_window(const PackedBatch& batch, std::size_t k);

struct OffsetBin {
    std::size_t total{0};
    std::size_t masked_in{0};
};

struct MaskStats {
    std::size_t positions{0};
    std::size_t masked_in{0};
    std::size_t base_masked_in{0};
    double masked_out_fraction{0.0};
    // Fraction of base masked-in positions removed by the ReadQ window.
    double readq_fraction{0.0};
    std::vector<std::size_t> masked_in_per_row;
    // Indexed by distance from the nearest preceding BOS in the row;
    // positions with no BOS before them are not counted.
    std::vector<OffsetBin> by_offset;
};

MaskStats mask_stats(const LossMask& mask, const PackedBatch& batch);

}  // namespace quietread

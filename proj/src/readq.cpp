#include "quietread/readq.hpp"

#include <algorithm>
#include <string>

namespace quietread {

MaskGrid readq_window(const PackedBatch& batch, std::size_t k) {
    const std::size_t seq = batch.seq_len();
    MaskGrid window(batch.rows(), seq, 0);
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        for (auto j : batch.doc_starts[r]) {
            const std::size_t end = std::min(seq, j + k);
            for (std::size_t p = j; p < end; ++p) window(r, p) = 1;
        }
    }
    return window;
}

LossMask compute_loss_mask(const PackedBatch& batch, const ReadQConfig& cfg) {
    const std::size_t seq = batch.seq_len();
    if (cfg.k >= seq) {
        throw ConfigError("train.readq.k (" + std::to_string(cfg.k) + ") must be smaller than seq_len (" +
                          std::to_string(seq) + ")");
    }
    LossMask out{batch.base_mask, 0};
    const std::size_t k = cfg.effective_k();
    if (k > 0) {
        const auto window = readq_window(batch, k);
        for (std::size_t i = 0; i < out.mask.size(); ++i) {
            if (window.values[i]) out.mask.values[i] = 0;
        }
    }
    out.masked_in_count = static_cast<std::size_t>(std::count(out.mask.values.begin(), out.mask.values.end(), 1));
    return out;
}

MaskStats mask_stats(const LossMask& mask, const PackedBatch& batch) {
    MaskStats st;
    const std::size_t seq = batch.seq_len();
    st.positions = mask.mask.size();
    st.masked_in_per_row.assign(batch.rows(), 0);
    st.by_offset.assign(seq, {});
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        const auto& starts = batch.doc_starts[r];
        std::size_t next_start = 0;
        bool seen_bos = false;
        std::size_t last_bos = 0;
        for (std::size_t p = 0; p < seq; ++p) {
            while (next_start < starts.size() && starts[next_start] <= p) {
                last_bos = starts[next_start++];
                seen_bos = true;
            }
            const bool in = mask.mask(r, p) != 0;
            if (in) ++st.masked_in_per_row[r];
            if (batch.base_mask(r, p)) ++st.base_masked_in;
            if (seen_bos) {
                auto& bin = st.by_offset[p - last_bos];
                ++bin.total;
                if (in) ++bin.masked_in;
            }
        }
        st.masked_in += st.masked_in_per_row[r];
    }
    if (st.positions) {
        st.masked_out_fraction = 1.0 - static_cast<double>(st.masked_in) / static_cast<double>(st.positions);
    }
    if (st.base_masked_in) {
        st.readq_fraction =
            static_cast<double>(st.base_masked_in - st.masked_in) / static_cast<double>(st.base_masked_in);
    }
    return st;
}

}  // namespace quietread

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "quietread/tensor.hpp"

namespace quietread {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
namespace vocab {
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::int32_t kSize = 259;

inline bool is_special(std::int32_t id) { return id >= kBos; }
}  // namespace vocab

std::vector<std::int32_t> encode(std::string_view text);

// Specials are dropped; ids outside the vocabulary raise IndexError.
std::string decode(const std::vector<std::int32_t>& ids);

struct PackedBatch {
    IdGrid tokens;
    // tokens shifted left by one inside each row.
    IdGrid targets;
    // Set where the target is a real token: never at PAD, at a BOS target,
    // or at the final position of a row.
    MaskGrid base_mask;
    std::vector<std::vector<std::size_t>> doc_starts;

    std::size_t rows() const { return tokens.rows; }
    std::size_t seq_len() const { return tokens.cols; }
};

// Greedy packing of [BOS, bytes..., EOS] documents into rows of seq_len.
// Documents that do not fit are continued on the next row without a new BOS.
PackedBatch pack_documents(const std::vector<std::string>& docs, std::size_t seq_len);

// Copies the listed rows (in order) into a new batch.
PackedBatch select_rows(const PackedBatch& batch, const std::vector<std::size_t>& rows);

struct McTask {
    std::string prompt;
    std::vector<std::string> choices;
    std::size_t answer_index{0};

    bool operator==(const McTask&) const = default;
};

void validate_task(const McTask& task);

struct KvCorpusSpec {
    std::uint64_t seed{0};
    std::size_t n_docs{0};
    std::size_t n_pairs{8};
    std::size_t key_len{2};
    std::size_t val_len{2};
    std::size_t n_choices{4};
    std::string alphabet{"abcdefghijklmnop"};
};

struct KvCorpus {
    std::vector<std::string> docs;
    std::vector<McTask> tasks;
};

// Separator between the queried key and its value; multi-byte on purpose so
// the query marker is unambiguous.
inline constexpr std::string_view kKvArrow = "\xE2\x86\x92";

// Documents "k1=v1;k2=v2;...;?ki→vi" with one task per document.
KvCorpus synth_kv_corpus(const KvCorpusSpec& spec);

struct ReverseCorpusSpec {
    std::uint64_t seed{0};
    std::size_t n_docs{0};
    std::size_t min_len{8};
    std::size_t max_len{16};
    std::string alphabet{"abcdefghijklmnop"};
};

// Documents "<random bytes>|<same bytes reversed>".
std::vector<std::string> synth_reverse_corpus(const ReverseCorpusSpec& spec);

// Newline-delimited document files. Empty lines are skipped.
std::vector<std::string> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& docs);

// JSON lines with fields prompt, choices, answer_index.
std::vector<McTask> read_tasks(const std::filesystem::path& path);
void write_tasks(const std::filesystem::path& path, const std::vector<McTask>& tasks);

}  // namespace quietread

#include "quietread/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace quietread {

std::vector<std::int32_t> encode(std::string_view text) {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
}

std::string decode(const std::vector<std::int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id < 0 || id >= vocab::kSize) {
            throw IndexError("decode: id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(vocab::kSize));
        }
        if (!vocab::is_special(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

namespace {

void finish_row(PackedBatch& batch, std::vector<std::int32_t>& row, std::vector<std::size_t>& starts,
                std::size_t seq_len) {
    row.resize(seq_len, vocab::kPad);
    batch.tokens.rows += 1;
    batch.targets.rows += 1;
    batch.base_mask.rows += 1;
    batch.tokens.values.insert(batch.tokens.values.end(), row.begin(), row.end());
    for (std::size_t s = 0; s < seq_len; ++s) {
        const bool last = s + 1 == seq_len;
        const std::int32_t next = last ? vocab::kPad : row[s + 1];
        batch.targets.values.push_back(next);
        const bool real = !last && row[s] != vocab::kPad && next != vocab::kPad && next != vocab::kBos;
        batch.base_mask.values.push_back(real ? 1 : 0);
    }
    batch.doc_starts.push_back(std::move(starts));
    starts.clear();
    row.clear();
}

}  // namespace

PackedBatch pack_documents(const std::vector<std::string>& docs, std::size_t seq_len) {
    if (seq_len < 4) throw ConfigError("pack_documents: seq_len must be at least 4, got " + std::to_string(seq_len));
    PackedBatch batch;
    batch.tokens.cols = batch.targets.cols = batch.base_mask.cols = seq_len;
    if (docs.empty()) return batch;

    std::vector<std::int32_t> row;
    std::vector<std::size_t> starts;
    row.reserve(seq_len);
    auto push = [&](std::int32_t id) {
        if (id == vocab::kBos) starts.push_back(row.size());
        row.push_back(id);
        if (row.size() == seq_len) finish_row(batch, row, starts, seq_len);
    };
    for (const auto& doc : docs) {
        push(vocab::kBos);
        for (unsigned char c : doc) push(static_cast<std::int32_t>(c));
        push(vocab::kEos);
    }
    if (!row.empty()) finish_row(batch, row, starts, seq_len);
    return batch;
}

PackedBatch select_rows(const PackedBatch& batch, const std::vector<std::size_t>& rows) {
    const std::size_t s = batch.seq_len();
    PackedBatch out;
    out.tokens = IdGrid(rows.size(), s);
    out.targets = IdGrid(rows.size(), s);
    out.base_mask = MaskGrid(rows.size(), s);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        if (r >= batch.rows()) {
            throw IndexError("select_rows: row " + std::to_string(r) + " outside batch of " +
                             std::to_string(batch.rows()));
        }
        std::copy_n(batch.tokens.values.begin() + r * s, s, out.tokens.values.begin() + i * s);
        std::copy_n(batch.targets.values.begin() + r * s, s, out.targets.values.begin() + i * s);
        std::copy_n(batch.base_mask.values.begin() + r * s, s, out.base_mask.values.begin() + i * s);
        out.doc_starts.push_back(batch.doc_starts[r]);
    }
    return out;
}

void validate_task(const McTask& task) {
    if (task.choices.size() < 2) throw ConfigError("task needs at least two choices");
    if (task.answer_index >= task.choices.size()) {
        throw ConfigError("task answer_index " + std::to_string(task.answer_index) + " out of range for " +
                          std::to_string(task.choices.size()) + " choices");
    }
}

namespace {

std::mt19937_64 doc_rng(std::uint64_t seed, std::size_t doc_index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(doc_index & 0xffffffffu),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(doc_index) >> 32)};
    return std::mt19937_64{seq};
}

std::string random_word(std::mt19937_64& rng, const std::string& alphabet, std::size_t len) {
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string w(len, ' ');
    for (auto& c : w) c = alphabet[pick(rng)];
    return w;
}

double word_space(std::size_t alphabet, std::size_t len) {
    double n = 1.0;
    for (std::size_t i = 0; i < len; ++i) n *= static_cast<double>(alphabet);
    return n;
}

}  // namespace

KvCorpus synth_kv_corpus(const KvCorpusSpec& spec) {
    if (spec.n_pairs < 2) throw ConfigError("synth_kv_corpus: n_pairs must be at least 2");
    if (spec.n_choices < 2) throw ConfigError("synth_kv_corpus: n_choices must be at least 2");
    if (spec.key_len == 0 || spec.val_len == 0 || spec.alphabet.empty()) {
        throw ConfigError("synth_kv_corpus: key_len, val_len and alphabet must be non-empty");
    }
    if (word_space(spec.alphabet.size(), spec.key_len) < static_cast<double>(spec.n_pairs)) {
        throw ConfigError("synth_kv_corpus: too few distinct keys for n_pairs");
    }
    if (word_space(spec.alphabet.size(), spec.val_len) < static_cast<double>(spec.n_choices)) {
        throw ConfigError("synth_kv_corpus: too few distinct values for n_choices");
    }
    KvCorpus corpus;
    corpus.docs.reserve(spec.n_docs);
    corpus.tasks.reserve(spec.n_docs);
    for (std::size_t d = 0; d < spec.n_docs; ++d) {
        auto rng = doc_rng(spec.seed, d);
        std::vector<std::string> keys;
        std::vector<std::string> values;
        std::set<std::string> seen;
        while (keys.size() < spec.n_pairs) {
            auto key = random_word(rng, spec.alphabet, spec.key_len);
            if (!seen.insert(key).second) continue;
            keys.push_back(std::move(key));
            values.push_back(random_word(rng, spec.alphabet, spec.val_len));
        }
        std::uniform_int_distribution<std::size_t> pick_pair(0, spec.n_pairs - 1);
        const std::size_t queried = pick_pair(rng);

        std::string doc;
        for (std::size_t i = 0; i < spec.n_pairs; ++i) {
            doc += keys[i];
            doc += '=';
            doc += values[i];
            doc += ';';
        }
        doc += '?';
        doc += keys[queried];
        doc += kKvArrow;

        McTask task;
        task.prompt = doc;
        doc += values[queried];
        corpus.docs.push_back(doc);

        std::set<std::string> used{values[queried]};
        std::vector<std::string> distractors;
        while (distractors.size() + 1 < spec.n_choices) {
            auto v = random_word(rng, spec.alphabet, spec.val_len);
            if (!used.insert(v).second) continue;
            distractors.push_back(std::move(v));
        }
        std::uniform_int_distribution<std::size_t> pick_slot(0, spec.n_choices - 1);
        task.answer_index = pick_slot(rng);
        for (std::size_t c = 0, next = 0; c < spec.n_choices; ++c) {
            task.choices.push_back(c == task.answer_index ? values[queried] : distractors[next++]);
        }
        corpus.tasks.push_back(std::move(task));
    }
    return corpus;
}

std::vector<std::string> synth_reverse_corpus(const ReverseCorpusSpec& spec) {
    if (spec.min_len == 0 || spec.min_len > spec.max_len || spec.alphabet.empty()) {
        throw ConfigError("synth_reverse_corpus: need 1 <= min_len <= max_len and a non-empty alphabet");
    }
    std::vector<std::string> docs;
    docs.reserve(spec.n_docs);
    for (std::size_t d = 0; d < spec.n_docs; ++d) {
        auto rng = doc_rng(spec.seed, d);
        std::uniform_int_distribution<std::size_t> pick_len(spec.min_len, spec.max_len);
        const auto prefix = random_word(rng, spec.alphabet, pick_len(rng));
        docs.push_back(prefix + '|' + std::string(prefix.rbegin(), prefix.rend()));
    }
    return docs;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file " + path.string());
    std::vector<std::string> docs;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) docs.push_back(line);
    }
    return docs;
}

void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& docs) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write corpus file " + path.string());
    for (const auto& d : docs) out << d << '\n';
    if (!out) throw IoError("failed writing corpus file " + path.string());
}

std::vector<McTask> read_tasks(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open task file " + path.string());
    std::vector<McTask> tasks;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            McTask t;
            t.prompt = j.at("prompt").get<std::string>();
            t.choices = j.at("choices").get<std::vector<std::string>>();
            t.answer_index = j.at("answer_index").get<std::size_t>();
            validate_task(t);
            tasks.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return tasks;
}

void write_tasks(const std::filesystem::path& path, const std::vector<McTask>& tasks) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write task file " + path.string());
    for (const auto& t : tasks) {
        nlohmann::ordered_json j;
        j["prompt"] = t.prompt;
        j["choices"] = t.choices;
        j["answer_index"] = t.answer_index;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing task file " + path.string());
}

}  // namespace quietread

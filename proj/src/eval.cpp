#include "quietread/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

namespace quietread {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// log softmax(row)[target], accumulated in double.
double token_logprob(const float* row, std::size_t vocab, std::int32_t target) {
    double mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double acc = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) acc += std::exp(static_cast<double>(row[v]) - mx);
    return static_cast<double>(row[target]) - mx - std::log(acc);
}

}  // namespace

PerplexityResult perplexity(const ModelBundle<float>& bundle, const std::vector<std::string>& corpus,
                            std::size_t seq_len, std::size_t bucket_k, std::size_t rows_per_batch) {
    if (corpus.empty()) throw ConfigError("perplexity: evaluation corpus is empty");
    const auto packed = pack_documents(corpus, seq_len);
    const auto window = readq_window(packed, bucket_k);
    const auto vocab = static_cast<std::size_t>(bundle.config.vocab_size);
    PerplexityResult r;
    r.buckets.k = bucket_k;
    double sum_a = 0.0;
    double sum_b = 0.0;
    // Separate running total so the headline does not depend on bucket_k.
    double total = 0.0;
    rows_per_batch = std::max<std::size_t>(1, rows_per_batch);
    for (std::size_t start = 0; start < packed.rows(); start += rows_per_batch) {
        std::vector<std::size_t> rows;
        for (std::size_t r2 = start; r2 < std::min(packed.rows(), start + rows_per_batch); ++r2) rows.push_back(r2);
        const auto batch = select_rows(packed, rows);
        Tape<float> tape(false);
        const auto out = bundle_forward(tape, bundle, batch.tokens);
        const float* logits = out.logits.data().data();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t s = 0; s < seq_len; ++s) {
                if (!batch.base_mask(i, s)) continue;
                const double loss =
                    -token_logprob(logits + (i * seq_len + s) * vocab, vocab, batch.targets(i, s));
                total += loss;
                if (window(rows[i], s)) {
                    sum_a += loss;
                    ++r.buckets.count_a;
                } else {
                    sum_b += loss;
                    ++r.buckets.count_b;
                }
            }
        }
    }
    r.token_count = r.buckets.count_a + r.buckets.count_b;
    if (r.token_count == 0) throw ConfigError("perplexity: evaluation corpus has no scorable tokens");
    r.loss_sum = total;
    r.mean_loss = r.loss_sum / static_cast<double>(r.token_count);
    r.ppl = std::exp(r.mean_loss);
    if (r.buckets.count_a) r.buckets.mean_a = sum_a / static_cast<double>(r.buckets.count_a);
    if (r.buckets.count_b) r.buckets.mean_b = sum_b / static_cast<double>(r.buckets.count_b);
    return r;
}

std::string to_string(Scoring s) { return s == Scoring::sum ? "sum" : "length_norm"; }

Scoring parse_scoring(const std::string& s) {
    if (s == "sum") return Scoring::sum;
    if (s == "length_norm") return Scoring::length_norm;
    throw ConfigError("eval.scoring must be sum or length_norm, got '" + s + "'");
}

std::size_t argmax_first(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

namespace {

std::size_t max_context(const ModelBundle<float>& bundle) {
    auto n = static_cast<std::size_t>(bundle.config.max_seq);
    if (bundle.plan) n = std::min(n, static_cast<std::size_t>(bundle.plan->buddy_config.max_seq));
    return n;
}

}  // namespace

McResult mc_eval(const ModelBundle<float>& bundle, const std::vector<McTask>& tasks, Scoring scoring) {
    McResult result;
    result.scoring = scoring;
    const auto vocab = static_cast<std::size_t>(bundle.config.vocab_size);
    const std::size_t limit = max_context(bundle);
    std::size_t correct_sum = 0;
    std::size_t correct_norm = 0;
    for (const auto& task : tasks) {
        validate_task(task);
        bool fits = true;
        for (const auto& c : task.choices) {
            if (c.empty() || 1 + task.prompt.size() + c.size() > limit) fits = false;
        }
        if (!fits) {
            std::cerr << "warning: skipping task whose prompt+choice exceeds " << limit << " tokens\n";
            ++result.skipped;
            continue;
        }
        TaskResult tr;
        std::vector<double> by_sum;
        std::vector<double> by_norm;
        const std::size_t prefix = 1 + task.prompt.size();
        for (const auto& choice : task.choices) {
            std::vector<std::int32_t> ids{vocab::kBos};
            for (auto id : encode(task.prompt)) ids.push_back(id);
            for (auto id : encode(choice)) ids.push_back(id);
            IdGrid grid(1, ids.size());
            grid.values = ids;
            Tape<float> tape(false);
            const auto out = bundle_forward(tape, bundle, grid, prefix);
            const float* logits = out.logits.data().data();
            double total = 0.0;
            for (std::size_t p = prefix; p < ids.size(); ++p) {
                total += token_logprob(logits + (p - 1) * vocab, vocab, ids[p]);
            }
            ChoiceScore cs{total, total / static_cast<double>(choice.size())};
            by_sum.push_back(cs.sum_logprob);
            by_norm.push_back(cs.norm_logprob);
            tr.scores.push_back(cs);
        }
        const auto pick_sum = argmax_first(by_sum);
        const auto pick_norm = argmax_first(by_norm);
        correct_sum += pick_sum == task.answer_index;
        correct_norm += pick_norm == task.answer_index;
        tr.chosen = scoring == Scoring::sum ? pick_sum : pick_norm;
        tr.correct = tr.chosen == task.answer_index;
        result.tasks.push_back(std::move(tr));
    }
    if (!result.tasks.empty()) {
        const auto n = static_cast<double>(result.tasks.size());
        result.accuracy_sum = static_cast<double>(correct_sum) / n;
        result.accuracy_norm = static_cast<double>(correct_norm) / n;
    }
    return result;
}

GenerateTrace generate_trace(const ModelBundle<float>& bundle, std::string_view prompt, const GenerateOptions& opts) {
    const std::size_t limit = max_context(bundle);
    if (1 + prompt.size() + opts.max_new > limit) {
        throw ConfigError("generate: prompt of " + std::to_string(prompt.size()) + " bytes plus max_new " +
                          std::to_string(opts.max_new) + " exceeds the context of " + std::to_string(limit));
    }
    if (opts.temperature && !(*opts.temperature > 0.0)) throw ConfigError("generate: temperature must be positive");
    const auto vocab = static_cast<std::size_t>(bundle.config.vocab_size);
    std::vector<std::int32_t> ids{vocab::kBos};
    for (auto id : encode(prompt)) ids.push_back(id);
    const std::size_t prefix = ids.size();
    std::mt19937_64 rng{opts.seed};
    GenerateTrace trace;
    for (std::size_t step = 0; step < opts.max_new; ++step) {
        IdGrid grid(1, ids.size());
        grid.values = ids;
        Tape<float> tape(false);
        const auto out = bundle_forward(tape, bundle, grid, prefix);
        const float* last = out.logits.data().data() + (ids.size() - 1) * vocab;
        trace.step_logits.emplace_back(last, last + vocab);
        std::int32_t next = 0;
        if (!opts.temperature) {
            std::vector<double> scores(last, last + vocab);
            next = static_cast<std::int32_t>(argmax_first(scores));
        } else {
            const double tau = *opts.temperature;
            double mx = last[0];
            for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(last[v]));
            std::vector<double> probs(vocab);
            double total = 0.0;
            for (std::size_t v = 0; v < vocab; ++v) {
                probs[v] = std::exp((static_cast<double>(last[v]) - mx) / tau);
                total += probs[v];
            }
            std::uniform_real_distribution<double> unif(0.0, total);
            double u = unif(rng);
            next = static_cast<std::int32_t>(vocab - 1);
            for (std::size_t v = 0; v < vocab; ++v) {
                if (u < probs[v]) {
                    next = static_cast<std::int32_t>(v);
                    break;
                }
                u -= probs[v];
            }
        }
        if (vocab::is_special(next)) break;
        ids.push_back(next);
        trace.tokens.push_back(next);
    }
    trace.text = decode(trace.tokens);
    return trace;
}

std::string generate(const ModelBundle<float>& bundle, std::string_view prompt, const GenerateOptions& opts) {
    return generate_trace(bundle, prompt, opts).text;
}

ojson to_json(const PerplexityResult& r) {
    ojson j;
    j["ppl"] = r.ppl;
    j["mean_loss"] = r.mean_loss;
    j["token_count"] = r.token_count;
    ojson b;
    b["k"] = r.buckets.k;
    b["bucket_a"] = {{"mean_loss", r.buckets.mean_a}, {"count", r.buckets.count_a}};
    b["bucket_b"] = {{"mean_loss", r.buckets.mean_b}, {"count", r.buckets.count_b}};
    j["buckets"] = std::move(b);
    return j;
}

ojson to_json(const McResult& r) {
    ojson j;
    j["scoring"] = to_string(r.scoring);
    j["accuracy"] = r.accuracy();
    j["accuracy_sum"] = r.accuracy_sum;
    j["accuracy_length_norm"] = r.accuracy_norm;
    j["n_scored"] = r.tasks.size();
    j["skipped"] = r.skipped;
    ojson chosen = ojson::array();
    for (const auto& t : r.tasks) chosen.push_back(t.chosen);
    j["chosen"] = std::move(chosen);
    return j;
}

bool ComparisonTable::operator==(const ComparisonTable& other) const {
    if (columns != other.columns || row_names != other.row_names || values.size() != other.values.size()) {
        return false;
    }
    for (std::size_t r = 0; r < values.size(); ++r) {
        if (values[r].size() != other.values[r].size()) return false;
        for (std::size_t c = 0; c < values[r].size(); ++c) {
            const double a = values[r][c];
            const double b = other.values[r][c];
            if (std::isnan(a) != std::isnan(b)) return false;
            if (!std::isnan(a) && a != b) return false;
        }
    }
    return true;
}

namespace {

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

RunSummary load_run_summary(const fs::path& run_dir) {
    RunSummary s;
    const auto config = nlohmann::json::parse(read_text(run_dir / "config.resolved.json"));
    s.name = config.value("name", run_dir.filename().string());

    std::ifstream metrics(run_dir / "metrics.jsonl");
    if (!metrics) throw IoError("cannot open " + (run_dir / "metrics.jsonl").string());
    std::string line;
    while (std::getline(metrics, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("loss_mean").is_null()) continue;
        s.loss_curve.emplace_back(j.at("step").get<std::size_t>(), j.at("loss_mean").get<double>());
    }
    double total = 0.0;
    std::size_t n = 0;
    for (auto it = s.loss_curve.rbegin(); it != s.loss_curve.rend() && n < 10; ++it, ++n) total += it->second;
    s.final_train_loss = n ? total / static_cast<double>(n) : std::nan("");

    long best = -1;
    fs::path best_path;
    const auto reports = run_dir / "reports";
    if (fs::exists(reports)) {
        for (const auto& entry : fs::directory_iterator(reports)) {
            const auto stem = entry.path().stem().string();
            constexpr std::string_view prefix = "eval_step_";
            if (entry.path().extension() != ".json" || stem.rfind(prefix, 0) != 0) continue;
            const long step = std::stol(stem.substr(prefix.size()));
            if (step > best) {
                best = step;
                best_path = entry.path();
            }
        }
    }
    if (best >= 0) {
        s.eval_report = nlohmann::json::parse(read_text(best_path));
        s.eval_config = s.eval_report.value("eval_config", nlohmann::json{});
    }
    return s;
}

ComparisonTable compare_runs(const std::vector<RunSummary>& runs) {
    if (runs.size() < 2) throw ConfigError("compare_runs needs at least two runs");
    for (const auto& r : runs) {
        if (r.eval_config != runs.front().eval_config) {
            throw ConfigError("run '" + r.name + "' was evaluated with a different eval config than '" +
                              runs.front().name + "'");
        }
    }
    ComparisonTable t;
    t.columns = {"final_train_loss", "eval_ppl", "bucket_a_loss", "bucket_b_loss", "mc_accuracy",
                 "mc_accuracy_sum", "mc_accuracy_length_norm"};
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto lookup = [&](const nlohmann::json& j, std::initializer_list<const char*> path) {
        const nlohmann::json* cur = &j;
        for (const char* key : path) {
            if (!cur->is_object() || !cur->contains(key)) return nan;
            cur = &(*cur)[key];
        }
        return cur->is_number() ? cur->get<double>() : nan;
    };
    for (const auto& r : runs) {
        t.row_names.push_back(r.name);
        const auto& e = r.eval_report;
        t.values.push_back({r.final_train_loss, lookup(e, {"perplexity", "ppl"}),
                            lookup(e, {"perplexity", "buckets", "bucket_a", "mean_loss"}),
                            lookup(e, {"perplexity", "buckets", "bucket_b", "mean_loss"}),
                            lookup(e, {"mc", "accuracy"}), lookup(e, {"mc", "accuracy_sum"}),
                            lookup(e, {"mc", "accuracy_length_norm"})});
    }
    return t;
}

namespace {

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string table_csv(const ComparisonTable& table) {
    std::string out = "experiment";
    for (const auto& c : table.columns) out += "," + csv_cell(c);
    out += "\n";
    for (std::size_t r = 0; r < table.row_names.size(); ++r) {
        out += csv_cell(table.row_names[r]);
        for (double v : table.values[r]) {
            out += ",";
            if (!std::isnan(v)) out += fmt_double(v);
        }
        out += "\n";
    }
    return out;
}

ComparisonTable parse_table_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    ComparisonTable t;
    if (!std::getline(in, line)) throw ConfigError("empty comparison CSV");
    auto header = split_csv_line(line);
    if (header.empty() || header.front() != "experiment") throw ConfigError("comparison CSV lacks experiment column");
    t.columns.assign(header.begin() + 1, header.end());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw ConfigError("comparison CSV row has wrong number of cells");
        t.row_names.push_back(cells.front());
        std::vector<double> row;
        for (std::size_t i = 1; i < cells.size(); ++i) {
            row.push_back(cells[i].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(cells[i]));
        }
        t.values.push_back(std::move(row));
    }
    return t;
}

std::string loss_curve_svg(const std::vector<RunSummary>& runs) {
    constexpr double width = 640;
    constexpr double height = 400;
    constexpr double margin = 48;
    std::size_t max_step = 1;
    double max_loss = 0.0;
    for (const auto& r : runs) {
        for (const auto& [step, loss] : r.loss_curve) {
            max_step = std::max(max_step, step);
            max_loss = std::max(max_loss, loss);
        }
    }
    if (max_loss <= 0.0) max_loss = 1.0;
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    svg << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    svg << "  <line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
        << height - margin << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
        << height - margin << "\" stroke=\"black\"/>\n";
    svg << "  <text x=\"" << width / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\" font-size=\"12\">step (max "
        << max_step << ")</text>\n";
    svg << "  <text x=\"12\" y=\"" << margin - 12 << "\" font-size=\"12\">train loss (max " << fmt_double(max_loss)
        << ")</text>\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const char* colour = palette[i % std::size(palette)];
        svg << "  <polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [step, loss] : runs[i].loss_curve) {
            const double x = margin + (width - 2 * margin) * static_cast<double>(step) / static_cast<double>(max_step);
            const double y = height - margin - (height - 2 * margin) * loss / max_loss;
            svg << x << ',' << y << ' ';
        }
        svg << "\"/>\n";
        svg << "  <text x=\"" << width - margin - 150 << "\" y=\"" << margin + 16 * static_cast<double>(i)
            << "\" font-size=\"12\" fill=\"" << colour << "\">" << xml_escape(runs[i].name) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace quietread

#include "quietread/app.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace quietread::app {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path step_dir(const fs::path& run_dir, std::size_t step) {
    return run_dir / "checkpoints" / ("step_" + std::to_string(step));
}

RunConfig run_dir_config(const fs::path& run_dir) {
    const auto path = run_dir / "config.resolved.json";
    if (!fs::exists(path)) throw ConfigError("not a run directory (no config.resolved.json): " + run_dir.string());
    return load_run_config(path);
}

ModelBundle<float> bundle_at(const fs::path& run_dir, const RunConfig& config, std::size_t step) {
    const auto dir = step_dir(run_dir, step);
    if (!fs::exists(dir / "generator" / "manifest.json")) {
        throw ConfigError("no checkpoint at " + dir.string());
    }
    return load_bundle(dir, config.train.fusion);
}

char token_glyph(std::int32_t id) {
    if (id == vocab::kBos) return '^';
    if (id == vocab::kEos) return '$';
    if (id == vocab::kPad) return '_';
    if (id >= 0x20 && id < 0x7f) return static_cast<char>(id);
    return '?';
}

}  // namespace

ojson EvalRequest::describe() const {
    ojson j;
    j["corpus_path"] = corpus_path ? ojson(corpus_path->string()) : ojson(nullptr);
    j["tasks_path"] = tasks_path ? ojson(tasks_path->string()) : ojson(nullptr);
    j["synth"] = synth ? synth_json(*synth) : ojson(nullptr);
    j["bucket_k"] = bucket_k;
    j["scoring"] = to_string(scoring);
    j["seq_len"] = seq_len;
    return j;
}

EvalRequest eval_request_from(const RunConfig& config) {
    EvalRequest r;
    r.corpus_path = config.eval.corpus_path;
    r.tasks_path = config.eval.tasks_path;
    r.synth = config.eval.synth;
    r.bucket_k = config.eval.bucket_k;
    r.scoring = config.eval.scoring;
    r.seq_len = config.train.seq_len;
    return r;
}

ojson eval_report(const ModelBundle<float>& bundle, const EvalRequest& request, std::size_t step) {
    std::vector<std::string> corpus;
    std::vector<McTask> tasks;
    if (request.synth) {
        corpus = synth_docs(*request.synth);
        tasks = synth_tasks(*request.synth);
    }
    if (request.corpus_path) corpus = read_corpus(*request.corpus_path);
    if (request.tasks_path) tasks = read_tasks(*request.tasks_path);
    if (corpus.empty() && tasks.empty()) {
        throw ConfigError("nothing to evaluate: give --corpus or --tasks, or set eval in the run config");
    }

    ojson report;
    report["step"] = step;
    report["eval_config"] = request.describe();
    if (!corpus.empty()) report["perplexity"] = to_json(perplexity(bundle, corpus, request.seq_len, request.bucket_k));
    if (!tasks.empty()) {
        const auto mc = mc_eval(bundle, tasks, request.scoring);
        if (mc.skipped > 0) std::cerr << "warning: skipped " << mc.skipped << " overlong tasks\n";
        report["mc"] = to_json(mc);
    }
    return report;
}

fs::path write_eval_report(const fs::path& run_dir, std::size_t step, const ojson& report) {
    const auto path = run_dir / "reports" / ("eval_step_" + std::to_string(step) + ".json");
    write_text(path, report.dump(2) + "\n");
    return path;
}

std::string render_mask(const PackedBatch& batch, const LossMask& mask) {
    std::string out;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        // Trailing padding carries no information; stop after the last EOS.
        std::size_t end = batch.seq_len();
        while (end > 0 && batch.tokens(r, end - 1) == vocab::kPad) --end;
        std::string tokens;
        std::string glyphs;
        for (std::size_t s = 0; s < end; ++s) {
            tokens += token_glyph(batch.tokens(r, s));
            glyphs += mask.mask(r, s) ? "#" : "\xC2\xB7";
        }
        out += tokens + "\n" + glyphs + "\n";
    }
    return out;
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, std::optional<std::size_t> resume,
              std::ostream& out) {
    const auto config = load_run_config(config_path);
    const auto corpus = load_training_corpus(config);
    const auto resolved = resolved_json(config).dump(2) + "\n";
    const auto resolved_path = out_dir / "config.resolved.json";

    std::optional<Trainer> trainer;
    if (resume) {
        if (!fs::exists(resolved_path)) throw ConfigError("cannot resume: no run at " + out_dir.string());
        if (read_text(resolved_path) != resolved) {
            throw ConfigError("cannot resume: config differs from " + resolved_path.string());
        }
        trainer.emplace(Trainer::resume(config.train, config.model, corpus, out_dir, *resume));
    } else {
        fs::create_directories(out_dir);
        write_text(resolved_path, resolved);
        trainer.emplace(config.train, config.model, corpus, out_dir);
    }

    if (config.train.eval_every > 0 && config.eval.present) {
        const auto request = eval_request_from(config);
        trainer->set_eval_hook([request, out_dir](std::size_t step, const ModelBundle<float>& bundle) {
            write_eval_report(out_dir, step, eval_report(bundle, request, step));
        });
    }
    const auto report = trainer->run();
    out << "trained " << config.name << ": " << report.steps_completed << " steps, final loss " << report.final_loss;
    if (report.skipped_steps > 0) out << ", " << report.skipped_steps << " skipped";
    out << "\n";
    return kOk;
}

int cmd_eval(const fs::path& run_dir, std::size_t step, const std::optional<fs::path>& corpus,
             const std::optional<fs::path>& tasks, std::optional<std::size_t> bucket_k,
             std::optional<std::string> scoring, std::ostream& out) {
    const auto config = run_dir_config(run_dir);
    auto request = eval_request_from(config);
    if (corpus || tasks) {
        request.synth.reset();
        request.corpus_path = corpus ? std::optional<fs::path>(fs::absolute(*corpus)) : std::nullopt;
        request.tasks_path = tasks ? std::optional<fs::path>(fs::absolute(*tasks)) : std::nullopt;
    }
    if (bucket_k) request.bucket_k = *bucket_k;
    if (scoring) request.scoring = parse_scoring(*scoring);

    const auto bundle = bundle_at(run_dir, config, step);
    const auto path = write_eval_report(run_dir, step, eval_report(bundle, request, step));
    out << path.string() << "\n";
    return kOk;
}

int cmd_generate(const fs::path& run_dir, std::size_t step, const std::string& prompt, std::size_t max_new,
                 std::optional<double> temperature, std::uint64_t seed, std::ostream& out) {
    const auto config = run_dir_config(run_dir);
    const auto bundle = bundle_at(run_dir, config, step);
    GenerateOptions opts;
    opts.max_new = max_new;
    opts.temperature = temperature;
    opts.seed = seed;
    out << generate(bundle, prompt, opts) << "\n";
    return kOk;
}

int cmd_mask_inspect(const fs::path& config_path, const std::string& text, std::ostream& out) {
    if (text.empty()) throw ConfigError("--text must not be empty");
    const auto config = load_run_config(config_path);
    const auto batch = pack_documents({text}, config.train.seq_len);
    const auto mask = compute_loss_mask(batch, config.train.readq);
    out << render_mask(batch, mask);
    return kOk;
}

int cmd_synth(const std::string& kind, std::uint64_t seed, std::size_t n, const fs::path& out_path,
              const std::optional<fs::path>& tasks_out) {
    SynthSpec spec;
    spec.kind = kind;
    if (kind == "kv") {
        spec.kv.seed = seed;
        spec.kv.n_docs = n;
    } else if (kind == "reverse") {
        spec.reverse.seed = seed;
        spec.reverse.n_docs = n;
        if (tasks_out) throw ConfigError("--tasks-out is only available for --kind kv");
    } else {
        throw ConfigError("unknown --kind '" + kind + "' (expected kv or reverse)");
    }
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_corpus(out_path, synth_docs(spec));
    if (tasks_out) {
        if (tasks_out->has_parent_path()) fs::create_directories(tasks_out->parent_path());
        write_tasks(*tasks_out, synth_tasks(spec));
    }
    return kOk;
}

int cmd_report(const std::vector<fs::path>& runs, const fs::path& out_path, std::ostream& out) {
    std::vector<RunSummary> summaries;
    for (const auto& dir : runs) summaries.push_back(load_run_summary(dir));
    const auto table = compare_runs(summaries);
    write_text(out_path, table_csv(table));
    auto svg_path = out_path;
    svg_path.replace_extension(".svg");
    write_text(svg_path, loss_curve_svg(summaries));
    out << out_path.string() << "\n" << svg_path.string() << "\n";
    return kOk;
}

void apply_thread_env() {
    const char* env = std::getenv("QUIETREAD_THREADS");
    if (!env || !*env) return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError("QUIETREAD_THREADS must be a positive integer");
#ifdef _OPENMP
    omp_set_num_threads(static_cast<int>(n));
#endif
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App cli{"quietread: byte-level transformer training with BOS-anchored loss masking"};
    cli.require_subcommand(1);

    std::string config_path, out_dir, run_dir, text, prompt, kind, out_path;
    std::optional<std::size_t> resume, bucket_k;
    std::optional<std::string> corpus, tasks, scoring, tasks_out;
    std::optional<double> temperature;
    std::size_t step = 0, max_new = 32, n = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> runs;

    auto* train = cli.add_subcommand("train", "train a model from a run config");
    train->add_option("--config", config_path, "run config (JSON)")->required();
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_option("--resume", resume, "resume from checkpoints/step_N");

    auto* eval = cli.add_subcommand("eval", "evaluate a checkpoint and write reports/eval_step_N.json");
    eval->add_option("--run", run_dir)->required();
    eval->add_option("--step", step)->required();
    eval->add_option("--corpus", corpus, "newline-delimited documents");
    eval->add_option("--tasks", tasks, "multiple-choice tasks (JSON lines)");
    eval->add_option("--bucket-k", bucket_k);
    eval->add_option("--scoring", scoring, "sum or length_norm");

    auto* gen = cli.add_subcommand("generate", "decode from a checkpoint");
    gen->add_option("--run", run_dir)->required();
    gen->add_option("--step", step)->required();
    gen->add_option("--prompt", prompt)->required();
    gen->add_option("--max-new", max_new);
    gen->add_option("--temperature", temperature, "sample instead of greedy decoding");
    gen->add_option("--seed", seed);

    auto* mask = cli.add_subcommand("mask", "loss-mask tools");
    mask->require_subcommand(1);
    auto* inspect = mask->add_subcommand("inspect", "show which positions carry loss");
    inspect->add_option("--config", config_path)->required();
    inspect->add_option("--text", text)->required();

    auto* synth = cli.add_subcommand("synth", "write a synthetic corpus");
    synth->add_option("--kind", kind, "kv or reverse")->required();
    synth->add_option("--seed", seed);
    synth->add_option("--n", n)->required();
    synth->add_option("--out", out_path)->required();
    synth->add_option("--tasks-out", tasks_out);

    auto* report = cli.add_subcommand("report", "compare runs as CSV plus an SVG loss chart");
    report->add_option("--runs", runs)->required()->expected(1, -1);
    report->add_option("--out", out_path)->required();

    try {
        cli.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << cli.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    auto opt_path = [](const std::optional<std::string>& s) {
        return s ? std::optional<fs::path>(*s) : std::nullopt;
    };
    try {
        apply_thread_env();
        if (*train) return cmd_train(config_path, out_dir, resume, out);
        if (*eval) return cmd_eval(run_dir, step, opt_path(corpus), opt_path(tasks), bucket_k, scoring, out);
        if (*gen) return cmd_generate(run_dir, step, prompt, max_new, temperature, seed, out);
        if (*inspect) return cmd_mask_inspect(config_path, text, out);
        if (*synth) return cmd_synth(kind, seed, n, out_path, opt_path(tasks_out));
        if (*report) {
            std::vector<fs::path> dirs(runs.begin(), runs.end());
            return cmd_report(dirs, out_path, out);
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const ShapeError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const IndexError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const AllMaskedError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return kIo;
    } catch (const fs::filesystem_error& e) {
        err << "io error: " << e.what() << "\n";
        return kIo;
    } catch (const nlohmann::json::exception& e) {
        err << "io error: malformed JSON: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternal;
    }
    return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"quietread"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace quietread::app

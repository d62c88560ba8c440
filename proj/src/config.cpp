#include "quietread/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace quietread {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Strict view over one JSON object: every key must be consumed.
class Section {
public:
    Section(const json& j, std::string path) : j_{j}, path_{std::move(path)} {
        if (!j_.is_object()) throw ConfigError(label() + " must be an object");
    }

    bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    template <typename T>
    T require(const char* key) {
        used_.insert(key);
        if (!has(key)) throw ConfigError("missing required key " + key_path(key));
        return read<T>(key);
    }

    template <typename T>
    T get(const char* key, T fallback) {
        used_.insert(key);
        if (!has(key)) return fallback;
        return read<T>(key);
    }

    template <typename T>
    std::optional<T> optional(const char* key) {
        used_.insert(key);
        if (!has(key)) return std::nullopt;
        return read<T>(key);
    }

    Section child(const char* key) {
        used_.insert(key);
        return Section{j_.at(key), key_path(key)};
    }

    std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.count(key)) throw ConfigError("unknown config key " + key_path(key.c_str()));
        }
    }

private:
    std::string label() const { return path_.empty() ? std::string{"config"} : path_; }

    template <typename T>
    T read(const char* key) const {
        const auto& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(key_path(key) + " must be a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(key_path(key) + " must be an integer");
            if (std::is_unsigned_v<T> && v.get<long long>() < 0) {
                throw ConfigError(key_path(key) + " must be non-negative");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(key_path(key) + " must be a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(key_path(key) + " must be a string");
        }
        return v.get<T>();
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

std::size_t ceil_frac(std::size_t total, double frac) {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(total) * frac - 1e-9));
}

ModelConfig parse_model(Section s, int default_max_seq) {
    ModelConfig c;
    c.vocab_size = s.get<int>("vocab_size", vocab::kSize);
    c.d_model = s.require<int>("d_model");
    c.n_layers = s.require<int>("n_layers");
    c.n_heads = s.require<int>("n_heads");
    c.d_ff = s.get<int>("d_ff", 4 * c.d_model);
    c.max_seq = s.get<int>("max_seq", default_max_seq);
    c.ln_eps = s.get<double>("ln_eps", 1e-5);
    c.init_std = s.get<double>("init_std", 0.02);
    s.finish();
    c.validate();
    return c;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.is_absolute() || base.empty()) return p;
    return fs::absolute(base / p).lexically_normal();
}

SynthSpec parse_synth(Section s) {
    SynthSpec spec;
    spec.kind = s.require<std::string>("kind");
    if (spec.kind == "kv") {
        auto& kv = spec.kv;
        kv.seed = s.get<std::uint64_t>("seed", 0);
        kv.n_docs = s.require<std::size_t>("n_docs");
        kv.n_pairs = s.get<std::size_t>("n_pairs", kv.n_pairs);
        kv.key_len = s.get<std::size_t>("key_len", kv.key_len);
        kv.val_len = s.get<std::size_t>("val_len", kv.val_len);
        kv.n_choices = s.get<std::size_t>("n_choices", kv.n_choices);
        kv.alphabet = s.get<std::string>("alphabet", kv.alphabet);
    } else if (spec.kind == "reverse") {
        auto& rv = spec.reverse;
        rv.seed = s.get<std::uint64_t>("seed", 0);
        rv.n_docs = s.require<std::size_t>("n_docs");
        rv.min_len = s.get<std::size_t>("min_len", rv.min_len);
        rv.max_len = s.get<std::size_t>("max_len", rv.max_len);
        rv.alphabet = s.get<std::string>("alphabet", rv.alphabet);
    } else {
        throw ConfigError(s.key_path("kind") + " must be kv or reverse, got '" + spec.kind + "'");
    }
    s.finish();
    return spec;
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
    RunConfig c;
    Section root(j, "");
    c.name = root.get<std::string>("name", "run");

    if (!root.has("model")) throw ConfigError("missing required key model");
    if (!root.has("train")) throw ConfigError("missing required key train");
    if (!root.has("data")) throw ConfigError("missing required key data");

    auto train = root.child("train");
    auto& t = c.train;
    t.total_steps = train.require<std::size_t>("total_steps");
    t.batch_size = train.get<std::size_t>("batch_size", 8);
    t.seq_len = train.get<std::size_t>("seq_len", 128);

    c.model = parse_model(root.child("model"), static_cast<int>(t.seq_len));

    if (root.has("buddy")) {
        auto b = root.child("buddy");
        FusionPlan plan;
        plan.buddy_config = parse_model(b.child("model"), c.model.max_seq);
        if (auto w = b.optional<std::size_t>("window")) plan.window = *w;
        plan.visibility = parse_visibility(b.get<std::string>("visibility", "causal"));
        plan.tap_norm = parse_tap_norm(b.get<std::string>("tap_norm", "none"));
        plan.freeze_buddy = b.get<bool>("freeze_buddy", false);
        b.finish();
        plan.validate();
        t.fusion = plan;
    } else {
        root.get<bool>("buddy", false);
    }

    t.peak_lr = train.get<double>("peak_lr", 3e-3);
    t.warmup_steps = train.get<std::size_t>("warmup_steps", ceil_frac(t.total_steps, 0.03));
    t.min_lr_frac = train.get<double>("min_lr_frac", 0.1);
    t.weight_decay = train.get<double>("weight_decay", 0.1);
    t.beta1 = train.get<double>("beta1", 0.9);
    t.beta2 = train.get<double>("beta2", 0.95);
    t.adam_eps = train.get<double>("adam_eps", 1e-8);
    t.grad_clip_norm = train.get<double>("grad_clip_norm", 1.0);
    t.seed = train.get<std::uint64_t>("seed", 0);
    t.phase1_steps = train.get<std::size_t>("phase1_steps", t.fusion ? ceil_frac(t.total_steps, 0.12) : 0);
    t.phase1_lr_scale = train.get<double>("phase1_lr_scale", 1.0);
    if (train.has("readq")) {
        auto r = train.child("readq");
        t.readq.enabled = r.get<bool>("enabled", false);
        t.readq.k = r.get<std::size_t>("k", 16);
        r.finish();
    } else {
        train.get<bool>("readq", false);
    }
    t.eval_every = train.get<std::size_t>("eval_every", 0);
    t.checkpoint_every = train.get<std::size_t>("checkpoint_every", 0);
    train.finish();
    t.validate(c.model);

    auto data = root.child("data");
    if (auto p = data.optional<std::string>("corpus_path")) c.data.corpus_path = resolve(*p, base_dir);
    if (data.has("synth")) {
        c.data.synth = parse_synth(data.child("synth"));
    } else {
        data.get<bool>("synth", false);
    }
    data.finish();
    if (c.data.corpus_path.has_value() == c.data.synth.has_value()) {
        throw ConfigError("data must set exactly one of data.corpus_path or data.synth");
    }

    c.eval.bucket_k = t.readq.k;
    if (root.has("eval")) {
        auto e = root.child("eval");
        c.eval.present = true;
        if (auto p = e.optional<std::string>("corpus_path")) c.eval.corpus_path = resolve(*p, base_dir);
        if (auto p = e.optional<std::string>("tasks_path")) c.eval.tasks_path = resolve(*p, base_dir);
        if (e.has("synth")) {
            c.eval.synth = parse_synth(e.child("synth"));
        } else {
            e.get<bool>("synth", false);
        }
        c.eval.bucket_k = e.get<std::size_t>("bucket_k", t.readq.k);
        c.eval.scoring = parse_scoring(e.get<std::string>("scoring", "length_norm"));
        e.finish();
        if (c.eval.corpus_path && c.eval.synth) {
            throw ConfigError("eval must not set both eval.corpus_path and eval.synth");
        }
    } else {
        root.get<bool>("eval", false);
    }
    root.finish();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j, fs::absolute(path).parent_path());
}

ojson synth_json(const SynthSpec& spec) {
    ojson j;
    j["kind"] = spec.kind;
    if (spec.kind == "kv") {
        j["seed"] = spec.kv.seed;
        j["n_docs"] = spec.kv.n_docs;
        j["n_pairs"] = spec.kv.n_pairs;
        j["key_len"] = spec.kv.key_len;
        j["val_len"] = spec.kv.val_len;
        j["n_choices"] = spec.kv.n_choices;
        j["alphabet"] = spec.kv.alphabet;
    } else {
        j["seed"] = spec.reverse.seed;
        j["n_docs"] = spec.reverse.n_docs;
        j["min_len"] = spec.reverse.min_len;
        j["max_len"] = spec.reverse.max_len;
        j["alphabet"] = spec.reverse.alphabet;
    }
    return j;
}

ojson resolved_json(const RunConfig& c) {
    ojson j;
    j["name"] = c.name;
    ojson model;
    to_json(model, c.model);
    j["model"] = model;
    if (c.train.fusion) {
        const auto& plan = *c.train.fusion;
        ojson b;
        ojson bm;
        to_json(bm, plan.buddy_config);
        b["model"] = bm;
        b["window"] = plan.window ? ojson(*plan.window) : ojson(nullptr);
        b["visibility"] = to_string(plan.visibility);
        b["tap_norm"] = to_string(plan.tap_norm);
        b["freeze_buddy"] = plan.freeze_buddy;
        j["buddy"] = b;
    }
    const auto& t = c.train;
    ojson train;
    train["total_steps"] = t.total_steps;
    train["batch_size"] = t.batch_size;
    train["seq_len"] = t.seq_len;
    train["peak_lr"] = t.peak_lr;
    train["warmup_steps"] = t.warmup_steps;
    train["min_lr_frac"] = t.min_lr_frac;
    train["weight_decay"] = t.weight_decay;
    train["beta1"] = t.beta1;
    train["beta2"] = t.beta2;
    train["adam_eps"] = t.adam_eps;
    train["grad_clip_norm"] = t.grad_clip_norm;
    train["seed"] = t.seed;
    train["phase1_steps"] = t.phase1_steps;
    train["phase1_lr_scale"] = t.phase1_lr_scale;
    train["readq"] = {{"enabled", t.readq.enabled}, {"k", t.readq.k}};
    train["eval_every"] = t.eval_every;
    train["checkpoint_every"] = t.checkpoint_every;
    j["train"] = train;
    ojson data;
    if (c.data.corpus_path) data["corpus_path"] = c.data.corpus_path->string();
    if (c.data.synth) data["synth"] = synth_json(*c.data.synth);
    j["data"] = data;
    if (c.eval.present) {
        ojson e;
        if (c.eval.corpus_path) e["corpus_path"] = c.eval.corpus_path->string();
        if (c.eval.tasks_path) e["tasks_path"] = c.eval.tasks_path->string();
        if (c.eval.synth) e["synth"] = synth_json(*c.eval.synth);
        e["bucket_k"] = c.eval.bucket_k;
        e["scoring"] = to_string(c.eval.scoring);
        j["eval"] = e;
    }
    return j;
}

std::vector<std::string> synth_docs(const SynthSpec& spec) {
    if (spec.kind == "kv") return synth_kv_corpus(spec.kv).docs;
    if (spec.kind == "reverse") return synth_reverse_corpus(spec.reverse);
    throw ConfigError("unknown synth kind '" + spec.kind + "'");
}

std::vector<McTask> synth_tasks(const SynthSpec& spec) {
    if (spec.kind == "kv") return synth_kv_corpus(spec.kv).tasks;
    return {};
}

std::vector<std::string> load_training_corpus(const RunConfig& config) {
    auto docs = config.data.synth ? synth_docs(*config.data.synth) : read_corpus(*config.data.corpus_path);
    if (docs.empty()) throw ConfigError("training corpus is empty");
    return docs;
}

}  // namespace quietread

#include "quietread/model.hpp"

#include <cmath>
#include <random>

#include "quietread/ops.hpp"

namespace quietread {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* key) {
        if (v < 1) throw ConfigError(std::string{"model."} + key + " must be >= 1, got " + std::to_string(v));
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(max_seq, "max_seq");
    if (d_model % n_heads != 0) {
        throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
    if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
}

namespace {
template <typename J>
void fill_json(J& j, const ModelConfig& c) {
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["max_seq"] = c.max_seq;
    j["ln_eps"] = c.ln_eps;
    j["init_std"] = c.init_std;
}
}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) { fill_json(j, c); }
void to_json(nlohmann::ordered_json& j, const ModelConfig& c) { fill_json(j, c); }

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.max_seq = j.at("max_seq").get<int>();
        c.ln_eps = j.at("ln_eps").get<double>();
        c.init_std = j.at("init_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string{"model config: "} + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> tensor) {
    if (contains(name)) throw ContractError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(tensor));
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].second;
}

template <typename T>
void ParamStore<T>::zero_grad() const {
    for (const auto& [name, t] : entries_) t.zero_grad();
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool flag) const {
    for (const auto& [name, t] : entries_) t.set_requires_grad(flag);
}

template <typename T>
std::size_t ParamStore<T>::num_values() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone());
    return out;
}

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    std::vector<std::pair<std::string, Shape>> layout;
    layout.emplace_back("token_embedding", Shape{static_cast<std::size_t>(c.vocab_size), d});
    layout.emplace_back("pos_embedding", Shape{static_cast<std::size_t>(c.max_seq), d});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        layout.emplace_back(p + "ln1.gamma", Shape{d});
        layout.emplace_back(p + "ln1.beta", Shape{d});
        layout.emplace_back(p + "attn.qkv.weight", Shape{d, 3 * d});
        layout.emplace_back(p + "attn.qkv.bias", Shape{3 * d});
        layout.emplace_back(p + "attn.out.weight", Shape{d, d});
        layout.emplace_back(p + "attn.out.bias", Shape{d});
        layout.emplace_back(p + "ln2.gamma", Shape{d});
        layout.emplace_back(p + "ln2.beta", Shape{d});
        layout.emplace_back(p + "mlp.in.weight", Shape{d, ff});
        layout.emplace_back(p + "mlp.in.bias", Shape{ff});
        layout.emplace_back(p + "mlp.out.weight", Shape{ff, d});
        layout.emplace_back(p + "mlp.out.bias", Shape{d});
    }
    layout.emplace_back("final_ln.gamma", Shape{d});
    layout.emplace_back("final_ln.beta", Shape{d});
    layout.emplace_back("lm_head.weight", Shape{d, static_cast<std::size_t>(c.vocab_size)});
    return layout;
}

namespace {
bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32)};
    std::mt19937_64 rng{seq};
    const double residual_std = config.init_std / std::sqrt(2.0 * config.n_layers);
    ParamStore<T> store;
    for (auto& [name, shape] : param_layout(config)) {
        auto t = Tensor<T>::zeros(shape, true);
        auto data = t.data();
        if (ends_with(name, ".gamma")) {
            std::fill(data.begin(), data.end(), T{1});
        } else if (ends_with(name, ".beta") || ends_with(name, ".bias")) {
            // zeros
        } else {
            const bool residual = ends_with(name, "attn.out.weight") || ends_with(name, "mlp.out.weight");
            std::normal_distribution<double> normal(0.0, residual ? residual_std : config.init_std);
            for (auto& v : data) v = static_cast<T>(normal(rng));
        }
        store.add(name, t);
    }
    return store;
}

template <typename T>
Tensor<T> transformer_block(Tape<T>& tape, const ParamStore<T>& params, const ModelConfig& config, int layer,
                            const Tensor<T>& x, std::size_t bidirectional_prefix) {
    const std::string p = "blocks." + std::to_string(layer) + ".";
    const auto heads = static_cast<std::size_t>(config.n_heads);
    auto h = layernorm(tape, x, params.get(p + "ln1.gamma"), params.get(p + "ln1.beta"), config.ln_eps);
    auto qkv = linear(tape, h, params.get(p + "attn.qkv.weight"), params.get(p + "attn.qkv.bias"));
    auto scores = attention_scores(tape, qkv, heads, bidirectional_prefix);
    auto probs = softmax_causal(tape, scores, bidirectional_prefix);
    auto mixed = attention_mix(tape, probs, qkv, heads, bidirectional_prefix);
    auto attn = linear(tape, mixed, params.get(p + "attn.out.weight"), params.get(p + "attn.out.bias"));
    auto x1 = add(tape, x, attn);
    auto h2 = layernorm(tape, x1, params.get(p + "ln2.gamma"), params.get(p + "ln2.beta"), config.ln_eps);
    auto up = gelu(tape, linear(tape, h2, params.get(p + "mlp.in.weight"), params.get(p + "mlp.in.bias")));
    auto down = linear(tape, up, params.get(p + "mlp.out.weight"), params.get(p + "mlp.out.bias"));
    return add(tape, x1, down);
}

template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const ParamStore<T>& params, const ModelConfig& config,
                         const IdGrid& tokens, const Tensor<T>* extra_input, const ForwardOptions& options) {
    if (tokens.cols > static_cast<std::size_t>(config.max_seq)) {
        throw ConfigError("sequence length " + std::to_string(tokens.cols) + " exceeds model.max_seq " +
                          std::to_string(config.max_seq));
    }
    if (tokens.rows == 0 || tokens.cols == 0) throw ShapeError("forward: empty token grid");
    const auto d = static_cast<std::size_t>(config.d_model);
    auto x = embedding_gather(tape, params.get("token_embedding"), tokens);
    x = add_positions(tape, x, params.get("pos_embedding"));
    if (extra_input && extra_input->defined()) {
        if (extra_input->shape() != Shape{tokens.rows, tokens.cols, d}) {
            throw ShapeError("forward: extra_input " + shape_str(extra_input->shape()) + " does not match " +
                             shape_str({tokens.rows, tokens.cols, d}));
        }
        x = add(tape, x, *extra_input);
    }
    const int blocks = options.n_blocks < 0 ? config.n_layers : std::min(options.n_blocks, config.n_layers);
    ForwardOutput<T> out;
    out.layer_hiddens.reserve(static_cast<std::size_t>(blocks));
    for (int l = 0; l < blocks; ++l) {
        x = transformer_block(tape, params, config, l, x, options.bidirectional_prefix);
        out.layer_hiddens.push_back(x);
    }
    if (options.compute_logits) {
        auto h = layernorm(tape, x, params.get("final_ln.gamma"), params.get("final_ln.beta"), config.ln_eps);
        out.logits = linear(tape, h, params.get("lm_head.weight"));
    }
    return out;
}

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params) {
    ParamStore<To> out;
    for (const auto& [name, t] : params.entries()) {
        std::vector<To> values(t.data().begin(), t.data().end());
        out.add(name, Tensor<To>::from(t.shape(), std::move(values), t.requires_grad()));
    }
    return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamStore<double> init_params<double>(const ModelConfig&, std::uint64_t);
template ForwardOutput<float> forward(Tape<float>&, const ParamStore<float>&, const ModelConfig&, const IdGrid&,
                                      const Tensor<float>*, const ForwardOptions&);
template ForwardOutput<double> forward(Tape<double>&, const ParamStore<double>&, const ModelConfig&,
                                       const IdGrid&, const Tensor<double>*, const ForwardOptions&);
template Tensor<float> transformer_block(Tape<float>&, const ParamStore<float>&, const ModelConfig&, int,
                                         const Tensor<float>&, std::size_t);
template Tensor<double> transformer_block(Tape<double>&, const ParamStore<double>&, const ModelConfig&, int,
                                          const Tensor<double>&, std::size_t);
template ParamStore<double> cast_params<double, float>(const ParamStore<float>&);
template ParamStore<float> cast_params<float, double>(const ParamStore<double>&);
template ParamStore<double> cast_params<double, double>(const ParamStore<double>&);
template ParamStore<float> cast_params<float, float>(const ParamStore<float>&);

}  // namespace quietread

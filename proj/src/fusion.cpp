#include "quietread/fusion.hpp"

#include <algorithm>

#include "quietread/ops.hpp"

namespace quietread {

std::string to_string(Visibility v) { return v == Visibility::causal ? "causal" : "prefix_bidirectional"; }
std::string to_string(TapNorm t) { return t == TapNorm::none ? "none" : "final_ln_copy"; }

Visibility parse_visibility(const std::string& s) {
    if (s == "causal") return Visibility::causal;
    if (s == "prefix_bidirectional") return Visibility::prefix_bidirectional;
    throw ConfigError("buddy.visibility must be causal or prefix_bidirectional, got '" + s + "'");
}

TapNorm parse_tap_norm(const std::string& s) {
    if (s == "none") return TapNorm::none;
    if (s == "final_ln_copy") return TapNorm::final_ln_copy;
    throw ConfigError("buddy.tap_norm must be none or final_ln_copy, got '" + s + "'");
}

void FusionPlan::validate() const {
    buddy_config.validate();
    if (buddy_config.n_layers < 2) {
        throw ConfigError("buddy.model.n_layers must be >= 2: the tap is the second-to-last layer");
    }
    if (window && *window < 1) throw ConfigError("buddy.window must be >= 1");
}

std::vector<std::pair<std::string, Shape>> connector_layout(std::size_t d_buddy, std::size_t d_gen) {
    return {{"weight", Shape{d_buddy, d_gen}}, {"bias", Shape{d_gen}}};
}

template <typename T>
ParamStore<T> init_connector(std::size_t d_buddy, std::size_t d_gen) {
    ParamStore<T> store;
    for (auto& [name, shape] : connector_layout(d_buddy, d_gen)) store.add(name, Tensor<T>::zeros(shape, true));
    return store;
}

template <typename T>
Tensor<T> buddy_encode(Tape<T>& tape, const ParamStore<T>& buddy, const FusionPlan& plan, const IdGrid& tokens,
                       std::size_t prompt_prefix) {
    plan.validate();
    ForwardOptions opts;
    opts.n_blocks = plan.buddy_config.n_layers - 1;
    opts.compute_logits = false;
    opts.bidirectional_prefix = plan.visibility == Visibility::prefix_bidirectional ? prompt_prefix : 0;
    auto out = forward<T>(tape, buddy, plan.buddy_config, tokens, nullptr, opts);
    auto tap = out.layer_hiddens.back();
    if (plan.tap_norm == TapNorm::final_ln_copy) {
        tap = layernorm(tape, tap, buddy.get("final_ln.gamma"), buddy.get("final_ln.beta"), plan.buddy_config.ln_eps);
    }
    return tap;
}

template <typename T>
Tensor<T> sliding_pool(Tape<T>& tape, const Tensor<T>& h, std::size_t window) {
    if (window < 1) throw ConfigError("sliding_pool: window must be >= 1");
    if (h.rank() != 3) throw ShapeError("sliding_pool: expected [B x S x d], got " + shape_str(h.shape()));
    if (window == 1) return h;
    const std::size_t batch = h.dim(0);
    const std::size_t seq = h.dim(1);
    const std::size_t d = h.dim(2);
    const bool track = tape.tracks({&h});
    auto out = tape.output(h.shape(), track);
    const T* in = h.data().data();
    T* od = out.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < seq; ++i) {
            const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
            const T inv = T{1} / static_cast<T>(i - lo + 1);
            T* o = od + (b * seq + i) * d;
            for (std::size_t t = lo; t <= i; ++t) {
                const T* src = in + (b * seq + t) * d;
                for (std::size_t c = 0; c < d; ++c) o[c] += src[c];
            }
            for (std::size_t c = 0; c < d; ++c) o[c] *= inv;
        }
    }
    check_finite(out, "sliding_pool");
    if (track) {
        tape.record([h, out, batch, seq, d, window] {
            const T* dy = out.grad().data();
            T* dh = h.grad().data();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
                    const T inv = T{1} / static_cast<T>(i - lo + 1);
                    const T* g = dy + (b * seq + i) * d;
                    for (std::size_t t = lo; t <= i; ++t) {
                        T* dst = dh + (b * seq + t) * d;
                        for (std::size_t c = 0; c < d; ++c) dst[c] += g[c] * inv;
                    }
                }
            }
            h.node()->grad_touched = true;
        });
    }
    return out;
}

template <typename T>
Tensor<T> connect(Tape<T>& tape, const ParamStore<T>& connector, const Tensor<T>& pooled) {
    const auto& w = connector.get("weight");
    if (pooled.rank() == 0 || pooled.shape().back() != w.dim(0)) {
        throw ShapeError("connect: input " + shape_str(pooled.shape()) + " does not match connector weight " +
                         shape_str(w.shape()));
    }
    return linear(tape, pooled, w, connector.get("bias"));
}

template <typename T>
ForwardOutput<T> fuse_forward(Tape<T>& tape, const ModelBundle<T>& bundle, const IdGrid& tokens,
                              std::size_t prompt_prefix) {
    if (!bundle.plan) throw ContractError("fuse_forward on a bundle without a buddy");
    const auto& plan = *bundle.plan;
    const auto& w = bundle.connector.get("weight");
    if (w.dim(0) != static_cast<std::size_t>(plan.buddy_config.d_model) ||
        w.dim(1) != static_cast<std::size_t>(bundle.config.d_model)) {
        throw ShapeError("connector weight " + shape_str(w.shape()) + " does not map buddy d_model " +
                         std::to_string(plan.buddy_config.d_model) + " to generator d_model " +
                         std::to_string(bundle.config.d_model));
    }
    auto tap = buddy_encode(tape, bundle.buddy, plan, tokens, prompt_prefix);
    auto pooled = sliding_pool(tape, tap, plan.window.value_or(1));
    auto extra = connect(tape, bundle.connector, pooled);
    return forward(tape, bundle.generator, bundle.config, tokens, &extra);
}

template <typename T>
ForwardOutput<T> bundle_forward(Tape<T>& tape, const ModelBundle<T>& bundle, const IdGrid& tokens,
                                std::size_t prompt_prefix) {
    if (bundle.fused()) return fuse_forward(tape, bundle, tokens, prompt_prefix);
    return forward(tape, bundle.generator, bundle.config, tokens);
}

std::set<std::string> buddy_tap_params(const FusionPlan& plan) {
    std::set<std::string> names{"token_embedding", "pos_embedding"};
    for (const auto& [name, shape] : param_layout(plan.buddy_config)) {
        if (name.rfind("blocks.", 0) == 0) {
            const int layer = std::stoi(name.substr(7, name.find('.', 7) - 7));
            if (layer < plan.buddy_config.n_layers - 1) names.insert(name);
        }
    }
    if (plan.tap_norm == TapNorm::final_ln_copy) {
        names.insert("final_ln.gamma");
        names.insert("final_ln.beta");
    }
    return names;
}

#define QUIETREAD_INSTANTIATE_FUSION(T)                                                                          \
    template ParamStore<T> init_connector<T>(std::size_t, std::size_t);                                          \
    template Tensor<T> buddy_encode(Tape<T>&, const ParamStore<T>&, const FusionPlan&, const IdGrid&, std::size_t); \
    template Tensor<T> sliding_pool(Tape<T>&, const Tensor<T>&, std::size_t);                                    \
    template Tensor<T> connect(Tape<T>&, const ParamStore<T>&, const Tensor<T>&);                                \
    template ForwardOutput<T> fuse_forward(Tape<T>&, const ModelBundle<T>&, const IdGrid&, std::size_t);         \
    template ForwardOutput<T> bundle_forward(Tape<T>&, const ModelBundle<T>&, const IdGrid&, std::size_t);

QUIETREAD_INSTANTIATE_FUSION(float)
QUIETREAD_INSTANTIATE_FUSION(double)

}  // namespace quietread

#include "quietread/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace quietread {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string{op} + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
void mark(const Tensor<T>& t) {
    t.node()->grad_touched = true;
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    return linear(tape, a, b);
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
        throw ShapeError("linear: cannot multiply " + shape_str(x.shape()) + " by " + shape_str(w.shape()));
    }
    const std::size_t k = w.dim(0);
    const std::size_t n = w.dim(1);
    const std::size_t rows = x.numel() / k;
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                         std::to_string(n));
    }
    Shape out_shape = x.shape();
    out_shape.back() = n;
    const bool track = tape.tracks({&x, &w, &bias});
    auto out = tape.output(out_shape, track);

    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* od = out.data().data();
    const T* bd = bias.defined() ? bias.data().data() : nullptr;
#pragma omp parallel for schedule(static) if (rows * k * n > kParallelWork)
    for (std::size_t i = 0; i < rows; ++i) {
        T* orow = od + i * n;
        if (bd) std::copy(bd, bd + n, orow);
        const T* xrow = xd + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const T a = xrow[t];
            const T* wrow = wd + t * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += a * wrow[j];
        }
    }
    check_finite(out, "linear");

    if (track) {
        tape.record([x, w, bias, out, rows, k, n] {
            const T* dy = out.grad().data();
            if (x.requires_grad()) {
                T* dx = x.grad().data();
                const T* wd = w.data().data();
#pragma omp parallel for schedule(static) if (rows * k * n > kParallelWork)
                for (std::size_t i = 0; i < rows; ++i) {
                    const T* dyrow = dy + i * n;
                    for (std::size_t t = 0; t < k; ++t) {
                        const T* wrow = wd + t * n;
                        T acc{0};
                        for (std::size_t j = 0; j < n; ++j) acc += dyrow[j] * wrow[j];
                        dx[i * k + t] += acc;
                    }
                }
                mark(x);
            }
            if (w.requires_grad()) {
                T* dw = w.grad().data();
                const T* xd = x.data().data();
#pragma omp parallel for schedule(static) if (rows * k * n > kParallelWork)
                for (std::size_t t = 0; t < k; ++t) {
                    T* dwrow = dw + t * n;
                    for (std::size_t i = 0; i < rows; ++i) {
                        const T a = xd[i * k + t];
                        const T* dyrow = dy + i * n;
                        for (std::size_t j = 0; j < n; ++j) dwrow[j] += a * dyrow[j];
                    }
                }
                mark(w);
            }
            if (bias.defined() && bias.requires_grad()) {
                T* db = bias.grad().data();
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
                }
                mark(bias);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    const bool track = tape.tracks({&a, &b});
    auto out = tape.output(a.shape(), track);
    auto od = out.data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    check_finite(out, "add");
    if (track) {
        tape.record([a, b, out] {
            auto dy = out.grad();
            if (a.requires_grad()) accumulate_grad(a, std::span<const T>{dy});
            if (b.requires_grad()) accumulate_grad(b, std::span<const T>{dy});
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
    const bool track = tape.tracks({&x});
    auto out = tape.output(x.shape(), track);
    auto od = out.data();
    auto xd = x.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * factor;
    check_finite(out, "scale");
    if (track) {
        tape.record([x, out, factor] {
            auto dy = out.grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
            mark(x);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tape.tracks({&x});
    auto out = tape.output({}, track);
    T acc{0};
    for (T v : x.data()) acc += v;
    out.data()[0] = acc;
    check_finite(out, "sum");
    if (track) {
        tape.record([x, out] {
            const T g = out.grad()[0];
            auto dx = x.grad();
            for (auto& d : dx) d += g;
            mark(x);
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const bool track = tape.tracks({&x});
    auto out = tape.output(std::move(shape), track);
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    if (track) {
        tape.record([x, out] { accumulate_grad(x, std::span<const T>{out.grad()}); });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tape.tracks({&x});
    auto out = tape.output(x.shape(), track);
    auto xd = x.data();
    auto od = out.data();
    const T c = static_cast<T>(kGeluC);
    const T cubic = static_cast<T>(kGeluCubic);
    for (std::size_t i = 0; i < od.size(); ++i) {
        const T v = xd[i];
        od[i] = T{0.5} * v * (T{1} + std::tanh(c * (v + cubic * v * v * v)));
    }
    check_finite(out, "gelu");
    if (track) {
        tape.record([x, out, c, cubic] {
            auto xd = x.data();
            auto dy = out.grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const T v = xd[i];
                const T th = std::tanh(c * (v + cubic * v * v * v));
                const T inner = c * (T{1} + T{3} * cubic * v * v);
                dx[i] += dy[i] * (T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * inner);
            }
            mark(x);
        });
    }
    return out;
}

template <typename T>
Tensor<T> layernorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps) {
    if (!(eps > 0.0)) throw ConfigError("layernorm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layernorm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const bool track = tape.tracks({&x, &gamma, &beta});
    auto out = tape.output(x.shape(), track);
    std::vector<T> xhat(track ? x.numel() : 0);
    std::vector<T> rstd(rows);
    auto xd = x.data();
    auto od = out.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * d;
        T mean{0};
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= static_cast<T>(d);
        const T rs = T{1} / std::sqrt(var + static_cast<T>(eps));
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const T h = (row[i] - mean) * rs;
            if (track) xhat[r * d + i] = h;
            od[r * d + i] = h * gd[i] + bd[i];
        }
    }
    check_finite(out, "layernorm");
    if (track) {
        tape.record([x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
            auto dy = out.grad();
            auto gd = gamma.data();
            if (gamma.requires_grad() || beta.requires_grad()) {
                auto dg = gamma.grad();
                auto db = beta.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t i = 0; i < d; ++i) {
                        dg[i] += dy[r * d + i] * xhat[r * d + i];
                        db[i] += dy[r * d + i];
                    }
                }
                mark(gamma);
                mark(beta);
            }
            if (x.requires_grad()) {
                auto dx = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh{0};
                    T mean_dh_h{0};
                    for (std::size_t i = 0; i < d; ++i) {
                        const T dh = dy[r * d + i] * gd[i];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + i];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const T dh = dy[r * d + i] * gd[i];
                        dx[r * d + i] += rstd[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_h);
                    }
                }
                mark(x);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> embedding_gather(Tape<T>& tape, const Tensor<T>& table, const IdGrid& ids) {
    if (table.rank() != 2) throw ShapeError("embedding_gather: table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    for (auto id : ids.values) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw IndexError("embedding_gather: id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(vocab));
        }
    }
    const bool track = tape.tracks({&table});
    auto out = tape.output({ids.rows, ids.cols, d}, track);
    auto td = table.data();
    auto od = out.data();
    for (std::size_t p = 0; p < ids.size(); ++p) {
        const auto id = static_cast<std::size_t>(ids.values[p]);
        std::copy_n(td.data() + id * d, d, od.data() + p * d);
    }
    if (track) {
        tape.record([table, out, ids, d] {
            auto dy = out.grad();
            auto dt = table.grad();
            for (std::size_t p = 0; p < ids.size(); ++p) {
                const auto id = static_cast<std::size_t>(ids.values[p]);
                for (std::size_t i = 0; i < d; ++i) dt[id * d + i] += dy[p * d + i];
            }
            mark(table);
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_positions(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& table) {
    if (x.rank() != 3 || table.rank() != 2 || table.dim(1) != x.dim(2) || x.dim(1) > table.dim(0)) {
        throw ShapeError("add_positions: cannot add " + shape_str(table.shape()) + " to " + shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0);
    const std::size_t seq = x.dim(1);
    const std::size_t d = x.dim(2);
    const bool track = tape.tracks({&x, &table});
    auto out = tape.output(x.shape(), track);
    auto xd = x.data();
    auto td = table.data();
    auto od = out.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t i = 0; i < d; ++i) {
                od[(b * seq + s) * d + i] = xd[(b * seq + s) * d + i] + td[s * d + i];
            }
        }
    }
    check_finite(out, "add_positions");
    if (track) {
        tape.record([x, table, out, batch, seq, d] {
            auto dy = out.grad();
            if (x.requires_grad()) accumulate_grad(x, std::span<const T>{dy});
            if (table.requires_grad()) {
                auto dt = table.grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t s = 0; s < seq; ++s) {
                        for (std::size_t i = 0; i < d; ++i) dt[s * d + i] += dy[(b * seq + s) * d + i];
                    }
                }
                mark(table);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> attention_scores(Tape<T>& tape, const Tensor<T>& qkv, std::size_t n_heads, std::size_t prefix) {
    if (qkv.rank() != 3 || n_heads == 0 || qkv.dim(2) % (3 * n_heads) != 0) {
        throw ShapeError("attention_scores: qkv " + shape_str(qkv.shape()) + " incompatible with " +
                         std::to_string(n_heads) + " heads");
    }
    const std::size_t batch = qkv.dim(0);
    const std::size_t seq = qkv.dim(1);
    const std::size_t width = qkv.dim(2);
    const std::size_t d = width / 3;
    const std::size_t hd = d / n_heads;
    const T sc = T{1} / std::sqrt(static_cast<T>(hd));
    const bool track = tape.tracks({&qkv});
    auto out = tape.output({batch, n_heads, seq, seq}, track);
    const T* in = qkv.data().data();
    T* od = out.data().data();
#pragma omp parallel for collapse(2) schedule(static) if (batch * n_heads * seq * seq * hd > kParallelWork)
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
                const T* q = in + (b * seq + i) * width + h * hd;
                T* orow = od + ((b * n_heads + h) * seq + i) * seq;
                const std::size_t last = last_visible(i, prefix);
                for (std::size_t j = 0; j <= last && j < seq; ++j) {
                    const T* kv = in + (b * seq + j) * width + d + h * hd;
                    T acc{0};
                    for (std::size_t c = 0; c < hd; ++c) acc += q[c] * kv[c];
                    orow[j] = acc * sc;
                }
            }
        }
    }
    check_finite(out, "attention_scores");
    if (track) {
        tape.record([qkv, out, batch, seq, width, d, hd, n_heads, prefix, sc] {
            const T* in = qkv.data().data();
            const T* dy = out.grad().data();
            T* dqkv = qkv.grad().data();
            // Parallel over (b, h): each pair writes disjoint columns of dqkv.
#pragma omp parallel for collapse(2) schedule(static) if (batch * n_heads * seq * seq * hd > kParallelWork)
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    for (std::size_t i = 0; i < seq; ++i) {
                        const T* q = in + (b * seq + i) * width + h * hd;
                        T* dq = dqkv + (b * seq + i) * width + h * hd;
                        const T* dyrow = dy + ((b * n_heads + h) * seq + i) * seq;
                        const std::size_t last = last_visible(i, prefix);
                        for (std::size_t j = 0; j <= last && j < seq; ++j) {
                            const T g = dyrow[j] * sc;
                            const T* kv = in + (b * seq + j) * width + d + h * hd;
                            T* dk = dqkv + (b * seq + j) * width + d + h * hd;
                            for (std::size_t c = 0; c < hd; ++c) {
                                dq[c] += g * kv[c];
                                dk[c] += g * q[c];
                            }
                        }
                    }
                }
            }
            mark(qkv);
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax_causal(Tape<T>& tape, const Tensor<T>& scores, std::size_t prefix) {
    if (scores.rank() < 2 || scores.shape()[scores.rank() - 1] != scores.shape()[scores.rank() - 2]) {
        throw ShapeError("softmax_causal: last two dims must be square, got " + shape_str(scores.shape()));
    }
    const std::size_t seq = scores.shape().back();
    const std::size_t blocks = seq ? scores.numel() / (seq * seq) : 0;
    const bool track = tape.tracks({&scores});
    auto out = tape.output(scores.shape(), track);
    const T* in = scores.data().data();
    T* od = out.data().data();
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        for (std::size_t i = 0; i < seq; ++i) {
            const T* row = in + (blk * seq + i) * seq;
            T* orow = od + (blk * seq + i) * seq;
            const std::size_t last = std::min(last_visible(i, prefix), seq - 1);
            T mx = row[0];
            for (std::size_t j = 1; j <= last; ++j) mx = std::max(mx, row[j]);
            T denom{0};
            for (std::size_t j = 0; j <= last; ++j) {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            }
            const T inv = T{1} / denom;
            for (std::size_t j = 0; j <= last; ++j) orow[j] *= inv;
        }
    }
    check_finite(out, "softmax_causal");
    if (track) {
        tape.record([scores, out, blocks, seq, prefix] {
            const T* y = out.data().data();
            const T* dy = out.grad().data();
            T* dx = scores.grad().data();
            for (std::size_t blk = 0; blk < blocks; ++blk) {
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t base = (blk * seq + i) * seq;
                    const std::size_t last = std::min(last_visible(i, prefix), seq - 1);
                    T dot{0};
                    for (std::size_t j = 0; j <= last; ++j) dot += y[base + j] * dy[base + j];
                    for (std::size_t j = 0; j <= last; ++j) dx[base + j] += y[base + j] * (dy[base + j] - dot);
                }
            }
            mark(scores);
        });
    }
    return out;
}

template <typename T>
Tensor<T> attention_mix(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& qkv, std::size_t n_heads,
                        std::size_t prefix) {
    if (qkv.rank() != 3 || probs.rank() != 4 || probs.dim(0) != qkv.dim(0) || probs.dim(1) != n_heads ||
        probs.dim(2) != qkv.dim(1) || probs.dim(3) != qkv.dim(1) || qkv.dim(2) % (3 * n_heads) != 0) {
        throw ShapeError("attention_mix: probs " + shape_str(probs.shape()) + " incompatible with qkv " +
                         shape_str(qkv.shape()));
    }
    const std::size_t batch = qkv.dim(0);
    const std::size_t seq = qkv.dim(1);
    const std::size_t width = qkv.dim(2);
    const std::size_t d = width / 3;
    const std::size_t hd = d / n_heads;
    const bool track = tape.tracks({&probs, &qkv});
    auto out = tape.output({batch, seq, d}, track);
    const T* p = probs.data().data();
    const T* in = qkv.data().data();
    T* od = out.data().data();
#pragma omp parallel for collapse(2) schedule(static) if (batch * n_heads * seq * seq * hd > kParallelWork)
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
                const T* prow = p + ((b * n_heads + h) * seq + i) * seq;
                T* o = od + (b * seq + i) * d + h * hd;
                const std::size_t last = std::min(last_visible(i, prefix), seq - 1);
                for (std::size_t j = 0; j <= last; ++j) {
                    const T w = prow[j];
                    const T* v = in + (b * seq + j) * width + 2 * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) o[c] += w * v[c];
                }
            }
        }
    }
    check_finite(out, "attention_mix");
    if (track) {
        tape.record([probs, qkv, out, batch, seq, width, d, hd, n_heads, prefix] {
            const T* p = probs.data().data();
            const T* in = qkv.data().data();
            const T* dy = out.grad().data();
            T* dp = probs.requires_grad() ? probs.grad().data() : nullptr;
            T* dqkv = qkv.requires_grad() ? qkv.grad().data() : nullptr;
#pragma omp parallel for collapse(2) schedule(static) if (batch * n_heads * seq * seq * hd > kParallelWork)
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    for (std::size_t i = 0; i < seq; ++i) {
                        const std::size_t prow = ((b * n_heads + h) * seq + i) * seq;
                        const T* g = dy + (b * seq + i) * d + h * hd;
                        const std::size_t last = std::min(last_visible(i, prefix), seq - 1);
                        for (std::size_t j = 0; j <= last; ++j) {
                            const T* v = in + (b * seq + j) * width + 2 * d + h * hd;
                            if (dp) {
                                T acc{0};
                                for (std::size_t c = 0; c < hd; ++c) acc += g[c] * v[c];
                                dp[prow + j] += acc;
                            }
                            if (dqkv) {
                                const T w = p[prow + j];
                                T* dv = dqkv + (b * seq + j) * width + 2 * d + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) dv[c] += w * g[c];
                            }
                        }
                    }
                }
            }
            if (dp) mark(probs);
            if (dqkv) mark(qkv);
        });
    }
    return out;
}

template <typename T>
MaskedLoss<T> cross_entropy_masked(Tape<T>& tape, const Tensor<T>& logits, const IdGrid& targets,
                                   const MaskGrid& mask) {
    if (logits.rank() != 3 || targets.rows != logits.dim(0) || targets.cols != logits.dim(1) ||
        mask.rows != targets.rows || mask.cols != targets.cols) {
        throw ShapeError("cross_entropy_masked: logits " + shape_str(logits.shape()) + " vs targets [" +
                         std::to_string(targets.rows) + "x" + std::to_string(targets.cols) + "] and mask [" +
                         std::to_string(mask.rows) + "x" + std::to_string(mask.cols) + "]");
    }
    const std::size_t vocab = logits.dim(2);
    const std::size_t positions = targets.size();
    std::size_t count = 0;
    for (std::size_t p = 0; p < positions; ++p) {
        if (!mask.values[p]) continue;
        const auto t = targets.values[p];
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw IndexError("cross_entropy_masked: target " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(vocab));
        }
        ++count;
    }
    if (count == 0) throw AllMaskedError("cross_entropy_masked: every position is masked out");

    const bool track = tape.tracks({&logits});
    auto out = tape.output({}, track);
    const T* ld = logits.data().data();
    std::vector<T> lse(track ? positions : 0);
    double total = 0.0;
    for (std::size_t p = 0; p < positions; ++p) {
        if (!mask.values[p]) continue;
        const T* row = ld + p * vocab;
        T mx = row[0];
        for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        T acc{0};
        for (std::size_t v = 0; v < vocab; ++v) acc += std::exp(row[v] - mx);
        const T l = mx + std::log(acc);
        if (track) lse[p] = l;
        total += static_cast<double>(l - row[targets.values[p]]);
    }
    out.data()[0] = static_cast<T>(total);
    check_finite(out, "cross_entropy_masked");
    if (track) {
        tape.record([logits, out, targets, mask, lse = std::move(lse), vocab, positions] {
            const T g = out.grad()[0];
            const T* ld = logits.data().data();
            T* dl = logits.grad().data();
            for (std::size_t p = 0; p < positions; ++p) {
                if (!mask.values[p]) continue;
                const T* row = ld + p * vocab;
                T* drow = dl + p * vocab;
                for (std::size_t v = 0; v < vocab; ++v) drow[v] += g * std::exp(row[v] - lse[p]);
                drow[targets.values[p]] -= g;
            }
            mark(logits);
        });
    }
    return {out, count};
}

#define QUIETREAD_INSTANTIATE_OPS(T)                                                                        \
    template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                \
    template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                     \
    template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                          \
    template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> layernorm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);   \
    template Tensor<T> embedding_gather(Tape<T>&, const Tensor<T>&, const IdGrid&);                         \
    template Tensor<T> add_positions(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> attention_scores(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);              \
    template Tensor<T> softmax_causal(Tape<T>&, const Tensor<T>&, std::size_t);                             \
    template Tensor<T> attention_mix(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
    template MaskedLoss<T> cross_entropy_masked(Tape<T>&, const Tensor<T>&, const IdGrid&, const MaskGrid&);

QUIETREAD_INSTANTIATE_OPS(float)
QUIETREAD_INSTANTIATE_OPS(double)

}  // namespace quietread

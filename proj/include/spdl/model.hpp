#pragma once

// Toy decoder-only transformer (pre-norm, rotary positions, SwiGLU MLP) with
// a KV cache. It plays the part of the big model whose output the draft tree
// is verified against, and it doubles as the teacher during distillation.
//
// Two forward paths exist on purpose:
//  - forward/forward_tree: f32 decode path over the KV cache. Never records
//    gradients. Every output row is a fixed-order, row-local accumulation,
//    so a tree node's row is bit-identical to running its root path as a
//    plain chain. Greedy speculative decoding is exactly lossless because
//    of this.
//  - forward_train: cache-free differentiable path built from tensor ops,
//    used for teacher extraction and for training the model itself.

#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "spdl/common.hpp"
#include "spdl/tensor.hpp"
#include "spdl/token_tree.hpp"

namespace spdl {

struct ModelConfig {
    int vocab_size = 256;
    int hidden_size = 128;
    int num_heads = 4;
    int num_layers = 4;
    int mlp_hidden = 0;  // 0 → default 4d*2/3 rounded
    int max_seq_len = 512;
    float rope_theta = 10000.0f;
    float rms_eps = 1e-5f;

    void validate() const {
        if (hidden_size % num_heads != 0) {
            throw ArgumentError("hidden_size must be divisible by num_heads");
        }
        if ((hidden_size / num_heads) % 2 != 0) {
            throw ArgumentError("head dim must be even for rotary embedding");
        }
        if (vocab_size < 2 || num_layers < 1 || max_seq_len < 2) {
            throw ArgumentError("config out of range: need V >= 2, L >= 1, max_seq_len >= 2");
        }
    }

    int mlp_dim() const {
        if (mlp_hidden > 0) {
            return mlp_hidden;
        }
        return (int)std::lround(4.0 * hidden_size * 2.0 / 3.0);
    }

    int head_dim() const { return hidden_size / num_heads; }
};

template <typename T>
struct LayerWeights {
    Tensor<T> wq, wk, wv, wo;        // [d x d]
    Tensor<T> w_gate, w_up, w_down;  // [d x f], [d x f], [f x d]
    Tensor<T> attn_norm, ffn_norm;   // [d]

    LayerWeights clone() const {
        LayerWeights l;
        l.wq = wq.clone();
        l.wk = wk.clone();
        l.wv = wv.clone();
        l.wo = wo.clone();
        l.w_gate = w_gate.clone();
        l.w_up = w_up.clone();
        l.w_down = w_down.clone();
        l.attn_norm = attn_norm.clone();
        l.ffn_norm = ffn_norm.clone();
        return l;
    }

    void collect_parameters(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor<T>*>>& out) {
        out.emplace_back(prefix + "wq", &wq);
        out.emplace_back(prefix + "wk", &wk);
        out.emplace_back(prefix + "wv", &wv);
        out.emplace_back(prefix + "wo", &wo);
        out.emplace_back(prefix + "w_gate", &w_gate);
        out.emplace_back(prefix + "w_up", &w_up);
        out.emplace_back(prefix + "w_down", &w_down);
        out.emplace_back(prefix + "attn_norm", &attn_norm);
        out.emplace_back(prefix + "ffn_norm", &ffn_norm);
    }
};

template <typename T>
struct KvCache {
    int n_layers = 0;
    int dim = 0;
    int capacity = 0;
    int len = 0;
    std::vector<std::vector<T>> k, v;  // per layer, capacity*dim rows

    KvCache() = default;
    KvCache(int layers, int cap, int d) : n_layers(layers), dim(d), capacity(cap) {
        k.assign((size_t)layers, std::vector<T>((size_t)cap * (size_t)d, T(0)));
        v.assign((size_t)layers, std::vector<T>((size_t)cap * (size_t)d, T(0)));
    }

    // Forget everything past keep_len. Buffers are left in place; the next
    // append overwrites them.
    void rollback(int keep_len) {
        if (keep_len < 0 || keep_len > len) {
            throw ArgumentError("cache rollback target out of range");
        }
        len = keep_len;
    }

    // Keep the first base rows plus the rows at base+slot for each slot, in
    // the given ascending order, discarding the rest. Equivalent to a
    // rollback to base followed by replaying exactly those rows.
    void compact(int base, const std::vector<int>& slots) {
        if (base < 0 || base > len) {
            throw ArgumentError("cache compact base out of range");
        }
        for (size_t s = 0; s < slots.size(); ++s) {
            const int src = base + slots[s];
            if (src < base || src >= len) {
                throw ArgumentError("cache compact slot out of range");
            }
            if (s > 0 && slots[s] <= slots[s - 1]) {
                throw ArgumentError("cache compact slots must be ascending");
            }
        }
        for (int layer = 0; layer < n_layers; ++layer) {
            for (size_t s = 0; s < slots.size(); ++s) {
                const int64_t dst = ((int64_t)base + (int64_t)s) * dim;
                const int64_t src = ((int64_t)base + slots[s]) * dim;
                if (dst != src) {
                    std::memmove(k[(size_t)layer].data() + dst, k[(size_t)layer].data() + src,
                                 sizeof(T) * (size_t)dim);
                    std::memmove(v[(size_t)layer].data() + dst, v[(size_t)layer].data() + src,
                                 sizeof(T) * (size_t)dim);
                }
            }
        }
        len = base + (int)slots.size();
    }
};

// Differentiable causal decoder stack (pre-norm attention + SwiGLU) without
// a cache; row i sits at absolute position pos[i].
template <typename T>
Tensor<T> decoder_layers_train(const std::vector<LayerWeights<T>>& layers, Tensor<T> x,
                               const std::vector<int>& pos, int n_heads, T eps, T theta) {
    const int d = x.cols(), dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt((T)dh);
    auto causal = [](int64_t i, int64_t j) { return j <= i; };
    for (const auto& l : layers) {
        Tensor<T> xn = rms_norm(x, l.attn_norm, eps);
        Tensor<T> q = rope(matmul(xn, l.wq), pos, n_heads, theta);
        Tensor<T> k = rope(matmul(xn, l.wk), pos, n_heads, theta);
        Tensor<T> v = matmul(xn, l.wv);
        Tensor<T> ctx;
        for (int hd = 0; hd < n_heads; ++hd) {
            Tensor<T> qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            Tensor<T> kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            Tensor<T> vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            Tensor<T> att = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), causal);
            Tensor<T> ch = matmul(att, vh);
            ctx = (hd == 0) ? ch : concat_cols(ctx, ch);
        }
        x = add(x, matmul(ctx, l.wo));
        Tensor<T> hn = rms_norm(x, l.ffn_norm, eps);
        Tensor<T> gated = mul(silu(matmul(hn, l.w_gate)), matmul(hn, l.w_up));
        x = add(x, matmul(gated, l.w_down));
    }
    return x;
}

// Cached decoder stack. Input rows are written at slots
// [cache.len, cache.len + R); row i takes position cache.len + depths[i] and
// attends to the committed prefix plus new rows allowed by vis(i, j), always
// scanned in ascending slot order (each row is a fixed-order accumulation,
// independent of what else is in the batch). Advances cache.len. Never
// records gradients.
template <typename T, typename Vis>
Tensor<T> decoder_layers_cached(const std::vector<LayerWeights<T>>& layers, KvCache<T>& cache,
                                Tensor<T> x, const std::vector<int>& depths, int n_heads, T eps,
                                T theta, Vis&& vis) {
    const int r = (int)x.rows(), d = x.cols(), dh = d / n_heads;
    const int base = cache.len;
    if (base + r > cache.capacity) {
        throw CapacityError("kv cache capacity exceeded");
    }
    std::vector<int> pos((size_t)r);
    for (int i = 0; i < r; ++i) {
        pos[(size_t)i] = base + depths[(size_t)i];
    }
    const T inv_sqrt = T(1) / std::sqrt((T)dh);

    auto no_grad = Graph<T>::pause();
    std::vector<T> scores;
    std::vector<int> cols;
    for (size_t li = 0; li < layers.size(); ++li) {
        const auto& l = layers[li];
        Tensor<T> xn = rms_norm(x, l.attn_norm, eps);
        Tensor<T> q = rope(matmul(xn, l.wq), pos, n_heads, theta);
        Tensor<T> k = rope(matmul(xn, l.wk), pos, n_heads, theta);
        Tensor<T> v = matmul(xn, l.wv);
        T* kc = cache.k[li].data();
        T* vc = cache.v[li].data();
        for (int i = 0; i < r; ++i) {
            std::memcpy(kc + ((int64_t)base + i) * d, k.data() + (int64_t)i * d, sizeof(T) * (size_t)d);
            std::memcpy(vc + ((int64_t)base + i) * d, v.data() + (int64_t)i * d, sizeof(T) * (size_t)d);
        }
        Tensor<T> ctx({r, d});
        for (int i = 0; i < r; ++i) {
            cols.clear();
            for (int j = 0; j < base; ++j) {
                cols.push_back(j);
            }
            for (int j = 0; j < r; ++j) {
                if (vis(i, j)) {
                    cols.push_back(base + j);
                }
            }
            const T* qi = q.data() + (int64_t)i * d;
            T* oi = ctx.data() + (int64_t)i * d;
            for (int hd = 0; hd < n_heads; ++hd) {
                const T* qh = qi + hd * dh;
                scores.assign(cols.size(), T(0));
                T mx = -std::numeric_limits<T>::infinity();
                for (size_t c = 0; c < cols.size(); ++c) {
                    const T* kr = kc + (int64_t)cols[c] * d + hd * dh;
                    T dot = T(0);
                    for (int e = 0; e < dh; ++e) {
                        dot += qh[e] * kr[e];
                    }
                    scores[c] = dot * inv_sqrt;
                    mx = std::max(mx, scores[c]);
                }
                T denom = T(0);
                for (size_t c = 0; c < cols.size(); ++c) {
                    scores[c] = std::exp(scores[c] - mx);
                    denom += scores[c];
                }
                const T inv = T(1) / denom;
                T* oh = oi + hd * dh;
                std::fill(oh, oh + dh, T(0));
                for (size_t c = 0; c < cols.size(); ++c) {
                    const T p = scores[c] * inv;
                    const T* vr = vc + (int64_t)cols[c] * d + hd * dh;
                    for (int e = 0; e < dh; ++e) {
                        oh[e] += p * vr[e];
                    }
                }
            }
        }
        x = add(x, matmul(ctx, l.wo));
        Tensor<T> hn = rms_norm(x, l.ffn_norm, eps);
        Tensor<T> gated = mul(silu(matmul(hn, l.w_gate)), matmul(hn, l.w_up));
        x = add(x, matmul(gated, l.w_down));
    }
    cache.len = base + r;
    return x;
}

template <typename T>
class TargetModel {
public:
    ModelConfig cfg;
    Tensor<T> tok_embedding;  // [V x d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d]
    Tensor<T> lm_head;     // [d x V]

    TargetModel() = default;

    explicit TargetModel(ModelConfig config) : cfg(config) {
        cfg.validate();
        const int d = cfg.hidden_size, f = cfg.mlp_dim(), v = cfg.vocab_size;
        tok_embedding = Tensor<T>::zeros({v, d});
        final_norm = Tensor<T>::full({d}, T(1));
        lm_head = Tensor<T>::zeros({d, v});
        layers.resize((size_t)cfg.num_layers);
        for (auto& l : layers) {
            l.wq = Tensor<T>::zeros({d, d});
            l.wk = Tensor<T>::zeros({d, d});
            l.wv = Tensor<T>::zeros({d, d});
            l.wo = Tensor<T>::zeros({d, d});
            l.w_gate = Tensor<T>::zeros({d, f});
            l.w_up = Tensor<T>::zeros({d, f});
            l.w_down = Tensor<T>::zeros({f, d});
            l.attn_norm = Tensor<T>::full({d}, T(1));
            l.ffn_norm = Tensor<T>::full({d}, T(1));
        }
    }

    static TargetModel random_init(ModelConfig config, Rng& rng, T stddev = T(0.02)) {
        TargetModel m(config);
        for (auto [name, t] : m.named_parameters()) {
            if (t->rank() == 1) {
                continue;  // norm weights stay at 1
            }
            for (int64_t i = 0; i < t->numel(); ++i) {
                t->data()[i] = (T)rand_normal(rng, 0.0, (double)stddev);
            }
        }
        return m;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("tok_embedding", &tok_embedding);
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].collect_parameters("layers." + std::to_string(i) + ".", out);
        }
        out.emplace_back("final_norm", &final_norm);
        out.emplace_back("lm_head", &lm_head);
        return out;
    }

    KvCache<T> make_cache(int capacity = 0) const {
        return KvCache<T>(cfg.num_layers, capacity > 0 ? capacity : cfg.max_seq_len, cfg.hidden_size);
    }

    struct ForwardOut {
        Tensor<T> logits;  // [R x V]
        Tensor<T> hidden;  // [R x d], final norm applied
    };

    // Causal append: row i takes position cache.len + i and sees the cached
    // prefix plus rows 0..i. Extends the cache by the row count.
    ForwardOut forward(KvCache<T>& cache, const std::vector<int>& tokens) const {
        std::vector<int> depths((size_t)tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            depths[i] = (int)i;
        }
        return run_cached(cache, tokens, depths,
                          [](int i, int j) { return j <= i; });
    }

    // Tree append: row per node in index order; node i takes position
    // cache.len + depth(i) and sees the cached prefix plus its own root
    // path. The root (depth 0) is the pending token the tree hangs off.
    ForwardOut forward_tree(KvCache<T>& cache, const TokenTree& tree) const {
        std::vector<int> tokens((size_t)tree.size());
        std::vector<int> depths((size_t)tree.size());
        for (int i = 0; i < tree.size(); ++i) {
            tokens[(size_t)i] = tree.token(i);
            depths[(size_t)i] = tree.depth(i);
        }
        TreeMask mask = build_tree_mask(tree);
        return run_cached(cache, tokens, depths,
                          [mask](int i, int j) { return mask.visible(i, j); });
    }

    // Same query against the interval mask form; behaviour must match
    // forward_tree exactly.
    ForwardOut forward_tree_compressed(KvCache<T>& cache, const TokenTree& tree) const {
        std::vector<int> tokens((size_t)tree.size());
        std::vector<int> depths((size_t)tree.size());
        for (int i = 0; i < tree.size(); ++i) {
            tokens[(size_t)i] = tree.token(i);
            depths[(size_t)i] = tree.depth(i);
        }
        CompressedTreeMask mask = compress_tree_mask(tree);
        return run_cached(cache, tokens, depths,
                          [mask](int i, int j) { return mask.visible(i, j); });
    }

    // Differentiable full-sequence forward, no cache. Position of row i is
    // pos_offset + i. Returns logits, final-normed hidden states and the
    // pre-norm last-layer stream.
    struct TrainOut {
        Tensor<T> logits;        // [T x V]
        Tensor<T> hidden;        // [T x d] after final norm
        Tensor<T> hidden_raw;    // [T x d] before final norm
    };

    TrainOut forward_train(const std::vector<int>& tokens, int pos_offset = 0) const {
        if (tokens.empty()) {
            throw ArgumentError("forward_train: empty input");
        }
        std::vector<int> pos(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            pos[i] = pos_offset + (int)i;
        }
        Tensor<T> x = embed_rows(tok_embedding, tokens);
        x = decoder_layers_train(layers, x, pos, cfg.num_heads, (T)cfg.rms_eps, (T)cfg.rope_theta);
        TrainOut out;
        out.hidden_raw = x;
        out.hidden = rms_norm(x, final_norm, (T)cfg.rms_eps);
        out.logits = matmul(out.hidden, lm_head);
        return out;
    }

    // Plain autoregressive generation; the throughput and losslessness
    // baseline. Returns only the continuation.
    std::vector<int> vanilla_decode(const std::vector<int>& prompt, int max_new, double temperature,
                                    uint64_t seed) const {
        if (prompt.empty()) {
            throw ArgumentError("vanilla_decode: prompt must be non-empty");
        }
        Rng rng(seed);
        KvCache<T> cache = make_cache();
        std::vector<int> out;
        if (max_new <= 0) {
            return out;
        }
        ForwardOut fo = forward(cache, prompt);
        int next = emit(fo.logits, fo.logits.rows() - 1, temperature, rng);
        out.push_back(next);
        while ((int)out.size() < max_new) {
            fo = forward(cache, {next});
            next = emit(fo.logits, 0, temperature, rng);
            out.push_back(next);
        }
        return out;
    }

    // Greedy pick or a temperature sample from one logits row.
    int emit(const Tensor<T>& logits, int64_t row, double temperature, Rng& rng) const {
        const T* r = logits.data() + row * logits.cols();
        if (temperature <= 0.0) {
            return argmax_row(r, logits.cols());
        }
        std::vector<T> probs = probs_from_logits(r, logits.cols(), (T)temperature);
        return sample_from(probs.data(), (int)probs.size(), rng);
    }

    static std::vector<T> probs_from_logits(const T* row, int n, T temperature) {
        std::vector<T> p((size_t)n);
        T mx = row[0];
        for (int j = 1; j < n; ++j) {
            mx = std::max(mx, row[j]);
        }
        T denom = T(0);
        for (int j = 0; j < n; ++j) {
            p[(size_t)j] = std::exp((row[j] - mx) / temperature);
            denom += p[(size_t)j];
        }
        for (int j = 0; j < n; ++j) {
            p[(size_t)j] /= denom;
        }
        return p;
    }

private:
    // Shared cached path. Row i carries tokens[i] at position
    // cache.len + depth[i]; it attends to the whole committed prefix plus
    // the new rows vis(i, j) allows, always scanned in ascending slot order.
    template <typename Vis>
    ForwardOut run_cached(KvCache<T>& cache, const std::vector<int>& tokens,
                          const std::vector<int>& depths, Vis&& vis) const {
        if (tokens.empty()) {
            throw ArgumentError("forward: empty input");
        }
        auto no_grad = Graph<T>::pause();
        Tensor<T> x = embed_rows(tok_embedding, tokens);
        x = decoder_layers_cached(layers, cache, x, depths, cfg.num_heads, (T)cfg.rms_eps,
                                  (T)cfg.rope_theta, vis);
        ForwardOut out;
        out.hidden = rms_norm(x, final_norm, (T)cfg.rms_eps);
        out.logits = matmul(out.hidden, lm_head);
        return out;
    }
};

}  // namespace spdl

#pragma once

// Draft model: a pre-integration attention decoder folds the big model's
// hidden state together with the freshly emitted token, a small stack of
// augmenting decoder layers enriches it over the whole context, and a chain
// of regressive heads proposes one tree level each. Head 0 projects the
// augmented state directly; every later head gates the running carrier with
// the previous head's token embedding through a second attention decoder
// and a 2d->d projector.
//
// The logits projection and the embedding table are the target's own lm_head
// (and its transpose): frozen views, never trained or serialized here.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spdl/common.hpp"
#include "spdl/model.hpp"
#include "spdl/tensor.hpp"
#include "spdl/token_tree.hpp"

namespace spdl {

struct SpeculatorConfig {
    int num_heads = 5;
    int augment_layers = 2;
    float init_noise = 0.01f;  // half-width of the uniform init jitter

    void validate() const {
        if (num_heads < 1) {
            throw ArgumentError("speculator needs at least one head");
        }
        if (augment_layers < 0) {
            throw ArgumentError("augment_layers must be >= 0");
        }
        if (init_noise < 0.0f) {
            throw ArgumentError("init_noise must be >= 0");
        }
    }
};

// Single-step gating block: out = x + concat_h(v_h(y) * cos(q_h(norm x), k_h(y))).
// q/k/v carry biases; the norm applies to the x stream only. No nonlinearity
// anywhere else, deliberately.
template <typename T>
struct AttentionDecoder {
    Tensor<T> wq, wk, wv;  // [d x d]
    Tensor<T> bq, bk, bv;  // [d]
    Tensor<T> norm_w;      // [d]

    void collect_parameters(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor<T>*>>& out) {
        out.emplace_back(prefix + "wq", &wq);
        out.emplace_back(prefix + "wk", &wk);
        out.emplace_back(prefix + "wv", &wv);
        out.emplace_back(prefix + "bq", &bq);
        out.emplace_back(prefix + "bk", &bk);
        out.emplace_back(prefix + "bv", &bv);
        out.emplace_back(prefix + "norm_w", &norm_w);
    }
};

template <typename T>
Tensor<T> attention_decoder_apply(const AttentionDecoder<T>& w, const Tensor<T>& x,
                                  const Tensor<T>& y, int n_heads, T eps) {
    if (x.rank() != 2 || x.shape() != y.shape()) {
        throw ShapeError("attention decoder: x and y must be matching rank-2 tensors");
    }
    const int r = x.dim(0), d = x.dim(1), dh = d / n_heads;
    Tensor<T> xn = rms_norm(x, w.norm_w, eps);
    Tensor<T> q = add_bias(matmul(xn, w.wq), w.bq);
    Tensor<T> k = add_bias(matmul(y, w.wk), w.bk);
    Tensor<T> v = add_bias(matmul(y, w.wv), w.bv);
    Tensor<T> att = cosine_similarity(q.reshape({r * n_heads, dh}), k.reshape({r * n_heads, dh}));
    Tensor<T> gated = mul_rows(v.reshape({r * n_heads, dh}), att);
    return add(x, gated.reshape({r, d}));
}

// Per-branch draft bookkeeping while a tree level is expanded.
struct DraftState {
    int node = 0;       // tree node this branch sits at
    int token = 0;      // its token
    int head = 0;       // next head to run
    int carrier = 0;    // row index of the branch's hidden carrier
};

// Tree plus the full draft distribution each node's children were drawn
// from; stochastic verification consumes the distributions.
template <typename T>
struct DraftResult {
    TokenTree tree;
    std::vector<std::vector<T>> dist;  // [node][V]; empty for max-depth leaves

    DraftResult() : tree(1) {}
};

// Mutable per-worker decode state: the augmenting block's own KV cache, one
// entry per committed position.
template <typename T>
struct SpeculatorState {
    KvCache<T> cache;
};

template <typename T>
class Speculator {
public:
    ModelConfig tcfg;       // dimensions inherited from the target
    SpeculatorConfig scfg;

    Tensor<T> embedding;    // [V x d] = lm_head transposed; frozen view
    Tensor<T> lm_head;      // [d x V]; frozen view of the target's head
    AttentionDecoder<T> ad1;
    AttentionDecoder<T> ad2;          // its norm_w is the pre-head-loop norm
    std::vector<LayerWeights<T>> augment;
    Tensor<T> norm_final;             // [d], before every lm_head projection
    Tensor<T> head0_fc;               // [d x d]
    std::vector<Tensor<T>> head_fc;   // heads 1..n-1: [2d x d]

    Speculator() = default;

    // Everything trainable starts at or near the identity so that head 0
    // initially reproduces the target head on the augmented state.
    static Speculator init_from_target(TargetModel<T>& target, SpeculatorConfig cfg, Rng& rng) {
        cfg.validate();
        Speculator s;
        s.tcfg = target.cfg;
        s.scfg = cfg;
        const int d = s.tcfg.hidden_size;
        const T b = (T)cfg.init_noise;

        s.embedding = transpose(target.lm_head).clone();
        s.lm_head = target.lm_head.clone();

        auto noisy_eye = [&](int n) {
            Tensor<T> t = Tensor<T>::eye(n);
            if (b > T(0)) {
                for (int64_t i = 0; i < t.numel(); ++i) {
                    t.data()[i] += (T)rand_uniform(rng, -(double)b, (double)b);
                }
            }
            return t;
        };
        auto noise_only = [&](Shape shape) {
            if (b > T(0)) {
                return Tensor<T>::uniform(std::move(shape), -b, b, rng);
            }
            return Tensor<T>::zeros(std::move(shape));
        };
        auto init_ad = [&](AttentionDecoder<T>& ad) {
            ad.wq = noisy_eye(d);
            ad.wk = noisy_eye(d);
            ad.wv = noise_only({d, d});
            ad.bq = Tensor<T>::zeros({d});
            ad.bk = Tensor<T>::zeros({d});
            ad.bv = Tensor<T>::zeros({d});
            ad.norm_w = target.final_norm.clone();
        };
        init_ad(s.ad1);
        init_ad(s.ad2);

        for (int i = 0; i < cfg.augment_layers; ++i) {
            s.augment.push_back(target.layers.back().clone());
        }
        s.norm_final = target.final_norm.clone();
        s.head0_fc = noisy_eye(d);
        for (int i = 1; i < cfg.num_heads; ++i) {
            Tensor<T> fc({2 * d, d});
            Tensor<T> top = noisy_eye(d);          // hidden block
            Tensor<T> bottom = noise_only({d, d});  // embedding block
            std::memcpy(fc.data(), top.data(), sizeof(T) * (size_t)d * (size_t)d);
            std::memcpy(fc.data() + (int64_t)d * d, bottom.data(), sizeof(T) * (size_t)d * (size_t)d);
            s.head_fc.push_back(fc);
        }
        return s;
    }

    // Trainable tensors only; the tied embedding and lm_head views stay out.
    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        ad1.collect_parameters("ad1.", out);
        ad2.collect_parameters("ad2.", out);
        for (size_t i = 0; i < augment.size(); ++i) {
            augment[i].collect_parameters("augment." + std::to_string(i) + ".", out);
        }
        out.emplace_back("norm_final", &norm_final);
        out.emplace_back("head0_fc", &head0_fc);
        for (size_t i = 0; i < head_fc.size(); ++i) {
            out.emplace_back("head_fc." + std::to_string(i + 1), &head_fc[i]);
        }
        return out;
    }

    SpeculatorState<T> make_state(int capacity = 0) const {
        SpeculatorState<T> st;
        st.cache = KvCache<T>((int)augment.size(), capacity > 0 ? capacity : tcfg.max_seq_len,
                              tcfg.hidden_size);
        return st;
    }

    // ---- building blocks (all differentiable when a graph is recording) ----

    // Folds hidden states with the next emitted token's embedding.
    Tensor<T> pre_integrate(const Tensor<T>& h_llm, const std::vector<int>& next_tokens) const {
        Tensor<T> e = embed_rows(embedding, next_tokens);
        return attention_decoder_apply(ad1, h_llm, e, tcfg.num_heads, (T)tcfg.rms_eps);
    }

    Tensor<T> head0_logits(const Tensor<T>& g) const {
        return matmul(rms_norm(matmul(g, head0_fc), norm_final, (T)tcfg.rms_eps), lm_head);
    }

    struct HeadOut {
        Tensor<T> hidden;  // h': the regressive carrier [R x d]
        Tensor<T> logits;  // [R x V]
    };

    // Head index >= 1: gate the carrier with the previous token's embedding,
    // then project [h' | e_prev] to logits.
    HeadOut next_head(int head, const Tensor<T>& carrier, const Tensor<T>& e_prev) const {
        if (head < 1 || head >= scfg.num_heads) {
            throw ArgumentError("head index out of range");
        }
        HeadOut out;
        out.hidden = attention_decoder_apply(ad2, carrier, e_prev, tcfg.num_heads, (T)tcfg.rms_eps);
        Tensor<T> proj = matmul(concat_cols(out.hidden, e_prev), head_fc[(size_t)head - 1]);
        out.logits = matmul(rms_norm(proj, norm_final, (T)tcfg.rms_eps), lm_head);
        return out;
    }

    // ---- decode mode ----

    // Appends one augment-cache entry per (hidden, next token) pair and
    // returns each new position's augmented output. Rows are causal over the
    // existing entries plus earlier rows in this batch; batched append is
    // bit-identical to one-at-a-time calls.
    Tensor<T> extend_context(SpeculatorState<T>& state, const Tensor<T>& hiddens,
                             const std::vector<int>& next_tokens) const {
        if ((int64_t)next_tokens.size() != hiddens.rows()) {
            throw ShapeError("extend_context: one token per hidden row required");
        }
        auto no_grad = Graph<T>::pause();
        Tensor<T> x = pre_integrate(hiddens, next_tokens);
        if (augment.empty()) {
            state.cache.len += (int)x.rows();  // identity block still consumes positions
            return x;
        }
        std::vector<int> depths((size_t)x.rows());
        for (size_t i = 0; i < depths.size(); ++i) {
            depths[i] = (int)i;
        }
        return decoder_layers_cached(augment, state.cache, x, depths, tcfg.num_heads,
                                     (T)tcfg.rms_eps, (T)tcfg.rope_theta,
                                     [](int i, int j) { return j <= i; });
    }

    // Expands a static tree below the pending token. h_llm is the hidden at
    // the last committed position; next_token is the pending token the tree
    // hangs off. Consumes one augment-cache entry.
    DraftResult<T> draft(SpeculatorState<T>& state, const Tensor<T>& h_llm, int next_token,
                         const TreeShape& shape, double temperature, Rng& rng) const {
        if (shape.depth() > scfg.num_heads) {
            throw ArgumentError("tree deeper than the number of heads");
        }
        auto no_grad = Graph<T>::pause();
        const int v = tcfg.vocab_size;

        DraftResult<T> result;
        result.tree = TokenTree(shape.node_count());
        result.tree.add_root(next_token);
        result.dist.resize((size_t)shape.node_count());

        Tensor<T> g = extend_context(state, h_llm, {next_token});

        // carriers[row] holds per-branch hidden rows for the current level
        Tensor<T> carriers = g;
        std::vector<DraftState> frontier = {{0, next_token, 0, 0}};
        for (int level = 0; level < shape.depth(); ++level) {
            const int k = shape.widths[(size_t)level];
            Tensor<T> logits;
            Tensor<T> next_carriers;
            if (level == 0) {
                logits = head0_logits(carriers);
                next_carriers = carriers;  // depth-1 branches start from g
            } else {
                // frontier row f's carrier is row f of carriers by construction
                std::vector<int> toks(frontier.size());
                for (size_t i = 0; i < frontier.size(); ++i) {
                    toks[i] = frontier[i].token;
                }
                HeadOut ho = next_head(level, carriers, embed_rows(embedding, toks));
                logits = ho.logits;
                next_carriers = ho.hidden;
            }
            std::vector<DraftState> next_frontier;
            for (size_t f = 0; f < frontier.size(); ++f) {
                const int64_t row = (level == 0) ? 0 : (int64_t)f;
                std::vector<T> probs = TargetModel<T>::probs_from_logits(
                    logits.data() + row * v, v, temperature > 0.0 ? (T)temperature : T(1));
                std::vector<int> picks =
                    pick_children(probs, k, temperature, rng);
                result.dist[(size_t)frontier[f].node] = std::move(probs);
                for (int token : picks) {
                    const int node = result.tree.add_child(frontier[f].node, token);
                    next_frontier.push_back({node, token, level + 1, (int)(level == 0 ? 0 : f)});
                }
            }
            // all children of frontier row f carry that branch's hidden
            if (level + 1 < shape.depth()) {
                std::vector<int> carrier_rows;
                for (auto& st : next_frontier) {
                    carrier_rows.push_back(st.carrier);
                }
                carriers = select_rows(next_carriers, carrier_rows);
                for (size_t i = 0; i < next_frontier.size(); ++i) {
                    next_frontier[i].carrier = (int)i;
                }
            }
            frontier = std::move(next_frontier);
        }
        return result;
    }

    // Greedy ties break toward the lower token id; stochastic children are
    // independent draws with replacement (required for the verifier's
    // acceptance math to stay unbiased).
    static std::vector<int> pick_children(const std::vector<T>& probs, int k, double temperature,
                                          Rng& rng) {
        std::vector<int> out;
        out.reserve((size_t)k);
        if (temperature <= 0.0) {
            std::vector<int> idx(probs.size());
            for (size_t i = 0; i < idx.size(); ++i) {
                idx[i] = (int)i;
            }
            std::partial_sort(idx.begin(), idx.begin() + std::min((size_t)k, idx.size()), idx.end(),
                              [&](int a, int b) {
                                  if (probs[(size_t)a] != probs[(size_t)b]) {
                                      return probs[(size_t)a] > probs[(size_t)b];
                                  }
                                  return a < b;
                              });
            for (int i = 0; i < k && i < (int)idx.size(); ++i) {
                out.push_back(idx[(size_t)i]);
            }
        } else {
            for (int i = 0; i < k; ++i) {
                out.push_back(sample_from(probs.data(), (int)probs.size(), rng));
            }
        }
        return out;
    }

    // ---- training mode ----

    // Teacher-forced forward over one window. Position t contributes to head
    // i when t <= T-2-i; head i's row list is therefore the first
    // (T-1-i) positions. Returned hidden rows are the regressive carriers
    // the regression loss normalizes and matches.
    struct TrainForward {
        std::vector<Tensor<T>> head_logits;  // per head: [T-1-i x V]
        std::vector<Tensor<T>> head_hidden;  // per head: [T-1-i x d]
    };

    TrainForward forward_train(const std::vector<int>& tokens, const Tensor<T>& teacher_hidden,
                               int pos_offset = 0) const {
        const int t = (int)tokens.size();
        if (t < 2) {
            throw ArgumentError("speculator training window needs at least 2 tokens");
        }
        if (teacher_hidden.rows() != t) {
            throw ShapeError("teacher hidden row count must match the token window");
        }
        const int n = scfg.num_heads;

        // augment inputs for positions 0..T-2: (h_t, x_{t+1})
        std::vector<int> next_toks(tokens.begin() + 1, tokens.end());
        std::vector<int> window_rows((size_t)(t - 1));
        for (int i = 0; i < t - 1; ++i) {
            window_rows[(size_t)i] = i;
        }
        Tensor<T> h_in = select_rows(teacher_hidden, window_rows);
        Tensor<T> x = pre_integrate(h_in, next_toks);
        std::vector<int> pos(t - 1);
        for (int i = 0; i < t - 1; ++i) {
            pos[(size_t)i] = pos_offset + i;
        }
        Tensor<T> g = augment.empty()
                          ? x
                          : decoder_layers_train(augment, x, pos, tcfg.num_heads, (T)tcfg.rms_eps,
                                                 (T)tcfg.rope_theta);

        TrainForward out;
        Tensor<T> carrier = g;
        for (int head = 0; head < n; ++head) {
            const int valid = t - 1 - head;
            if (valid <= 0) {
                break;
            }
            if (head == 0) {
                out.head_logits.push_back(head0_logits(g));
                out.head_hidden.push_back(g);
                continue;
            }
            // drop the last row of the previous carrier, embed x_{t+1+head}
            std::vector<int> keep((size_t)valid);
            std::vector<int> toks((size_t)valid);
            for (int i = 0; i < valid; ++i) {
                keep[(size_t)i] = i;
                toks[(size_t)i] = tokens[(size_t)(i + 1 + head)];
            }
            carrier = select_rows(carrier, keep);
            HeadOut ho = next_head(head, carrier, embed_rows(embedding, toks));
            out.head_logits.push_back(ho.logits);
            out.head_hidden.push_back(ho.hidden);
            carrier = ho.hidden;
        }
        return out;
    }
};

}  // namespace spdl

#pragma once

// Tree verification and the speculative decode loop. One target forward
// scores a whole drafted tree; the verifier keeps only tokens the target
// itself stands behind, so output quality never depends on draft quality.
// Greedy matching handles temperature 0, multi-child rejection sampling
// handles temperature > 0.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "spdl/model.hpp"
#include "spdl/speculator.hpp"
#include "spdl/token_tree.hpp"

namespace spdl {

// Result of checking one drafted tree. `nodes` is the kept root-anchored
// path (tree indices, anchor first, ascending); `tokens` holds the accepted
// tokens plus the closing bonus token, so both have equal length and at
// least one token is always emitted.
struct VerifyOutcome {
    std::vector<int> tokens;
    std::vector<int> nodes;
    int keep_len = 0;  // cache length after committing this step
};

// Temperature-0 verification: walk down from the anchor, following the
// child whose token equals the target argmax at the current node (argmax
// ties resolve to the lowest id). The walk's final argmax becomes the
// bonus token.
template <typename T>
VerifyOutcome verify_greedy(const TokenTree& tree, const Tensor<T>& logits, int base = 0) {
    if (logits.rank() != 2 || logits.rows() != tree.size()) {
        throw ShapeError("verify_greedy: one logits row per tree node required");
    }
    VerifyOutcome out;
    int cur = 0;
    out.nodes.push_back(0);
    for (;;) {
        const int want = argmax_row(logits.data() + (int64_t)cur * logits.cols(), logits.cols());
        out.tokens.push_back(want);
        int next = -1;
        for (int c : tree.node(cur).children) {
            if (tree.token(c) == want) {
                next = c;
                break;
            }
        }
        if (next < 0) {
            break;
        }
        out.nodes.push_back(next);
        cur = next;
    }
    out.keep_len = base + (int)out.nodes.size();
    return out;
}

// Stochastic verification preserving the target distribution. At each node
// the children are tried in insertion order: child c is accepted with
// probability min(1, p(c)/q(c)) where p is the running residual of the
// target distribution and q the branch's draft distribution; a rejection
// strips the draft mass, p <- normalize(max(p - q, 0)), before the next
// candidate. When every child is rejected the bonus token comes from the
// final residual. Requires children drawn independently from q, which is
// what the drafting side does at temperature > 0.
template <typename T>
VerifyOutcome verify_sampled(const TokenTree& tree, const std::vector<std::vector<T>>& target_probs,
                             const std::vector<std::vector<T>>& draft_probs, Rng& rng,
                             int base = 0) {
    if ((int)target_probs.size() != tree.size()) {
        throw ShapeError("verify_sampled: one target distribution per tree node required");
    }
    VerifyOutcome out;
    int cur = 0;
    out.nodes.push_back(0);
    std::vector<T> p = target_probs[0];
    for (;;) {
        int next = -1;
        const std::vector<T>& q = draft_probs[(size_t)cur];
        for (int c : tree.node(cur).children) {
            const int tok = tree.token(c);
            if (q.empty() || q[(size_t)tok] <= (T)0) {
                throw StructureError("verify_sampled: drafted child has zero draft probability");
            }
            const double accept = std::min(1.0, (double)p[(size_t)tok] / (double)q[(size_t)tok]);
            if (rand_uniform(rng, 0.0, 1.0) < accept) {
                next = c;
                break;
            }
            double s = 0.0;
            for (size_t j = 0; j < p.size(); ++j) {
                p[j] = std::max((T)0, p[j] - q[j]);
                s += (double)p[j];
            }
            if (s > 0.0) {
                for (auto& pv : p) {
                    pv = (T)((double)pv / s);
                }
            } else {
                // p <= q everywhere: only reachable through rounding dust,
                // fall back to the unstripped distribution
                p = target_probs[(size_t)cur];
            }
        }
        if (next < 0) {
            out.tokens.push_back(sample_from(p.data(), (int)p.size(), rng));
            break;
        }
        out.tokens.push_back(tree.token(next));
        out.nodes.push_back(next);
        cur = next;
        p = target_probs[(size_t)cur];
    }
    out.keep_len = base + (int)out.nodes.size();
    return out;
}

// One decode step in the trace. The first token of a step is what plain
// decoding would have produced anyway, so `extra` counts the rest.
struct StepRecord {
    int step = 0;      // 0-based draft step
    int drafted = 0;   // tree nodes excluding the anchor
    int accepted = 0;  // tokens emitted this step, bonus included
    int extra = 0;     // accepted - 1
    int total = 0;     // cumulative continuation tokens, seed token included
};

struct StepTrace {
    std::vector<StepRecord> steps;
};

struct SpecDecodeResult {
    std::vector<int> tokens;  // continuation only, like vanilla_decode
    StepTrace trace;
};

// Full speculative loop: draft below the pending token, score the tree with
// one target forward, verify, then compact both caches onto the accepted
// path and continue. At temperature 0 the output is token-for-token the
// vanilla greedy continuation regardless of speculator quality.
template <typename T>
SpecDecodeResult spec_decode_loop(const TargetModel<T>& target, const Speculator<T>& spec,
                                  const std::vector<int>& prompt, int max_new, double temperature,
                                  const TreeShape& shape, uint64_t seed) {
    if (prompt.empty()) {
        throw ArgumentError("spec_decode_loop: prompt must be non-empty");
    }
    SpecDecodeResult res;
    if (max_new <= 0) {
        return res;
    }
    Rng rng(seed);
    const int n = (int)prompt.size();
    const int v = target.cfg.vocab_size;
    // The last step may commit past max_new before the result is trimmed, so
    // both caches need depth extra rows beyond the prompt + budget.
    KvCache<T> cache = target.make_cache(n + max_new + shape.node_count() + shape.depth() + 1);
    SpeculatorState<T> state = spec.make_state(n + max_new + shape.depth() + 1);

    auto fo = target.forward(cache, prompt);
    int pending = target.emit(fo.logits, fo.logits.rows() - 1, temperature, rng);
    res.tokens.push_back(pending);
    if (n >= 2) {
        std::vector<int> rows((size_t)(n - 1));
        std::iota(rows.begin(), rows.end(), 0);
        spec.extend_context(state, select_rows(fo.hidden, rows),
                            {prompt.begin() + 1, prompt.end()});
    }
    Tensor<T> h_last = select_rows(fo.hidden, {n - 1});

    int step = 0;
    while ((int)res.tokens.size() < max_new) {
        DraftResult<T> dr = spec.draft(state, h_last, pending, shape, temperature, rng);
        const int base = cache.len;
        auto sc = target.forward_tree(cache, dr.tree);

        VerifyOutcome vo;
        if (temperature <= 0.0) {
            vo = verify_greedy(dr.tree, sc.logits, base);
        } else {
            std::vector<std::vector<T>> pr((size_t)dr.tree.size());
            for (int i = 0; i < dr.tree.size(); ++i) {
                pr[(size_t)i] = TargetModel<T>::probs_from_logits(
                    sc.logits.data() + (int64_t)i * v, v, (T)temperature);
            }
            vo = verify_sampled(dr.tree, pr, dr.dist, rng, base);
        }

        cache.compact(base, vo.nodes);
        const int m = (int)vo.nodes.size() - 1;  // accepted beyond the anchor
        if (m >= 1) {
            // newly committed pairs: hidden at path node i, token of node i+1
            std::vector<int> hrows(vo.nodes.begin(), vo.nodes.end() - 1);
            spec.extend_context(state, select_rows(sc.hidden, hrows),
                                {vo.tokens.begin(), vo.tokens.begin() + m});
        }
        h_last = select_rows(sc.hidden, {vo.nodes.back()});
        pending = vo.tokens.back();

        const int room = max_new - (int)res.tokens.size();
        const int take = std::min((int)vo.tokens.size(), room);
        res.tokens.insert(res.tokens.end(), vo.tokens.begin(), vo.tokens.begin() + take);
        res.trace.steps.push_back({step, dr.tree.size() - 1, take, take - 1,
                                   (int)res.tokens.size()});
        ++step;
    }
    return res;
}

}  // namespace spdl

#pragma once

// Knowledge distillation of the speculator against a frozen target:
// teacher-signal extraction, the combined classification/regression loss
// with per-head decay, AdamW with a warmup-then-linear-decay schedule, and
// the training loop. The target is never modified.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "spdl/model.hpp"
#include "spdl/speculator.hpp"
#include "spdl/verifier.hpp"

namespace spdl {

struct TrainConfig {
    float w_reg = 10.0f;        // regression weight inside each head's term
    float decay = 0.7f;         // per-head geometric weight
    float smooth_l1_beta = 1.0f;

    double lr = 1e-3;
    int warmup_steps = 1000;
    double min_lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;

    int steps = 20000;
    int batch_size = 16;
    int seq_len = 128;
    uint64_t seed = 1;

    bool use_sample_mask = false;  // off by default; kept for experiments
    int mask_top_k = 8;
    double mask_top_p = 0.95;

    int eval_every = 0;  // 0 disables periodic decode evals
    std::vector<std::vector<int>> eval_prompts;
    int eval_max_new = 33;
    std::string eval_tree = "4-2-2";
};

// Warmup climbs linearly so that step 0 already moves a little, then the
// rate decays linearly to min_lr by the final step.
inline double lr_at(const TrainConfig& tc, int64_t step, int64_t total_steps) {
    if (tc.warmup_steps > 0 && step < tc.warmup_steps) {
        return tc.lr * (double)(step + 1) / (double)tc.warmup_steps;
    }
    const int64_t tail = total_steps - 1 - tc.warmup_steps;
    if (tail <= 0) {
        return tc.lr;
    }
    const double prog = std::min(1.0, (double)(step - tc.warmup_steps) / (double)tail);
    return tc.lr + (tc.min_lr - tc.lr) * prog;
}

// Decoupled-weight-decay adaptive-moment optimizer. Moments are kept in
// double so the update path stays deterministic and well conditioned.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>*> params, double beta1, double beta2, double weight_decay,
          double eps)
        : params_(std::move(params)), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign((size_t)params_[i]->numel(), 0.0);
            v_[i].assign((size_t)params_[i]->numel(), 0.0);
        }
    }

    explicit AdamW(std::vector<Tensor<T>*> params, const TrainConfig& tc)
        : AdamW(std::move(params), tc.beta1, tc.beta2, tc.weight_decay, tc.adam_eps) {}

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, (double)t_);
        const double bc2 = 1.0 - std::pow(b2_, (double)t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& p = *params_[i];
            const T* g = p.grad();
            T* w = p.data();
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double gj = (double)g[j];
                m_[i][(size_t)j] = b1_ * m_[i][(size_t)j] + (1.0 - b1_) * gj;
                v_[i][(size_t)j] = b2_ * v_[i][(size_t)j] + (1.0 - b2_) * gj * gj;
                const double mh = m_[i][(size_t)j] / bc1;
                const double vh = v_[i][(size_t)j] / bc2;
                w[j] = (T)((double)w[j] - lr * (mh / (std::sqrt(vh) + eps_) + wd_ * (double)w[j]));
            }
        }
    }

    void zero_grad() {
        for (Tensor<T>* p : params_) {
            p->zero_grad();
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor<T>*> params_;
    double b1_, b2_, wd_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Teacher signal for one sequence: one frozen forward stores, per position
// t, the next-token distribution (row t predicts token t+1) and the hidden
// state after the final norm.
template <typename T>
struct DistillBatch {
    std::vector<int> tokens;
    Tensor<T> teacher_probs;   // [T x V]
    Tensor<T> teacher_hidden;  // [T x d], final norm applied
};

template <typename T>
DistillBatch<T> extract_teacher(const TargetModel<T>& target, const std::vector<int>& tokens) {
    if ((int)tokens.size() > target.cfg.max_seq_len) {
        throw ArgumentError("extract_teacher: sequence exceeds max_seq_len");
    }
    if (tokens.empty()) {
        throw ArgumentError("extract_teacher: empty sequence");
    }
    auto no_grad = Graph<T>::pause();
    auto fw = target.forward_train(tokens, 0);
    DistillBatch<T> out;
    out.tokens = tokens;
    out.teacher_probs = softmax(fw.logits, (T)1);
    out.teacher_hidden = fw.hidden;
    return out;
}

// Per-position keep flags: row s is kept when the corpus token s+1 lies in
// the intersection of the teacher's top-k and top-p sets at row s. The last
// row has no successor to test and stays kept.
template <typename T>
std::vector<uint8_t> sample_mask_positions(const Tensor<T>& teacher_probs,
                                           const std::vector<int>& tokens, int top_k,
                                           double top_p) {
    const int t = (int)tokens.size();
    if (teacher_probs.rows() != t) {
        throw ShapeError("sample_mask: one teacher row per token required");
    }
    const int v = (int)teacher_probs.cols();
    std::vector<uint8_t> keep((size_t)t, 1);
    std::vector<int> idx((size_t)v);
    for (int s = 0; s + 1 < t; ++s) {
        const T* row = teacher_probs.data() + (int64_t)s * v;
        for (int i = 0; i < v; ++i) {
            idx[(size_t)i] = i;
        }
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (row[a] != row[b]) {
                return row[a] > row[b];
            }
            return a < b;
        });
        double cum = 0.0;
        bool found = false;
        for (int r = 0; r < v && r < top_k; ++r) {
            if (cum >= top_p) {
                break;  // previous entries already cover top_p
            }
            cum += (double)row[idx[(size_t)r]];
            if (idx[(size_t)r] == tokens[(size_t)(s + 1)]) {
                found = true;
                break;
            }
        }
        keep[(size_t)s] = found ? 1 : 0;
    }
    return keep;
}

// Cascade across heads: head i at anchor t trains on teacher row t+1+i, and
// is kept only when rows t+1..t+1+i are all kept. A masked head masks every
// deeper head at the same anchor.
inline std::vector<std::vector<uint8_t>> cascade_mask(const std::vector<uint8_t>& keep,
                                                      int num_heads) {
    const int t = (int)keep.size();
    std::vector<std::vector<uint8_t>> head_mask((size_t)num_heads);
    for (int i = 0; i < num_heads; ++i) {
        const int rows = t - 1 - i;
        if (rows <= 0) {
            break;
        }
        head_mask[(size_t)i].resize((size_t)rows, 1);
        for (int r = 0; r < rows; ++r) {
            uint8_t ok = 1;
            for (int j = 0; j <= i; ++j) {
                ok = (uint8_t)(ok & keep[(size_t)(r + 1 + j)]);
            }
            head_mask[(size_t)i][(size_t)r] = ok;
        }
    }
    return head_mask;
}

template <typename T>
struct DistillLossOut {
    Tensor<T> total;
    std::vector<double> cls, reg;  // per-head means before decay weighting
};

// Combined loss over all heads: head i pairs its row t with teacher row
// t+1+i, adds w_reg times the regression distance between its normed hidden
// and the teacher hidden, and the whole head term is weighted by decay^i.
template <typename T>
DistillLossOut<T> distill_loss(const Speculator<T>& spec,
                               const typename Speculator<T>::TrainForward& fw,
                               const Tensor<T>& teacher_probs, const Tensor<T>& teacher_hidden,
                               const TrainConfig& tc,
                               const std::vector<std::vector<uint8_t>>* head_mask = nullptr) {
    const int t = (int)teacher_probs.rows();
    if (teacher_hidden.rows() != t) {
        throw ArgumentError("distill_loss: teacher row count mismatch");
    }
    const int n = (int)fw.head_logits.size();
    if (n == 0 || n > spec.scfg.num_heads) {
        throw ArgumentError("distill_loss: head count mismatch");
    }
    DistillLossOut<T> out;
    out.cls.assign((size_t)n, 0.0);
    out.reg.assign((size_t)n, 0.0);
    Tensor<T> total;
    bool have_total = false;
    double decay_w = 1.0;
    for (int i = 0; i < n; ++i, decay_w *= (double)tc.decay) {
        const int rows = t - 1 - i;
        if (fw.head_logits[(size_t)i].rows() != rows) {
            throw ArgumentError("distill_loss: head row count mismatch");
        }
        std::vector<int> kept, teacher_rows;
        for (int r = 0; r < rows; ++r) {
            if (head_mask == nullptr || (*head_mask)[(size_t)i].empty() ||
                (*head_mask)[(size_t)i][(size_t)r]) {
                kept.push_back(r);
                teacher_rows.push_back(r + 1 + i);
            }
        }
        if (kept.empty()) {
            continue;
        }
        Tensor<T> logits = ((int)kept.size() == rows) ? fw.head_logits[(size_t)i]
                                                      : select_rows(fw.head_logits[(size_t)i], kept);
        Tensor<T> hidden = ((int)kept.size() == rows) ? fw.head_hidden[(size_t)i]
                                                      : select_rows(fw.head_hidden[(size_t)i], kept);
        Tensor<T> p_rows = select_rows(teacher_probs, teacher_rows);
        Tensor<T> h_rows = select_rows(teacher_hidden, teacher_rows);

        Tensor<T> cls = soft_cross_entropy(p_rows, logits);
        Tensor<T> draft_n = rms_norm(hidden, spec.norm_final, (T)spec.tcfg.rms_eps);
        Tensor<T> reg = smooth_l1(draft_n, h_rows, (T)tc.smooth_l1_beta);
        out.cls[(size_t)i] = (double)cls.data()[0];
        out.reg[(size_t)i] = (double)reg.data()[0];

        Tensor<T> term = scale(add(cls, scale(reg, (T)tc.w_reg)), (T)decay_w);
        total = have_total ? add(total, term) : term;
        have_total = true;
    }
    if (!have_total) {
        throw ArgumentError("distill_loss: every position masked out");
    }
    out.total = total;
    return out;
}

struct LossPoint {
    int64_t step = 0;
    double lr = 0.0;
    double total = 0.0;
    std::vector<double> cls, reg;  // per-head batch means
};

struct EvalPoint {
    int64_t step = 0;
    double extra_per_step = 0.0;
};

struct TrainResult {
    std::vector<LossPoint> curve;
    std::vector<EvalPoint> evals;
};

// Distillation loop. Every step draws batch_size windows (random sequence,
// random offset), extracts the teacher signal over the full sequence,
// accumulates gradients in draw order, then takes one optimizer step.
// Deterministic for a fixed seed and corpus.
template <typename T>
TrainResult train(const TargetModel<T>& target, Speculator<T>& spec,
                  const std::vector<std::vector<int>>& corpus, const TrainConfig& tc) {
    std::vector<int> usable;
    for (size_t i = 0; i < corpus.size(); ++i) {
        if ((int)corpus[i].size() >= 2 && (int)corpus[i].size() <= target.cfg.max_seq_len) {
            usable.push_back((int)i);
        }
    }
    if (usable.empty() && tc.steps > 0) {
        throw ArgumentError("train: corpus has no usable sequence (need length >= 2)");
    }

    auto named = spec.named_parameters();
    std::vector<Tensor<T>*> params;
    for (auto& [name, p] : named) {
        p->set_requires_grad();
        params.push_back(p);
    }
    AdamW<T> opt(params, tc);
    Rng rng(tc.seed);
    TrainResult res;

    const int n_heads = spec.scfg.num_heads;
    Graph<T> graph;
    for (int64_t step = 0; step < tc.steps; ++step) {
        LossPoint pt;
        pt.step = step;
        pt.lr = lr_at(tc, step, tc.steps);
        pt.cls.assign((size_t)n_heads, 0.0);
        pt.reg.assign((size_t)n_heads, 0.0);

        for (int b = 0; b < tc.batch_size; ++b) {
            const auto& seq = corpus[(size_t)usable[(size_t)rand_int(rng, 0, (int64_t)usable.size() - 1)]];
            const int w = std::min(tc.seq_len, (int)seq.size());
            const int off = (int)rand_int(rng, 0, (int64_t)((int)seq.size() - w));

            DistillBatch<T> teacher = extract_teacher(target, seq);
            std::vector<int> rows((size_t)w);
            std::iota(rows.begin(), rows.end(), off);
            std::vector<int> window(seq.begin() + off, seq.begin() + off + w);
            Tensor<T> tp = select_rows(teacher.teacher_probs, rows);
            Tensor<T> th = select_rows(teacher.teacher_hidden, rows);

            std::vector<std::vector<uint8_t>> head_mask;
            if (tc.use_sample_mask) {
                head_mask = cascade_mask(sample_mask_positions(tp, window, tc.mask_top_k,
                                                               tc.mask_top_p),
                                         n_heads);
                // the cascade nests deeper heads inside head 0's keeps, so
                // an all-masked head 0 means the whole window is dead
                const auto& h0 = head_mask[0];
                if (std::find(h0.begin(), h0.end(), (uint8_t)1) == h0.end()) {
                    continue;
                }
            }

            auto scope = graph.record();
            auto fw = spec.forward_train(window, th, off);
            DistillLossOut<T> lo = distill_loss(spec, fw, tp, th, tc,
                                                tc.use_sample_mask ? &head_mask : nullptr);
            const double lv = (double)lo.total.data()[0];
            if (!std::isfinite(lv)) {
                throw NumericError("train: non-finite loss at step " + std::to_string(step));
            }
            pt.total += lv / tc.batch_size;
            for (size_t i = 0; i < lo.cls.size(); ++i) {
                pt.cls[i] += lo.cls[i] / tc.batch_size;
                pt.reg[i] += lo.reg[i] / tc.batch_size;
            }
            graph.backward(scale(lo.total, (T)(1.0 / tc.batch_size)));
            graph.clear();
        }

        opt.step(pt.lr);
        opt.zero_grad();
        res.curve.push_back(std::move(pt));

        if (tc.eval_every > 0 && !tc.eval_prompts.empty() &&
            ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps)) {
            const TreeShape shape = TreeShape::parse(tc.eval_tree);
            double extra = 0.0;
            int64_t steps_total = 0;
            for (const auto& prompt : tc.eval_prompts) {
                SpecDecodeResult r =
                    spec_decode_loop(target, spec, prompt, tc.eval_max_new, 0.0, shape, 17);
                for (const auto& s : r.trace.steps) {
                    extra += s.extra;
                }
                steps_total += (int64_t)r.trace.steps.size();
            }
            res.evals.push_back({step + 1, steps_total ? extra / (double)steps_total : 0.0});
        }
    }
    return res;
}

// Next-token pretraining for the target itself. Draft quality measures
// agreement between draft and target, so synthetic studies first fit the
// target to the corpus; distillation then chases a model that is actually
// predictive. Reuses the optimizer and schedule settings from TrainConfig.
// Returns the per-step mean loss curve.
template <typename T>
std::vector<double> pretrain_target(TargetModel<T>& target,
                                    const std::vector<std::vector<int>>& corpus,
                                    const TrainConfig& tc) {
    std::vector<int> usable;
    for (size_t i = 0; i < corpus.size(); ++i) {
        if ((int)corpus[i].size() >= 2 && (int)corpus[i].size() <= target.cfg.max_seq_len) {
            usable.push_back((int)i);
        }
    }
    if (usable.empty() && tc.steps > 0) {
        throw ArgumentError("pretrain_target: corpus has no usable sequence (need length >= 2)");
    }

    auto named = target.named_parameters();
    std::vector<Tensor<T>*> params;
    for (auto& [name, p] : named) {
        p->set_requires_grad();
        params.push_back(p);
    }
    AdamW<T> opt(params, tc);
    Rng rng(tc.seed);
    std::vector<double> curve;

    Graph<T> graph;
    for (int64_t step = 0; step < tc.steps; ++step) {
        double mean_loss = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const auto& seq = corpus[(size_t)usable[(size_t)rand_int(rng, 0, (int64_t)usable.size() - 1)]];
            const int w = std::min(tc.seq_len, (int)seq.size());
            const int off = (int)rand_int(rng, 0, (int64_t)((int)seq.size() - w));
            std::vector<int> window(seq.begin() + off, seq.begin() + off + w);

            auto scope = graph.record();
            auto fw = target.forward_train(window, off);
            std::vector<int> rows((size_t)w - 1);
            std::iota(rows.begin(), rows.end(), 0);
            std::vector<int> next(window.begin() + 1, window.end());
            Tensor<T> loss = cross_entropy(select_rows(fw.logits, rows), next);
            const double lv = (double)loss.data()[0];
            if (!std::isfinite(lv)) {
                throw NumericError("pretrain_target: non-finite loss at step " +
                                   std::to_string(step));
            }
            mean_loss += lv / tc.batch_size;
            graph.backward(scale(loss, (T)(1.0 / tc.batch_size)));
            graph.clear();
        }
        opt.step(lr_at(tc, step, tc.steps));
        opt.zero_grad();
        curve.push_back(mean_loss);
    }
    for (auto& [name, p] : named) {
        p->set_requires_grad(false);
    }
    return curve;
}

}  // namespace spdl

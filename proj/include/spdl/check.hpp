#pragma once

// Self-contained smoke versions of the invariant suites, one per acceptance
// criterion id, runnable from the command line in seconds. Sizes here are
// reduced; the authoritative sizes and tolerances live in the test suite.
// Every suite is deterministic: fixed seeds, no wall-clock dependence.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "spdl/bench.hpp"
#include "spdl/corpus.hpp"

namespace spdl {

struct SuiteResult {
    std::string id;
    std::string name;
    bool pass = false;
    double seconds = 0.0;
    std::string detail;
};

inline const std::vector<std::pair<std::string, std::string>>& check_suites() {
    static const std::vector<std::pair<std::string, std::string>> kSuites = {
        {"c1", "greedy-losslessness"},
        {"c2", "sampled-distribution"},
        {"c3", "gradient-check"},
        {"c4", "mask-equivalence"},
        {"c5", "attention-decoder-conformance"},
        {"c6", "loss-conformance"},
        {"c7", "init-conformance"},
        {"c8", "training-efficacy"},
        {"c9", "ablation-direction"},
        {"c10", "oracle-upper-bound"},
    };
    return kSuites;
}

namespace checks {

inline ModelConfig small_cfg(int v, int d, int h, int l, int seq = 96) {
    ModelConfig cfg;
    cfg.vocab_size = v;
    cfg.hidden_size = d;
    cfg.num_heads = h;
    cfg.num_layers = l;
    cfg.max_seq_len = seq;
    return cfg;
}

template <typename T>
Speculator<T> small_spec(TargetModel<T>& target, Rng& rng, int heads = 3, int augment = 1,
                         float noise = 0.01f) {
    SpeculatorConfig scfg;
    scfg.num_heads = heads;
    scfg.augment_layers = augment;
    scfg.init_noise = noise;
    return Speculator<T>::init_from_target(target, scfg, rng);
}

inline bool greedy_losslessness(std::string& detail) {
    const char* shapes[] = {"2-2", "1-1-1", "3-2", "4-2-2"};
    Rng meta(17);
    for (int rep = 0; rep < 12; ++rep) {
        const int v = 17 + (int)rand_int(meta, 0, 14);
        ModelConfig cfg = small_cfg(v, rep % 2 ? 24 : 16, 2, 1 + rep % 2);
        Rng rng(300 + (uint64_t)rep);
        TargetModel<float> target =
            TargetModel<float>::random_init(cfg, rng, rep % 3 == 0 ? 0.4f : 0.05f);
        Speculator<float> spec = small_spec(target, rng);

        std::vector<int> prompt;
        const int plen = 1 + (int)rand_int(meta, 0, 3);
        for (int i = 0; i < plen; ++i) {
            prompt.push_back((int)rand_int(meta, 0, v - 1));
        }
        const TreeShape shape = TreeShape::parse(shapes[rep % 4]);
        std::vector<int> got = spec_decode_loop(target, spec, prompt, 16, 0.0, shape, 7).tokens;
        std::vector<int> want = target.vanilla_decode(prompt, 16, 0.0, 7);
        if (got != want) {
            detail = "case " + std::to_string(rep) + " diverged from the plain decode";
            return false;
        }
    }
    detail = "12 random cases, 16 tokens each, exact token match";
    return true;
}

inline bool sampled_distribution(std::string& detail) {
    ModelConfig cfg = small_cfg(16, 16, 2, 1);
    Rng rng(31);
    TargetModel<float> target = TargetModel<float>::random_init(cfg, rng, 0.2f);
    Speculator<float> spec = small_spec(target, rng, 3, 1, 0.2f);
    const std::vector<int> prompt = {3, 1, 4};
    const int pending = 7;
    const double temp = 1.0;
    const TreeShape shape = TreeShape::parse("2-2");
    const int v = cfg.vocab_size;

    const int trials = 30000;
    std::vector<double> counts((size_t)v, 0.0);
    std::vector<double> want;
    for (int t = 0; t < trials; ++t) {
        Rng trng(5000 + (uint64_t)t);
        KvCache<float> cache = target.make_cache(32);
        SpeculatorState<float> state = spec.make_state(16);
        auto fo = target.forward(cache, prompt);
        spec.extend_context(state, select_rows(fo.hidden, {0, 1}), {prompt[1], prompt[2]});
        Tensor<float> h_last = select_rows(fo.hidden, {2});

        auto dr = spec.draft(state, h_last, pending, shape, temp, trng);
        auto sc = target.forward_tree(cache, dr.tree);
        std::vector<std::vector<float>> pr((size_t)dr.tree.size());
        for (int i = 0; i < dr.tree.size(); ++i) {
            pr[(size_t)i] = TargetModel<float>::probs_from_logits(
                sc.logits.data() + (int64_t)i * v, v, (float)temp);
        }
        if (want.empty()) {
            want.assign(pr[0].begin(), pr[0].end());
        }
        VerifyOutcome vo = verify_sampled(dr.tree, pr, dr.dist, trng);
        counts[(size_t)vo.tokens[0]] += 1.0;
    }

    double tv = 0.0;
    for (int i = 0; i < v; ++i) {
        tv += std::abs(counts[(size_t)i] / trials - want[(size_t)i]);
    }
    tv *= 0.5;

    // chi-square goodness of fit; expected counts here are all comfortably
    // above the small-count rule
    double x2 = 0.0;
    int bins = 0;
    for (int i = 0; i < v; ++i) {
        const double exp = want[(size_t)i] * trials;
        if (exp < 5.0) {
            continue;
        }
        x2 += (counts[(size_t)i] - exp) * (counts[(size_t)i] - exp) / exp;
        ++bins;
    }
    double p = 1.0;
    if (bins > 1) {
        boost::math::chi_squared dist((double)bins - 1.0);
        p = 1.0 - boost::math::cdf(dist, x2);
    }

    std::ostringstream os;
    os << trials << " trials, total variation " << tv << ", chi-square p " << p;
    detail = os.str();
    return tv <= 0.03 && p > 1e-3;
}

inline bool gradient_check(std::string& detail) {
    ModelConfig cfg = small_cfg(5, 8, 2, 1, 32);
    Rng rng(3);
    TargetModel<double> target = TargetModel<double>::random_init(cfg, rng, 0.05);
    Speculator<double> spec = small_spec<double>(target, rng, 2, 1, 0.05f);
    const std::vector<int> toks = {1, 2, 3, 0, 4};
    const int t = (int)toks.size();

    Tensor<double> th = Tensor<double>::uniform({t, 8}, -0.8, 0.8, rng);
    Tensor<double> tp({t, 5});
    for (int i = 0; i < t; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 5; ++j) {
            const double e = std::exp(rand_uniform(rng, -1.0, 1.0));
            tp.data()[i * 5 + j] = e;
            sum += e;
        }
        for (int j = 0; j < 5; ++j) {
            tp.data()[i * 5 + j] /= sum;
        }
    }
    TrainConfig tc;
    auto make_loss = [&]() {
        auto fw = spec.forward_train(toks, th, 0);
        return distill_loss(spec, fw, tp, th, tc, nullptr).total;
    };

    auto named = spec.named_parameters();
    for (auto& [name, ptr] : named) {
        ptr->set_requires_grad();
        ptr->zero_grad();
    }
    Graph<double> g;
    {
        auto scope = g.record();
        g.backward(make_loss());
    }

    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    for (auto& [name, ptr] : named) {
        std::vector<int64_t> coords = {0, ptr->numel() / 2, ptr->numel() - 1};
        coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        for (int64_t i : coords) {
            const double keep = ptr->data()[i];
            ptr->data()[i] = keep + h;
            const double lp = make_loss().item();
            ptr->data()[i] = keep - h;
            const double lm = make_loss().item();
            ptr->data()[i] = keep;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = ptr->grad()[i];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (err > worst) {
                worst = err;
                worst_name = name;
            }
            ok = ok && err <= 1e-3;
        }
    }
    for (auto& [name, ptr] : named) {
        ptr->set_requires_grad(false);
    }
    std::ostringstream os;
    os << "distillation loss vs central differences, worst relative error " << worst << " ("
       << worst_name << ")";
    detail = os.str();
    return ok;
}

inline bool mask_equivalence(std::string& detail) {
    Rng rng(41);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = (int)rand_int(rng, 1, 32);
        TokenTree tree(n);
        tree.add_root((int)rand_int(rng, 0, 50));
        for (int i = 1; i < n; ++i) {
            tree.add_child((int)rand_int(rng, 0, i - 1), (int)rand_int(rng, 0, 50));
        }
        TreeMask dense = build_tree_mask(tree);
        TreeMask expanded = compress_tree_mask(tree).expand();
        if (dense.n != expanded.n || dense.bits != expanded.bits) {
            detail = "compressed mask diverged on tree " + std::to_string(rep);
            return false;
        }
    }
    for (int len = 1; len <= 12; ++len) {
        TokenTree chain(len);
        chain.add_root(0);
        for (int i = 1; i < len; ++i) {
            chain.add_child(i - 1, i);
        }
        TreeMask mask = build_tree_mask(chain);
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < len; ++j) {
                if (mask.visible(i, j) != (j <= i)) {
                    detail = "chain mask is not plain causal at length " + std::to_string(len);
                    return false;
                }
            }
        }
    }
    detail = "100 random trees exact, chains collapse to causal";
    return true;
}

inline bool attention_decoder_conformance(std::string& detail) {
    const int d = 12, heads = 3;
    Rng rng(7);
    AttentionDecoder<float> ad;
    ad.wq = Tensor<float>::uniform({d, d}, -0.5f, 0.5f, rng);
    ad.wk = Tensor<float>::uniform({d, d}, -0.5f, 0.5f, rng);
    ad.wv = Tensor<float>::zeros({d, d});
    ad.bq = Tensor<float>::uniform({d}, -0.2f, 0.2f, rng);
    ad.bk = Tensor<float>::uniform({d}, -0.2f, 0.2f, rng);
    ad.bv = Tensor<float>::zeros({d});
    ad.norm_w = Tensor<float>::uniform({d}, 0.7f, 1.3f, rng);

    Tensor<float> x = Tensor<float>::uniform({2, d}, -1.0f, 1.0f, rng);
    Tensor<float> y = Tensor<float>::uniform({2, d}, -1.0f, 1.0f, rng);

    // zero value path leaves the residual untouched, bit for bit
    Tensor<float> out = attention_decoder_apply(ad, x, y, heads, 1e-5f);
    if (std::memcmp(out.data(), x.data(), sizeof(float) * (size_t)x.numel()) != 0) {
        detail = "zero-value weights did not reduce to the residual";
        return false;
    }

    // gate path must be similarity-gated, never a feed-forward activation
    ad.wv = Tensor<float>::uniform({d, d}, -0.5f, 0.5f, rng);
    Graph<float> g;
    {
        auto scope = g.record();
        ad.wq.set_requires_grad();
        attention_decoder_apply(ad, x, y, heads, 1e-5f);
        ad.wq.set_requires_grad(false);
    }
    if (g.contains_op("silu") || !g.contains_op("cosine_similarity")) {
        detail = "recorded ops are not the similarity-gated form";
        return false;
    }
    detail = "residual exactness and similarity gating hold";
    return true;
}

inline bool loss_conformance(std::string& detail) {
    nlohmann::json dump = train_config_json(TrainConfig{});
    if (dump.at("w_reg").get<double>() != 10.0 ||
        std::abs(dump.at("decay").get<double>() - 0.7) > 1e-6) {
        detail = "stock loss weights are not surfaced as 10.0 / 0.7";
        return false;
    }

    // one fabricated head against a scalar transcription
    ModelConfig cfg = small_cfg(5, 4, 2, 1, 32);
    Rng rng(9);
    TargetModel<float> target = TargetModel<float>::random_init(cfg, rng, 0.1f);
    Speculator<float> spec = small_spec(target, rng, 1, 0, 0.0f);

    const int t = 3, v = 5, d = 4;
    typename Speculator<float>::TrainForward fw;
    fw.head_logits.push_back(Tensor<float>::uniform({t - 1, v}, -1.5f, 1.5f, rng));
    fw.head_hidden.push_back(Tensor<float>::uniform({t - 1, d}, -1.0f, 1.0f, rng));
    Tensor<float> tp({t, v});
    for (int i = 0; i < t; ++i) {
        float sum = 0.0f;
        for (int j = 0; j < v; ++j) {
            tp.data()[i * v + j] = (float)(1 + ((i + j) % v));
            sum += tp.data()[i * v + j];
        }
        for (int j = 0; j < v; ++j) {
            tp.data()[i * v + j] /= sum;
        }
    }
    Tensor<float> th = Tensor<float>::uniform({t, d}, -1.0f, 1.0f, rng);
    TrainConfig tc;
    DistillLossOut<float> got = distill_loss(spec, fw, tp, th, tc, nullptr);

    // scalar oracle: mean soft cross entropy + w_reg * mean smooth-l1 of the
    // row-normalized hidden against the teacher rows, head rows target r+1
    double ce = 0.0, sl = 0.0;
    Tensor<float> hn = rms_norm(fw.head_hidden[0], spec.norm_final, spec.tcfg.rms_eps);
    for (int r = 0; r < t - 1; ++r) {
        double mx = -1e30;
        for (int j = 0; j < v; ++j) {
            mx = std::max(mx, (double)fw.head_logits[0].data()[r * v + j]);
        }
        double denom = 0.0;
        for (int j = 0; j < v; ++j) {
            denom += std::exp((double)fw.head_logits[0].data()[r * v + j] - mx);
        }
        const double lse = mx + std::log(denom);
        for (int j = 0; j < v; ++j) {
            ce -= (double)tp.data()[(r + 1) * v + j] *
                  ((double)fw.head_logits[0].data()[r * v + j] - lse);
        }
        for (int j = 0; j < d; ++j) {
            const double diff =
                std::abs((double)hn.data()[r * d + j] - (double)th.data()[(r + 1) * d + j]);
            sl += diff < 1.0 ? 0.5 * diff * diff : diff - 0.5;
        }
    }
    ce /= (t - 1);
    sl /= (double)(t - 1) * d;
    const double want = ce + 10.0 * sl;
    const double err = std::abs((double)got.total.item() - want);
    std::ostringstream os;
    os << "single-head value vs scalar oracle, absolute error " << err;
    detail = os.str();
    return err <= 1e-6;
}

inline bool init_conformance(std::string& detail) {
    ModelConfig cfg = small_cfg(19, 16, 2, 2);
    Rng rng(21);
    TargetModel<float> target = TargetModel<float>::random_init(cfg, rng, 0.08f);
    Speculator<float> exact = small_spec(target, rng, 3, 1, 0.0f);
    const int d = cfg.hidden_size;

    Tensor<float> eye = Tensor<float>::eye(d);
    if (std::memcmp(exact.head0_fc.data(), eye.data(), sizeof(float) * (size_t)eye.numel()) !=
            0 ||
        std::memcmp(exact.ad1.wq.data(), eye.data(), sizeof(float) * (size_t)eye.numel()) != 0) {
        detail = "noise-free projections are not exact identities";
        return false;
    }
    for (int64_t i = 0; i < exact.ad1.wv.numel(); ++i) {
        if (exact.ad1.wv.data()[i] != 0.0f) {
            detail = "noise-free value weights are not exactly zero";
            return false;
        }
    }
    for (int vtok = 0; vtok < cfg.vocab_size; ++vtok) {
        for (int j = 0; j < d; ++j) {
            if (exact.embedding.at({vtok, j}) != target.lm_head.at({j, vtok})) {
                detail = "embedding is not the bit-exact head transpose";
                return false;
            }
        }
    }

    Speculator<float> jittered = small_spec(target, rng, 3, 1, 0.01f);
    float max_jitter = 0.0f;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            float x = jittered.head0_fc.data()[(int64_t)i * d + j];
            if (i == j) {
                x -= 1.0f;
            }
            max_jitter = std::max(max_jitter, std::abs(x));
        }
    }
    std::ostringstream os;
    os << "identities, zeros and bit-exact embedding hold; max jitter " << max_jitter;
    detail = os.str();
    return max_jitter <= 0.01f + 1e-9f && max_jitter > 0.0f;
}

// Shared by the efficacy and ablation smokes: fit a small target to an
// order-2 chain once, then measure draft throughput for a given speculator
// configuration after a short distillation run.
struct EfficacyRig {
    ModelConfig cfg;
    TargetModel<float> target;
    std::vector<std::vector<int>> corpus;
    std::vector<std::vector<int>> prompts;
    std::vector<std::vector<int>> eval_windows;

    static EfficacyRig make() {
        ModelConfig cfg = checks::small_cfg(16, 16, 2, 1);
        Rng rng(51);
        EfficacyRig r{cfg, TargetModel<float>::random_init(cfg, rng, 0.08f), {}, {}, {}};
        r.corpus = markov_corpus(16, 24, 48, 97);
        TrainConfig pt;
        pt.steps = 400;
        pt.batch_size = 4;
        pt.seq_len = 24;
        pt.warmup_steps = 50;
        pt.seed = 11;
        pretrain_target(r.target, r.corpus, pt);
        MarkovChain mc = MarkovChain::make(16, 97);
        Rng prng(123);
        for (auto& seq : mc.sample(4, 5, prng)) {
            r.prompts.push_back(seq);
        }
        Rng wrng(5151);
        for (auto& seq : mc.sample(6, 24, wrng)) {
            r.eval_windows.push_back(seq);
        }
        return r;
    }

    double extra_for(int augment, float w_reg, int steps, uint64_t seed) {
        Rng rng(seed);
        Speculator<float> spec = small_spec(target, rng, 3, augment);
        if (steps > 0) {
            TrainConfig tc;
            tc.steps = steps;
            tc.batch_size = 2;
            tc.seq_len = 24;
            tc.warmup_steps = 100;
            tc.w_reg = w_reg;
            tc.seed = seed;
            train(target, spec, corpus, tc);
        }
        BenchReport rep = run_bench<float>(target, &spec, prompts, BenchMode::spec, 25, 0.0,
                                           TreeShape::parse("2-2-1"), 5);
        return rep.extra_per_step;
    }

    // Mean per-head hidden regression error on held-out walks of the same
    // chain, after training with the given regression weight.
    double hidden_err_for(float w_reg, int steps, uint64_t seed) {
        Rng rng(seed);
        Speculator<float> spec = small_spec(target, rng, 3, 1);
        TrainConfig tc;
        tc.steps = steps;
        tc.batch_size = 2;
        tc.seq_len = 24;
        tc.warmup_steps = 100;
        tc.w_reg = w_reg;
        tc.seed = seed;
        train(target, spec, corpus, tc);

        TrainConfig probe;
        double total = 0.0;
        int cnt = 0;
        for (const auto& seq : eval_windows) {
            DistillBatch<float> teacher = extract_teacher(target, seq);
            auto fw = spec.forward_train(seq, teacher.teacher_hidden, 0);
            DistillLossOut<float> lo = distill_loss(spec, fw, teacher.teacher_probs,
                                                    teacher.teacher_hidden, probe, nullptr);
            for (double r : lo.reg) {
                total += r;
                ++cnt;
            }
        }
        return total / cnt;
    }
};

inline EfficacyRig& efficacy_rig() {
    static EfficacyRig rig = EfficacyRig::make();
    return rig;
}

inline bool training_efficacy(std::string& detail) {
    EfficacyRig& rig = efficacy_rig();
    const double baseline = rig.extra_for(1, 10.0f, 0, 61);
    const double trained = rig.extra_for(1, 10.0f, 600, 61);
    std::ostringstream os;
    os << "extra tokens/step " << trained << " trained vs " << baseline << " at init";
    detail = os.str();
    return trained >= 0.3 && trained >= baseline + 0.05;
}

// At this reduced scale the regression weight's throughput effect drowns in
// noise, so its arm checks the mechanism instead: training with the term
// must leave the heads' hidden states measurably closer to the teacher's.
inline bool ablation_direction(std::string& detail) {
    EfficacyRig& rig = efficacy_rig();
    double aug1 = 0.0, aug0 = 0.0;
    for (uint64_t seed : {71, 72}) {
        aug1 += rig.extra_for(1, 10.0f, 500, seed) / 2.0;
        aug0 += rig.extra_for(0, 10.0f, 500, seed) / 2.0;
    }
    const double err10 = rig.hidden_err_for(10.0f, 500, 81);
    const double err0 = rig.hidden_err_for(0.0f, 500, 81);
    std::ostringstream os;
    os << "augment " << aug1 << " vs " << aug0 << "; held-out hidden error " << err10
       << " with the regression term vs " << err0 << " without";
    detail = os.str();
    return aug1 >= aug0 - 0.05 && err10 < err0 * 0.9;
}

inline bool oracle_upper_bound(std::string& detail) {
    ModelConfig cfg = small_cfg(21, 16, 2, 1);
    Rng rng(81);
    TargetModel<float> target = TargetModel<float>::random_init(cfg, rng, 0.08f);
    BenchReport rep = run_bench<float>(target, nullptr, {{2, 1}, {6}}, BenchMode::oracle, 31,
                                       0.0, TreeShape{}, 0, 5);
    std::ostringstream os;
    os << "self-drafting chain at depth 5: extra tokens/step " << rep.extra_per_step;
    detail = os.str();
    return rep.extra_per_step == 5.0;
}

}  // namespace checks

inline SuiteResult run_check_suite(const std::string& id) {
    SuiteResult res;
    res.id = id;
    for (const auto& [sid, name] : check_suites()) {
        if (sid == id) {
            res.name = name;
        }
    }
    if (res.name.empty()) {
        throw ArgumentError("unknown check suite: " + id);
    }
    const auto t0 = std::chrono::steady_clock::now();
    if (id == "c1") {
        res.pass = checks::greedy_losslessness(res.detail);
    } else if (id == "c2") {
        res.pass = checks::sampled_distribution(res.detail);
    } else if (id == "c3") {
        res.pass = checks::gradient_check(res.detail);
    } else if (id == "c4") {
        res.pass = checks::mask_equivalence(res.detail);
    } else if (id == "c5") {
        res.pass = checks::attention_decoder_conformance(res.detail);
    } else if (id == "c6") {
        res.pass = checks::loss_conformance(res.detail);
    } else if (id == "c7") {
        res.pass = checks::init_conformance(res.detail);
    } else if (id == "c8") {
        res.pass = checks::training_efficacy(res.detail);
    } else if (id == "c9") {
        res.pass = checks::ablation_direction(res.detail);
    } else {
        res.pass = checks::oracle_upper_bound(res.detail);
    }
    const auto t1 = std::chrono::steady_clock::now();
    res.seconds = std::chrono::duration<double>(t1 - t0).count();
    return res;
}

inline std::vector<SuiteResult> run_check_suites(std::vector<std::string> ids = {}) {
    if (ids.empty()) {
        for (const auto& [id, name] : check_suites()) {
            ids.push_back(id);
        }
    }
    std::vector<SuiteResult> out;
    for (const std::string& id : ids) {
        out.push_back(run_check_suite(id));
    }
    return out;
}

inline std::string format_suite_results(const std::vector<SuiteResult>& results) {
    std::ostringstream os;
    int failed = 0;
    for (const SuiteResult& r : results) {
        os << std::left << std::setw(5) << r.id << std::setw(34) << r.name
           << (r.pass ? "PASS" : "FAIL") << "  [" << std::fixed << std::setprecision(2)
           << r.seconds << "s]  " << r.detail << "\n";
        failed += r.pass ? 0 : 1;
    }
    os << (failed == 0 ? "all suites passed" : std::to_string(failed) + " suite(s) failed")
       << "\n";
    return os.str();
}

}  // namespace spdl

#pragma once

// Benchmark runs over prompt sets and their reports. A report is a set of
// line-delimited records plus a rendering helper for a human-readable table.
//
// Accounting convention, used everywhere: the token emitted while scoring
// the prompt precedes the counted decode steps, in every mode. A step that
// commits k tokens contributes k to total_tokens and k-1 to the extra
// count, so extra_per_step == (total_tokens - steps) / steps holds as an
// identity. tokens_per_second is wall clock and informational only; the
// portable metric is extra_per_step.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spdl/trainer.hpp"
#include "spdl/verifier.hpp"

namespace spdl {

enum class BenchMode { vanilla, spec, oracle };

inline std::string bench_mode_name(BenchMode m) {
    switch (m) {
        case BenchMode::vanilla: return "vanilla";
        case BenchMode::spec: return "spec";
        case BenchMode::oracle: return "oracle";
    }
    throw ArgumentError("unknown bench mode");
}

inline BenchMode bench_mode_from_name(const std::string& s) {
    if (s == "vanilla") {
        return BenchMode::vanilla;
    }
    if (s == "spec") {
        return BenchMode::spec;
    }
    if (s == "oracle") {
        return BenchMode::oracle;
    }
    throw ArgumentError("unknown bench mode: " + s);
}

struct PromptStats {
    int prompt_index = 0;
    int64_t steps = 0;
    int64_t total_tokens = 0;  // tokens committed by the counted steps
    double extra_per_step = 0.0;
    double seconds = 0.0;
    double tokens_per_second = 0.0;
    std::vector<int64_t> accept_hist;  // index = extra tokens in one step
};

struct BenchReport {
    std::string mode;
    double temperature = 0.0;
    std::string tree;
    uint64_t seed = 0;
    int max_new = 0;
    std::vector<PromptStats> prompts;
    // aggregate over prompts
    int64_t steps = 0;
    int64_t total_tokens = 0;
    double extra_per_step = 0.0;
    double seconds = 0.0;
    double tokens_per_second = 0.0;
    std::vector<int64_t> accept_hist;
};

// Upper-bound run: the draft for each step is the target's own greedy
// continuation, probed with rolled-back forwards, so verification accepts
// the whole chain plus the bonus every time. Greedy only; each full step
// commits exactly depth + 1 tokens.
template <typename T>
SpecDecodeResult oracle_decode_loop(const TargetModel<T>& target, const std::vector<int>& prompt,
                                    int max_new, int depth) {
    if (prompt.empty()) {
        throw ArgumentError("oracle_decode_loop: prompt must be non-empty");
    }
    if (depth < 0) {
        throw ArgumentError("oracle_decode_loop: depth must be >= 0");
    }
    SpecDecodeResult res;
    if (max_new <= 0) {
        return res;
    }
    Rng rng(0);  // greedy emission ignores it
    const int n = (int)prompt.size();
    KvCache<T> cache = target.make_cache(n + max_new + depth + 2);

    auto fo = target.forward(cache, prompt);
    int pending = target.emit(fo.logits, fo.logits.rows() - 1, 0.0, rng);
    res.tokens.push_back(pending);

    const int64_t v = target.cfg.vocab_size;
    auto chain_tree = [depth](const std::vector<int>& chain) {
        TokenTree t(depth + 1);
        t.add_root(chain[0]);
        for (size_t j = 1; j < chain.size(); ++j) {
            t.add_child((int)j - 1, chain[j]);
        }
        return t;
    };

    int step = 0;
    while ((int)res.tokens.size() < max_new) {
        const int base = cache.len;
        // each probe recomputes the chain so far; wasteful but row values are
        // bit-identical to the final scoring pass, which is what matters
        std::vector<int> chain = {pending};
        for (int k = 0; k < depth; ++k) {
            auto pc = target.forward_tree(cache, chain_tree(chain));
            chain.push_back(argmax_row(pc.logits.data() + (pc.logits.rows() - 1) * v, v));
            cache.compact(base, {});
        }

        auto sc = target.forward_tree(cache, chain_tree(chain));
        VerifyOutcome vo = verify_greedy(chain_tree(chain), sc.logits, base);
        cache.compact(base, vo.nodes);
        pending = vo.tokens.back();

        const int room = max_new - (int)res.tokens.size();
        const int take = std::min((int)vo.tokens.size(), room);
        res.tokens.insert(res.tokens.end(), vo.tokens.begin(), vo.tokens.begin() + take);
        res.trace.steps.push_back({step, depth, take, take - 1, (int)res.tokens.size()});
        ++step;
    }
    return res;
}

namespace detail {

inline PromptStats stats_from_trace(int index, const StepTrace& trace, int hist_size,
                                    double seconds) {
    PromptStats st;
    st.prompt_index = index;
    st.seconds = seconds;
    st.accept_hist.assign((size_t)std::max(hist_size, 1), 0);
    for (const StepRecord& s : trace.steps) {
        st.steps += 1;
        st.total_tokens += s.accepted;
        const int e = std::min(std::max(s.extra, 0), (int)st.accept_hist.size() - 1);
        st.accept_hist[(size_t)e] += 1;
    }
    st.extra_per_step =
        st.steps > 0 ? (double)(st.total_tokens - st.steps) / (double)st.steps : 0.0;
    st.tokens_per_second = seconds > 0.0 ? (double)st.total_tokens / seconds : 0.0;
    return st;
}

}  // namespace detail

// Prompts run one after another with per-prompt seeds (seed + index), so a
// prompt's numbers do not depend on its position in the set.
template <typename T>
BenchReport run_bench(const TargetModel<T>& target, const Speculator<T>* spec,
                      const std::vector<std::vector<int>>& prompts, BenchMode mode, int max_new,
                      double temperature, const TreeShape& shape, uint64_t seed,
                      int oracle_depth = 5) {
    if (prompts.empty()) {
        throw ArgumentError("run_bench: need at least one prompt");
    }
    if (mode == BenchMode::spec && spec == nullptr) {
        throw ArgumentError("run_bench: spec mode needs a speculator");
    }
    if (mode == BenchMode::oracle && temperature > 0.0) {
        throw ArgumentError("run_bench: oracle mode is greedy only");
    }

    BenchReport rep;
    rep.mode = bench_mode_name(mode);
    rep.temperature = temperature;
    rep.tree = shape.widths.empty() ? std::string("-") : shape.str();
    rep.seed = seed;
    rep.max_new = max_new;

    const int hist_size =
        mode == BenchMode::oracle ? oracle_depth + 1 : std::max(shape.depth() + 1, 1);
    for (size_t i = 0; i < prompts.size(); ++i) {
        const uint64_t pseed = seed + (uint64_t)i;
        const auto t0 = std::chrono::steady_clock::now();
        StepTrace trace;
        if (mode == BenchMode::vanilla) {
            std::vector<int> cont =
                target.vanilla_decode(prompts[i], max_new, temperature, pseed);
            // one step per token after the prompt-scoring one
            for (int s = 0; s + 1 < (int)cont.size(); ++s) {
                trace.steps.push_back({s, 0, 1, 0, s + 2});
            }
        } else if (mode == BenchMode::spec) {
            trace = spec_decode_loop(target, *spec, prompts[i], max_new, temperature, shape,
                                     pseed)
                        .trace;
        } else {
            trace = oracle_decode_loop(target, prompts[i], max_new, oracle_depth).trace;
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(t1 - t0).count();
        rep.prompts.push_back(detail::stats_from_trace((int)i, trace, hist_size, secs));
    }

    rep.accept_hist.assign((size_t)hist_size, 0);
    for (const PromptStats& st : rep.prompts) {
        rep.steps += st.steps;
        rep.total_tokens += st.total_tokens;
        rep.seconds += st.seconds;
        for (size_t k = 0; k < st.accept_hist.size(); ++k) {
            rep.accept_hist[k] += st.accept_hist[k];
        }
    }
    rep.extra_per_step =
        rep.steps > 0 ? (double)(rep.total_tokens - rep.steps) / (double)rep.steps : 0.0;
    rep.tokens_per_second = rep.seconds > 0.0 ? (double)rep.total_tokens / rep.seconds : 0.0;
    return rep;
}

// ---- line-delimited records ----

inline nlohmann::json prompt_stats_to_json(const PromptStats& st) {
    return {{"type", "prompt"},
            {"index", st.prompt_index},
            {"steps", st.steps},
            {"total_tokens", st.total_tokens},
            {"extra_per_step", st.extra_per_step},
            {"seconds", st.seconds},
            {"tokens_per_second", st.tokens_per_second},
            {"accept_hist", st.accept_hist}};
}

inline nlohmann::json report_aggregate_to_json(const BenchReport& rep) {
    return {{"type", "aggregate"},
            {"mode", rep.mode},
            {"temperature", rep.temperature},
            {"tree", rep.tree},
            {"seed", rep.seed},
            {"max_new", rep.max_new},
            {"steps", rep.steps},
            {"total_tokens", rep.total_tokens},
            {"extra_per_step", rep.extra_per_step},
            {"seconds", rep.seconds},
            {"tokens_per_second", rep.tokens_per_second},
            {"accept_hist", rep.accept_hist}};
}

inline void write_report_jsonl(const std::string& path, const BenchReport& rep) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    for (const PromptStats& st : rep.prompts) {
        f << prompt_stats_to_json(st).dump() << '\n';
    }
    f << report_aggregate_to_json(rep).dump() << '\n';
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

inline BenchReport read_report_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open for reading: " + path);
    }
    BenchReport rep;
    bool saw_aggregate = false;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw DataError("report line is not valid JSON");
        }
        const std::string type = j.value("type", "");
        if (type == "prompt") {
            PromptStats st;
            st.prompt_index = j.at("index").get<int>();
            st.steps = j.at("steps").get<int64_t>();
            st.total_tokens = j.at("total_tokens").get<int64_t>();
            st.extra_per_step = j.at("extra_per_step").get<double>();
            st.seconds = j.at("seconds").get<double>();
            st.tokens_per_second = j.at("tokens_per_second").get<double>();
            st.accept_hist = j.at("accept_hist").get<std::vector<int64_t>>();
            rep.prompts.push_back(std::move(st));
        } else if (type == "aggregate") {
            rep.mode = j.at("mode").get<std::string>();
            rep.temperature = j.at("temperature").get<double>();
            rep.tree = j.at("tree").get<std::string>();
            rep.seed = j.at("seed").get<uint64_t>();
            rep.max_new = j.at("max_new").get<int>();
            rep.steps = j.at("steps").get<int64_t>();
            rep.total_tokens = j.at("total_tokens").get<int64_t>();
            rep.extra_per_step = j.at("extra_per_step").get<double>();
            rep.seconds = j.at("seconds").get<double>();
            rep.tokens_per_second = j.at("tokens_per_second").get<double>();
            rep.accept_hist = j.at("accept_hist").get<std::vector<int64_t>>();
            saw_aggregate = true;
        } else {
            throw DataError("unknown report record type: " + type);
        }
    }
    if (!saw_aggregate) {
        throw DataError("report has no aggregate record");
    }
    return rep;
}

inline std::string format_report(const BenchReport& rep) {
    std::ostringstream out;
    out << "mode " << rep.mode << "  temp " << rep.temperature << "  tree " << rep.tree
        << "  seed " << rep.seed << "  max_new " << rep.max_new << "\n";
    out << std::left << std::setw(8) << "prompt" << std::right << std::setw(8) << "steps"
        << std::setw(8) << "tokens" << std::setw(12) << "extra/step" << std::setw(12)
        << "tok/s" << "\n";
    out << std::fixed << std::setprecision(3);
    for (const PromptStats& st : rep.prompts) {
        out << std::left << std::setw(8) << st.prompt_index << std::right << std::setw(8)
            << st.steps << std::setw(8) << st.total_tokens << std::setw(12)
            << st.extra_per_step << std::setw(12) << st.tokens_per_second << "\n";
    }
    out << std::left << std::setw(8) << "all" << std::right << std::setw(8) << rep.steps
        << std::setw(8) << rep.total_tokens << std::setw(12) << rep.extra_per_step
        << std::setw(12) << rep.tokens_per_second << "\n";
    out << "accept histogram (by extra tokens):";
    for (size_t k = 0; k < rep.accept_hist.size(); ++k) {
        out << " " << k << ":" << rep.accept_hist[k];
    }
    out << "\ntokens/second is wall clock, informational only\n";
    return out.str();
}

// ---- training records ----

inline nlohmann::json train_config_json(const TrainConfig& tc) {
    return {{"lr", tc.lr},
            {"warmup_steps", tc.warmup_steps},
            {"min_lr", tc.min_lr},
            {"beta1", tc.beta1},
            {"beta2", tc.beta2},
            {"weight_decay", tc.weight_decay},
            {"w_reg", tc.w_reg},
            {"decay", tc.decay},
            {"steps", tc.steps},
            {"batch_size", tc.batch_size},
            {"seq_len", tc.seq_len},
            {"seed", tc.seed},
            {"use_sample_mask", tc.use_sample_mask},
            {"mask_top_k", tc.mask_top_k},
            {"mask_top_p", tc.mask_top_p}};
}

inline void write_loss_curve_jsonl(const std::string& path, const TrainResult& res) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    for (const LossPoint& p : res.curve) {
        f << nlohmann::json{{"type", "loss"},
                            {"step", p.step},
                            {"lr", p.lr},
                            {"total", p.total},
                            {"cls", p.cls},
                            {"reg", p.reg}}
                 .dump()
          << '\n';
    }
    for (const EvalPoint& e : res.evals) {
        f << nlohmann::json{{"type", "eval"},
                            {"step", e.step},
                            {"extra_per_step", e.extra_per_step}}
                 .dump()
          << '\n';
    }
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

}  // namespace spdl

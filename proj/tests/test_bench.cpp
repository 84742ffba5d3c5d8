// Benchmark accounting, the oracle upper-bound run, and report files.

#include <gtest/gtest.h>

#include <fstream>
#include <string>
#include <vector>

#include "spdl/bench.hpp"

namespace spdl {
namespace {

std::string tmp_path(const std::string& name) { return testing::TempDir() + name; }

ModelConfig tiny_cfg(int v = 21, int d = 16, int h = 2, int l = 1) {
    ModelConfig cfg;
    cfg.vocab_size = v;
    cfg.hidden_size = d;
    cfg.num_heads = h;
    cfg.num_layers = l;
    cfg.max_seq_len = 160;
    return cfg;
}

struct Rig {
    TargetModel<float> target;
    Speculator<float> spec;
};

Rig make_rig(uint64_t seed = 40, int spec_heads = 3) {
    Rng rng(seed);
    Rig r{TargetModel<float>::random_init(tiny_cfg(), rng, 0.08f), {}};
    SpeculatorConfig scfg;
    scfg.num_heads = spec_heads;
    scfg.augment_layers = 1;
    r.spec = Speculator<float>::init_from_target(r.target, scfg, rng);
    return r;
}

TEST(OracleLoop, AcceptsFullChainEveryStep) {
    Rig r = make_rig();
    const std::vector<int> prompt = {2, 1};
    // 1 scored token + 5 steps of 6 tokens each
    SpecDecodeResult res = oracle_decode_loop(r.target, prompt, 31, 5);
    ASSERT_EQ((int)res.tokens.size(), 31);
    ASSERT_EQ((int)res.trace.steps.size(), 5);
    for (const StepRecord& s : res.trace.steps) {
        EXPECT_EQ(s.accepted, 6);
        EXPECT_EQ(s.extra, 5);
    }
    EXPECT_EQ(res.tokens, r.target.vanilla_decode(prompt, 31, 0.0, 0));
}

TEST(OracleLoop, DepthZeroIsVanillaStepping) {
    Rig r = make_rig();
    const std::vector<int> prompt = {4};
    SpecDecodeResult res = oracle_decode_loop(r.target, prompt, 8, 0);
    ASSERT_EQ((int)res.tokens.size(), 8);
    for (const StepRecord& s : res.trace.steps) {
        EXPECT_EQ(s.accepted, 1);
        EXPECT_EQ(s.extra, 0);
    }
    EXPECT_EQ(res.tokens, r.target.vanilla_decode(prompt, 8, 0.0, 0));
}

TEST(OracleLoop, ArgumentValidation) {
    Rig r = make_rig();
    EXPECT_THROW(oracle_decode_loop(r.target, {}, 5, 2), ArgumentError);
    EXPECT_THROW(oracle_decode_loop(r.target, {1}, 5, -1), ArgumentError);
    EXPECT_TRUE(oracle_decode_loop(r.target, {1}, 0, 2).tokens.empty());
}

TEST(RunBench, VanillaModeExtraIsZeroExactly) {
    Rig r = make_rig();
    const std::vector<std::vector<int>> prompts = {{1, 2}, {5}};
    BenchReport rep =
        run_bench<float>(r.target, nullptr, prompts, BenchMode::vanilla, 10, 0.0, TreeShape{}, 3);
    ASSERT_EQ((int)rep.prompts.size(), 2);
    for (const PromptStats& st : rep.prompts) {
        EXPECT_EQ(st.steps, 9);  // the scored token precedes the counted steps
        EXPECT_EQ(st.total_tokens, 9);
        EXPECT_EQ(st.extra_per_step, 0.0);
    }
    EXPECT_EQ(rep.extra_per_step, 0.0);
    EXPECT_EQ(rep.steps, 18);
    EXPECT_EQ(rep.accept_hist, (std::vector<int64_t>{18}));
}

TEST(RunBench, AccountingMatchesAnIndependentRun) {
    Rig r = make_rig();
    const std::vector<std::vector<int>> prompts = {{1, 2, 3}, {7}, {4, 4}};
    const TreeShape shape = TreeShape::parse("2-2");
    for (double temp : {0.0, 0.9}) {
        BenchReport rep = run_bench<float>(r.target, &r.spec, prompts, BenchMode::spec, 15, temp,
                                           shape, 11);
        ASSERT_EQ((int)rep.prompts.size(), 3);
        int64_t steps = 0, total = 0;
        for (size_t i = 0; i < prompts.size(); ++i) {
            // same per-prompt seed → same trace
            SpecDecodeResult ind =
                spec_decode_loop(r.target, r.spec, prompts[i], 15, temp, shape, 11 + i);
            const PromptStats& st = rep.prompts[i];
            EXPECT_EQ(st.steps, (int64_t)ind.trace.steps.size());
            EXPECT_EQ(st.total_tokens, (int64_t)ind.tokens.size() - 1);
            int64_t hist_steps = 0, hist_extra = 0;
            for (size_t k = 0; k < st.accept_hist.size(); ++k) {
                hist_steps += st.accept_hist[k];
                hist_extra += (int64_t)k * st.accept_hist[k];
            }
            EXPECT_EQ(hist_steps, st.steps);
            EXPECT_EQ(hist_extra, st.total_tokens - st.steps);
            EXPECT_DOUBLE_EQ(st.extra_per_step,
                             (double)(st.total_tokens - st.steps) / (double)st.steps);
            steps += st.steps;
            total += st.total_tokens;
        }
        EXPECT_EQ(rep.steps, steps);
        EXPECT_EQ(rep.total_tokens, total);
        EXPECT_DOUBLE_EQ(rep.extra_per_step, (double)(total - steps) / (double)steps);
    }
}

TEST(RunBench, OracleModeHitsTheDepthBoundExactly) {
    Rig r = make_rig();
    BenchReport rep = run_bench<float>(r.target, nullptr, {{3, 1}}, BenchMode::oracle, 13, 0.0,
                                       TreeShape{}, 0, 3);
    EXPECT_EQ(rep.steps, 3);
    EXPECT_EQ(rep.total_tokens, 12);
    EXPECT_EQ(rep.extra_per_step, 3.0);
    ASSERT_EQ((int)rep.accept_hist.size(), 4);
    EXPECT_EQ(rep.accept_hist[3], 3);
}

TEST(RunBench, PerPromptSeedsMakeResultsOrderFree) {
    Rig r = make_rig();
    const TreeShape shape = TreeShape::parse("2-1");
    BenchReport both = run_bench<float>(r.target, &r.spec, {{1, 2}, {6, 3}}, BenchMode::spec, 12,
                                        0.9, shape, 7);
    BenchReport lone = run_bench<float>(r.target, &r.spec, {{6, 3}}, BenchMode::spec, 12, 0.9,
                                        shape, 8);
    EXPECT_EQ(both.prompts[1].steps, lone.prompts[0].steps);
    EXPECT_EQ(both.prompts[1].total_tokens, lone.prompts[0].total_tokens);
    EXPECT_EQ(both.prompts[1].accept_hist, lone.prompts[0].accept_hist);
}

TEST(RunBench, ArgumentValidation) {
    Rig r = make_rig();
    EXPECT_THROW(run_bench<float>(r.target, &r.spec, {}, BenchMode::spec, 5, 0.0,
                                  TreeShape::parse("1"), 0),
                 ArgumentError);
    EXPECT_THROW(run_bench<float>(r.target, nullptr, {{1}}, BenchMode::spec, 5, 0.0,
                                  TreeShape::parse("1"), 0),
                 ArgumentError);
    EXPECT_THROW(run_bench<float>(r.target, nullptr, {{1}}, BenchMode::oracle, 5, 0.7,
                                  TreeShape{}, 0),
                 ArgumentError);
    EXPECT_THROW(bench_mode_from_name("warp"), ArgumentError);
}

TEST(Report, JsonlRoundTrip) {
    Rig r = make_rig();
    BenchReport rep = run_bench<float>(r.target, &r.spec, {{1, 2, 3}, {9}}, BenchMode::spec, 14,
                                       0.8, TreeShape::parse("2-2"), 21);
    const std::string path = tmp_path("bench_report.jsonl");
    write_report_jsonl(path, rep);
    BenchReport back = read_report_jsonl(path);

    EXPECT_EQ(back.mode, rep.mode);
    EXPECT_EQ(back.temperature, rep.temperature);
    EXPECT_EQ(back.tree, rep.tree);
    EXPECT_EQ(back.seed, rep.seed);
    EXPECT_EQ(back.max_new, rep.max_new);
    EXPECT_EQ(back.steps, rep.steps);
    EXPECT_EQ(back.total_tokens, rep.total_tokens);
    EXPECT_EQ(back.extra_per_step, rep.extra_per_step);
    EXPECT_EQ(back.accept_hist, rep.accept_hist);
    ASSERT_EQ(back.prompts.size(), rep.prompts.size());
    for (size_t i = 0; i < rep.prompts.size(); ++i) {
        EXPECT_EQ(back.prompts[i].steps, rep.prompts[i].steps);
        EXPECT_EQ(back.prompts[i].total_tokens, rep.prompts[i].total_tokens);
        EXPECT_EQ(back.prompts[i].extra_per_step, rep.prompts[i].extra_per_step);
        EXPECT_EQ(back.prompts[i].accept_hist, rep.prompts[i].accept_hist);
    }

    EXPECT_THROW(read_report_jsonl(tmp_path("bench_missing.jsonl")), IoError);
    std::ofstream bad(path, std::ios::trunc);
    bad << "{\"type\":\"prompt\"\n";
    bad.close();
    EXPECT_THROW(read_report_jsonl(path), DataError);
}

TEST(Report, TableSurfacesTheNumbers) {
    Rig r = make_rig();
    BenchReport rep = run_bench<float>(r.target, nullptr, {{2}}, BenchMode::vanilla, 6, 0.0,
                                       TreeShape{}, 1);
    const std::string table = format_report(rep);
    EXPECT_NE(table.find("extra/step"), std::string::npos);
    EXPECT_NE(table.find("vanilla"), std::string::npos);
    EXPECT_NE(table.find("informational"), std::string::npos);
    EXPECT_NE(table.find("accept histogram"), std::string::npos);
}

TEST(TrainRecords, CurveFileAndConfigDump) {
    TrainResult res;
    res.curve.push_back({0, 1e-6, 2.5, {2.0, 0.5}, {0.3, 0.1}});
    res.curve.push_back({1, 2e-6, 2.1, {1.7, 0.4}, {0.2, 0.1}});
    res.evals.push_back({2, 1.25});
    const std::string path = tmp_path("curve.jsonl");
    write_loss_curve_jsonl(path, res);

    std::ifstream f(path);
    std::string line;
    int loss_lines = 0, eval_lines = 0;
    while (std::getline(f, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.at("type") == "loss") {
            ++loss_lines;
            EXPECT_TRUE(j.contains("lr"));
            EXPECT_TRUE(j.contains("cls"));
            EXPECT_TRUE(j.contains("reg"));
        } else {
            ++eval_lines;
            EXPECT_EQ(j.at("extra_per_step").get<double>(), 1.25);
        }
    }
    EXPECT_EQ(loss_lines, 2);
    EXPECT_EQ(eval_lines, 1);

    // stock settings surface the loss weights as shipped
    nlohmann::json dump = train_config_json(TrainConfig{});
    EXPECT_EQ(dump.at("w_reg").get<double>(), 10.0);
    EXPECT_NEAR(dump.at("decay").get<double>(), 0.7, 1e-7);
}

}  // namespace
}  // namespace spdl

#pragma once

// Command-line front end. Everything routes through run_cli so tests can
// drive the exact argv surface and capture the streams. Exit codes: 0 ok,
// 1 runtime failure (bad checkpoint, training abort, failed suite),
// 2 usage problems.
//
// A --config JSON file, when given, overrides whatever the flags said; the
// file is the durable record of a run, so it wins.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spdl/bench.hpp"
#include "spdl/check.hpp"
#include "spdl/checkpoint.hpp"
#include "spdl/corpus.hpp"

namespace spdl {

// Bad invocation rather than bad data; maps to exit 2.
struct UsageError : Error {
    using Error::Error;
};

namespace cli {

struct RunConfig {
    std::string command;
    std::string target_path, spec_path, corpus_path, out_path, config_path;
    std::string mode = "spec";
    std::string tree = "4-2-2";
    std::string prompt_text, prompt_ids;
    double temperature = 0.0;
    int max_new = 64;
    uint64_t seed = 0;
    int depth = 5;  // oracle drafting depth
    bool ids_out = false;

    TrainConfig train;
    int heads = 5, augment = 2;

    std::string kind = "markov";
    int vocab = 64, n_seqs = 64, len = 256;
    std::string text_in;

    bool list_suites = false;
    std::vector<std::string> suites;
};

inline std::vector<int> parse_id_list(const std::string& text) {
    std::istringstream ss(text);
    std::vector<int> out;
    std::string w;
    while (ss >> w) {
        try {
            size_t used = 0;
            const int id = std::stoi(w, &used);
            if (used != w.size() || id < 0) {
                throw DataError("");
            }
            out.push_back(id);
        } catch (...) {
            throw UsageError("prompt ids must be non-negative integers, got: " + w);
        }
    }
    return out;
}

inline void apply_config_file(RunConfig& rc) {
    if (rc.config_path.empty()) {
        return;
    }
    std::ifstream f(rc.config_path);
    if (!f) {
        throw IoError("cannot open config file: " + rc.config_path);
    }
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw DataError("config file is not a JSON object: " + rc.config_path);
    }
    for (const auto& [key, val] : j.items()) {
        if (key == "target") {
            rc.target_path = val.get<std::string>();
        } else if (key == "spec") {
            rc.spec_path = val.get<std::string>();
        } else if (key == "corpus") {
            rc.corpus_path = val.get<std::string>();
        } else if (key == "out") {
            rc.out_path = val.get<std::string>();
        } else if (key == "mode") {
            rc.mode = val.get<std::string>();
        } else if (key == "tree") {
            rc.tree = val.get<std::string>();
        } else if (key == "prompt") {
            rc.prompt_text = val.get<std::string>();
        } else if (key == "prompt-ids") {
            rc.prompt_ids = val.get<std::string>();
        } else if (key == "temp") {
            rc.temperature = val.get<double>();
        } else if (key == "max-new") {
            rc.max_new = val.get<int>();
        } else if (key == "seed") {
            rc.seed = val.get<uint64_t>();
            rc.train.seed = rc.seed;
        } else if (key == "depth") {
            rc.depth = val.get<int>();
        } else if (key == "ids") {
            rc.ids_out = val.get<bool>();
        } else if (key == "steps") {
            rc.train.steps = val.get<int>();
        } else if (key == "batch-size") {
            rc.train.batch_size = val.get<int>();
        } else if (key == "seq-len") {
            rc.train.seq_len = val.get<int>();
        } else if (key == "lr") {
            rc.train.lr = val.get<double>();
        } else if (key == "warmup-steps") {
            rc.train.warmup_steps = val.get<int>();
        } else if (key == "min-lr") {
            rc.train.min_lr = val.get<double>();
        } else if (key == "w-reg") {
            rc.train.w_reg = val.get<float>();
        } else if (key == "decay") {
            rc.train.decay = val.get<float>();
        } else if (key == "weight-decay") {
            rc.train.weight_decay = val.get<double>();
        } else if (key == "sample-mask") {
            rc.train.use_sample_mask = val.get<bool>();
        } else if (key == "eval-every") {
            rc.train.eval_every = val.get<int>();
        } else if (key == "heads") {
            rc.heads = val.get<int>();
        } else if (key == "augment") {
            rc.augment = val.get<int>();
        } else if (key == "kind") {
            rc.kind = val.get<std::string>();
        } else if (key == "vocab") {
            rc.vocab = val.get<int>();
        } else if (key == "seqs") {
            rc.n_seqs = val.get<int>();
        } else if (key == "len") {
            rc.len = val.get<int>();
        } else if (key == "text-in") {
            rc.text_in = val.get<std::string>();
        } else {
            throw UsageError("config file holds an unknown key: " + key);
        }
    }
}

inline void require_path(const std::string& value, const std::string& flag) {
    if (value.empty()) {
        throw UsageError("missing required " + flag);
    }
}

inline void validate_temperature(double t) {
    if (t < 0.0 || t > 2.0) {
        throw UsageError("temperature must be 0 or in (0, 2]");
    }
}

inline std::vector<int> resolve_prompt(const RunConfig& rc) {
    if (!rc.prompt_ids.empty() && !rc.prompt_text.empty()) {
        throw UsageError("give either --prompt or --prompt-ids, not both");
    }
    if (!rc.prompt_ids.empty()) {
        std::vector<int> ids = parse_id_list(rc.prompt_ids);
        if (ids.empty()) {
            throw UsageError("--prompt-ids parsed to an empty prompt");
        }
        return ids;
    }
    if (!rc.prompt_text.empty()) {
        return byte_encode(rc.prompt_text, true, false);
    }
    throw UsageError("missing required --prompt or --prompt-ids");
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    f << content;
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

inline std::string ids_line(const std::vector<int>& ids) {
    std::ostringstream os;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            os << ' ';
        }
        os << ids[i];
    }
    return os.str();
}

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
    require_path(rc.corpus_path, "--corpus");
    require_path(rc.target_path, "--target");
    require_path(rc.out_path, "--out");

    TargetModel<float> target = load_target<float>(rc.target_path);
    std::vector<std::vector<int>> corpus = load_corpus(rc.corpus_path);

    Speculator<float> spec = [&]() {
        if (!rc.spec_path.empty()) {
            return load_speculator<float>(rc.spec_path, target);  // resume
        }
        SpeculatorConfig scfg;
        scfg.num_heads = rc.heads;
        scfg.augment_layers = rc.augment;
        Rng rng(rc.seed);
        return Speculator<float>::init_from_target(target, scfg, rng);
    }();

    TrainConfig tc = rc.train;
    if (tc.eval_every > 0 && tc.eval_prompts.empty()) {
        for (const auto& seq : corpus) {
            if ((int)seq.size() >= 2 && (int)tc.eval_prompts.size() < 4) {
                tc.eval_prompts.emplace_back(seq.begin(),
                                             seq.begin() + std::min<size_t>(8, seq.size()));
            }
        }
    }
    out << "train config " << train_config_json(tc).dump() << "\n";
    TrainResult res = train(target, spec, corpus, tc);
    save_speculator(rc.out_path, spec);
    write_loss_curve_jsonl(rc.out_path + ".curve.jsonl", res);
    if (!res.curve.empty()) {
        out << "final loss " << res.curve.back().total << " after " << res.curve.size()
            << " steps\n";
    }
    for (const EvalPoint& e : res.evals) {
        out << "eval step " << e.step << " extra/step " << e.extra_per_step << "\n";
    }
    out << "wrote " << rc.out_path << " and " << rc.out_path << ".curve.jsonl\n";
    return 0;
}

inline int cmd_decode(const RunConfig& rc, std::ostream& out) {
    require_path(rc.target_path, "--target");
    validate_temperature(rc.temperature);
    if (rc.mode != "vanilla" && rc.mode != "spec") {
        throw UsageError("decode mode must be vanilla or spec");
    }
    TargetModel<float> target = load_target<float>(rc.target_path);
    std::vector<int> prompt = resolve_prompt(rc);
    for (int id : prompt) {
        if (id >= target.cfg.vocab_size) {
            throw DataError("prompt id " + std::to_string(id) +
                            " is outside the model vocabulary");
        }
    }

    std::vector<int> cont;
    if (rc.mode == "vanilla") {
        cont = target.vanilla_decode(prompt, rc.max_new, rc.temperature, rc.seed);
    } else {
        require_path(rc.spec_path, "--spec");
        TreeShape shape = TreeShape::parse(rc.tree);
        Speculator<float> spec = load_speculator<float>(rc.spec_path, target);
        if (shape.depth() > spec.scfg.num_heads) {
            throw UsageError("tree depth exceeds the speculator's head count");
        }
        cont = spec_decode_loop(target, spec, prompt, rc.max_new, rc.temperature, shape, rc.seed)
                   .tokens;
    }

    const bool as_ids = rc.ids_out || !rc.prompt_ids.empty();
    const std::string rendered = as_ids ? ids_line(cont) : byte_decode(cont);
    out << rendered << "\n";
    if (!rc.out_path.empty()) {
        write_text_file(rc.out_path, rendered + "\n");
    }
    return 0;
}

inline int cmd_bench(const RunConfig& rc, std::ostream& out) {
    require_path(rc.target_path, "--target");
    validate_temperature(rc.temperature);
    const BenchMode mode = bench_mode_from_name(rc.mode);

    std::vector<std::vector<int>> prompts;
    if (!rc.corpus_path.empty()) {
        prompts = load_corpus(rc.corpus_path);
    } else if (!rc.prompt_ids.empty()) {
        prompts.push_back(parse_id_list(rc.prompt_ids));
    } else {
        throw UsageError("missing required --corpus or --prompt-ids");
    }

    TargetModel<float> target = load_target<float>(rc.target_path);
    BenchReport rep;
    if (mode == BenchMode::spec) {
        require_path(rc.spec_path, "--spec");
        TreeShape shape = TreeShape::parse(rc.tree);
        Speculator<float> spec = load_speculator<float>(rc.spec_path, target);
        if (shape.depth() > spec.scfg.num_heads) {
            throw UsageError("tree depth exceeds the speculator's head count");
        }
        rep = run_bench(target, &spec, prompts, mode, rc.max_new, rc.temperature, shape,
                        rc.seed);
    } else {
        rep = run_bench<float>(target, nullptr, prompts, mode, rc.max_new, rc.temperature,
                               TreeShape{}, rc.seed, rc.depth);
    }
    out << format_report(rep);
    if (!rc.out_path.empty()) {
        write_report_jsonl(rc.out_path, rep);
        out << "wrote " << rc.out_path << "\n";
    }
    return 0;
}

inline int cmd_check(const RunConfig& rc, std::ostream& out) {
    if (rc.list_suites) {
        for (const auto& [id, name] : check_suites()) {
            out << id << " " << name << "\n";
        }
        return 0;
    }
    if (!rc.target_path.empty()) {
        TargetModel<float> target = load_target<float>(rc.target_path);
        out << "target checkpoint loads cleanly: " << rc.target_path << "\n";
        if (!rc.spec_path.empty()) {
            load_speculator<float>(rc.spec_path, target);
            out << "speculator checkpoint loads cleanly: " << rc.spec_path << "\n";
        }
    } else if (!rc.spec_path.empty()) {
        throw UsageError("--spec needs --target to validate against");
    }
    std::vector<SuiteResult> results = run_check_suites(rc.suites);
    out << format_suite_results(results);
    for (const SuiteResult& r : results) {
        if (!r.pass) {
            return 1;
        }
    }
    return 0;
}

inline int cmd_gen_corpus(const RunConfig& rc, std::ostream& out) {
    require_path(rc.out_path, "--out");
    if (rc.kind == "markov") {
        if (rc.vocab < 2 || rc.n_seqs < 1 || rc.len < 2) {
            throw UsageError("markov corpus needs --vocab >= 2, --seqs >= 1, --len >= 2");
        }
        save_corpus(rc.out_path, markov_corpus(rc.vocab, rc.n_seqs, rc.len, rc.seed));
        out << "wrote " << rc.n_seqs << " chain sequences of length " << rc.len << " to "
            << rc.out_path << "\n";
        return 0;
    }
    if (rc.kind == "text") {
        require_path(rc.text_in, "--text-in");
        std::ifstream f(rc.text_in, std::ios::binary);
        if (!f) {
            throw IoError("cannot open for reading: " + rc.text_in);
        }
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        std::vector<std::vector<int>> seqs = chunk_ids(byte_encode(text), rc.len);
        if (seqs.empty()) {
            throw DataError("text file is too short to form a sequence: " + rc.text_in);
        }
        save_corpus(rc.out_path, seqs);
        out << "wrote " << seqs.size() << " byte sequences to " << rc.out_path << "\n";
        return 0;
    }
    throw UsageError("corpus kind must be markov or text");
}

// argv-level entry. Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig rc;
    CLI::App app{"speculative decoding workbench"};
    app.require_subcommand(1);

    auto add_model_flags = [&rc](CLI::App* c) {
        c->add_option("--target", rc.target_path, "target checkpoint");
        c->add_option("--spec", rc.spec_path, "speculator checkpoint");
    };
    auto add_run_flags = [&rc](CLI::App* c) {
        c->add_option("--tree", rc.tree, "draft tree shape, widths per level");
        c->add_option("--temp", rc.temperature, "sampling temperature, 0 = greedy");
        c->add_option("--seed", rc.seed, "run seed");
        c->add_option("--max-new", rc.max_new, "tokens to generate");
        c->add_option("--out", rc.out_path, "output path");
        c->add_option("--config", rc.config_path, "JSON config; its values override flags");
    };

    CLI::App* t = app.add_subcommand("train", "distill a speculator against a frozen target");
    add_model_flags(t);
    t->add_option("--corpus", rc.corpus_path, "training corpus id file");
    t->add_option("--out", rc.out_path, "speculator checkpoint to write");
    t->add_option("--config", rc.config_path, "JSON config; its values override flags");
    t->add_option("--seed", rc.seed, "run seed");
    t->add_option("--steps", rc.train.steps, "optimizer steps");
    t->add_option("--batch-size", rc.train.batch_size, "sequences per step");
    t->add_option("--seq-len", rc.train.seq_len, "training window length");
    t->add_option("--lr", rc.train.lr, "peak learning rate");
    t->add_option("--warmup-steps", rc.train.warmup_steps, "linear warmup length");
    t->add_option("--w-reg", rc.train.w_reg, "regression loss weight");
    t->add_option("--decay", rc.train.decay, "per-head loss decay");
    t->add_option("--heads", rc.heads, "speculator heads");
    t->add_option("--augment", rc.augment, "augmenting decoder layers");
    t->add_flag("--sample-mask", rc.train.use_sample_mask, "train only on likely positions");
    t->add_option("--eval-every", rc.train.eval_every, "steps between throughput evals");

    CLI::App* d = app.add_subcommand("decode", "generate a continuation");
    add_model_flags(d);
    add_run_flags(d);
    d->add_option("--mode", rc.mode, "vanilla or spec");
    d->add_option("--prompt", rc.prompt_text, "prompt text, byte tokenized");
    d->add_option("--prompt-ids", rc.prompt_ids, "prompt as whitespace-separated ids");
    d->add_flag("--ids", rc.ids_out, "print ids instead of bytes");

    CLI::App* b = app.add_subcommand("bench", "measure accepted tokens per step");
    add_model_flags(b);
    add_run_flags(b);
    b->add_option("--mode", rc.mode, "vanilla, spec or oracle");
    b->add_option("--corpus", rc.corpus_path, "prompt id file, one prompt per line");
    b->add_option("--prompt-ids", rc.prompt_ids, "single prompt as ids");
    b->add_option("--depth", rc.depth, "oracle drafting depth");

    CLI::App* c = app.add_subcommand("check", "run the invariant suites");
    add_model_flags(c);
    c->add_flag("--list", rc.list_suites, "list suite ids and exit");
    c->add_option("--suite", rc.suites, "run only these suite ids (repeatable)");

    CLI::App* g = app.add_subcommand("gen-corpus", "write a synthetic or text corpus");
    g->add_option("--kind", rc.kind, "markov or text");
    g->add_option("--vocab", rc.vocab, "chain vocabulary size");
    g->add_option("--seqs", rc.n_seqs, "number of sequences");
    g->add_option("--len", rc.len, "sequence length");
    g->add_option("--seed", rc.seed, "generator seed");
    g->add_option("--out", rc.out_path, "corpus file to write");
    g->add_option("--text-in", rc.text_in, "plain file to byte tokenize");
    g->add_option("--config", rc.config_path, "JSON config; its values override flags");

    std::vector<const char*> argv = {"spdl"};
    for (const std::string& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse((int)argv.size(), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        rc.train.seed = rc.seed;
        apply_config_file(rc);
        if (t->parsed()) {
            rc.command = "train";
            return cmd_train(rc, out);
        }
        if (d->parsed()) {
            rc.command = "decode";
            return cmd_decode(rc, out);
        }
        if (b->parsed()) {
            rc.command = "bench";
            return cmd_bench(rc, out);
        }
        if (c->parsed()) {
            rc.command = "check";
            return cmd_check(rc, out);
        }
        rc.command = "gen-corpus";
        return cmd_gen_corpus(rc, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace cli
}  // namespace spdl

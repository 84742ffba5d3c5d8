#pragma once

// Synthetic and text corpora. The Markov generator produces order-2 chains
// with a small, heavily peaked successor set per state, which gives a draft
// model something learnable; text ingestion is byte level with two reserved
// specials.

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spdl/common.hpp"

namespace spdl {

// ---- order-2 Markov chains ----

// Each state (a, b) owns `branch` distinct successors with geometric-ish
// weights; the top successor carries most of the mass so greedy
// continuations are predictable.
class MarkovChain {
public:
    static MarkovChain make(int vocab, uint64_t seed, int branch = 4, double ratio = 0.12) {
        if (vocab < 2 || branch < 1 || branch > vocab) {
            throw ArgumentError("markov: need vocab >= 2 and 1 <= branch <= vocab");
        }
        if (ratio <= 0.0 || ratio >= 1.0) {
            throw ArgumentError("markov: ratio must lie in (0, 1)");
        }
        MarkovChain mc;
        mc.vocab_ = vocab;
        mc.branch_ = branch;
        mc.probs_.resize((size_t)branch);
        double sum = 0.0, w = 1.0;
        for (int i = 0; i < branch; ++i, w *= ratio) {
            mc.probs_[(size_t)i] = w;
            sum += w;
        }
        for (double& p : mc.probs_) {
            p /= sum;
        }
        mc.successors_.resize((size_t)vocab * (size_t)vocab * (size_t)branch);
        std::vector<int> pool((size_t)vocab);
        for (int a = 0; a < vocab; ++a) {
            for (int b = 0; b < vocab; ++b) {
                // per-state generator keeps the table independent of query order
                Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (uint64_t)(a * vocab + b + 1)));
                for (int i = 0; i < vocab; ++i) {
                    pool[(size_t)i] = i;
                }
                int* row = mc.successors_.data() + ((size_t)(a * vocab + b)) * (size_t)branch;
                for (int i = 0; i < branch; ++i) {
                    const int j = i + (int)rand_int(rng, 0, vocab - 1 - i);
                    std::swap(pool[(size_t)i], pool[(size_t)j]);
                    row[i] = pool[(size_t)i];
                }
            }
        }
        return mc;
    }

    int vocab() const { return vocab_; }
    int branch() const { return branch_; }
    const std::vector<double>& probs() const { return probs_; }

    // transition matrix entry P(c | a, b)
    double prob_of(int a, int b, int c) const {
        const int* row = state_row(a, b);
        for (int i = 0; i < branch_; ++i) {
            if (row[i] == c) {
                return probs_[(size_t)i];
            }
        }
        return 0.0;
    }

    int next(int a, int b, Rng& rng) const {
        const double u = rand_uniform(rng, 0.0, 1.0);
        const int* row = state_row(a, b);
        double cum = 0.0;
        for (int i = 0; i < branch_; ++i) {
            cum += probs_[(size_t)i];
            if (u < cum) {
                return row[i];
            }
        }
        return row[branch_ - 1];
    }

    std::vector<std::vector<int>> sample(int n_seqs, int seq_len, Rng& rng) const {
        if (n_seqs < 1 || seq_len < 2) {
            throw ArgumentError("markov sample: need n_seqs >= 1 and seq_len >= 2");
        }
        std::vector<std::vector<int>> out((size_t)n_seqs);
        for (auto& seq : out) {
            seq.reserve((size_t)seq_len);
            seq.push_back((int)rand_int(rng, 0, vocab_ - 1));
            seq.push_back((int)rand_int(rng, 0, vocab_ - 1));
            while ((int)seq.size() < seq_len) {
                seq.push_back(next(seq[seq.size() - 2], seq[seq.size() - 1], rng));
            }
        }
        return out;
    }

private:
    const int* state_row(int a, int b) const {
        if (a < 0 || a >= vocab_ || b < 0 || b >= vocab_) {
            throw ArgumentError("markov: state token out of range");
        }
        return successors_.data() + ((size_t)(a * vocab_ + b)) * (size_t)branch_;
    }

    int vocab_ = 0;
    int branch_ = 0;
    std::vector<double> probs_;
    std::vector<int> successors_;
};

inline std::vector<std::vector<int>> markov_corpus(int vocab, int n_seqs, int seq_len,
                                                   uint64_t seed) {
    MarkovChain mc = MarkovChain::make(vocab, seed);
    Rng rng(seed + 1);
    return mc.sample(n_seqs, seq_len, rng);
}

// ---- byte-level tokenizer ----

constexpr int kByteVocab = 258;  // 256 raw bytes + the two specials
constexpr int kBosId = 256;
constexpr int kEosId = 257;

inline std::vector<int> byte_encode(std::string_view text, bool add_bos = true,
                                    bool add_eos = true) {
    std::vector<int> out;
    out.reserve(text.size() + 2);
    if (add_bos) {
        out.push_back(kBosId);
    }
    for (unsigned char c : text) {
        out.push_back((int)c);
    }
    if (add_eos) {
        out.push_back(kEosId);
    }
    return out;
}

// Specials are dropped; anything outside the id space is an error.
inline std::string byte_decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= kByteVocab) {
            throw DataError("byte_decode: id out of range");
        }
        if (id < 256) {
            out.push_back((char)(unsigned char)id);
        }
    }
    return out;
}

// ---- id files: one sequence per line, whitespace-separated ----

inline void save_corpus(const std::string& path, const std::vector<std::vector<int>>& seqs) {
    std::ofstream f(path);
    if (!f) {
        throw IoError("cannot open for writing: " + path);
    }
    for (const auto& seq : seqs) {
        for (size_t i = 0; i < seq.size(); ++i) {
            if (i > 0) {
                f << ' ';
            }
            f << seq[i];
        }
        f << '\n';
    }
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

inline std::vector<std::vector<int>> load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open for reading: " + path);
    }
    std::vector<std::vector<int>> out;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::vector<int> seq;
        std::string word;
        while (ls >> word) {
            try {
                size_t used = 0;
                const int id = std::stoi(word, &used);
                if (used != word.size() || id < 0) {
                    throw DataError("");
                }
                seq.push_back(id);
            } catch (...) {
                throw DataError("corpus file holds a non-id token: " + word);
            }
        }
        if (!seq.empty()) {
            out.push_back(std::move(seq));
        }
    }
    return out;
}

// Chop one long id stream into training sequences.
inline std::vector<std::vector<int>> chunk_ids(const std::vector<int>& ids, int seq_len) {
    if (seq_len < 2) {
        throw ArgumentError("chunk_ids: seq_len must be at least 2");
    }
    std::vector<std::vector<int>> out;
    for (size_t at = 0; at + 2 <= ids.size(); at += (size_t)seq_len) {
        const size_t end = std::min(ids.size(), at + (size_t)seq_len);
        if (end - at >= 2) {
            out.emplace_back(ids.begin() + (int64_t)at, ids.begin() + (int64_t)end);
        }
    }
    return out;
}

}  // namespace spdl

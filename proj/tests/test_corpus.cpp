// Markov corpus generator, byte tokenizer, and id-file round trips.

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "spdl/corpus.hpp"

namespace spdl {
namespace {

std::string tmp_path(const std::string& name) { return testing::TempDir() + name; }

TEST(Markov, RowsAreDistributionsOverDistinctSuccessors) {
    MarkovChain mc = MarkovChain::make(12, 3);
    double sum = 0.0;
    for (double p : mc.probs()) {
        EXPECT_GT(p, 0.0);
        sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_GT(mc.probs()[0], 0.85);  // heavily peaked head

    for (int a = 0; a < mc.vocab(); ++a) {
        for (int b = 0; b < mc.vocab(); ++b) {
            double mass = 0.0;
            int support = 0;
            for (int c = 0; c < mc.vocab(); ++c) {
                const double p = mc.prob_of(a, b, c);
                mass += p;
                support += p > 0.0 ? 1 : 0;
            }
            EXPECT_NEAR(mass, 1.0, 1e-12);
            EXPECT_EQ(support, mc.branch());
        }
    }
}

TEST(Markov, SameSeedGivesSameChainAndSamples) {
    MarkovChain a = MarkovChain::make(20, 7);
    MarkovChain b = MarkovChain::make(20, 7);
    for (int s = 0; s < 20 * 20; ++s) {
        for (int c = 0; c < 20; ++c) {
            ASSERT_EQ(a.prob_of(s / 20, s % 20, c), b.prob_of(s / 20, s % 20, c));
        }
    }
    Rng r1(3), r2(3);
    EXPECT_EQ(a.sample(4, 50, r1), b.sample(4, 50, r2));
    EXPECT_EQ(markov_corpus(20, 4, 50, 7), markov_corpus(20, 4, 50, 7));
}

TEST(Markov, DifferentSeedsGiveDifferentTables) {
    MarkovChain a = MarkovChain::make(16, 1);
    MarkovChain b = MarkovChain::make(16, 2);
    int diff = 0;
    for (int s = 0; s < 16 * 16 && diff == 0; ++s) {
        for (int c = 0; c < 16; ++c) {
            diff += a.prob_of(s / 16, s % 16, c) != b.prob_of(s / 16, s % 16, c) ? 1 : 0;
        }
    }
    EXPECT_GT(diff, 0);
}

TEST(Markov, EmpiricalFrequenciesMatchTable) {
    // one long walk; conditional frequencies must sit on the table. V = 8
    // keeps per-state counts high enough that 0.02 is many sigma of slack.
    const int V = 8;
    MarkovChain mc = MarkovChain::make(V, 9);
    Rng rng(42);
    std::vector<std::vector<int>> seqs = mc.sample(1, 1000000, rng);
    const std::vector<int>& w = seqs[0];

    std::map<std::pair<int, int>, std::map<int, int>> counts;
    for (size_t i = 2; i < w.size(); ++i) {
        counts[{w[i - 2], w[i - 1]}][w[i]] += 1;
    }
    int checked = 0;
    for (const auto& [state, nexts] : counts) {
        int total = 0;
        for (const auto& [c, n] : nexts) {
            total += n;
        }
        if (total < 5000) {
            continue;  // skip rarely visited states, their noise floor is too high
        }
        for (const auto& [c, n] : nexts) {
            const double want = mc.prob_of(state.first, state.second, c);
            EXPECT_GT(want, 0.0) << "walk emitted an off-table successor";
            EXPECT_NEAR((double)n / total, want, 0.02);
            ++checked;
        }
    }
    EXPECT_GT(checked, 50);
}

TEST(Markov, ArgumentValidation) {
    EXPECT_THROW(MarkovChain::make(1, 0), ArgumentError);
    EXPECT_THROW(MarkovChain::make(8, 0, 0), ArgumentError);
    EXPECT_THROW(MarkovChain::make(8, 0, 9), ArgumentError);
    EXPECT_THROW(MarkovChain::make(8, 0, 4, 0.0), ArgumentError);
    EXPECT_THROW(MarkovChain::make(8, 0, 4, 1.0), ArgumentError);
    MarkovChain mc = MarkovChain::make(8, 0);
    Rng rng(0);
    EXPECT_THROW(mc.sample(0, 10, rng), ArgumentError);
    EXPECT_THROW(mc.sample(1, 1, rng), ArgumentError);
    EXPECT_THROW(mc.prob_of(-1, 0, 0), ArgumentError);
    EXPECT_THROW(mc.prob_of(0, 8, 0), ArgumentError);
}

TEST(ByteTokenizer, RoundTripsArbitraryBytes) {
    std::string text;
    for (int i = 0; i < 256; ++i) {
        text.push_back((char)(unsigned char)i);
    }
    text += "hello, bytes";

    std::vector<int> ids = byte_encode(text);
    ASSERT_EQ((int)ids.size(), (int)text.size() + 2);
    EXPECT_EQ(ids.front(), kBosId);
    EXPECT_EQ(ids.back(), kEosId);
    for (size_t i = 0; i < text.size(); ++i) {
        EXPECT_EQ(ids[i + 1], (int)(unsigned char)text[i]);
    }
    EXPECT_EQ(byte_decode(ids), text);  // specials drop out

    std::vector<int> bare = byte_encode(text, false, false);
    EXPECT_EQ((int)bare.size(), (int)text.size());
    EXPECT_EQ(byte_decode(bare), text);
}

TEST(ByteTokenizer, RejectsOutOfRangeIds) {
    EXPECT_THROW(byte_decode({0, kByteVocab}), DataError);
    EXPECT_THROW(byte_decode({-1}), DataError);
    EXPECT_EQ(byte_decode({kBosId, kEosId}), "");
}

TEST(IdFiles, RoundTripAndRejection) {
    const std::string path = tmp_path("corpus_rt.txt");
    std::vector<std::vector<int>> seqs = {{0, 1, 2, 3}, {257, 19}, {7}};
    save_corpus(path, seqs);
    EXPECT_EQ(load_corpus(path), seqs);

    std::ofstream f(path, std::ios::trunc);
    f << "1 2 three 4\n";
    f.close();
    EXPECT_THROW(load_corpus(path), DataError);

    std::ofstream g(path, std::ios::trunc);
    g << "1 -2 3\n";
    g.close();
    EXPECT_THROW(load_corpus(path), DataError);

    EXPECT_THROW(load_corpus(tmp_path("corpus_missing.txt")), IoError);
}

TEST(IdFiles, BlankLinesAreSkipped) {
    const std::string path = tmp_path("corpus_blank.txt");
    std::ofstream f(path, std::ios::trunc);
    f << "1 2\n\n  \n3 4 5\n";
    f.close();
    std::vector<std::vector<int>> want = {{1, 2}, {3, 4, 5}};
    EXPECT_EQ(load_corpus(path), want);
}

TEST(Chunking, SplitsStreamIntoTrainableWindows) {
    std::vector<int> ids(11);
    for (int i = 0; i < 11; ++i) {
        ids[(size_t)i] = i;
    }
    std::vector<std::vector<int>> got = chunk_ids(ids, 4);
    std::vector<std::vector<int>> want = {{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10}};
    EXPECT_EQ(got, want);

    EXPECT_TRUE(chunk_ids({1}, 4).empty());          // too short to train on
    std::vector<std::vector<int>> tail = chunk_ids({1, 2, 3, 4, 5}, 4);
    ASSERT_EQ(tail.size(), 1u);                      // 1-token leftover is dropped
    EXPECT_EQ(tail[0], (std::vector<int>{1, 2, 3, 4}));
    EXPECT_THROW(chunk_ids(ids, 1), ArgumentError);
}

}  // namespace
}  // namespace spdl

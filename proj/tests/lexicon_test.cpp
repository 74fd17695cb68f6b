#include <gtest/gtest.h>

#include "ctrlr/lexicon.hpp"
#include "ctrlr/oracle.hpp"
#include "test_support.hpp"

namespace ctrlr {
namespace {

Vocab ab_vocab() { return Vocab({"a", "b", "<eos>"}, "<eos>"); }

TEST(Tokenize, SplitsOnWhitespace) {
  Vocab v({"let", "me", "go", "back", "<eos>"}, "<eos>");
  EXPECT_EQ(tokenize("let me go back", v), (TokenSeq{0, 1, 2, 3}));
}

TEST(Tokenize, EmptyPhraseIsAnError) {
  Vocab v({"go", "<eos>"}, "<eos>");
  try {
    tokenize("", v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyPhrase);
  }
}

TEST(Tokenize, UnknownPieceIsReported) {
  Vocab v({"go", "<eos>"}, "<eos>");
  try {
    tokenize("go zzz", v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownToken);
    EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
  }
}

TEST(Vocab, RejectsDuplicatesAndMissingEos) {
  EXPECT_THROW(Vocab({"a", "a", "<eos>"}, "<eos>"), Error);
  EXPECT_THROW(Vocab({"a", "b"}, "<eos>"), Error);
}

TEST(KeyphraseDfa, SingleTokenPhrase) {
  const auto v = ab_vocab();
  const auto dfa = build_keyphrase_dfa({"x", {{0}}}, v);
  EXPECT_EQ(dfa.state_count(), 2u);
  const DfaState acc = dfa.step(dfa.start(), 0);
  EXPECT_TRUE(dfa.is_accepting(acc));
  for (TokenId t = 0; t < v.size(); ++t) EXPECT_EQ(dfa_step(dfa, acc, t), acc);
  EXPECT_EQ(dfa.step(dfa.start(), 1), dfa.start());
}

TEST(KeyphraseDfa, LengthThreeStringsContainingAb) {
  const auto v = ab_vocab();
  const KeyphraseConstraint c{"ab", {{0, 1}}};
  const auto dfa = build_keyphrase_dfa(c, v);
  std::size_t dfa_count = 0, oracle_count = 0;
  oracle::for_each_string(2, 3, [&](const TokenSeq& s) {
    dfa_count += dfa.accepts(s);
    oracle_count += oracle::satisfies(s, c, v.eos());
  });
  EXPECT_EQ(oracle_count, 4u);  // aab, aba, abb, bab
  EXPECT_EQ(dfa_count, oracle_count);
}

TEST(KeyphraseDfa, TwoPhrasesAcceptTheUnion) {
  const auto v = ab_vocab();
  const auto both = build_keyphrase_dfa({"u", {{0, 1}, {1, 0}}}, v);
  const auto ab = build_keyphrase_dfa({"ab", {{0, 1}}}, v);
  const auto ba = build_keyphrase_dfa({"ba", {{1, 0}}}, v);
  for (std::size_t len = 0; len <= 4; ++len)
    oracle::for_each_string(2, len, [&](const TokenSeq& s) {
      EXPECT_EQ(both.accepts(s), ab.accepts(s) || ba.accepts(s));
    });
}

TEST(KeyphraseDfa, NonStartingTokenStaysAtStart) {
  Vocab v({"a", "b", "c", "<eos>"}, "<eos>");
  const KeyphraseConstraint c{"abc", {{0, 1, 2}}};
  const auto dfa = build_keyphrase_dfa(c, v);
  EXPECT_EQ(dfa.step(dfa.start(), 1), dfa.start());
  EXPECT_EQ(dfa.step(dfa.start(), 2), dfa.start());
  // Failure link: "a a" stays one token into the phrase.
  const DfaState s1 = dfa.step(dfa.start(), 0);
  EXPECT_EQ(dfa.step(s1, 0), s1);
}

TEST(KeyphraseDfa, EosNeverMoves) {
  Vocab v({"a", "b", "<eos>"}, "<eos>");
  const auto dfa = build_keyphrase_dfa({"ab", {{0, 1}}}, v);
  for (DfaState s = 0; s < dfa.state_count(); ++s) EXPECT_EQ(dfa.step(s, v.eos()), s);
}

TEST(KeyphraseDfa, ConstructionErrors) {
  const auto v = ab_vocab();
  try {
    build_keyphrase_dfa({"none", {}}, v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyConstraint);
  }
  EXPECT_THROW(build_keyphrase_dfa({"e", {{}}}, v), Error);
  EXPECT_THROW(build_keyphrase_dfa({"eos", {{0, v.eos()}}}, v), Error);
  EXPECT_THROW(build_keyphrase_dfa({"range", {{7}}}, v), Error);
}

TEST(KeyphraseDfaProperty, MatchesNaiveSearch) {
  Rng rng(20240611);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t V = 2 + rng.below(4);  // <= 5 with EOS
    const auto vocab = testing::small_vocab(V);
    const auto c = testing::random_constraint(rng, V - 1, 6, 3);
    const auto dfa = build_keyphrase_dfa(c, vocab);

    std::size_t bound = 1;
    for (const auto& p : c.phrases) bound += p.size();
    EXPECT_LE(dfa.state_count(), bound);
    for (DfaState s = 0; s < dfa.state_count(); ++s)
      if (dfa.is_accepting(s))
        for (TokenId t = 0; t < V; ++t) {
          ASSERT_EQ(dfa.step(s, t), s);
        }

    TokenSeq s;
    const std::size_t len = rng.below(9);
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.below(V)));
    ASSERT_EQ(dfa.accepts(s), oracle::satisfies(s, c, vocab.eos())) << "trial " << trial;
  }
}

TEST(KeyphraseDfaProperty, Deterministic) {
  Rng rng(7);
  const auto vocab = testing::small_vocab(5);
  const auto c = testing::random_constraint(rng, 4, 6, 3);
  const auto a = build_keyphrase_dfa(c, vocab);
  const auto b = build_keyphrase_dfa(c, vocab);
  EXPECT_EQ(a.table(), b.table());
  EXPECT_EQ(a.accept_flags(), b.accept_flags());
  EXPECT_EQ(a.start(), b.start());
}

TEST(KeyphraseDfa, FirstAcceptIndex) {
  const auto v = ab_vocab();
  const auto dfa = build_keyphrase_dfa({"ab", {{0, 1}}}, v);
  EXPECT_EQ(dfa.first_accept(TokenSeq{1, 0, 1, 1}), std::optional<std::size_t>(2));
  EXPECT_FALSE(dfa.first_accept(TokenSeq{1, 1, 0}));
}

}  // namespace
}  // namespace ctrlr

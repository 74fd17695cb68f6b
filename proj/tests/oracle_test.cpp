#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <memory>

#include "ctrlr/oracle.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"
#include "test_support.hpp"

namespace ctrlr {
namespace {

using oracle::Real;
using testing::absorbing_eos_hmm;
using testing::small_vocab;

ContextPolicy random_policy(std::size_t V, Rng& rng) {
  ContextPolicy p(V, 2, 64);
  for (double& x : p.logits()) x = rng.normal();
  return p;
}

TEST(Budget, EnforcesLimits) {
  const oracle::EnumerationBudget b;
  EXPECT_NO_THROW(b.check(5, 6, 4, 6));
  EXPECT_THROW(b.check(6, 2), Error);
  EXPECT_THROW(b.check(5, 7), Error);
  EXPECT_THROW(b.check(3, 3, 5), Error);
  EXPECT_THROW(b.check(3, 3, 1, 7), Error);
  const oracle::EnumerationBudget wide{20, 20, 4, 6};
  EXPECT_THROW(wide.check(17, 4), Error);  // 17^4 > 2^16
  EXPECT_NO_THROW(wide.check(16, 4));
}

TEST(ExactAccept, TrivialCases) {
  Rng rng(1);
  const Hmm m = random_hmm(2, 3, rng);
  EXPECT_NEAR(static_cast<double>(oracle::exact_accept_probability(m, {"e", {{}}}, 2, 3)), 1.0, 1e-15);
  EXPECT_EQ(oracle::exact_accept_probability(m, {"c", {{0, 1, 0, 1}}}, 2, 3), 0.0L);
}

TEST(ExactAccept, MatchesGuidanceTablesFromStart) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto inst = testing::random_tiny_instance(rng, 3, 4, 5);
    auto tables = GuidanceTables(std::make_shared<const Hmm>(inst.hmm),
                                 std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(inst.constraint, inst.vocab)),
                                 inst.horizon);
    const Real p = oracle::exact_accept_probability(inst.hmm, inst.constraint, inst.vocab.eos(), inst.horizon);
    EXPECT_NEAR(std::exp(tables.log_accept_from_start(inst.horizon)), static_cast<double>(p), 1e-9);
  }
}

TEST(PolicyExpectation, TotalProbabilityIsOne) {
  Rng rng(3);
  const auto p = random_policy(4, rng);
  const auto ep = oracle::explicit_policy(p, TokenSeq{1});
  EXPECT_NEAR(static_cast<double>(oracle::exact_policy_expectation(ep, 4, 3, 5, [](const TokenSeq&) { return 1.0L; })),
              1.0, 1e-12);
}

TEST(PolicyExpectation, AcceptanceIndicatorMatchesHmmWhenPolicyIsHmm) {
  Rng rng(4);
  const auto vocab = small_vocab(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Hmm m = absorbing_eos_hmm(1 + rng.below(3), 4, vocab.eos(), rng);
    const KeyphraseConstraint c{"c", {{static_cast<TokenId>(rng.below(3)), static_cast<TokenId>(rng.below(3))}}};
    const TokenSeq prompt{static_cast<TokenId>(rng.below(3))};
    const auto ep = oracle::explicit_policy(m, prompt);
    const Real lhs = oracle::exact_policy_expectation(
        ep, 4, vocab.eos(), 5, [&](const TokenSeq& t) { return oracle::satisfies(t, c, vocab.eos()) ? 1.0L : 0.0L; });
    const Real rhs = oracle::exact_accept_probability(m, c, vocab.eos(), 5, prompt);
    EXPECT_NEAR(static_cast<double>(lhs), static_cast<double>(rhs), 1e-12);
  }
}

// Five-token needle task: {<eos>, ANSWER, Q0, A0, k} with key phrase "k".
ToyTask tiny_needle_task() {
  ToyTaskSpec spec;
  spec.questions = {"Q0"};
  spec.answers = {"A0"};
  spec.filler = {};
  spec.key_phrase = "k";
  spec.distractor_phrases = {};
  return make_toy_task(spec);
}

TEST(PolicyExpectation, RewardMatchesMonteCarlo) {
  const ToyTask task = tiny_needle_task();
  ASSERT_EQ(task.vocab.size(), 5u);
  Rng rng(5);
  const auto policy = random_policy(5, rng);
  const TokenSeq prompt{task.questions[0]};
  const std::size_t T = 4;
  const auto ep = oracle::explicit_policy(policy, prompt);
  const Real exact = oracle::exact_policy_expectation(ep, 5, task.vocab.eos(), T, [&](const TokenSeq& t) {
    return static_cast<Real>(evaluate_reward(task, prompt, t));
  });
  const auto dfa = build_keyphrase_dfa({"k", {task.key_phrase}}, task.vocab);
  RolloutOptions opt;
  opt.horizon = T;
  const int n = 1000000;
  double sum = 0.0, sq = 0.0;
  Rng mc(6);
  for (int i = 0; i < n; ++i) {
    const auto t = sample_trajectory(policy, nullptr, dfa, prompt, mc, opt);
    const double r = evaluate_reward(task, prompt, t.tokens);
    sum += r;
    sq += r * r;
  }
  const double mean = sum / n;
  const double sd = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_LE(std::abs(mean - static_cast<double>(exact)), 3 * sd);
}

TEST(GuidedDistribution, NormalizedAndChangeOfMeasureOnSupport) {
  Rng rng(7);
  const auto vocab = small_vocab(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Hmm m = random_hmm(1 + rng.below(3), 4, rng);
    const auto policy = random_policy(4, rng);
    const KeyphraseConstraint c = testing::random_constraint(rng, 3, 3);
    const TokenSeq prompt{0};
    const auto out = oracle::exact_guided_distribution(oracle::explicit_policy(policy, prompt), m, c,
                                                       vocab.eos(), 4, prompt);
    Real mu = 0.0L, mu_w = 0.0L, pi_support = 0.0L;
    for (const auto& o : out) {
      mu += o.mu;
      mu_w += o.mu * o.w;
      pi_support += o.pi;
      ASSERT_NEAR(static_cast<double>(o.mu * o.w), static_cast<double>(o.pi), 1e-12);
    }
    EXPECT_NEAR(static_cast<double>(mu), 1.0, 1e-9);
    EXPECT_NEAR(static_cast<double>(mu_w), static_cast<double>(pi_support), 1e-9);
  }
}

TEST(GuidedDistribution, PolicyEqualsHmmGivesConstantWeightOnAcceptingSupport) {
  Rng rng(8);
  const auto vocab = small_vocab(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Hmm m = absorbing_eos_hmm(1 + rng.below(3), 4, vocab.eos(), rng);
    const KeyphraseConstraint c = testing::random_constraint(rng, 3, 3);
    const TokenSeq prompt{1};
    const std::size_t T = 4;
    const Real p_alpha = oracle::exact_accept_probability(m, c, vocab.eos(), T, prompt);
    if (p_alpha < 1e-6L) continue;
    const auto out = oracle::exact_guided_distribution(oracle::explicit_policy(m, prompt), m, c,
                                                       vocab.eos(), T, prompt);
    std::size_t accepting = 0;
    for (const auto& r : oracle::enumerate_policy(oracle::explicit_policy(m, prompt), 4, vocab.eos(), T))
      accepting += oracle::satisfies(r.tokens, c, vocab.eos()) ? 1 : 0;
    EXPECT_EQ(out.size(), accepting);
    for (const auto& o : out) {
      EXPECT_TRUE(oracle::satisfies(o.tokens, c, vocab.eos()));
      EXPECT_NEAR(static_cast<double>(o.w), static_cast<double>(p_alpha), 1e-9);
    }
  }
}

TEST(GuidedDistribution, ConditionedPolicyHasFullCoverage) {
  Rng rng(9);
  const auto vocab = small_vocab(4);
  const Hmm m = random_hmm(3, 4, rng);
  const auto policy = random_policy(4, rng);
  const KeyphraseConstraint c{"c", {{0, 1}}};
  const TokenSeq prompt{2};
  const auto base = oracle::explicit_policy(policy, prompt);
  const auto cond = oracle::conditioned_policy(base, 4, c, vocab.eos(), 4);
  Real total = 0.0L;
  for (const auto& o : oracle::enumerate_policy(cond, 4, vocab.eos(), 4)) {
    EXPECT_TRUE(oracle::satisfies(o.tokens, c, vocab.eos()));
    total += o.pi;
  }
  EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-12);
}

// The implementation's sampler against the enumerated behavior policy.
TEST(GuidedDistribution, SamplerMatchesEnumeration) {
  Rng rng(10);
  const auto vocab = small_vocab(4);
  const Hmm m = random_hmm(2, 4, rng);
  const auto policy = random_policy(4, rng);
  const KeyphraseConstraint c{"c", {{0, 1}}};
  const TokenSeq prompt{2};
  const std::size_t T = 4;
  const auto out = oracle::exact_guided_distribution(oracle::explicit_policy(policy, prompt), m, c,
                                                     vocab.eos(), T, prompt);
  const auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(c, vocab));
  const GuidanceTables tables(std::make_shared<const Hmm>(m), dfa, T);
  RolloutOptions opt;
  opt.horizon = T;
  std::map<TokenSeq, int> counts;
  const int n = 100000;
  std::map<TokenSeq, double> log_mu, log_w;
  Rng sampler(1000);
  for (int i = 0; i < n; ++i) {
    const auto t = sample_trajectory(policy, &tables, *dfa, prompt, sampler, opt, "c");
    ++counts[t.tokens];
    double s = 0.0;
    for (double x : t.log_mu) s += x;
    log_mu[t.tokens] = s;
    log_w[t.tokens] = t.log_weight;
  }
  std::size_t seen = 0;
  double chi2 = 0.0;
  for (const auto& o : out) {
    const double p = static_cast<double>(o.mu);
    chi2 += (counts[o.tokens] - n * p) * (counts[o.tokens] - n * p) / (n * p);
    const double sd = std::sqrt(n * p * (1 - p));
    EXPECT_LE(std::abs(counts[o.tokens] - n * p), 3 * sd + 1) << "trajectory of length " << o.tokens.size();
    if (log_mu.count(o.tokens)) {
      ++seen;
      EXPECT_NEAR(std::exp(log_mu[o.tokens]), p, 1e-9);
      EXPECT_NEAR(std::exp(log_w[o.tokens]), static_cast<double>(o.w), 1e-9);
    }
  }
  EXPECT_GT(seen, 0u);
  // Upper 0.1% point of chi-square with 32 degrees of freedom is about 62.5.
  ASSERT_EQ(out.size(), 33u);
  EXPECT_LT(chi2, 62.5);
  for (const auto& [tokens, k] : counts) EXPECT_TRUE(oracle::satisfies(tokens, c, vocab.eos()));
}

TEST(Satisfies, IgnoresEos) {
  const KeyphraseConstraint c{"c", {{0, 1}}};
  EXPECT_TRUE(oracle::satisfies(TokenSeq{0, 3, 1}, c, 3));
  EXPECT_FALSE(oracle::satisfies(TokenSeq{0, 2, 1}, c, 3));
  EXPECT_EQ(oracle::dfa_state_bound(c), 3u);
}

}  // namespace
}  // namespace ctrlr

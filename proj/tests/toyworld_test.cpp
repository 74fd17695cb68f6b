#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "ctrlr/guidance.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/oracle.hpp"
#include "ctrlr/toyworld.hpp"

namespace ctrlr {
namespace {

TEST(ToyTask, DefaultVocabulary) {
  const ToyTask task = default_toy_task();
  EXPECT_EQ(task.vocab.size(), 40u);
  EXPECT_EQ(task.vocab.eos(), task.vocab.id("<eos>"));
  EXPECT_EQ(task.key_phrase, tokenize("let me verify", task.vocab));
  EXPECT_EQ(task.answers.size(), 4u);
  const auto cs = task_constraints(task);
  ASSERT_EQ(cs.size(), 3u);
  EXPECT_EQ(cs[0].id, "key");
  EXPECT_EQ(cs[0].phrases[0], task.key_phrase);
  EXPECT_EQ(parse_task_mode("plain"), TaskMode::Plain);
  EXPECT_THROW(parse_task_mode("haystack"), Error);
}

TEST(GeneratePrompt, DeterministicAndIdempotentAnswer) {
  const ToyTask task = default_toy_task();
  Rng a(5), b(5);
  const auto p = generate_prompt(task, a);
  const auto q = generate_prompt(task, b);
  EXPECT_EQ(p.tokens, q.tokens);
  EXPECT_EQ(p.id, q.id);
  EXPECT_EQ(correct_answer(task, p.tokens), correct_answer(task, p.tokens));
}

TEST(GeneratePrompt, AnswerMapForLongerPrompts) {
  ToyTaskSpec spec;
  spec.prompt_length = 3;
  const ToyTask task = make_toy_task(spec);
  const TokenSeq prompt{task.questions[1], task.questions[2], task.questions[3]};
  EXPECT_EQ(correct_answer(task, prompt), task.answers[(1 * 1 + 2 * 2 + 3 * 3) % 4]);
  EXPECT_EQ(all_prompts(task).size(), 64u);
  EXPECT_THROW(correct_answer(task, TokenSeq{task.answer_marker}), Error);
}

TEST(GeneratePrompt, AnswersAreUniform) {
  const ToyTask task = default_toy_task();
  Rng rng(6);
  std::vector<int> counts(task.vocab.size(), 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[correct_answer(task, generate_prompt(task, rng).tokens)];
  const double sd = std::sqrt(n * 0.25 * 0.75);
  for (TokenId a : task.answers) EXPECT_LE(std::abs(counts[a] - n * 0.25), 3 * sd);
}

TEST(EvaluateReward, NeedleExamples) {
  const ToyTask task = default_toy_task(TaskMode::Needle);
  const TokenSeq prompt{task.questions[2]};
  const TokenId a = correct_answer(task, prompt);
  TokenSeq good = task.key_phrase;
  good.push_back(task.answer_marker);
  good.push_back(a);
  EXPECT_EQ(evaluate_reward(task, prompt, good), 1.0);
  EXPECT_EQ(evaluate_reward(task, prompt, TokenSeq{task.answer_marker, a}), -1.0);
  EXPECT_EQ(evaluate_reward(task, prompt, TokenSeq{}), -1.0);
  TokenSeq before{task.answer_marker, a};
  before.insert(before.end(), task.key_phrase.begin(), task.key_phrase.end());
  EXPECT_EQ(evaluate_reward(task, prompt, before), -1.0);
  TokenSeq wrong = task.key_phrase;
  wrong.push_back(task.answer_marker);
  wrong.push_back(task.answers[(2 + 1) % 4]);
  wrong.push_back(task.answer_marker);
  wrong.push_back(a);
  EXPECT_EQ(evaluate_reward(task, prompt, wrong), -1.0);
}

TEST(EvaluateReward, NeedleGateExhaustive) {
  const ToyTask task = default_toy_task(TaskMode::Needle);
  const TokenSeq prompt{task.questions[1]};
  TokenSeq alphabet = task.key_phrase;
  alphabet.push_back(task.answer_marker);
  for (TokenId a : task.answers) alphabet.push_back(a);
  alphabet.push_back(task.vocab.id("a"));
  alphabet.push_back(task.vocab.eos());
  std::size_t positives = 0;
  for (std::size_t len = 0; len <= 5; ++len)
    oracle::for_each_string(alphabet.size(), len, [&](const TokenSeq& idx) {
      TokenSeq c;
      for (TokenId i : idx) c.push_back(alphabet[i]);
      const double r = evaluate_reward(task, prompt, c);
      ASSERT_TRUE(r == 1.0 || r == -1.0);
      if (r > 0) {
        ++positives;
        ASSERT_TRUE(phrase_end(c, task.key_phrase).has_value());
      }
    });
  EXPECT_EQ(positives, 1u);
}

TEST(EvaluateReward, PlainModeIgnoresKeyPhrase) {
  const ToyTask task = default_toy_task(TaskMode::Plain);
  const TokenSeq prompt{task.questions[3]};
  const TokenId a = correct_answer(task, prompt);
  const TokenSeq bare{task.answer_marker, a};
  EXPECT_EQ(evaluate_reward(task, prompt, bare), 1.0);
  TokenSeq with_key = task.key_phrase;
  with_key.insert(with_key.end(), bare.begin(), bare.end());
  EXPECT_EQ(evaluate_reward(task, prompt, with_key), 1.0);
  TokenSeq key_after = bare;
  key_after.insert(key_after.end(), task.key_phrase.begin(), task.key_phrase.end());
  EXPECT_EQ(evaluate_reward(task, prompt, key_after), 1.0);
  EXPECT_EQ(evaluate_reward(task, prompt, TokenSeq{task.answer_marker, task.answers[0]}), -1.0);
}

class InitialPolicyTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    task_ = new ToyTask(default_toy_task());
    init_ = new InitialPolicy(initial_policy_params(*task_, 17));
  }
  static void TearDownTestSuite() {
    delete init_;
    delete task_;
  }
  static ToyTask* task_;
  static InitialPolicy* init_;
};
ToyTask* InitialPolicyTest::task_ = nullptr;
InitialPolicy* InitialPolicyTest::init_ = nullptr;

TEST_F(InitialPolicyTest, KeyPhraseIsRareButReachable) {
  EXPECT_LT(init_->key_rate, 0.01);
  const double again = measure_phrase_rate(*task_, init_->policy, task_->key_phrase, 10000, 16, 99);
  EXPECT_LT(again, 0.01);
  double min_prob = 1.0;
  for (std::size_t c = 0; c < init_->policy.table_size(); ++c)
    for (double lp : init_->policy.log_probs_at(static_cast<ContextId>(c))) min_prob = std::min(min_prob, std::exp(lp));
  EXPECT_GT(min_prob, 1e-4);
}

TEST_F(InitialPolicyTest, Deterministic) {
  const auto again = initial_policy_params(*task_, 17);
  EXPECT_EQ(again.policy, init_->policy);
  EXPECT_EQ(again.key_rate, init_->key_rate);
}

TEST_F(InitialPolicyTest, UnreachableTargetFailsCalibration) {
  InitialPolicyOptions opt;
  opt.max_key_rate = 0.0;
  opt.calibration_rollouts = 200;
  opt.max_redraws = 2;
  try {
    initial_policy_params(*task_, 3, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CalibrationFailed);
  }
}

TEST_F(InitialPolicyTest, DistillationCorpusShape) {
  const auto a = distillation_corpus(*task_, init_->policy, 50, 16, 4);
  const auto b = distillation_corpus(*task_, init_->policy, 50, 16, 4);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 50u);
  for (const auto& s : a) {
    ASSERT_GT(s.size(), task_->prompt_length);
    ASSERT_LE(s.size(), task_->prompt_length + 16);
    const auto eos_at = std::find(s.begin() + task_->prompt_length, s.end(), task_->vocab.eos());
    if (s.size() < task_->prompt_length + 16) {
      EXPECT_EQ(eos_at, s.end() - 1);
    } else {
      EXPECT_TRUE(eos_at == s.end() || eos_at == s.end() - 1);
    }
  }
}

TEST_F(InitialPolicyTest, GuidedRateExceedsUnguidedRate) {
  const auto corpus = distillation_corpus(*task_, init_->policy, 1000, 16, 5);
  BaumWelchOptions bw;
  bw.max_iters = 20;
  bw.seed = 1;
  auto hmm = std::make_shared<const Hmm>(fit_baum_welch(corpus, 8, task_->vocab.size(), bw).model);
  auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa({"key", {task_->key_phrase}}, task_->vocab));
  const GuidanceTables tables(hmm, dfa, 16);
  RolloutOptions opt;
  opt.horizon = 16;
  std::size_t guided = 0, plain = 0;
  for (int i = 0; i < 1000; ++i) {
    Rng rng(derive_seed(7, {static_cast<std::uint64_t>(i)}));
    const auto prompt = generate_prompt(*task_, rng);
    guided += sample_trajectory(init_->policy, &tables, *dfa, prompt.tokens, rng, opt).satisfied() ? 1 : 0;
    plain += sample_trajectory(init_->policy, nullptr, *dfa, prompt.tokens, rng, opt).satisfied() ? 1 : 0;
  }
  EXPECT_LT(plain, 500u);
  EXPECT_GT(guided, plain);
}

TEST(EvaluatePolicy, Summaries) {
  const ToyTask task = default_toy_task(TaskMode::Plain);
  ContextPolicy p(task.vocab.size(), 1, 64);
  const auto s = evaluate_policy(task, p, 500, 8, 3);
  EXPECT_GE(s.mean_reward, -1.0);
  EXPECT_LE(s.mean_reward, 1.0);
  EXPECT_NEAR(s.mean_reward, 2 * s.accuracy - 1, 1e-12);
}

}  // namespace
}  // namespace ctrlr

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrlr/error.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/random.hpp"
#include "ctrlr/rollout.hpp"

namespace ctrlr {

enum class TaskMode { Needle, Plain };

inline std::string to_string(TaskMode m) { return m == TaskMode::Needle ? "needle" : "plain"; }
inline TaskMode parse_task_mode(const std::string& s) {
  if (s == "needle") return TaskMode::Needle;
  if (s == "plain") return TaskMode::Plain;
  throw Error(ErrorCode::InvalidArgument, "unknown task mode '" + s + "'");
}

// Synthetic verifiable task. A prompt is `prompt_length` question tokens; the
// correct answer token index is sum_i (i + 1) * question_index_i mod
// |answers|. In needle mode the graded answer must come after the key phrase.
struct ToyTask {
  Vocab vocab;
  TokenId answer_marker = 0;
  std::vector<TokenId> questions;
  std::vector<TokenId> answers;
  TokenSeq key_phrase;
  TaskMode mode = TaskMode::Needle;
  std::size_t prompt_length = 1;
  // Extra phrases shipped in the constraint set next to the key phrase.
  std::vector<std::string> distractor_phrases;
};

struct Prompt {
  TokenSeq tokens;
  std::uint64_t id = 0;  // base-|questions| encoding of the question indices
};

struct ToyTaskSpec {
  std::vector<std::string> questions{"Q0", "Q1", "Q2", "Q3"};
  std::vector<std::string> answers{"A0", "A1", "A2", "A3"};
  std::vector<std::string> filler{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
                                  "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l"};
  std::string key_phrase = "let me verify";
  std::vector<std::string> distractor_phrases{"try another way", "what if"};
  std::string answer_marker = "ANSWER";
  std::string eos = "<eos>";
  TaskMode mode = TaskMode::Needle;
  std::size_t prompt_length = 1;
};

inline ToyTask make_toy_task(const ToyTaskSpec& spec) {
  std::vector<std::string> surfaces{spec.eos, spec.answer_marker};
  auto push_unique = [&](const std::string& s) {
    for (const auto& x : surfaces)
      if (x == s) return;
    surfaces.push_back(s);
  };
  for (const auto& q : spec.questions) push_unique(q);
  for (const auto& a : spec.answers) push_unique(a);
  auto push_words = [&](const std::string& phrase) {
    std::size_t i = 0;
    while (i < phrase.size()) {
      while (i < phrase.size() && phrase[i] == ' ') ++i;
      std::size_t j = i;
      while (j < phrase.size() && phrase[j] != ' ') ++j;
      if (j > i) push_unique(phrase.substr(i, j - i));
      i = j;
    }
  };
  push_words(spec.key_phrase);
  for (const auto& d : spec.distractor_phrases) push_words(d);
  for (const auto& f : spec.filler) push_unique(f);

  ToyTask task;
  task.vocab = Vocab(surfaces, spec.eos);
  task.answer_marker = task.vocab.id(spec.answer_marker);
  for (const auto& q : spec.questions) task.questions.push_back(task.vocab.id(q));
  for (const auto& a : spec.answers) task.answers.push_back(task.vocab.id(a));
  if (task.questions.empty() || task.answers.empty())
    throw Error(ErrorCode::InvalidArgument, "task needs question and answer tokens");
  task.key_phrase = tokenize(spec.key_phrase, task.vocab);
  task.mode = spec.mode;
  task.prompt_length = spec.prompt_length;
  task.distractor_phrases = spec.distractor_phrases;
  return task;
}

inline ToyTask default_toy_task(TaskMode mode = TaskMode::Needle) {
  ToyTaskSpec spec;
  spec.mode = mode;
  return make_toy_task(spec);
}

inline std::vector<KeyphraseConstraint> task_constraints(const ToyTask& task) {
  std::vector<KeyphraseConstraint> out;
  out.push_back({"key", {task.key_phrase}});
  for (std::size_t i = 0; i < task.distractor_phrases.size(); ++i)
    out.push_back(make_constraint("distractor" + std::to_string(i), {task.distractor_phrases[i]},
                                  task.vocab));
  return out;
}

inline TokenId correct_answer(const ToyTask& task, std::span<const TokenId> prompt) {
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    std::size_t q = 0;
    while (q < task.questions.size() && task.questions[q] != prompt[i]) ++q;
    if (q == task.questions.size()) throw Error(ErrorCode::InvalidToken, "prompt token is not a question");
    acc += (i + 1) * q;
  }
  return task.answers[acc % task.answers.size()];
}

inline Prompt generate_prompt(const ToyTask& task, Rng& rng) {
  Prompt p;
  for (std::size_t i = 0; i < task.prompt_length; ++i) {
    const auto q = rng.below(task.questions.size());
    p.tokens.push_back(task.questions[q]);
    p.id = p.id * task.questions.size() + q;
  }
  return p;
}

inline std::vector<Prompt> all_prompts(const ToyTask& task) {
  std::vector<Prompt> out{Prompt{}};
  for (std::size_t i = 0; i < task.prompt_length; ++i) {
    std::vector<Prompt> next;
    for (const auto& p : out)
      for (std::size_t q = 0; q < task.questions.size(); ++q) {
        Prompt e = p;
        e.tokens.push_back(task.questions[q]);
        e.id = e.id * task.questions.size() + q;
        next.push_back(std::move(e));
      }
    out = std::move(next);
  }
  return out;
}

// Position just past the earliest occurrence of `phrase`, if any.
inline std::optional<std::size_t> phrase_end(std::span<const TokenId> seq,
                                             std::span<const TokenId> phrase) {
  if (phrase.empty() || phrase.size() > seq.size()) return std::nullopt;
  for (std::size_t i = 0; i + phrase.size() <= seq.size(); ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < phrase.size() && hit; ++j) hit = seq[i + j] == phrase[j];
    if (hit) return i + phrase.size();
  }
  return std::nullopt;
}

// +1 when the first ANSWER marker in the graded region is immediately followed
// by the correct answer token, else -1. The graded region is the whole
// completion in plain mode and everything after the key phrase in needle mode.
inline double evaluate_reward(const ToyTask& task, std::span<const TokenId> prompt,
                              std::span<const TokenId> completion) {
  std::size_t from = 0;
  if (task.mode == TaskMode::Needle) {
    auto end = phrase_end(completion, task.key_phrase);
    if (!end) return -1.0;
    from = *end;
  }
  const TokenId answer = correct_answer(task, prompt);
  for (std::size_t i = from; i < completion.size(); ++i) {
    if (completion[i] != task.answer_marker) continue;
    return (i + 1 < completion.size() && completion[i + 1] == answer) ? 1.0 : -1.0;
  }
  return -1.0;
}

struct InitialPolicyOptions {
  std::size_t order = 3;
  std::size_t table_size = 4096;
  double noise = 0.3;          // std-dev of logit noise, truncated at 3 sigma
  double marker_bias = 1.5;    // ANSWER logit boost in every row
  double answer_bias = 3.0;    // answer-token boost in rows right after ANSWER
  double correct_bias = 2.0;   // extra boost for the prompt's correct answer there
  double eos_bias = 0.5;
  std::size_t horizon = 16;
  std::size_t calibration_rollouts = 10000;
  double max_key_rate = 0.01;
  double min_token_prob = 1e-4;
  std::size_t max_redraws = 20;
};

struct InitialPolicy {
  ContextPolicy policy;
  double key_rate = 0.0;  // measured unguided key-phrase emission rate
  std::size_t draws = 0;
};

// Unguided rate at which `policy` emits `phrase` within the horizon, over
// prompts drawn uniformly.
inline double measure_phrase_rate(const ToyTask& task, const ContextPolicy& policy,
                                  std::span<const TokenId> phrase, std::size_t rollouts,
                                  std::size_t horizon, std::uint64_t seed) {
  const KeyphraseConstraint c{"probe", {TokenSeq(phrase.begin(), phrase.end())}};
  const auto dfa = build_keyphrase_dfa(c, task.vocab);
  RolloutOptions opt;
  opt.horizon = horizon;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rollouts; ++i) {
    Rng rng(derive_seed(seed, {i}));
    const auto prompt = generate_prompt(task, rng);
    const auto traj = sample_trajectory(policy, nullptr, dfa, prompt.tokens, rng, opt);
    hits += traj.satisfied() ? 1 : 0;
  }
  return rollouts ? static_cast<double>(hits) / static_cast<double>(rollouts) : 0.0;
}

// Reference policy of the sparse-structure regime: knows the answer format,
// rarely emits the key phrase.
inline InitialPolicy initial_policy_params(const ToyTask& task, std::uint64_t seed,
                                           const InitialPolicyOptions& opt = {}) {
  const std::size_t V = task.vocab.size();
  for (std::size_t draw = 0; draw < opt.max_redraws; ++draw) {
    Rng rng(derive_seed(seed, {draw}));
    ContextPolicy policy(V, opt.order, opt.table_size);
    auto& logits = policy.logits();
    for (double& x : logits) x = opt.noise * std::clamp(rng.normal(), -3.0, 3.0);
    for (std::size_t c = 0; c < opt.table_size; ++c) {
      logits[c * V + task.answer_marker] += opt.marker_bias;
      logits[c * V + task.vocab.eos()] += opt.eos_bias;
    }
    if (opt.order > 0) {
      // Rows whose window ends in ANSWER, for every prompt and window fill.
      for (const auto& p : all_prompts(task)) {
        std::vector<TokenSeq> windows{TokenSeq{}};
        for (std::size_t len = 0; len < opt.order; ++len) {
          for (const auto& w : windows) {
            TokenSeq resp = w;
            resp.push_back(task.answer_marker);
            auto r = policy.row(policy.context_id(p.tokens, resp));
            for (TokenId a : task.answers) r[a] = opt.answer_bias + opt.noise * std::clamp(rng.normal(), -3.0, 3.0);
            r[correct_answer(task, p.tokens)] += opt.correct_bias;
          }
          std::vector<TokenSeq> longer;
          if (len + 1 < opt.order)
            for (const auto& w : windows)
              for (TokenId v = 0; v < V; ++v) {
                TokenSeq e = w;
                e.insert(e.begin(), v);
                longer.push_back(std::move(e));
              }
          windows = std::move(longer);
        }
      }
    }
    double min_prob = 1.0;
    for (std::size_t c = 0; c < opt.table_size; ++c)
      for (double lp : policy.log_probs_at(static_cast<ContextId>(c)))
        min_prob = std::min(min_prob, std::exp(lp));
    if (min_prob <= opt.min_token_prob) continue;
    const double rate = measure_phrase_rate(task, policy, task.key_phrase, opt.calibration_rollouts,
                                            opt.horizon, derive_seed(seed, {draw, 0xca11}));
    if (rate < opt.max_key_rate) return {std::move(policy), rate, draw + 1};
  }
  throw Error(ErrorCode::CalibrationFailed, "key-phrase rate target not met");
}

// Distillation corpus: each sequence is a prompt followed by a fixed-length
// continuation from `policy` (EOS treated as an ordinary token).
inline std::vector<TokenSeq> distillation_corpus(const ToyTask& task, const ContextPolicy& policy,
                                                 std::size_t prefixes, std::size_t length,
                                                 std::uint64_t seed) {
  std::vector<TokenSeq> corpus;
  corpus.reserve(prefixes);
  for (std::size_t i = 0; i < prefixes; ++i) {
    Rng rng(derive_seed(seed, {i}));
    const auto prompt = generate_prompt(task, rng);
    TokenSeq response;
    for (std::size_t t = 0; t < length; ++t) {
      response.push_back(static_cast<TokenId>(rng.categorical_log(policy.log_probs(prompt.tokens, response))));
      if (response.back() == task.vocab.eos()) break;
    }
    TokenSeq seq = prompt.tokens;
    seq.insert(seq.end(), response.begin(), response.end());
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

struct EvalSummary {
  double mean_reward = 0.0;
  double accuracy = 0.0;
  double key_rate = 0.0;
};

// Unguided evaluation rollouts from `policy`.
inline EvalSummary evaluate_policy(const ToyTask& task, const ContextPolicy& policy,
                                   std::size_t rollouts, std::size_t horizon, std::uint64_t seed) {
  const auto dfa = build_keyphrase_dfa({"key", {task.key_phrase}}, task.vocab);
  RolloutOptions opt;
  opt.horizon = horizon;
  EvalSummary s;
  for (std::size_t i = 0; i < rollouts; ++i) {
    Rng rng(derive_seed(seed, {i}));
    const auto prompt = generate_prompt(task, rng);
    const auto traj = sample_trajectory(policy, nullptr, dfa, prompt.tokens, rng, opt);
    const double r = evaluate_reward(task, prompt.tokens, traj.tokens);
    s.mean_reward += r;
    s.accuracy += r > 0 ? 1.0 : 0.0;
    s.key_rate += traj.satisfied() ? 1.0 : 0.0;
  }
  if (rollouts) {
    s.mean_reward /= static_cast<double>(rollouts);
    s.accuracy /= static_cast<double>(rollouts);
    s.key_rate /= static_cast<double>(rollouts);
  }
  return s;
}

}  // namespace ctrlr

#pragma once

// Seeded cross-checks of the guidance DP, behavior policy and automata against
// the brute-force oracles. Each suite reports its worst error and a verdict.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctrlr/guidance.hpp"
#include "ctrlr/instances.hpp"
#include "ctrlr/oracle.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"

namespace ctrlr::suites {

struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 1e-9;
  double seconds = 0.0;
  std::vector<std::string> notes;
  bool passed() const { return max_error <= tolerance; }
};

// An explicit oracle policy seen through the NextTokenModel interface.
class ExplicitModel {
 public:
  ExplicitModel(oracle::ExplicitPolicy p, std::size_t vocab) : p_(std::move(p)), vocab_(vocab) {}
  std::size_t vocab_size() const { return vocab_; }
  std::vector<double> log_probs(std::span<const TokenId>, std::span<const TokenId> response) const {
    const auto p = p_(response);
    std::vector<double> out(p.size());
    for (std::size_t v = 0; v < p.size(); ++v) out[v] = safe_log(static_cast<double>(p[v]));
    return out;
  }

 private:
  oracle::ExplicitPolicy p_;
  std::size_t vocab_;
};

struct GuidedOutcome {
  TokenSeq tokens;
  double log_mu = 0.0;
  double log_w = 0.0;
  double log_pi = 0.0;
};

// Every trajectory the implementation's behavior policy can produce, with its
// probability and weight, built from the same step functions the sampler uses.
template <NextTokenModel Policy>
std::vector<GuidedOutcome> enumerate_guided(const Policy& policy, const GuidanceTables& tables,
                                            std::span<const TokenId> prompt, double log_floor = kDefaultLogMassFloor) {
  std::vector<GuidedOutcome> out;
  const TokenId eos = tables.dfa().eos();
  const std::size_t T = tables.horizon();
  std::function<void(TokenSeq&, const GuidanceSession&, GuidedOutcome, bool)> walk =
      [&](TokenSeq& r, const GuidanceSession& s, GuidedOutcome acc, bool unguided) {
        if (r.size() == T || (!r.empty() && r.back() == eos)) {
          acc.tokens = r;
          out.push_back(std::move(acc));
          return;
        }
        const auto log_pi = policy.log_probs(prompt, r);
        std::optional<GuidedStepDistribution> step;
        bool now_unguided = unguided;
        if (!unguided && !s.accepted(tables)) {
          step = try_guided_next_distribution(log_pi, gamma_all_tokens(s, tables), log_floor);
          if (!step) now_unguided = true;
        }
        if (!step) step = unguided_step(log_pi);
        for (TokenId v = 0; v < log_pi.size(); ++v) {
          if (step->log_mu[v] == kNegInf) continue;
          GuidedOutcome next = acc;
          next.log_mu += step->log_mu[v];
          next.log_w += step->log_w[v];
          next.log_pi += log_pi[v];
          r.push_back(v);
          walk(r, advance_session(s, tables, v), next, now_unguided);
          r.pop_back();
        }
      };
  TokenSeq r;
  walk(r, open_session(tables, prompt), GuidedOutcome{}, false);
  return out;
}

inline std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// gamma from the DP against brute-force conditional acceptance probabilities
// on random instances with h <= 3, m <= 4, |V| <= 4, T <= 5.
inline SuiteResult gamma_suite(std::uint64_t seed, std::size_t cases = 100) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.name = "gamma";
  res.cases = cases;
  Rng rng(seed);
  for (std::size_t i = 0; i < cases; ++i) {
    const auto inst = instances::random_tiny_instance(rng, 3, 4, 5, 3);
    auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(inst.constraint, inst.vocab));
    const GuidanceTables tables(std::make_shared<const Hmm>(inst.hmm), dfa, inst.horizon);
    auto s = open_session(tables, {});
    for (TokenId t : inst.prefix) advance_in_place(s, tables, t);
    const auto g = gamma_all_tokens(s, tables);
    const auto exact = oracle::exact_gamma(inst.hmm, inst.constraint, inst.vocab.eos(), inst.horizon, {}, inst.prefix);
    for (std::size_t v = 0; v < g.size(); ++v)
      res.max_error = std::max(res.max_error, std::abs(std::exp(g[v]) - static_cast<double>(exact[v])));
  }
  res.seconds = elapsed(t0);
  return res;
}

// Five-token needle task {<eos>, ANSWER, Q0, A0, k} with key phrase "k".
inline ToyTask tiny_needle_task() {
  ToyTaskSpec spec;
  spec.questions = {"Q0"};
  spec.answers = {"A0"};
  spec.filler = {};
  spec.key_phrase = "k";
  spec.distractor_phrases = {};
  return make_toy_task(spec);
}

// Sum mu w f against sum pi f for f in {1, reward}. Where pi puts mass outside
// the guided support (non-accepting trajectories), the identity is checked on
// that support and the uncovered mass is reported; the full identity is
// checked on policies conditioned on the constraint, which satisfy coverage.
inline SuiteResult unbiasedness_suite(std::uint64_t seed, std::size_t cases = 20) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.name = "unbiasedness";
  res.cases = cases;
  const ToyTask task = tiny_needle_task();
  const std::size_t V = task.vocab.size(), T = 4;
  const TokenId eos = task.vocab.eos();
  const KeyphraseConstraint key{"key", {task.key_phrase}};
  auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(key, task.vocab));
  const TokenSeq prompt{task.questions[0]};
  Rng rng(seed);
  double max_uncovered = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto hmm = std::make_shared<const Hmm>(random_hmm(1 + rng.below(3), V, rng));
    const GuidanceTables tables(hmm, dfa, T);
    ContextPolicy base(V, 2, 64);
    for (double& x : base.logits()) x = 1.5 * rng.normal();
    const auto base_explicit = oracle::explicit_policy(base, prompt);
    auto reward = [&](const TokenSeq& t) { return evaluate_reward(task, prompt, t); };

    // Full identity under coverage.
    const auto covered = oracle::conditioned_policy(base_explicit, V, key, eos, T);
    oracle::Real pi_one = 0.0L, pi_r = 0.0L;
    for (const auto& o : oracle::enumerate_policy(covered, V, eos, T)) {
      pi_one += o.pi;
      pi_r += o.pi * reward(o.tokens);
    }
    double mw_one = 0.0, mw_r = 0.0;
    for (const auto& o : enumerate_guided(ExplicitModel(covered, V), tables, prompt)) {
      const double mw = std::exp(o.log_mu + o.log_w);
      mw_one += mw;
      mw_r += mw * reward(o.tokens);
    }
    res.max_error = std::max({res.max_error, std::abs(mw_one - static_cast<double>(pi_one)),
                              std::abs(mw_r - static_cast<double>(pi_r))});

    // On-support identity for the unconditioned policy.
    double s_mw_one = 0.0, s_mw_r = 0.0, s_pi_one = 0.0, s_pi_r = 0.0;
    for (const auto& o : enumerate_guided(base, tables, prompt)) {
      const double mw = std::exp(o.log_mu + o.log_w), pi = std::exp(o.log_pi);
      s_mw_one += mw;
      s_mw_r += mw * reward(o.tokens);
      s_pi_one += pi;
      s_pi_r += pi * reward(o.tokens);
    }
    res.max_error = std::max({res.max_error, std::abs(s_mw_one - s_pi_one), std::abs(s_mw_r - s_pi_r)});
    max_uncovered = std::max(max_uncovered, 1.0 - s_pi_one);
  }
  res.notes.push_back("largest proximal mass outside the guided support (unconditioned policies): " +
                      sci(max_uncovered));
  res.seconds = elapsed(t0);
  return res;
}

struct ConditionalCheck {
  double tv = 0.0;          // total variation between mu and pi(. | alpha)
  double weight_error = 0;  // max |w - P(alpha)| over sampled trajectories
  std::size_t sampled = 0;
};

// Guidance model identical to the sampler: an HMM whose stop state is
// absorbing, used both as policy and as guidance.
inline ConditionalCheck conditional_instance(Rng& rng, std::size_t samples) {
  const std::size_t V = 4, T = 4;
  const auto vocab = instances::small_vocab(V);
  ConditionalCheck out;
  for (;;) {
    const Hmm m = instances::absorbing_eos_hmm(1 + rng.below(3), V, vocab.eos(), rng);
    const auto c = instances::random_constraint(rng, V - 1, 3);
    const TokenSeq prompt{static_cast<TokenId>(rng.below(V - 1))};
    const oracle::Real p_alpha = oracle::exact_accept_probability(m, c, vocab.eos(), T, prompt);
    if (p_alpha < 1e-6L) continue;
    auto hmm = std::make_shared<const Hmm>(m);
    auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(c, vocab));
    const GuidanceTables tables(hmm, dfa, T);
    const HmmPolicy policy(*hmm);

    std::map<TokenSeq, double> target;
    for (const auto& o : oracle::enumerate_policy(oracle::explicit_policy(m, prompt), V, vocab.eos(), T))
      if (oracle::satisfies(o.tokens, c, vocab.eos())) target[o.tokens] = static_cast<double>(o.pi / p_alpha);
    std::map<TokenSeq, double> mu;
    for (const auto& o : enumerate_guided(policy, tables, prompt)) mu[o.tokens] = std::exp(o.log_mu);
    double tv = 0.0;
    for (const auto& [t, p] : target) tv += std::abs(p - (mu.count(t) ? mu[t] : 0.0));
    for (const auto& [t, p] : mu)
      if (!target.count(t)) tv += p;
    out.tv = 0.5 * tv;

    RolloutOptions opt;
    opt.horizon = T;
    for (std::size_t i = 0; i < samples; ++i) {
      const auto traj = sample_trajectory(policy, &tables, *dfa, prompt, rng, opt, c.id);
      out.weight_error = std::max(out.weight_error, std::abs(std::exp(traj.log_weight) - static_cast<double>(p_alpha)));
      if (traj.fallback) out.weight_error = std::max(out.weight_error, 1.0);
      ++out.sampled;
    }
    return out;
  }
}

inline SuiteResult conditional_suite(std::uint64_t seed, std::size_t cases = 20, std::size_t samples = 200) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.name = "conditional";
  res.cases = cases;
  Rng rng(seed);
  double tv = 0.0, werr = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto c = conditional_instance(rng, samples);
    tv = std::max(tv, c.tv);
    werr = std::max(werr, c.weight_error);
  }
  res.max_error = std::max(tv, werr);
  res.notes.push_back("max total variation " + sci(tv));
  res.notes.push_back("max |w - P(alpha)| over sampled trajectories " + sci(werr));
  res.seconds = elapsed(t0);
  return res;
}

// DFA acceptance against naive substring search, plus structural invariants.
// The error is the number of disagreements.
inline SuiteResult dfa_suite(std::uint64_t seed, std::size_t cases = 200) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult res;
  res.name = "dfa";
  res.cases = cases;
  res.tolerance = 0.0;
  Rng rng(seed);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t V = 2 + rng.below(4);
    const auto vocab = instances::small_vocab(V);
    const auto c = instances::random_constraint(rng, V - 1, 5, 3);
    const auto dfa = build_keyphrase_dfa(c, vocab);
    TokenSeq s;
    for (std::size_t k = 0, n = rng.below(9); k < n; ++k) s.push_back(static_cast<TokenId>(rng.below(V)));
    bad += dfa.accepts(s) != oracle::satisfies(s, c, vocab.eos()) ? 1 : 0;
    bad += dfa.state_count() > oracle::dfa_state_bound(c) ? 1 : 0;
    for (DfaState q = 0; q < dfa.state_count(); ++q) {
      bad += dfa.step(q, vocab.eos()) != q ? 1 : 0;
      if (dfa.is_accepting(q))
        for (TokenId v = 0; v < V; ++v) bad += dfa.step(q, v) != q ? 1 : 0;
    }
  }
  res.max_error = static_cast<double>(bad);
  res.seconds = elapsed(t0);
  return res;
}

inline SuiteResult run_suite(const std::string& name, std::uint64_t seed) {
  if (name == "gamma") return gamma_suite(seed);
  if (name == "unbiasedness") return unbiasedness_suite(seed);
  if (name == "conditional") return conditional_suite(seed);
  if (name == "dfa") return dfa_suite(seed);
  throw Error(ErrorCode::InvalidArgument, "unknown suite '" + name + "'");
}

}  // namespace ctrlr::suites

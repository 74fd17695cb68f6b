#pragma once

// Brute-force reference computations for tiny instances. Everything here works
// in plain long-double probability space straight from the definitions: no
// log-space arithmetic, no automaton, no shared code with the guidance DP or
// the rollout sampler.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ctrlr/error.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/policy.hpp"

namespace ctrlr::oracle {

using Real = long double;

struct EnumerationBudget {
  std::size_t max_vocab = 5;
  std::size_t max_horizon = 6;
  std::size_t max_hmm_states = 4;
  std::size_t max_dfa_states = 6;

  void check(std::size_t vocab, std::size_t horizon, std::size_t hmm_states = 1,
             std::size_t dfa_states = 1) const {
    if (vocab > max_vocab || horizon > max_horizon || hmm_states > max_hmm_states ||
        dfa_states > max_dfa_states)
      throw Error(ErrorCode::BudgetExceeded, "instance exceeds the enumeration budget");
    Real count = std::pow(static_cast<Real>(vocab), static_cast<Real>(horizon));
    if (count > 65536.0L) throw Error(ErrorCode::BudgetExceeded, "|V|^T exceeds 2^16");
  }
};

inline std::size_t dfa_state_bound(const KeyphraseConstraint& c) {
  std::size_t n = 1;
  for (const auto& p : c.phrases) n += p.size();
  return n;
}

// Acceptance by definition: some phrase occurs contiguously once EOS tokens
// (which never advance matching) are deleted.
inline bool satisfies(std::span<const TokenId> response, const KeyphraseConstraint& c, TokenId eos) {
  std::vector<TokenId> text;
  for (TokenId t : response)
    if (t != eos) text.push_back(t);
  for (const auto& phrase : c.phrases) {
    for (std::size_t i = 0; i + phrase.size() <= text.size(); ++i) {
      std::size_t j = 0;
      while (j < phrase.size() && text[i + j] == phrase[j]) ++j;
      if (j == phrase.size()) return true;
    }
  }
  return false;
}

struct ProbHmm {
  std::size_t h = 0, V = 0;
  std::vector<Real> init, trans, emit;
};

inline ProbHmm to_probabilities(const Hmm& hmm) {
  ProbHmm p{hmm.states, hmm.vocab_size, {}, {}, {}};
  for (double x : hmm.log_init) p.init.push_back(std::exp(static_cast<Real>(x)));
  for (double x : hmm.log_trans) p.trans.push_back(std::exp(static_cast<Real>(x)));
  for (double x : hmm.log_emit) p.emit.push_back(std::exp(static_cast<Real>(x)));
  return p;
}

// P(x_{1:L}) as an explicit sum over latent paths (organized as the forward
// recursion in probability space).
inline Real sequence_prob(const ProbHmm& m, std::span<const TokenId> seq) {
  if (seq.empty()) return 1.0L;
  std::vector<Real> a(m.h), next(m.h);
  for (std::size_t z = 0; z < m.h; ++z) a[z] = m.init[z] * m.emit[z * m.V + seq[0]];
  for (std::size_t t = 1; t < seq.size(); ++t) {
    for (std::size_t z2 = 0; z2 < m.h; ++z2) {
      Real s = 0.0L;
      for (std::size_t z = 0; z < m.h; ++z) s += a[z] * m.trans[z * m.h + z2];
      next[z2] = s * m.emit[z2 * m.V + seq[t]];
    }
    a.swap(next);
  }
  Real total = 0.0L;
  for (Real x : a) total += x;
  return total;
}

// Calls `visit` for every length-`len` token string.
inline void for_each_string(std::size_t vocab, std::size_t len,
                            const std::function<void(const TokenSeq&)>& visit) {
  TokenSeq s(len, 0);
  for (;;) {
    visit(s);
    std::size_t i = 0;
    while (i < len && ++s[i] == vocab) s[i++] = 0;
    if (i == len) return;
  }
}

// P(constraint satisfied by the end of a length-`horizon` response | prompt,
// response_prefix) under the HMM as a fixed-length generator.
inline Real exact_accept_probability(const Hmm& hmm, const KeyphraseConstraint& c, TokenId eos,
                                     std::size_t horizon, std::span<const TokenId> prompt = {},
                                     std::span<const TokenId> response_prefix = {},
                                     const EnumerationBudget& budget = {}) {
  if (response_prefix.size() > horizon) throw Error(ErrorCode::InvalidArgument, "prefix longer than horizon");
  budget.check(hmm.vocab_size, horizon, hmm.states, dfa_state_bound(c));
  const ProbHmm m = to_probabilities(hmm);
  TokenSeq head(prompt.begin(), prompt.end());
  head.insert(head.end(), response_prefix.begin(), response_prefix.end());
  const Real denom = sequence_prob(m, head);
  if (denom == 0.0L) return 0.0L;
  Real num = 0.0L;
  for_each_string(m.V, horizon - response_prefix.size(), [&](const TokenSeq& cont) {
    TokenSeq response(response_prefix.begin(), response_prefix.end());
    response.insert(response.end(), cont.begin(), cont.end());
    if (!satisfies(response, c, eos)) return;
    TokenSeq full = head;
    full.insert(full.end(), cont.begin(), cont.end());
    num += sequence_prob(m, full);
  });
  return num / denom;
}

// gamma(v) for every v after `response_prefix`: the acceptance probability
// given the prefix extended by v, and the satisfaction indicator for EOS.
inline std::vector<Real> exact_gamma(const Hmm& hmm, const KeyphraseConstraint& c, TokenId eos,
                                     std::size_t horizon, std::span<const TokenId> prompt,
                                     std::span<const TokenId> response_prefix,
                                     const EnumerationBudget& budget = {}) {
  std::vector<Real> out(hmm.vocab_size, 0.0L);
  const bool done = satisfies(response_prefix, c, eos);
  for (TokenId v = 0; v < hmm.vocab_size; ++v) {
    if (done) {
      out[v] = 1.0L;
      continue;
    }
    if (v == eos) continue;
    TokenSeq ext(response_prefix.begin(), response_prefix.end());
    ext.push_back(v);
    out[v] = exact_accept_probability(hmm, c, eos, horizon, prompt, ext, budget);
  }
  return out;
}

// A policy given as explicit next-token probabilities for a response prefix.
using ExplicitPolicy = std::function<std::vector<Real>(std::span<const TokenId>)>;

inline ExplicitPolicy explicit_policy(const ContextPolicy& policy, TokenSeq prompt) {
  return [&policy, prompt = std::move(prompt)](std::span<const TokenId> response) {
    const auto row = policy.row(policy.context_id(prompt, response));
    std::vector<Real> p(row.size());
    Real total = 0.0L;
    for (std::size_t v = 0; v < row.size(); ++v) total += p[v] = std::exp(static_cast<Real>(row[v]));
    for (Real& x : p) x /= total;
    return p;
  };
}

// HMM predictive distribution P(v | prompt, response) by ratios of path sums.
inline ExplicitPolicy explicit_policy(const Hmm& hmm, TokenSeq prompt) {
  return [m = to_probabilities(hmm), prompt = std::move(prompt)](std::span<const TokenId> response) {
    TokenSeq seq = prompt;
    seq.insert(seq.end(), response.begin(), response.end());
    const Real denom = sequence_prob(m, seq);
    std::vector<Real> p(m.V, 0.0L);
    seq.push_back(0);
    for (TokenId v = 0; v < m.V; ++v) {
      seq.back() = v;
      p[v] = denom > 0.0L ? sequence_prob(m, seq) / denom : 0.0L;
    }
    return p;
  };
}

// P(constraint holds when the response terminates | response_prefix) under an
// explicit policy, by recursion over continuations.
inline Real policy_accept_probability(const ExplicitPolicy& policy, std::size_t vocab,
                                      const KeyphraseConstraint& c, TokenId eos, std::size_t horizon,
                                      TokenSeq prefix) {
  if (satisfies(prefix, c, eos)) return 1.0L;
  if (prefix.size() >= horizon || (!prefix.empty() && prefix.back() == eos)) return 0.0L;
  const auto p = policy(prefix);
  Real total = 0.0L;
  prefix.push_back(0);
  for (TokenId v = 0; v < vocab; ++v) {
    if (p[v] == 0.0L) continue;
    prefix.back() = v;
    total += p[v] * policy_accept_probability(policy, vocab, c, eos, horizon, prefix);
  }
  return total;
}

// The policy conditioned on the constraint holding at termination,
// pi(v | prefix, alpha) = pi(v | prefix) P(alpha | prefix v) / P(alpha | prefix).
// Prefixes with P(alpha | prefix) = 0 keep the base distribution.
inline ExplicitPolicy conditioned_policy(ExplicitPolicy base, std::size_t vocab,
                                         const KeyphraseConstraint& c, TokenId eos,
                                         std::size_t horizon) {
  return [base = std::move(base), vocab, c, eos, horizon](std::span<const TokenId> response) {
    TokenSeq prefix(response.begin(), response.end());
    auto p = base(prefix);
    const Real here = policy_accept_probability(base, vocab, c, eos, horizon, prefix);
    if (here == 0.0L || satisfies(prefix, c, eos)) return p;
    prefix.push_back(0);
    for (TokenId v = 0; v < vocab; ++v) {
      if (p[v] == 0.0L) continue;
      prefix.back() = v;
      p[v] *= policy_accept_probability(base, vocab, c, eos, horizon, prefix) / here;
    }
    return p;
  };
}

struct Outcome {
  TokenSeq tokens;
  Real pi = 0.0L;  // proximal-policy probability
  Real mu = 0.0L;  // behavior-policy probability (0 outside the guided support)
  Real w = 1.0L;   // product of per-token pi / mu
};

// Every EOS-or-horizon-terminated response with its probability.
inline std::vector<Outcome> enumerate_policy(const ExplicitPolicy& policy, std::size_t vocab,
                                             TokenId eos, std::size_t horizon,
                                             const EnumerationBudget& budget = {}) {
  budget.check(vocab, horizon);
  std::vector<Outcome> out;
  std::function<void(TokenSeq&, Real)> walk = [&](TokenSeq& r, Real p) {
    if (r.size() == horizon || (!r.empty() && r.back() == eos)) {
      out.push_back({r, p, p, 1.0L});
      return;
    }
    const auto next = policy(r);
    for (TokenId v = 0; v < vocab; ++v) {
      if (next[v] == 0.0L) continue;
      r.push_back(v);
      walk(r, p * next[v]);
      r.pop_back();
    }
  };
  TokenSeq r;
  walk(r, 1.0L);
  return out;
}

inline Real exact_policy_expectation(const ExplicitPolicy& policy, std::size_t vocab, TokenId eos,
                                     std::size_t horizon,
                                     const std::function<Real(const TokenSeq&)>& f,
                                     const EnumerationBudget& budget = {}) {
  Real total = 0.0L;
  for (const auto& o : enumerate_policy(policy, vocab, eos, horizon, budget)) total += o.pi * f(o.tokens);
  return total;
}

// The guided behavior policy by chain rule: at each prefix, gamma from the
// brute-force acceptance probabilities, Z = sum pi gamma, mu = pi gamma / Z,
// w_t = pi / mu. Once the constraint holds, or once Z drops below
// exp(log_floor), tokens come from pi with w_t = 1. Only outcomes with mu > 0
// are returned; `pi` is still reported for each.
inline std::vector<Outcome> exact_guided_distribution(const ExplicitPolicy& policy, const Hmm& hmm,
                                                      const KeyphraseConstraint& c, TokenId eos,
                                                      std::size_t horizon,
                                                      std::span<const TokenId> prompt = {},
                                                      double log_floor = -40.0,
                                                      const EnumerationBudget& budget = {}) {
  budget.check(hmm.vocab_size, horizon, hmm.states, dfa_state_bound(c));
  const std::size_t V = hmm.vocab_size;
  const Real floor = std::exp(static_cast<Real>(log_floor));
  std::vector<Outcome> out;
  std::function<void(TokenSeq&, Real, Real, Real, bool)> walk = [&](TokenSeq& r, Real pi, Real mu,
                                                                     Real w, bool unguided) {
    if (r.size() == horizon || (!r.empty() && r.back() == eos)) {
      out.push_back({r, pi, mu, w});
      return;
    }
    const auto p = policy(r);
    std::vector<Real> q = p;  // behavior distribution at this prefix
    std::vector<Real> wt(V, 1.0L);
    bool fallback = unguided;
    if (!unguided && !satisfies(r, c, eos)) {
      const auto gamma = exact_gamma(hmm, c, eos, horizon, prompt, r, budget);
      Real Z = 0.0L;
      for (TokenId v = 0; v < V; ++v) Z += p[v] * gamma[v];
      if (Z < floor) {
        fallback = true;
      } else {
        for (TokenId v = 0; v < V; ++v) {
          q[v] = p[v] * gamma[v] / Z;
          wt[v] = q[v] > 0.0L ? p[v] / q[v] : 0.0L;
        }
      }
    }
    for (TokenId v = 0; v < V; ++v) {
      if (q[v] == 0.0L) continue;
      r.push_back(v);
      walk(r, pi * p[v], mu * q[v], w * wt[v], fallback);
      r.pop_back();
    }
  };
  TokenSeq r;
  walk(r, 1.0L, 1.0L, 1.0L, false);
  return out;
}

}  // namespace ctrlr::oracle

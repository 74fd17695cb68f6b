#pragma once

// Small random instances for property checks and the oracle suites.

#include <cmath>
#include <string>
#include <vector>

#include "ctrlr/hmm.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/random.hpp"

namespace ctrlr::instances {

// Vocab {t0, ..., t(n-2), <eos>}; EOS is the last id.
inline Vocab small_vocab(std::size_t n) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i + 1 < n; ++i) tokens.push_back("t" + std::to_string(i));
  tokens.push_back("<eos>");
  return Vocab(tokens, "<eos>");
}

inline KeyphraseConstraint random_constraint(Rng& rng, std::size_t content_tokens,
                                             std::size_t max_total_len, std::size_t max_phrases = 2) {
  KeyphraseConstraint c{"c", {}};
  std::size_t budget = max_total_len;
  const std::size_t phrases = 1 + rng.below(max_phrases);
  for (std::size_t p = 0; p < phrases && budget > 0; ++p) {
    const std::size_t len = 1 + rng.below(budget);
    TokenSeq phrase;
    for (std::size_t i = 0; i < len; ++i) phrase.push_back(static_cast<TokenId>(rng.below(content_tokens)));
    budget -= len;
    c.phrases.push_back(std::move(phrase));
  }
  return c;
}

struct TinyInstance {
  Vocab vocab;
  Hmm hmm;
  KeyphraseConstraint constraint;
  std::size_t horizon = 1;
  TokenSeq prefix;  // response tokens already emitted, no EOS
};

// h <= max_states, |V| <= max_vocab (EOS included), T <= max_horizon, phrase
// lengths summing to <= max_phrase_total (so at most 1 + that many DFA states).
inline TinyInstance random_tiny_instance(Rng& rng, std::size_t max_states = 3,
                                         std::size_t max_vocab = 4, std::size_t max_horizon = 5,
                                         std::size_t max_phrase_total = 3) {
  TinyInstance inst;
  const std::size_t V = 2 + rng.below(max_vocab - 1);
  inst.vocab = small_vocab(V);
  const std::size_t h = 1 + rng.below(max_states);
  inst.hmm = random_hmm(h, V, rng);
  inst.constraint = random_constraint(rng, V - 1, max_phrase_total);
  inst.horizon = 1 + rng.below(max_horizon);
  const std::size_t t = rng.below(inst.horizon);
  for (std::size_t i = 0; i < t; ++i) inst.prefix.push_back(static_cast<TokenId>(rng.below(V - 1)));
  return inst;
}


// HMM over `vocab` whose last latent state emits only EOS and never leaves;
// the other states never emit EOS. Stopping is then absorbing, as it is for a
// policy that terminates at EOS.
inline Hmm absorbing_eos_hmm(std::size_t live_states, std::size_t vocab, TokenId eos, Rng& rng,
                             double stop_prob = 0.15) {
  const std::size_t h = live_states + 1;
  const Hmm base = random_hmm(live_states, vocab, rng);
  std::vector<double> init(h, 0.0), trans(h * h, 0.0), emit(h * vocab, 0.0);
  for (std::size_t z = 0; z < live_states; ++z) {
    init[z] = std::exp(base.log_init[z]);
    for (std::size_t z2 = 0; z2 < live_states; ++z2)
      trans[z * h + z2] = (1.0 - stop_prob) * std::exp(base.trans(z, z2));
    trans[z * h + live_states] = stop_prob;
    double mass = 0.0;
    for (TokenId v = 0; v < vocab; ++v)
      if (v != eos) mass += std::exp(base.emit(z, v));
    for (TokenId v = 0; v < vocab; ++v)
      if (v != eos) emit[z * vocab + v] = std::exp(base.emit(z, v)) / mass;
  }
  trans[live_states * h + live_states] = 1.0;
  emit[live_states * vocab + eos] = 1.0;
  return hmm_from_probabilities(init, trans, emit, vocab);
}

}  // namespace ctrlr::instances

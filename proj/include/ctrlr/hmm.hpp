#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrlr/error.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/logmath.hpp"
#include "ctrlr/random.hpp"

namespace ctrlr {

// Discrete HMM with every table kept in log-space. Row-major storage:
// log_trans[z * h + z'], log_emit[z * V + v].
struct Hmm {
  std::size_t states = 0;
  std::size_t vocab_size = 0;
  std::vector<double> log_init;
  std::vector<double> log_trans;
  std::vector<double> log_emit;

  double trans(std::size_t z, std::size_t z2) const { return log_trans[z * states + z2]; }
  double emit(std::size_t z, std::size_t v) const { return log_emit[z * vocab_size + v]; }
  std::span<const double> trans_row(std::size_t z) const {
    return {log_trans.data() + z * states, states};
  }
  std::span<const double> emit_row(std::size_t z) const {
    return {log_emit.data() + z * vocab_size, vocab_size};
  }

  // Throws InvalidArgument unless shapes match and every distribution sums to
  // one within `tol`.
  void validate(double tol = 1e-9) const {
    if (states == 0 || vocab_size == 0) throw Error(ErrorCode::InvalidArgument, "empty HMM");
    if (log_init.size() != states || log_trans.size() != states * states ||
        log_emit.size() != states * vocab_size)
      throw Error(ErrorCode::InvalidArgument, "HMM table shape mismatch");
    auto check = [&](std::span<const double> row, const char* what) {
      for (double x : row)
        if (!(x <= 0.0)) throw Error(ErrorCode::InvalidArgument, std::string(what) + " entry > 0 or NaN");
      const double mass = std::exp(logsumexp(row));
      if (std::abs(mass - 1.0) > tol)
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " row not normalized");
    };
    check(log_init, "init");
    for (std::size_t z = 0; z < states; ++z) {
      check(trans_row(z), "transition");
      check(emit_row(z), "emission");
    }
  }
};

inline Hmm hmm_from_probabilities(const std::vector<double>& init, const std::vector<double>& trans,
                                  const std::vector<double>& emit, std::size_t vocab_size) {
  Hmm m;
  m.states = init.size();
  m.vocab_size = vocab_size;
  for (double p : init) m.log_init.push_back(safe_log(p));
  for (double p : trans) m.log_trans.push_back(safe_log(p));
  for (double p : emit) m.log_emit.push_back(safe_log(p));
  m.validate();
  return m;
}

// Every row drawn from a flat Dirichlet (normalized Gamma(concentration)).
inline Hmm random_hmm(std::size_t states, std::size_t vocab_size, Rng& rng,
                      double concentration = 1.0) {
  auto draw_row = [&](std::size_t n) {
    std::vector<double> row(n);
    double total = 0.0;
    for (double& x : row) {
      x = rng.gamma(concentration) + 1e-12;
      total += x;
    }
    for (double& x : row) x = std::log(x / total);
    return row;
  };
  Hmm m;
  m.states = states;
  m.vocab_size = vocab_size;
  m.log_init = draw_row(states);
  for (std::size_t z = 0; z < states; ++z) {
    auto r = draw_row(states);
    m.log_trans.insert(m.log_trans.end(), r.begin(), r.end());
  }
  for (std::size_t z = 0; z < states; ++z) {
    auto r = draw_row(vocab_size);
    m.log_emit.insert(m.log_emit.end(), r.begin(), r.end());
  }
  return m;
}

struct ForwardState {
  std::vector<double> log_alpha;  // log p(x_{1:t}, z_t = z)
  double log_evidence = kNegInf;  // log p(x_{1:t})
};

inline ForwardState forward_init(const Hmm& hmm, TokenId first) {
  ForwardState st;
  st.log_alpha.resize(hmm.states);
  for (std::size_t z = 0; z < hmm.states; ++z)
    st.log_alpha[z] = hmm.log_init[z] + hmm.emit(z, first);
  st.log_evidence = logsumexp(st.log_alpha);
  return st;
}

inline ForwardState forward_update(const Hmm& hmm, const ForwardState& prev, TokenId token) {
  const std::size_t h = hmm.states;
  ForwardState st;
  st.log_alpha.resize(h);
  std::vector<double> terms(h);
  for (std::size_t z2 = 0; z2 < h; ++z2) {
    for (std::size_t z = 0; z < h; ++z) terms[z] = prev.log_alpha[z] + hmm.trans(z, z2);
    st.log_alpha[z2] = logsumexp(terms) + hmm.emit(z2, token);
  }
  st.log_evidence = logsumexp(st.log_alpha);
  return st;
}

// Forward state after `seq`; nullopt for the empty sequence.
inline std::optional<ForwardState> forward_run(const Hmm& hmm, std::span<const TokenId> seq) {
  if (seq.empty()) return std::nullopt;
  ForwardState st = forward_init(hmm, seq[0]);
  for (std::size_t t = 1; t < seq.size(); ++t) st = forward_update(hmm, st, seq[t]);
  return st;
}

inline double sequence_log_prob(const Hmm& hmm, std::span<const TokenId> seq) {
  auto st = forward_run(hmm, seq);
  return st ? st->log_evidence : 0.0;
}

// Normalized log p(z_{t+1} = z' | x_{1:t}); the initial distribution before any
// token has been observed.
inline std::vector<double> next_latent_log_weights(const Hmm& hmm,
                                                   const std::optional<ForwardState>& st) {
  if (!st) return hmm.log_init;
  const std::size_t h = hmm.states;
  std::vector<double> out(h), terms(h);
  for (std::size_t z2 = 0; z2 < h; ++z2) {
    for (std::size_t z = 0; z < h; ++z)
      terms[z] = st->log_alpha[z] - st->log_evidence + hmm.trans(z, z2);
    out[z2] = logsumexp(terms);
  }
  return out;
}

// log p(x_{t+1} = v | x_{1:t}) for every v.
inline std::vector<double> predictive_log_probs(const Hmm& hmm,
                                                const std::optional<ForwardState>& st) {
  const auto pred = next_latent_log_weights(hmm, st);
  std::vector<double> out(hmm.vocab_size), terms(hmm.states);
  for (std::size_t v = 0; v < hmm.vocab_size; ++v) {
    for (std::size_t z = 0; z < hmm.states; ++z) terms[z] = pred[z] + hmm.emit(z, v);
    out[v] = logsumexp(terms);
  }
  return out;
}

inline TokenSeq sample_sequence(const Hmm& hmm, std::size_t length, std::uint64_t seed) {
  if (length == 0) throw Error(ErrorCode::InvalidArgument, "sample length must be >= 1");
  Rng rng(seed);
  TokenSeq out;
  out.reserve(length);
  auto z = rng.categorical_log(hmm.log_init);
  for (std::size_t t = 0; t < length; ++t) {
    out.push_back(static_cast<TokenId>(rng.categorical_log(hmm.emit_row(z))));
    if (t + 1 < length) z = rng.categorical_log(hmm.trans_row(z));
  }
  return out;
}

struct BaumWelchOptions {
  std::uint64_t seed = 0;
  std::size_t max_iters = 200;
  double tol = 1e-6;                  // relative log-likelihood improvement
  double emission_smoothing = 1e-8;   // probability mass added per emission entry
};

struct BaumWelchResult {
  Hmm model;
  // log_likelihood[i]: corpus log-likelihood after i M-steps (index 0 is the
  // random initialization).
  std::vector<double> log_likelihood;
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

struct EmAccumulators {
  std::vector<double> init, trans, emit;
  double log_likelihood = 0.0;
};

// log(sum_z exp(log_a[z]) * mat(z, z')) computed with a single max shift;
// `mat` is row-major probabilities.
inline void shifted_matvec(std::span<const double> log_a, const std::vector<double>& mat,
                           std::size_t h, std::vector<double>& scratch, std::span<double> out) {
  double hi = kNegInf;
  for (double x : log_a) hi = std::max(hi, x);
  for (std::size_t z = 0; z < h; ++z) scratch[z] = log_a[z] == kNegInf ? 0.0 : std::exp(log_a[z] - hi);
  for (std::size_t z2 = 0; z2 < h; ++z2) {
    double s = 0.0;
    for (std::size_t z = 0; z < h; ++z) s += scratch[z] * mat[z * h + z2];
    out[z2] = hi + safe_log(s);
  }
}

inline void em_accumulate(const Hmm& hmm, const std::vector<double>& trans_p,
                          const std::vector<double>& trans_p_t, std::span<const TokenId> seq,
                          EmAccumulators& acc) {
  const std::size_t h = hmm.states, L = seq.size(), V = hmm.vocab_size;
  std::vector<double> la(L * h), lb(L * h), scratch(h), q(h), e(h);
  for (std::size_t z = 0; z < h; ++z) la[z] = hmm.log_init[z] + hmm.emit(z, seq[0]);
  for (std::size_t t = 1; t < L; ++t) {
    shifted_matvec({la.data() + (t - 1) * h, h}, trans_p, h, scratch, {la.data() + t * h, h});
    for (std::size_t z = 0; z < h; ++z) la[t * h + z] += hmm.emit(z, seq[t]);
  }
  const double ll = logsumexp(std::span<const double>(la.data() + (L - 1) * h, h));
  acc.log_likelihood += ll;

  for (std::size_t z = 0; z < h; ++z) lb[(L - 1) * h + z] = 0.0;
  for (std::size_t t = L - 1; t-- > 0;) {
    for (std::size_t z2 = 0; z2 < h; ++z2) q[z2] = hmm.emit(z2, seq[t + 1]) + lb[(t + 1) * h + z2];
    // Backward uses the transposed product: sum_z' A(z, z') exp(q(z')).
    shifted_matvec(q, trans_p_t, h, scratch, {lb.data() + t * h, h});
  }

  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t z = 0; z < h; ++z) {
      const double g = std::exp(la[t * h + z] + lb[t * h + z] - ll);
      if (t == 0) acc.init[z] += g;
      acc.emit[z * V + seq[t]] += g;
    }
    if (t + 1 == L) continue;
    double ma = kNegInf, mq = kNegInf;
    for (std::size_t z = 0; z < h; ++z) {
      ma = std::max(ma, la[t * h + z]);
      q[z] = hmm.emit(z, seq[t + 1]) + lb[(t + 1) * h + z];
      mq = std::max(mq, q[z]);
    }
    const double factor = std::exp(ma + mq - ll);
    if (std::isfinite(factor)) {
      for (std::size_t z = 0; z < h; ++z) scratch[z] = std::exp(la[t * h + z] - ma);
      for (std::size_t z = 0; z < h; ++z) e[z] = std::exp(q[z] - mq);
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t z2 = 0; z2 < h; ++z2)
          acc.trans[z * h + z2] += scratch[z] * trans_p[z * h + z2] * e[z2] * factor;
    } else {
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t z2 = 0; z2 < h; ++z2)
          acc.trans[z * h + z2] += std::exp(la[t * h + z] + hmm.trans(z, z2) + q[z2] - ll);
    }
  }
}

inline double corpus_log_likelihood(const Hmm& hmm, const std::vector<TokenSeq>& corpus,
                                    EmAccumulators* acc) {
  const std::size_t h = hmm.states;
  std::vector<double> trans_p(h * h), trans_p_t(h * h);
  for (std::size_t z = 0; z < h; ++z)
    for (std::size_t z2 = 0; z2 < h; ++z2) {
      trans_p[z * h + z2] = std::exp(hmm.trans(z, z2));
      trans_p_t[z2 * h + z] = trans_p[z * h + z2];
    }
  EmAccumulators local;
  EmAccumulators& a = acc ? *acc : local;
  a.init.assign(h, 0.0);
  a.trans.assign(h * h, 0.0);
  a.emit.assign(h * hmm.vocab_size, 0.0);
  a.log_likelihood = 0.0;
  for (const auto& seq : corpus) em_accumulate(hmm, trans_p, trans_p_t, seq, a);
  return a.log_likelihood;
}

inline void normalize_into(std::span<const double> counts, std::span<double> log_row,
                           double smoothing) {
  double total = 0.0;
  for (double c : counts) total += c;
  if (!(total > 0.0)) return;  // unvisited: keep previous row
  const double denom = 1.0 + smoothing * static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    log_row[i] = safe_log((counts[i] / total + smoothing) / denom);
}

}  // namespace detail

inline double corpus_log_likelihood(const Hmm& hmm, const std::vector<TokenSeq>& corpus) {
  return detail::corpus_log_likelihood(hmm, corpus, nullptr);
}

// Standard EM. The random initialization is drawn from `options.seed`.
inline BaumWelchResult fit_baum_welch(const std::vector<TokenSeq>& corpus, std::size_t states,
                                      std::size_t vocab_size, const BaumWelchOptions& options = {}) {
  if (corpus.empty()) throw Error(ErrorCode::DegenerateCorpus, "empty corpus");
  if (states == 0) throw Error(ErrorCode::InvalidArgument, "HMM needs at least one state");
  for (const auto& seq : corpus) {
    if (seq.empty()) throw Error(ErrorCode::DegenerateCorpus, "corpus contains an empty sequence");
    for (TokenId t : seq)
      if (t >= vocab_size) throw Error(ErrorCode::InvalidToken, "corpus token out of range");
  }
  Rng rng(options.seed);
  BaumWelchResult result;
  result.model = random_hmm(states, vocab_size, rng);
  Hmm& m = result.model;
  detail::EmAccumulators acc;
  double ll = detail::corpus_log_likelihood(m, corpus, &acc);
  result.log_likelihood.push_back(ll);
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    detail::normalize_into(acc.init, m.log_init, 0.0);
    for (std::size_t z = 0; z < states; ++z) {
      detail::normalize_into({acc.trans.data() + z * states, states},
                             {m.log_trans.data() + z * states, states}, 0.0);
      detail::normalize_into({acc.emit.data() + z * vocab_size, vocab_size},
                             {m.log_emit.data() + z * vocab_size, vocab_size},
                             options.emission_smoothing);
    }
    const double next = detail::corpus_log_likelihood(m, corpus, &acc);
    result.log_likelihood.push_back(next);
    result.iterations = it + 1;
    const double rel = (next - ll) / std::max(std::abs(ll), 1e-300);
    ll = next;
    if (std::abs(rel) < options.tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

}  // namespace ctrlr

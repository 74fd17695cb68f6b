#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctrlr/hmm.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/logmath.hpp"

namespace ctrlr {

// Backward values of the HMM x DFA product chain:
//   b(k, z, s) = log P(reach accept within k more tokens | latent z emitted
//                the last token, automaton in s).
class GuidanceTables {
 public:
  GuidanceTables(std::shared_ptr<const Hmm> hmm, std::shared_ptr<const KeyphraseDfa> dfa,
                 std::size_t horizon)
      : hmm_(std::move(hmm)), dfa_(std::move(dfa)), horizon_(horizon) {
    if (horizon_ == 0) throw Error(ErrorCode::InvalidArgument, "guidance horizon must be >= 1");
    if (hmm_->vocab_size != dfa_->vocab_size())
      throw Error(ErrorCode::InvalidArgument, "HMM and DFA vocabulary sizes differ");
    build();
  }

  const Hmm& hmm() const { return *hmm_; }
  const KeyphraseDfa& dfa() const { return *dfa_; }
  std::size_t horizon() const { return horizon_; }

  double b(std::size_t k, std::size_t z, DfaState s) const {
    return table_[(k * hmm_->states + z) * dfa_->state_count() + s];
  }

  // log P(accept within `remaining` tokens) from the very beginning, with the
  // first latent drawn from the initial distribution.
  double log_accept_from_start(std::size_t remaining) const {
    return log_accept_given_latent(hmm_->log_init, dfa_->start(), remaining);
  }

  // log sum_z' pred(z') sum_v B(z', v) exp b(remaining - 1, z', delta(s, v)).
  double log_accept_given_latent(const std::vector<double>& log_pred, DfaState s,
                                 std::size_t remaining) const {
    if (dfa_->is_accepting(s)) return 0.0;
    if (remaining == 0) return kNegInf;
    const auto& groups = groups_[s];
    std::vector<double> terms;
    for (std::size_t z2 = 0; z2 < hmm_->states; ++z2)
      for (std::size_t g = 0; g < groups.size(); ++g)
        terms.push_back(log_pred[z2] + group_emit(z2, s, g) + b(remaining - 1, z2, groups[g].dest));
    return std::min(0.0, logsumexp(terms));
  }

 private:
  struct DestGroup {
    DfaState dest;
    std::vector<TokenId> tokens;
  };

  double group_emit(std::size_t z, DfaState s, std::size_t g) const {
    return group_log_emit_[s][z * groups_[s].size() + g];
  }

  void build() {
    const std::size_t h = hmm_->states, m = dfa_->state_count(), V = dfa_->vocab_size();
    // Tokens grouped by destination state so each (k, s) costs O(h * out-degree)
    // for the emission side and O(h^2) for the transition side.
    groups_.assign(m, {});
    group_log_emit_.assign(m, {});
    for (DfaState s = 0; s < m; ++s) {
      std::vector<std::int64_t> slot(m, -1);
      for (TokenId v = 0; v < V; ++v) {
        const DfaState d = dfa_->step(s, v);
        if (slot[d] < 0) {
          slot[d] = static_cast<std::int64_t>(groups_[s].size());
          groups_[s].push_back({d, {}});
        }
        groups_[s][static_cast<std::size_t>(slot[d])].tokens.push_back(v);
      }
      const std::size_t G = groups_[s].size();
      group_log_emit_[s].resize(h * G);
      std::vector<double> terms;
      for (std::size_t z = 0; z < h; ++z)
        for (std::size_t g = 0; g < G; ++g) {
          terms.clear();
          for (TokenId v : groups_[s][g].tokens) terms.push_back(hmm_->emit(z, v));
          group_log_emit_[s][z * G + g] = logsumexp(terms);
        }
    }

    table_.assign((horizon_ + 1) * h * m, kNegInf);
    auto at = [&](std::size_t k, std::size_t z, DfaState s) -> double& {
      return table_[(k * h + z) * m + s];
    };
    for (std::size_t z = 0; z < h; ++z)
      for (DfaState s = 0; s < m; ++s) at(0, z, s) = dfa_->is_accepting(s) ? 0.0 : kNegInf;

    std::vector<double> c(h), terms;
    for (std::size_t k = 1; k <= horizon_; ++k) {
      for (DfaState s = 0; s < m; ++s) {
        if (dfa_->is_accepting(s)) {
          for (std::size_t z = 0; z < h; ++z) at(k, z, s) = 0.0;
          continue;
        }
        const std::size_t G = groups_[s].size();
        for (std::size_t z2 = 0; z2 < h; ++z2) {
          terms.clear();
          for (std::size_t g = 0; g < G; ++g)
            terms.push_back(group_emit(z2, s, g) + at(k - 1, z2, groups_[s][g].dest));
          c[z2] = logsumexp(terms);
        }
        for (std::size_t z = 0; z < h; ++z) {
          terms.clear();
          for (std::size_t z2 = 0; z2 < h; ++z2) terms.push_back(hmm_->trans(z, z2) + c[z2]);
          at(k, z, s) = std::min(0.0, logsumexp(terms));
        }
      }
    }
  }

  std::shared_ptr<const Hmm> hmm_;
  std::shared_ptr<const KeyphraseDfa> dfa_;
  std::size_t horizon_;
  std::vector<double> table_;
  std::vector<std::vector<DestGroup>> groups_;
  std::vector<std::vector<double>> group_log_emit_;
};

inline GuidanceTables build_guidance_tables(std::shared_ptr<const Hmm> hmm,
                                            std::shared_ptr<const KeyphraseDfa> dfa,
                                            std::size_t horizon) {
  return GuidanceTables(std::move(hmm), std::move(dfa), horizon);
}

// Incremental state of one trajectory: HMM forward state over everything
// seen so far (prompt included) and the automaton state over the response.
struct GuidanceSession {
  std::optional<ForwardState> forward;
  DfaState dfa_state = 0;
  std::size_t t = 0;  // response tokens consumed
  std::size_t horizon = 0;
  bool fallback = false;
  std::string constraint_id;

  bool accepted(const GuidanceTables& tables) const { return tables.dfa().is_accepting(dfa_state); }
};

inline GuidanceSession open_session(const GuidanceTables& tables, std::span<const TokenId> prompt,
                                    std::string constraint_id = {}) {
  GuidanceSession s;
  s.forward = forward_run(tables.hmm(), prompt);
  s.dfa_state = tables.dfa().start();
  s.horizon = tables.horizon();
  s.constraint_id = std::move(constraint_id);
  return s;
}

// log gamma(v) = log P(constraint satisfied by the horizon | prefix, next = v)
// for every token v; EOS is priced by whether the constraint already holds.
inline std::vector<double> gamma_all_tokens(const GuidanceSession& session,
                                            const GuidanceTables& tables) {
  const Hmm& hmm = tables.hmm();
  const KeyphraseDfa& dfa = tables.dfa();
  const std::size_t V = hmm.vocab_size, h = hmm.states;
  if (session.t >= session.horizon)
    throw Error(ErrorCode::InvalidArgument, "guidance queried past the horizon");
  if (session.fallback) throw Error(ErrorCode::InvalidArgument, "guidance queried in fallback");
  std::vector<double> out(V, 0.0);
  if (dfa.is_accepting(session.dfa_state)) return out;

  const std::size_t remaining = session.horizon - session.t - 1;
  const auto pred = next_latent_log_weights(hmm, session.forward);
  std::vector<double> num(h), den(h);
  for (TokenId v = 0; v < V; ++v) {
    if (v == dfa.eos()) {
      out[v] = kNegInf;
      continue;
    }
    const DfaState next = dfa.step(session.dfa_state, v);
    for (std::size_t z2 = 0; z2 < h; ++z2) {
      den[z2] = pred[z2] + hmm.emit(z2, v);
      num[z2] = den[z2] + tables.b(remaining, z2, next);
    }
    const double log_den = logsumexp(den);
    out[v] = log_den == kNegInf ? kNegInf : std::min(0.0, logsumexp(num) - log_den);
  }
  return out;
}

inline void advance_in_place(GuidanceSession& session, const GuidanceTables& tables, TokenId token) {
  if (session.t >= session.horizon)
    throw Error(ErrorCode::InvalidArgument, "session advanced past the horizon");
  const Hmm& hmm = tables.hmm();
  session.forward = session.forward ? forward_update(hmm, *session.forward, token)
                                    : forward_init(hmm, token);
  session.dfa_state = tables.dfa().step(session.dfa_state, token);
  ++session.t;
}

inline GuidanceSession advance_session(GuidanceSession session, const GuidanceTables& tables,
                                       TokenId token) {
  advance_in_place(session, tables, token);
  return session;
}

}  // namespace ctrlr

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrlr/guidance.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/logmath.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/random.hpp"

namespace ctrlr {

inline constexpr double kDefaultLogMassFloor = -40.0;

// One step of the guided behavior policy mu(v) = pi_old(v) gamma(v) / Z.
struct GuidedStepDistribution {
  std::vector<double> log_mu;
  double log_Z = 0.0;
  std::vector<double> log_w;  // log Z - log gamma(v); +inf where gamma(v) = 0
};

inline GuidedStepDistribution unguided_step(std::span<const double> log_pi_old) {
  return {std::vector<double>(log_pi_old.begin(), log_pi_old.end()), 0.0,
          std::vector<double>(log_pi_old.size(), 0.0)};
}

// nullopt when the feasible mass log Z falls below `log_floor`.
inline std::optional<GuidedStepDistribution> try_guided_next_distribution(
    std::span<const double> log_pi_old, std::span<const double> log_gamma,
    double log_floor = kDefaultLogMassFloor) {
  bool uniform_one = true;
  for (double g : log_gamma) uniform_one = uniform_one && g == 0.0;
  if (uniform_one) return unguided_step(log_pi_old);

  const std::size_t V = log_pi_old.size();
  std::vector<double> joint(V);
  for (std::size_t v = 0; v < V; ++v) joint[v] = log_pi_old[v] + log_gamma[v];
  const double log_Z = logsumexp(joint);
  if (!(log_Z >= log_floor)) return std::nullopt;
  GuidedStepDistribution d;
  d.log_Z = log_Z;
  d.log_mu.resize(V);
  d.log_w.resize(V);
  for (std::size_t v = 0; v < V; ++v) {
    d.log_mu[v] = joint[v] == kNegInf ? kNegInf : joint[v] - log_Z;
    d.log_w[v] = log_gamma[v] == kNegInf ? kPosInf : log_Z - log_gamma[v];
  }
  return d;
}

inline GuidedStepDistribution guided_next_distribution(std::span<const double> log_pi_old,
                                                       std::span<const double> log_gamma,
                                                       double log_floor = kDefaultLogMassFloor) {
  auto d = try_guided_next_distribution(log_pi_old, log_gamma, log_floor);
  if (!d) throw Error(ErrorCode::InfeasibleStep, "feasible guided mass below floor");
  return *std::move(d);
}

inline std::size_t sample_constraint(std::size_t constraint_count, Rng& rng) {
  if (constraint_count == 0) throw Error(ErrorCode::InvalidArgument, "empty constraint set");
  return static_cast<std::size_t>(rng.below(constraint_count));
}

struct GuidedTrajectory {
  std::string constraint_id;
  std::uint64_t prompt_id = 0;
  TokenSeq prompt;
  TokenSeq tokens;
  std::vector<double> log_pi_old;
  std::vector<double> log_mu;
  std::vector<double> log_w;
  // Number of response tokens emitted when the constraint first held; tokens
  // at indices >= accept_step were sampled with no guidance.
  std::optional<std::size_t> accept_step;
  double log_weight = 0.0;  // sum of log_w
  bool guided = false;
  bool fallback = false;
  std::optional<std::size_t> fallback_step;
  double reward = 0.0;
  bool correct = false;
  std::size_t iteration = 0;
  std::size_t group_index = 0;

  bool satisfied() const { return accept_step.has_value(); }
};

struct RolloutOptions {
  std::size_t horizon = 16;
  double log_mass_floor = kDefaultLogMassFloor;
  // Called once per step with the full proximal and behavior distributions.
  std::function<void(std::size_t, std::span<const double>, const GuidedStepDistribution&)> observer;
};

// Samples one response. `guidance == nullptr` gives plain sampling from the
// proximal policy; `dfa` tracks acceptance either way.
template <NextTokenModel Policy>
GuidedTrajectory sample_trajectory(const Policy& policy, const GuidanceTables* guidance,
                                   const KeyphraseDfa& dfa, std::span<const TokenId> prompt,
                                   Rng& rng, const RolloutOptions& options,
                                   std::string constraint_id = {}) {
  GuidedTrajectory traj;
  traj.constraint_id = std::move(constraint_id);
  traj.prompt.assign(prompt.begin(), prompt.end());
  traj.guided = guidance != nullptr;
  const std::size_t horizon = options.horizon;
  if (guidance && guidance->horizon() != horizon)
    throw Error(ErrorCode::InvalidArgument, "rollout horizon differs from guidance horizon");

  std::optional<GuidanceSession> session;
  if (guidance) session = open_session(*guidance, prompt, traj.constraint_id);
  DfaState state = dfa.start();
  if (dfa.is_accepting(state)) traj.accept_step = 0;

  for (std::size_t t = 0; t < horizon; ++t) {
    const auto log_pi = policy.log_probs(prompt, traj.tokens);
    std::optional<GuidedStepDistribution> step;
    if (session && !session->fallback && !traj.accept_step) {
      step = try_guided_next_distribution(log_pi, gamma_all_tokens(*session, *guidance),
                                          options.log_mass_floor);
      if (!step) {
        session->fallback = true;
        traj.fallback = true;
        traj.fallback_step = t;
      }
    }
    if (!step) step = unguided_step(log_pi);
    if (options.observer) options.observer(t, log_pi, *step);

    const auto x = static_cast<TokenId>(rng.categorical_log(step->log_mu));
    traj.tokens.push_back(x);
    traj.log_pi_old.push_back(log_pi[x]);
    traj.log_mu.push_back(step->log_mu[x]);
    traj.log_w.push_back(step->log_w[x]);
    traj.log_weight += step->log_w[x];
    if (session) advance_in_place(*session, *guidance, x);
    state = dfa.step(state, x);
    if (!traj.accept_step && dfa.is_accepting(state)) traj.accept_step = traj.tokens.size();
    if (x == dfa.eos()) break;
  }
  return traj;
}

}  // namespace ctrlr

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "ctrlr/error.hpp"
#include "ctrlr/guidance.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/random.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"

namespace ctrlr {

enum class BaselineMode { CtrlR, Unguided, RewardShaping };

inline std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::CtrlR: return "ctrl_r";
    case BaselineMode::Unguided: return "unguided";
    case BaselineMode::RewardShaping: return "reward_shaping";
  }
  return "?";
}

inline BaselineMode parse_baseline_mode(const std::string& s) {
  if (s == "ctrl_r") return BaselineMode::CtrlR;
  if (s == "unguided") return BaselineMode::Unguided;
  if (s == "reward_shaping") return BaselineMode::RewardShaping;
  throw Error(ErrorCode::InvalidArgument, "unknown baseline mode '" + s + "'");
}

struct TrainConfig {
  double beta = 0.2;
  double eps_low = 0.20;
  double eps_high = 0.28;
  std::size_t group_size = 8;
  std::size_t horizon = 16;
  std::size_t iterations = 100;
  std::size_t prompts_per_batch = 8;
  std::size_t grad_steps = 1;
  double lr = 0.05;
  std::uint64_t seed = 0;
  BaselineMode mode = BaselineMode::CtrlR;
  bool dynamic_group_filter = true;
  std::size_t max_resample_rounds = 3;
  double log_w_clamp = 60.0;
  double log_mass_floor = kDefaultLogMassFloor;
  std::size_t workers = 1;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta must lie in [0, 1]");
    if (!(eps_low > 0.0 && eps_high > 0.0)) throw Error(ErrorCode::InvalidArgument, "clip bounds must be > 0");
    if (group_size < 2) throw Error(ErrorCode::InvalidArgument, "group size must be >= 2");
    if (horizon == 0) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
    if (grad_steps == 0 || grad_steps > 4) throw Error(ErrorCode::InvalidArgument, "grad steps must be in 1..4");
    if (workers == 0) throw Error(ErrorCode::InvalidArgument, "workers must be >= 1");
  }
};

// Group-standardized rewards with the population standard deviation; all zero
// when the group variance is below 1e-8.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw Error(ErrorCode::InvalidArgument, "group needs >= 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> out(rewards.size(), 0.0);
  if (var < 1e-8) return out;
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

// R' = R + F, F = 1 iff the answer is correct and the target pattern occurs.
inline double shaped_reward(double base, bool pattern_matched) {
  return base + ((base > 0.0 && pattern_matched) ? 1.0 : 0.0);
}

// W = w^beta evaluated as exp(beta * clamp(log w)).
inline double power_weight(double log_w, double beta, double log_w_clamp = 60.0) {
  return std::exp(beta * std::clamp(log_w, -log_w_clamp, log_w_clamp));
}

enum class WeightRegime { Low, Mid, High };

// Low: w < 1e-6, Mid: 1e-6 <= w <= 1e-1, High: w > 1e-1. The closed
// middle interval absorbs rounding at its endpoints.
inline WeightRegime classify_weight(double log_w) {
  constexpr double slack = 1e-12;
  if (log_w < std::log(1e-6) - slack) return WeightRegime::Low;
  if (log_w <= std::log(1e-1) + slack) return WeightRegime::Mid;
  return WeightRegime::High;
}

struct GroupBatch {
  Prompt prompt;
  std::vector<GuidedTrajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

struct LossResult {
  double loss = 0.0;
  PolicyGradient grad;
  std::size_t tokens = 0;
  std::size_t clipped_tokens = 0;
};

// Power-scaled clipped surrogate over every trajectory in `batches`:
//   loss = mean_i [ -W_i * mean_t min(r_t A_i, clip(r_t, 1 - eps_low, 1 + eps_high) A_i) ]
// with r_t = pi_theta / pi_old at the recorded tokens. The gradient is zero
// on tokens where the clipped branch is strictly smaller.
template <typename Batches>
LossResult ctrlr_loss_and_grad(const Batches& batches, const ContextPolicy& policy,
                               const TrainConfig& config) {
  LossResult out{0.0, PolicyGradient(policy.vocab_size()), 0, 0};
  std::size_t n_traj = 0;
  for (const GroupBatch& b : batches) n_traj += b.trajectories.size();
  if (n_traj == 0) return out;
  const double inv_traj = 1.0 / static_cast<double>(n_traj);

  std::vector<double> grad_row(policy.vocab_size());
  for (const GroupBatch& b : batches) {
    for (std::size_t i = 0; i < b.trajectories.size(); ++i) {
      const GuidedTrajectory& traj = b.trajectories[i];
      const std::size_t n = traj.tokens.size();
      if (n == 0) continue;
      const double A = b.advantages[i];
      const double W = power_weight(traj.log_weight, config.beta, config.log_w_clamp);
      const double coef = -W / static_cast<double>(n) * inv_traj;
      double sum = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const std::span<const TokenId> prefix(traj.tokens.data(), t);
        const ContextId c = policy.context_id(traj.prompt, prefix);
        const auto lp = policy.log_probs_at(c);
        const double r = std::exp(lp[traj.tokens[t]] - traj.log_pi_old[t]);
        const double unclipped = r * A;
        const double clipped = std::clamp(r, 1.0 - config.eps_low, 1.0 + config.eps_high) * A;
        if (unclipped <= clipped) {
          sum += unclipped;
          if (A != 0.0) {
            for (std::size_t v = 0; v < grad_row.size(); ++v)
              grad_row[v] = (v == traj.tokens[t] ? 1.0 : 0.0) - std::exp(lp[v]);
            out.grad.add_row(c, coef * A * r, grad_row);
          }
        } else {
          sum += clipped;
          ++out.clipped_tokens;
        }
      }
      out.tokens += n;
      out.loss += -W * (sum / static_cast<double>(n));
    }
  }
  out.loss *= inv_traj;
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::NonFiniteLoss, "loss is not finite");
  return out;
}

// Per-constraint guidance, built once per (HMM, constraint, horizon).
struct ConstraintSet {
  std::vector<KeyphraseConstraint> constraints;
  std::vector<std::shared_ptr<const KeyphraseDfa>> dfas;
  std::vector<std::shared_ptr<const GuidanceTables>> tables;  // empty without an HMM

  static ConstraintSet build(std::vector<KeyphraseConstraint> constraints, const Vocab& vocab,
                             std::shared_ptr<const Hmm> hmm, std::size_t horizon) {
    if (constraints.empty()) throw Error(ErrorCode::EmptyConstraint, "empty constraint set");
    ConstraintSet set;
    set.constraints = std::move(constraints);
    for (const auto& c : set.constraints) {
      auto dfa = std::make_shared<const KeyphraseDfa>(build_keyphrase_dfa(c, vocab));
      if (hmm) set.tables.push_back(std::make_shared<const GuidanceTables>(hmm, dfa, horizon));
      set.dfas.push_back(std::move(dfa));
    }
    return set;
  }
};

struct IterationMetrics {
  std::size_t iteration = 0;
  double mean_reward = 0.0;       // base task reward in [-1, 1]
  double mean_train_reward = 0.0; // reward fed to the advantages
  double accuracy = 0.0;
  std::vector<double> satisfaction_rate;  // per constraint; NaN when unsampled
  std::size_t regime_low = 0, regime_mid = 0, regime_high = 0;
  double fallback_rate = 0.0;
  double loss = 0.0;
  std::size_t trajectories = 0;
  std::size_t resampled_groups = 0;
};

struct TrainingState {
  ToyTask task;
  ConstraintSet constraints;
  ContextPolicy policy;
  ContextPolicy proximal;
  std::size_t iteration = 0;
};

namespace detail {

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

// Rolls out one group for `prompt` under constraint `ci`; RNG streams are keyed
// by (seed, iteration, slot, group index, resample round).
inline GroupBatch rollout_group(const TrainingState& state, const TrainConfig& config,
                                const Prompt& prompt, std::size_t slot, std::size_t ci,
                                std::size_t round) {
  const bool guided = config.mode == BaselineMode::CtrlR;
  if (guided && state.constraints.tables.empty())
    throw Error(ErrorCode::InvalidArgument, "ctrl_r mode needs guidance tables");
  const GuidanceTables* tables = guided ? state.constraints.tables[ci].get() : nullptr;
  const KeyphraseDfa& dfa = *state.constraints.dfas[ci];
  RolloutOptions opt;
  opt.horizon = config.horizon;
  opt.log_mass_floor = config.log_mass_floor;

  GroupBatch batch;
  batch.prompt = prompt;
  batch.trajectories.resize(config.group_size);
  detail::parallel_for(config.group_size, config.workers, [&](std::size_t g) {
    Rng rng(derive_seed(config.seed, {state.iteration, slot, g, round}));
    auto traj = sample_trajectory(state.proximal, tables, dfa, prompt.tokens, rng, opt,
                                  state.constraints.constraints[ci].id);
    traj.prompt_id = prompt.id;
    traj.iteration = state.iteration;
    traj.group_index = g;
    const double base = evaluate_reward(state.task, prompt.tokens, traj.tokens);
    traj.correct = base > 0.0;
    traj.reward = config.mode == BaselineMode::RewardShaping ? shaped_reward(base, traj.satisfied()) : base;
    batch.trajectories[g] = std::move(traj);
  });
  for (const auto& t : batch.trajectories) batch.rewards.push_back(t.reward);
  batch.advantages = group_advantages(batch.rewards);
  return batch;
}

inline bool zero_variance(const std::vector<double>& advantages) {
  return std::all_of(advantages.begin(), advantages.end(), [](double a) { return a == 0.0; });
}

// One global batch: rollouts from the proximal snapshot, `grad_steps` updates
// of the target policy, then proximal <- target.
inline IterationMetrics run_iteration(TrainingState& state, const TrainConfig& config,
                                      std::vector<GroupBatch>* batches_out = nullptr) {
  config.validate();
  const std::size_t C = state.constraints.constraints.size();
  std::vector<GroupBatch> batches;
  IterationMetrics m;
  m.iteration = state.iteration;
  for (std::size_t slot = 0; slot < config.prompts_per_batch; ++slot) {
    Rng rng(derive_seed(config.seed, {state.iteration, slot, 0x70726f6dULL}));
    const Prompt prompt = generate_prompt(state.task, rng);
    const std::size_t ci = sample_constraint(C, rng);
    GroupBatch batch = rollout_group(state, config, prompt, slot, ci, 0);
    for (std::size_t round = 1; config.dynamic_group_filter && round <= config.max_resample_rounds &&
                                zero_variance(batch.advantages);
         ++round) {
      batch = rollout_group(state, config, prompt, slot, ci, round);
      ++m.resampled_groups;
    }
    batches.push_back(std::move(batch));
  }

  std::vector<std::size_t> per_c(C, 0), sat_c(C, 0);
  std::size_t fallbacks = 0;
  for (const auto& b : batches)
    for (const auto& t : b.trajectories) {
      ++m.trajectories;
      m.mean_reward += t.correct ? 1.0 : -1.0;
      m.mean_train_reward += t.reward;
      m.accuracy += t.correct ? 1.0 : 0.0;
      fallbacks += t.fallback ? 1 : 0;
      std::size_t ci = 0;
      while (ci < C && state.constraints.constraints[ci].id != t.constraint_id) ++ci;
      if (ci < C) {
        ++per_c[ci];
        sat_c[ci] += t.satisfied() ? 1 : 0;
      }
      switch (classify_weight(t.log_weight)) {
        case WeightRegime::Low: ++m.regime_low; break;
        case WeightRegime::Mid: ++m.regime_mid; break;
        case WeightRegime::High: ++m.regime_high; break;
      }
    }
  if (m.trajectories) {
    const double n = static_cast<double>(m.trajectories);
    m.mean_reward /= n;
    m.mean_train_reward /= n;
    m.accuracy /= n;
    m.fallback_rate = static_cast<double>(fallbacks) / n;
  }
  for (std::size_t ci = 0; ci < C; ++ci)
    m.satisfaction_rate.push_back(per_c[ci] ? static_cast<double>(sat_c[ci]) / static_cast<double>(per_c[ci])
                                            : std::nan(""));

  for (std::size_t step = 0; step < config.grad_steps; ++step) {
    auto result = ctrlr_loss_and_grad(batches, state.policy, config);
    if (step == 0) m.loss = result.loss;
    apply_update(state.policy, result.grad, config.lr);
  }
  state.proximal = state.policy;
  ++state.iteration;
  if (batches_out) *batches_out = std::move(batches);
  return m;
}

}  // namespace ctrlr

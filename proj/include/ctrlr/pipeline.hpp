#pragma once

// End-to-end training run: reference policy, HMM distillation (skipped when a
// checkpoint already exists), guidance tables, training iterations and final
// evaluation, with optional artifacts written to an output directory.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctrlr/hmm.hpp"
#include "ctrlr/io.hpp"
#include "ctrlr/optimizer.hpp"
#include "ctrlr/toyworld.hpp"

namespace ctrlr {

struct DistillOptions {
  std::size_t states = 16;
  std::size_t corpus_size = 2000;
  std::size_t length = 16;
  std::size_t max_iters = 30;
  double tol = 1e-6;
};

struct RunConfig {
  ToyTaskSpec task;
  std::optional<std::string> constraints_path;  // default: key phrase plus distractors
  std::optional<std::string> hmm_path;          // loaded if present, else distilled and saved
  TrainConfig train;
  InitialPolicyOptions initial_policy;
  DistillOptions distill;
  std::size_t eval_rollouts = 2000;
  std::size_t checkpoint_every = 0;  // 0: initial and final checkpoints only
  bool dump_trajectories = true;
};

// Independent streams for each stage, all derived from the one run seed.
struct RunSeeds {
  std::uint64_t base = 0;
  std::uint64_t initial_policy() const { return derive_seed(base, {1}); }
  std::uint64_t corpus() const { return derive_seed(base, {2}); }
  std::uint64_t em() const { return derive_seed(base, {3}); }
  std::uint64_t eval() const { return derive_seed(base, {4}); }
};

inline io::json run_config_to_json(const RunConfig& c) {
  io::json j = {{"format", "ctrlr-run-config"},
                {"version", io::kFormatVersion},
                {"task", io::task_spec_to_json(c.task)},
                {"train", io::train_config_to_json(c.train)},
                {"initial_policy", io::initial_policy_options_to_json(c.initial_policy)},
                {"distill",
                 {{"states", c.distill.states},
                  {"corpus_size", c.distill.corpus_size},
                  {"length", c.distill.length},
                  {"max_iters", c.distill.max_iters},
                  {"tol", c.distill.tol}}},
                {"eval_rollouts", c.eval_rollouts},
                {"checkpoint_every", c.checkpoint_every},
                {"dump_trajectories", c.dump_trajectories}};
  if (c.constraints_path) j["constraints"] = *c.constraints_path;
  if (c.hmm_path) j["hmm"] = *c.hmm_path;
  return j;
}

// Accepts a run config or a run manifest (whose "config" member is used).
// Relative paths inside the file resolve against `base_dir`.
inline RunConfig run_config_from_json(io::json j, const std::filesystem::path& base_dir = {}) {
  if (j.is_object() && j.value("format", "") == "ctrlr-manifest") j = j.at("config");
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "run config must be a JSON object");
  RunConfig c;
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return (path.is_relative() && !base_dir.empty() ? base_dir / path : path).string();
  };
  if (j.contains("task")) {
    const auto& t = j.at("task");
    c.task = t.is_string() ? io::task_spec_from_json(io::load_json(resolve(t.get<std::string>())))
                           : io::task_spec_from_json(t);
  }
  if (j.contains("constraints")) c.constraints_path = resolve(j.at("constraints").get<std::string>());
  if (j.contains("hmm")) c.hmm_path = resolve(j.at("hmm").get<std::string>());
  if (j.contains("train")) c.train = io::train_config_from_json(j.at("train"));
  if (j.contains("initial_policy")) c.initial_policy = io::initial_policy_options_from_json(j.at("initial_policy"));
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    c.distill.states = d.value("states", c.distill.states);
    c.distill.corpus_size = d.value("corpus_size", c.distill.corpus_size);
    c.distill.length = d.value("length", c.distill.length);
    c.distill.max_iters = d.value("max_iters", c.distill.max_iters);
    c.distill.tol = d.value("tol", c.distill.tol);
  }
  c.eval_rollouts = j.value("eval_rollouts", c.eval_rollouts);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.dump_trajectories = j.value("dump_trajectories", c.dump_trajectories);
  return c;
}

// CTRLR_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& c) {
  if (const char* s = std::getenv("CTRLR_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw Error(ErrorCode::InvalidArgument, "CTRLR_SEED must be an unsigned integer");
    c.train.seed = v;
  }
}

struct RunResult {
  double initial_key_rate = 0.0;
  EvalSummary initial_eval;
  EvalSummary final_eval;
  std::vector<IterationMetrics> metrics;
  std::vector<double> em_log_likelihood;
  bool distilled = false;
};

struct RunHooks {
  std::function<void(const std::string&)> log;
  std::function<void(const IterationMetrics&)> on_iteration;
};

inline std::shared_ptr<const Hmm> distill_hmm(const ToyTask& task, const ContextPolicy& reference,
                                              const DistillOptions& d, const RunSeeds& seeds,
                                              std::vector<double>* log_likelihood = nullptr) {
  const auto corpus = distillation_corpus(task, reference, d.corpus_size, d.length, seeds.corpus());
  BaumWelchOptions bw;
  bw.seed = seeds.em();
  bw.max_iters = d.max_iters;
  bw.tol = d.tol;
  auto fit = fit_baum_welch(corpus, d.states, task.vocab.size(), bw);
  if (log_likelihood) *log_likelihood = fit.log_likelihood;
  return std::make_shared<const Hmm>(std::move(fit.model));
}

// Runs the whole pipeline. With a nonempty `out_dir`, writes config.json,
// manifest.json, metrics.csv, eval.json, policy checkpoints and (optionally)
// trajectories.jsonl there.
inline RunResult run_training(const RunConfig& config, const std::string& out_dir = {},
                              const RunHooks& hooks = {}) {
  namespace fs = std::filesystem;
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };
  config.train.validate();
  const std::string started = io::utc_timestamp();
  const RunSeeds seeds{config.train.seed};
  const ToyTask task = make_toy_task(config.task);
  const auto constraints = config.constraints_path ? io::load_constraints(*config.constraints_path, task.vocab)
                                                   : task_constraints(task);
  const bool files = !out_dir.empty();
  if (files) fs::create_directories(fs::path(out_dir) / "checkpoints");
  auto out = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  RunResult result;
  InitialPolicyOptions init_opt = config.initial_policy;
  init_opt.horizon = config.train.horizon;
  const auto init = initial_policy_params(task, seeds.initial_policy(), init_opt);
  result.initial_key_rate = init.key_rate;
  log("initial key-phrase rate " + io::format_double(init.key_rate) + " after " + std::to_string(init.draws) +
      " draw(s)");

  std::shared_ptr<const Hmm> hmm;
  std::string hmm_file;
  if (config.train.mode == BaselineMode::CtrlR) {
    hmm_file = config.hmm_path ? *config.hmm_path : (files ? out("hmm.json") : std::string{});
    if (!hmm_file.empty() && fs::exists(hmm_file)) {
      hmm = std::make_shared<const Hmm>(io::hmm_from_json(io::load_json(hmm_file)));
      if (hmm->vocab_size != task.vocab.size())
        throw Error(ErrorCode::InvalidArgument, "HMM vocabulary size does not match the task");
      log("loaded HMM from " + hmm_file);
    } else {
      hmm = distill_hmm(task, init.policy, config.distill, seeds, &result.em_log_likelihood);
      result.distilled = true;
      log("distilled HMM with " + std::to_string(hmm->states) + " states, final log-likelihood " +
          io::format_double(result.em_log_likelihood.back()));
      if (!hmm_file.empty()) io::save_json(hmm_file, io::hmm_to_json(*hmm));
    }
  }

  TrainingState state{task, ConstraintSet::build(constraints, task.vocab, hmm, config.train.horizon), init.policy,
                      init.policy, 0};
  result.initial_eval = evaluate_policy(task, init.policy, config.eval_rollouts, config.train.horizon, seeds.eval());

  std::optional<io::TrajectoryWriter> dump;
  std::ofstream csv;
  if (files) {
    io::save_json(out("config.json"), run_config_to_json(config));
    io::save_json(out("policy_init.json"), io::policy_to_json(init.policy));
    if (config.dump_trajectories) dump.emplace(out("trajectories.jsonl"), &task.vocab);
    csv.open(out("metrics.csv"), std::ios::binary);
    if (!csv) throw Error(ErrorCode::Io, "cannot write metrics.csv");
    csv << io::metrics_header(constraints);
  }

  for (std::size_t it = 0; it < config.train.iterations; ++it) {
    std::vector<GroupBatch> batches;
    auto m = run_iteration(state, config.train, dump ? &batches : nullptr);
    if (dump)
      for (const auto& b : batches)
        for (const auto& t : b.trajectories) dump->write(t);
    if (files) csv << io::metrics_row(m);
    if (hooks.on_iteration) hooks.on_iteration(m);
    if (files && config.checkpoint_every && (it + 1) % config.checkpoint_every == 0)
      io::save_json(out("checkpoints/policy_iter_" + std::to_string(it + 1) + ".json"),
                    io::policy_to_json(state.policy));
    result.metrics.push_back(std::move(m));
  }
  result.final_eval = evaluate_policy(task, state.policy, config.eval_rollouts, config.train.horizon, seeds.eval());
  log("final eval reward " + io::format_double(result.final_eval.mean_reward) + ", key-phrase rate " +
      io::format_double(result.final_eval.key_rate));

  if (files) {
    csv.close();
    if (dump) dump->flush();
    io::save_json(out("policy_final.json"), io::policy_to_json(state.policy));
    auto summary = [](const EvalSummary& e) {
      return io::json{{"mean_reward", e.mean_reward}, {"accuracy", e.accuracy}, {"key_rate", e.key_rate}};
    };
    io::save_json(out("eval.json"), {{"initial", summary(result.initial_eval)},
                                     {"final", summary(result.final_eval)},
                                     {"initial_key_rate", result.initial_key_rate}});
    io::json artifacts = {{"config", "config.json"},       {"metrics", "metrics.csv"},
                          {"eval", "eval.json"},           {"policy_init", "policy_init.json"},
                          {"policy_final", "policy_final.json"}};
    if (dump) artifacts["trajectories"] = "trajectories.jsonl";
    if (!hmm_file.empty()) artifacts["hmm"] = hmm_file;
    RunConfig resolved = config;
    if (!hmm_file.empty()) resolved.hmm_path = fs::absolute(hmm_file).string();
    io::save_json(out("manifest.json"),
                  {{"format", "ctrlr-manifest"},
                   {"version", io::kFormatVersion},
                   {"code_version", io::kCodeVersion},
                   {"config", run_config_to_json(resolved)},
                   {"seeds",
                    {{"run", seeds.base},
                     {"initial_policy", seeds.initial_policy()},
                     {"corpus", seeds.corpus()},
                     {"em", seeds.em()},
                     {"eval", seeds.eval()}}},
                   {"artifacts", artifacts},
                   {"hmm_distilled", result.distilled},
                   {"started_at", started},
                   {"finished_at", io::utc_timestamp()}});
  }
  return result;
}

}  // namespace ctrlr

// Command-line front end: distill-hmm, build-dfa, sample, train, analyze,
// oracle-check.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlr/analysis.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/io.hpp"
#include "ctrlr/oracle_suites.hpp"
#include "ctrlr/pipeline.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"

namespace fs = std::filesystem;
using namespace ctrlr;

namespace {

ToyTaskSpec load_task_spec(const std::string& path) {
  return path.empty() ? ToyTaskSpec{} : io::task_spec_from_json(io::load_json(path));
}

std::vector<TokenSeq> read_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path + "'");
  std::vector<TokenSeq> corpus;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) corpus.push_back(tokenize(line, vocab));
  return corpus;
}

struct DistillArgs {
  std::string corpus, task, out, write_corpus;
  std::size_t states = 16, iters = 200, corpus_size = 2000, length = 16, order = 3, table_size = 4096;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

int run_distill(const DistillArgs& a) {
  const ToyTask task = make_toy_task(load_task_spec(a.task));
  std::vector<TokenSeq> corpus;
  if (!a.corpus.empty()) {
    corpus = read_corpus(a.corpus, task.vocab);
  } else {
    InitialPolicyOptions opt;
    opt.order = a.order;
    opt.table_size = a.table_size;
    opt.horizon = a.length;
    const RunSeeds seeds{a.seed};
    const auto init = initial_policy_params(task, seeds.initial_policy(), opt);
    corpus = distillation_corpus(task, init.policy, a.corpus_size, a.length, seeds.corpus());
    std::printf("generated %zu sequences from the reference policy\n", corpus.size());
  }
  if (!a.write_corpus.empty()) {
    std::ostringstream ss;
    for (const auto& s : corpus) ss << detokenize(s, task.vocab) << '\n';
    io::write_file(a.write_corpus, ss.str());
  }
  BaumWelchOptions bw;
  bw.seed = RunSeeds{a.seed}.em();
  bw.max_iters = a.iters;
  bw.tol = a.tol;
  const auto fit = fit_baum_welch(corpus, a.states, task.vocab.size(), bw);
  bool monotone = true;
  for (std::size_t i = 0; i < fit.log_likelihood.size(); ++i) {
    std::printf("iter %zu log-likelihood %.10f\n", i, fit.log_likelihood[i]);
    if (i > 0 && fit.log_likelihood[i] < fit.log_likelihood[i - 1] - 1e-8) monotone = false;
  }
  std::printf("%s after %zu iterations; monotone: %s\n", fit.converged ? "converged" : "stopped", fit.iterations,
              monotone ? "yes" : "no");
  if (!a.out.empty()) io::save_json(a.out, io::hmm_to_json(fit.model));
  return monotone ? 0 : 2;
}

int run_build_dfa(const std::string& constraints, const std::string& task_path, const std::string& out) {
  const ToyTask task = make_toy_task(load_task_spec(task_path));
  const auto cs = constraints.empty() ? task_constraints(task) : io::load_constraints(constraints, task.vocab);
  io::json all = io::json::array();
  for (const auto& c : cs) {
    const auto dfa = build_keyphrase_dfa(c, task.vocab);
    std::printf("%s: %zu states\n", c.id.c_str(), dfa.state_count());
    all.push_back(io::dfa_to_json(dfa, c, task.vocab));
  }
  if (!out.empty()) io::save_json(out, all);
  return 0;
}

struct SampleArgs {
  std::string policy, hmm, constraints, task, out;
  std::size_t n = 0, horizon = 16;
  std::uint64_t seed = 0;
  bool unguided = false;
  double log_floor = kDefaultLogMassFloor;
};

int run_sample(const SampleArgs& a) {
  const ToyTask task = make_toy_task(load_task_spec(a.task));
  const auto policy = io::policy_from_json(io::load_json(a.policy));
  if (policy.vocab_size() != task.vocab.size())
    throw Error(ErrorCode::InvalidArgument, "policy vocabulary size does not match the task");
  std::shared_ptr<const Hmm> hmm;
  if (!a.unguided) hmm = std::make_shared<const Hmm>(io::hmm_from_json(io::load_json(a.hmm)));
  const auto cs = a.constraints.empty() ? task_constraints(task) : io::load_constraints(a.constraints, task.vocab);
  const auto set = ConstraintSet::build(cs, task.vocab, hmm, a.horizon);
  io::TrajectoryWriter writer(a.out, &task.vocab);
  RolloutOptions opt;
  opt.horizon = a.horizon;
  opt.log_mass_floor = a.log_floor;
  std::size_t satisfied = 0, correct = 0;
  for (std::size_t i = 0; i < a.n; ++i) {
    Rng rng(derive_seed(a.seed, {i}));
    const Prompt prompt = generate_prompt(task, rng);
    const std::size_t ci = sample_constraint(cs.size(), rng);
    auto t = sample_trajectory(policy, hmm ? set.tables[ci].get() : nullptr, *set.dfas[ci], prompt.tokens, rng, opt,
                               cs[ci].id);
    t.prompt_id = prompt.id;
    t.group_index = i;
    t.reward = evaluate_reward(task, prompt.tokens, t.tokens);
    t.correct = t.reward > 0;
    satisfied += t.satisfied() ? 1 : 0;
    correct += t.correct ? 1 : 0;
    writer.write(t);
  }
  writer.flush();
  std::printf("wrote %zu trajectories to %s (satisfied %zu, correct %zu)\n", a.n, a.out.c_str(), satisfied, correct);
  return 0;
}

struct TrainArgs {
  std::string config, out_dir, baseline;
  double beta = -1.0;
  long long iterations = -1, seed = -1, ctx_order = -1, table_size = -1;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = run_config_from_json(io::load_json(a.config), fs::path(a.config).parent_path());
  if (!a.baseline.empty()) cfg.train.mode = parse_baseline_mode(a.baseline);
  if (a.beta >= 0.0) cfg.train.beta = a.beta;
  if (a.iterations >= 0) cfg.train.iterations = static_cast<std::size_t>(a.iterations);
  if (a.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.ctx_order >= 0) cfg.initial_policy.order = static_cast<std::size_t>(a.ctx_order);
  if (a.table_size > 0) cfg.initial_policy.table_size = static_cast<std::size_t>(a.table_size);
  apply_seed_override(cfg);
  cfg.train.validate();
  RunHooks hooks;
  hooks.log = [](const std::string& s) { std::printf("%s\n", s.c_str()); };
  if (!a.quiet)
    hooks.on_iteration = [](const IterationMetrics& m) {
      std::printf("iter %4zu  reward %+.3f  acc %.3f  w[low/mid/high] %zu/%zu/%zu  fallback %.3f  loss %+.5f\n",
                  m.iteration, m.mean_reward, m.accuracy, m.regime_low, m.regime_mid, m.regime_high,
                  m.fallback_rate, m.loss);
      std::fflush(stdout);
    };
  std::printf("mode %s, beta %g, seed %llu, %zu iterations\n", to_string(cfg.train.mode).c_str(), cfg.train.beta,
              static_cast<unsigned long long>(cfg.train.seed), cfg.train.iterations);
  const auto result = run_training(cfg, a.out_dir, hooks);
  std::printf("eval mean reward: initial %+.4f, final %+.4f\n", result.initial_eval.mean_reward,
              result.final_eval.mean_reward);
  return 0;
}

struct AnalyzeArgs {
  std::string input, out_dir, constraints, task;
  std::vector<std::string> patterns;
};

int run_analyze(const AnalyzeArgs& a) {
  std::string dump = a.input, task_path = a.task, constraints_path = a.constraints;
  ToyTaskSpec spec = load_task_spec(task_path);
  if (fs::is_directory(a.input)) {
    dump = (fs::path(a.input) / "trajectories.jsonl").string();
    const auto cfg_path = fs::path(a.input) / "config.json";
    if (task_path.empty() && fs::exists(cfg_path)) {
      const auto cfg = run_config_from_json(io::load_json(cfg_path.string()), a.input);
      spec = cfg.task;
      if (constraints_path.empty() && cfg.constraints_path) constraints_path = *cfg.constraints_path;
    }
  }
  if (!fs::exists(dump)) throw Error(ErrorCode::Io, "no trajectory dump at '" + dump + "'");
  const ToyTask task = make_toy_task(spec);
  const auto cs = constraints_path.empty() ? task_constraints(task) : io::load_constraints(constraints_path, task.vocab);
  std::vector<analysis::Pattern> patterns;
  for (const auto& p : a.patterns) {
    const auto eq = p.find('=');
    const std::string name = eq == std::string::npos ? p : p.substr(0, eq);
    const std::string text = eq == std::string::npos ? p : p.substr(eq + 1);
    patterns.push_back({name, tokenize(text, task.vocab)});
  }
  const auto ts = io::read_trajectories(dump);
  const auto report = analysis::build_report(ts, cs, patterns);
  analysis::write_report(report, a.out_dir);
  std::printf("analyzed %zu trajectories; wrote", ts.size());
  for (const auto& [name, content] : report.files) std::printf(" %s", name.c_str());
  std::printf(" to %s\n", a.out_dir.c_str());
  for (const auto& r : analysis::accuracy_by_regime(ts))
    std::printf("  regime %-4s count %6zu  mean accuracy %s\n", analysis::to_string(r.regime).c_str(), r.count,
                io::format_double(r.mean_accuracy()).c_str());
  return 0;
}

int run_oracle_check(const std::string& suite, std::uint64_t seed) {
  std::vector<std::string> names = suite == "all" ? std::vector<std::string>{"gamma", "unbiasedness", "conditional", "dfa"}
                                                  : std::vector<std::string>{suite};
  bool ok = true;
  for (const auto& n : names) {
    const auto r = suites::run_suite(n, seed);
    std::printf("%-13s cases %4zu  max error %.3e  tolerance %.1e  %.2fs  %s\n", r.name.c_str(), r.cases, r.max_error,
                r.tolerance, r.seconds, r.passed() ? "PASS" : "FAIL");
    for (const auto& note : r.notes) std::printf("  %s\n", note.c_str());
    ok = ok && r.passed();
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided-rollout policy optimization with HMM x DFA lookahead"};
  app.require_subcommand(1);

  DistillArgs da;
  auto* distill = app.add_subcommand("distill-hmm", "Fit an HMM to a token corpus with Baum-Welch");
  distill->add_option("--corpus", da.corpus, "Corpus file, one whitespace-tokenized sequence per line (default: sample the reference policy)");
  distill->add_option("--task", da.task, "Task spec JSON (default: built-in needle task)");
  distill->add_option("--states", da.states, "Number of latent states")->capture_default_str();
  distill->add_option("--iters", da.iters, "Maximum EM iterations")->capture_default_str();
  distill->add_option("--tol", da.tol, "Relative log-likelihood tolerance")->capture_default_str();
  distill->add_option("--corpus-size", da.corpus_size, "Generated sequences")->capture_default_str();
  distill->add_option("--length", da.length, "Generated continuation length")->capture_default_str();
  distill->add_option("--ctx-order", da.order, "Reference policy context order")->capture_default_str();
  distill->add_option("--table-size", da.table_size, "Reference policy table size")->capture_default_str();
  distill->add_option("--seed", da.seed, "Seed")->capture_default_str();
  distill->add_option("--write-corpus", da.write_corpus, "Also save the corpus used");
  distill->add_option("--out", da.out, "HMM checkpoint path");

  std::string dfa_constraints, dfa_task, dfa_out;
  auto* build_dfa = app.add_subcommand("build-dfa", "Compile keyphrase constraints to automata");
  build_dfa->add_option("--constraints", dfa_constraints, "Constraint file (default: the task's key phrase and distractors)");
  build_dfa->add_option("--task", dfa_task, "Task spec JSON");
  build_dfa->add_option("--out", dfa_out, "Output JSON");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Sample guided trajectories to a JSON-lines dump");
  sample->add_option("--policy", sa.policy, "Policy checkpoint")->required();
  sample->add_option("--hmm", sa.hmm, "HMM checkpoint (required unless --unguided)");
  sample->add_option("--constraints", sa.constraints, "Constraint file");
  sample->add_option("--task", sa.task, "Task spec JSON");
  sample->add_option("--n", sa.n, "Number of trajectories")->required();
  sample->add_option("--out", sa.out, "Output dump")->required();
  sample->add_option("--horizon", sa.horizon, "Horizon T")->capture_default_str();
  sample->add_option("--seed", sa.seed, "Seed")->capture_default_str();
  sample->add_option("--log-mass-floor", sa.log_floor, "Fallback threshold on log Z")->capture_default_str();
  sample->add_flag("--unguided", sa.unguided, "Sample from the policy alone");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run the training pipeline (env CTRLR_SEED overrides the seed)");
  train->add_option("--config", ta.config, "Run config or manifest JSON");
  train->add_option("--out-dir", ta.out_dir, "Output directory")->required();
  train->add_option("--baseline", ta.baseline, "ctrl_r | unguided | reward_shaping");
  train->add_option("--beta", ta.beta, "Power-scaling exponent");
  train->add_option("--iterations", ta.iterations, "Iteration budget");
  train->add_option("--seed", ta.seed, "Run seed");
  train->add_option("--ctx-order", ta.ctx_order, "Policy context order");
  train->add_option("--table-size", ta.table_size, "Policy context table size");
  train->add_flag("--quiet", ta.quiet, "Only print the summary");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Keyphrase-usage and weight-regime reports from a dump");
  analyze->add_option("--input", aa.input, "Trajectory dump or training output directory")->required();
  analyze->add_option("--out-dir", aa.out_dir, "Report directory")->required();
  analyze->add_option("--constraints", aa.constraints, "Constraint file");
  analyze->add_option("--task", aa.task, "Task spec JSON");
  analyze->add_option("--pattern", aa.patterns, "Extra pattern to count, as name=token token ...");

  std::string suite = "all";
  std::uint64_t suite_seed = 1;
  auto* check = app.add_subcommand("oracle-check", "Cross-check against brute-force enumeration");
  check->add_option("--suite", suite, "gamma | unbiasedness | conditional | dfa | all")
      ->check(CLI::IsMember({"gamma", "unbiasedness", "conditional", "dfa", "all"}))
      ->capture_default_str();
  check->add_option("--seed", suite_seed, "Seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*distill) return run_distill(da);
    if (*build_dfa) return run_build_dfa(dfa_constraints, dfa_task, dfa_out);
    if (*sample) {
      if (!sa.unguided && sa.hmm.empty()) throw Error(ErrorCode::InvalidArgument, "--hmm is required for guided sampling");
      return run_sample(sa);
    }
    if (*train) return run_train(ta);
    if (*analyze) return run_analyze(aa);
    if (*check) return run_oracle_check(suite, suite_seed);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

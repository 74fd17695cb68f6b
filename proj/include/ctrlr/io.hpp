#pragma once

// JSON/CSV persistence: constraint files, task specs, checkpoints, trajectory
// dumps and metric tables. Log-probabilities of -inf are stored as null.

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlr/error.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/optimizer.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"

namespace ctrlr::io {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kCodeVersion = "ctrlr 0.1.0";

inline json log_value(double x) {
  if (x == kNegInf) return nullptr;
  if (x == kPosInf) return "inf";
  return x;
}

inline double log_value(const json& j) {
  if (j.is_null()) return kNegInf;
  if (j.is_string() && j.get<std::string>() == "inf") return kPosInf;
  return j.get<double>();
}

inline json log_array(const std::vector<double>& xs) {
  json a = json::array();
  for (double x : xs) a.push_back(log_value(x));
  return a;
}

inline std::vector<double> log_array(const json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(log_value(x));
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error(ErrorCode::Io, "write failed for '" + path + "'");
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, what + ": " + e.what());
  }
}

inline json load_json(const std::string& path) { return parse_json(read_file(path), path); }

inline void save_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline void expect_format(const json& j, const std::string& format) {
  if (!j.is_object() || j.value("format", "") != format)
    throw Error(ErrorCode::InvalidArgument, "expected a '" + format + "' document");
  if (j.value("version", 0) != kFormatVersion)
    throw Error(ErrorCode::InvalidArgument, "unsupported " + format + " version");
}

// ---- constraints -----------------------------------------------------------

// [{"id": "...", "phrases": ["let me verify", ...]}, ...]
inline std::vector<KeyphraseConstraint> constraints_from_json(const json& j, const Vocab& vocab) {
  if (!j.is_array()) throw Error(ErrorCode::InvalidArgument, "constraint file must be a JSON array");
  std::vector<KeyphraseConstraint> out;
  for (const auto& e : j) {
    std::vector<std::string> phrases = e.at("phrases").get<std::vector<std::string>>();
    out.push_back(make_constraint(e.at("id").get<std::string>(), phrases, vocab));
  }
  if (out.empty()) throw Error(ErrorCode::EmptyConstraint, "constraint file lists no constraints");
  return out;
}

inline json constraints_to_json(const std::vector<KeyphraseConstraint>& cs, const Vocab& vocab) {
  json a = json::array();
  for (const auto& c : cs) {
    json phrases = json::array();
    for (const auto& p : c.phrases) phrases.push_back(detokenize(p, vocab));
    a.push_back({{"id", c.id}, {"phrases", phrases}});
  }
  return a;
}

inline std::vector<KeyphraseConstraint> load_constraints(const std::string& path, const Vocab& vocab) {
  return constraints_from_json(load_json(path), vocab);
}

inline json dfa_to_json(const KeyphraseDfa& dfa, const KeyphraseConstraint& c, const Vocab& vocab) {
  json accept = json::array();
  for (DfaState s = 0; s < dfa.state_count(); ++s)
    if (dfa.is_accepting(s)) accept.push_back(s);
  json rows = json::array();
  for (DfaState s = 0; s < dfa.state_count(); ++s) {
    json row = json::array();
    for (TokenId v = 0; v < dfa.vocab_size(); ++v) row.push_back(dfa.step(s, v));
    rows.push_back(row);
  }
  return {{"format", "ctrlr-dfa"}, {"version", kFormatVersion}, {"constraint", c.id},
          {"phrases", constraints_to_json({c}, vocab)[0]["phrases"]},
          {"states", dfa.state_count()}, {"start", dfa.start()}, {"accepting", accept},
          {"transitions", rows}};
}

// ---- task spec -------------------------------------------------------------

inline json task_spec_to_json(const ToyTaskSpec& s) {
  return {{"questions", s.questions},       {"answers", s.answers},
          {"filler", s.filler},             {"key_phrase", s.key_phrase},
          {"distractor_phrases", s.distractor_phrases},
          {"answer_marker", s.answer_marker}, {"eos", s.eos},
          {"mode", to_string(s.mode)},      {"prompt_length", s.prompt_length}};
}

inline ToyTaskSpec task_spec_from_json(const json& j) {
  ToyTaskSpec s;
  s.questions = j.value("questions", s.questions);
  s.answers = j.value("answers", s.answers);
  s.filler = j.value("filler", s.filler);
  s.key_phrase = j.value("key_phrase", s.key_phrase);
  s.distractor_phrases = j.value("distractor_phrases", s.distractor_phrases);
  s.answer_marker = j.value("answer_marker", s.answer_marker);
  s.eos = j.value("eos", s.eos);
  s.mode = parse_task_mode(j.value("mode", to_string(s.mode)));
  s.prompt_length = j.value("prompt_length", s.prompt_length);
  return s;
}

// ---- checkpoints -----------------------------------------------------------

inline json hmm_to_json(const Hmm& m) {
  return {{"format", "ctrlr-hmm"},        {"version", kFormatVersion},
          {"states", m.states},           {"vocab_size", m.vocab_size},
          {"log_init", log_array(m.log_init)},
          {"log_trans", log_array(m.log_trans)},
          {"log_emit", log_array(m.log_emit)}};
}

inline Hmm hmm_from_json(const json& j) {
  expect_format(j, "ctrlr-hmm");
  Hmm m;
  m.states = j.at("states").get<std::size_t>();
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.log_init = log_array(j.at("log_init"));
  m.log_trans = log_array(j.at("log_trans"));
  m.log_emit = log_array(j.at("log_emit"));
  if (m.log_init.size() != m.states || m.log_trans.size() != m.states * m.states ||
      m.log_emit.size() != m.states * m.vocab_size)
    throw Error(ErrorCode::InvalidArgument, "HMM checkpoint table sizes do not match its shape");
  m.validate(1e-6);
  return m;
}

inline json policy_to_json(const ContextPolicy& p) {
  return {{"format", "ctrlr-policy"}, {"version", kFormatVersion}, {"order", p.order()},
          {"table_size", p.table_size()}, {"vocab_size", p.vocab_size()}, {"logits", p.logits()}};
}

inline ContextPolicy policy_from_json(const json& j) {
  expect_format(j, "ctrlr-policy");
  ContextPolicy p(j.at("vocab_size").get<std::size_t>(), j.at("order").get<std::size_t>(),
                  j.at("table_size").get<std::size_t>());
  auto logits = j.at("logits").get<std::vector<double>>();
  if (logits.size() != p.logits().size())
    throw Error(ErrorCode::InvalidArgument, "policy checkpoint logits size does not match its shape");
  for (double x : logits)
    if (!std::isfinite(x)) throw Error(ErrorCode::InvalidArgument, "policy checkpoint has non-finite logits");
  p.logits() = std::move(logits);
  return p;
}

// ---- training config -------------------------------------------------------

inline json train_config_to_json(const TrainConfig& c) {
  return {{"beta", c.beta},
          {"eps_low", c.eps_low},
          {"eps_high", c.eps_high},
          {"group_size", c.group_size},
          {"horizon", c.horizon},
          {"iterations", c.iterations},
          {"prompts_per_batch", c.prompts_per_batch},
          {"grad_steps", c.grad_steps},
          {"lr", c.lr},
          {"seed", c.seed},
          {"baseline", to_string(c.mode)},
          {"dynamic_group_filter", c.dynamic_group_filter},
          {"max_resample_rounds", c.max_resample_rounds},
          {"log_w_clamp", c.log_w_clamp},
          {"log_mass_floor", c.log_mass_floor},
          {"workers", c.workers}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.beta = j.value("beta", c.beta);
  c.eps_low = j.value("eps_low", c.eps_low);
  c.eps_high = j.value("eps_high", c.eps_high);
  c.group_size = j.value("group_size", c.group_size);
  c.horizon = j.value("horizon", c.horizon);
  c.iterations = j.value("iterations", c.iterations);
  c.prompts_per_batch = j.value("prompts_per_batch", c.prompts_per_batch);
  c.grad_steps = j.value("grad_steps", c.grad_steps);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.mode = parse_baseline_mode(j.value("baseline", to_string(c.mode)));
  c.dynamic_group_filter = j.value("dynamic_group_filter", c.dynamic_group_filter);
  c.max_resample_rounds = j.value("max_resample_rounds", c.max_resample_rounds);
  c.log_w_clamp = j.value("log_w_clamp", c.log_w_clamp);
  c.log_mass_floor = j.value("log_mass_floor", c.log_mass_floor);
  c.workers = j.value("workers", c.workers);
  c.validate();
  return c;
}

inline json initial_policy_options_to_json(const InitialPolicyOptions& o) {
  return {{"order", o.order},
          {"table_size", o.table_size},
          {"noise", o.noise},
          {"marker_bias", o.marker_bias},
          {"answer_bias", o.answer_bias},
          {"correct_bias", o.correct_bias},
          {"eos_bias", o.eos_bias},
          {"horizon", o.horizon},
          {"calibration_rollouts", o.calibration_rollouts},
          {"max_key_rate", o.max_key_rate},
          {"min_token_prob", o.min_token_prob},
          {"max_redraws", o.max_redraws}};
}

inline InitialPolicyOptions initial_policy_options_from_json(const json& j) {
  InitialPolicyOptions o;
  o.order = j.value("order", o.order);
  o.table_size = j.value("table_size", o.table_size);
  o.noise = j.value("noise", o.noise);
  o.marker_bias = j.value("marker_bias", o.marker_bias);
  o.answer_bias = j.value("answer_bias", o.answer_bias);
  o.correct_bias = j.value("correct_bias", o.correct_bias);
  o.eos_bias = j.value("eos_bias", o.eos_bias);
  o.horizon = j.value("horizon", o.horizon);
  o.calibration_rollouts = j.value("calibration_rollouts", o.calibration_rollouts);
  o.max_key_rate = j.value("max_key_rate", o.max_key_rate);
  o.min_token_prob = j.value("min_token_prob", o.min_token_prob);
  o.max_redraws = j.value("max_redraws", o.max_redraws);
  return o;
}

// ---- trajectory dumps ------------------------------------------------------

inline json trajectory_to_json(const GuidedTrajectory& t, const Vocab* vocab = nullptr) {
  json j = {{"constraint", t.constraint_id},
            {"prompt_id", t.prompt_id},
            {"prompt", t.prompt},
            {"tokens", t.tokens},
            {"log_pi_old", log_array(t.log_pi_old)},
            {"log_mu", log_array(t.log_mu)},
            {"log_w", log_array(t.log_w)},
            {"accept_step", t.accept_step ? json(*t.accept_step) : json(nullptr)},
            {"log_weight", log_value(t.log_weight)},
            {"guided", t.guided},
            {"fallback", t.fallback},
            {"fallback_step", t.fallback_step ? json(*t.fallback_step) : json(nullptr)},
            {"reward", t.reward},
            {"correct", t.correct},
            {"iteration", t.iteration},
            {"group_index", t.group_index}};
  if (vocab) j["text"] = detokenize(t.tokens, *vocab);
  return j;
}

inline GuidedTrajectory trajectory_from_json(const json& j) {
  GuidedTrajectory t;
  try {
    t.constraint_id = j.at("constraint").get<std::string>();
    t.prompt_id = j.value("prompt_id", std::uint64_t{0});
    t.prompt = j.value("prompt", TokenSeq{});
    t.tokens = j.at("tokens").get<TokenSeq>();
    t.log_pi_old = log_array(j.at("log_pi_old"));
    t.log_mu = log_array(j.at("log_mu"));
    t.log_w = log_array(j.at("log_w"));
    if (!j.at("accept_step").is_null()) t.accept_step = j.at("accept_step").get<std::size_t>();
    t.log_weight = log_value(j.at("log_weight"));
    t.guided = j.value("guided", false);
    t.fallback = j.value("fallback", false);
    if (j.contains("fallback_step") && !j.at("fallback_step").is_null())
      t.fallback_step = j.at("fallback_step").get<std::size_t>();
    t.reward = j.at("reward").get<double>();
    t.correct = j.value("correct", t.reward > 0.0);
    t.iteration = j.value("iteration", std::size_t{0});
    t.group_index = j.value("group_index", std::size_t{0});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDump, std::string("bad trajectory record: ") + e.what());
  }
  const std::size_t n = t.tokens.size();
  if (t.log_pi_old.size() != n || t.log_mu.size() != n || t.log_w.size() != n)
    throw Error(ErrorCode::MalformedDump, "per-token arrays differ in length from tokens");
  return t;
}

class TrajectoryWriter {
 public:
  explicit TrajectoryWriter(const std::string& path, const Vocab* vocab = nullptr)
      : out_(path, std::ios::binary), vocab_(vocab) {
    if (!out_) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
  }
  void write(const GuidedTrajectory& t) { out_ << trajectory_to_json(t, vocab_).dump() << '\n'; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  const Vocab* vocab_;
};

inline std::vector<GuidedTrajectory> read_trajectories(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path + "'");
  std::vector<GuidedTrajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw Error(ErrorCode::MalformedDump, path + ":" + std::to_string(lineno) + ": not JSON");
    }
    out.push_back(trajectory_from_json(j));
  }
  return out;
}

// ---- metrics CSV -----------------------------------------------------------

inline constexpr const char* kMetricsSchema = "# ctrlr-metrics v1";

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

inline std::string metrics_header(const std::vector<KeyphraseConstraint>& cs) {
  std::string h = std::string(kMetricsSchema) + "\niteration,mean_reward,mean_train_reward,accuracy";
  for (const auto& c : cs) h += ",satisfaction_rate[" + c.id + "]";
  h += ",w_low,w_mid,w_high,fallback_rate,loss,trajectories,resampled_groups\n";
  return h;
}

inline std::string metrics_row(const IterationMetrics& m) {
  std::ostringstream ss;
  ss << m.iteration << ',' << format_double(m.mean_reward) << ',' << format_double(m.mean_train_reward)
     << ',' << format_double(m.accuracy);
  for (double r : m.satisfaction_rate) ss << ',' << format_double(r);
  ss << ',' << m.regime_low << ',' << m.regime_mid << ',' << m.regime_high << ','
     << format_double(m.fallback_rate) << ',' << format_double(m.loss) << ',' << m.trajectories << ','
     << m.resampled_groups << '\n';
  return ss.str();
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

}  // namespace ctrlr::io

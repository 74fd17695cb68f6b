#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ctrlr/error.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/logmath.hpp"

namespace ctrlr {

// Anything that yields a normalized next-token log distribution for a
// (prompt, response-so-far) pair.
template <typename P>
concept NextTokenModel = requires(const P& p, std::span<const TokenId> s) {
  { p.log_probs(s, s) } -> std::convertible_to<std::vector<double>>;
  { p.vocab_size() } -> std::convertible_to<std::size_t>;
};

using ContextId = std::uint32_t;

// Tabular softmax policy. The logits row is selected by a rolling hash of the
// whole prompt and the last `order` response tokens:
//   h <- h * 1099511628211 + code   (mod 2^64), starting at 1469598103934665603
// with code = token + 1 for prompt tokens, 0 as a prompt/response separator,
// token + 1 for the response window and V + 1 for window slots before the
// response start. The row is h mod table_size.
class ContextPolicy {
 public:
  ContextPolicy() = default;
  ContextPolicy(std::size_t vocab_size, std::size_t order, std::size_t table_size)
      : vocab_size_(vocab_size), order_(order), table_size_(table_size),
        logits_(vocab_size * table_size, 0.0) {
    if (vocab_size == 0 || table_size == 0)
      throw Error(ErrorCode::InvalidArgument, "policy needs a nonempty vocabulary and table");
  }

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t order() const { return order_; }
  std::size_t table_size() const { return table_size_; }
  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }

  std::span<double> row(ContextId c) { return {logits_.data() + c * vocab_size_, vocab_size_}; }
  std::span<const double> row(ContextId c) const {
    return {logits_.data() + c * vocab_size_, vocab_size_};
  }

  ContextId context_id(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
    constexpr std::uint64_t kPrime = 1099511628211ULL;
    std::uint64_t h = 1469598103934665603ULL;
    for (TokenId t : prompt) h = h * kPrime + (static_cast<std::uint64_t>(t) + 1);
    h = h * kPrime;
    const std::size_t n = response.size();
    for (std::size_t i = 0; i < order_; ++i) {
      // Window position i covers response[n - order + i].
      const std::uint64_t code = (n + i >= order_)
                                     ? static_cast<std::uint64_t>(response[n + i - order_]) + 1
                                     : static_cast<std::uint64_t>(vocab_size_) + 1;
      h = h * kPrime + code;
    }
    return static_cast<ContextId>(h % table_size_);
  }

  std::vector<double> log_probs_at(ContextId c) const {
    auto r = row(c);
    std::vector<double> out(r.begin(), r.end());
    log_normalize(out);
    return out;
  }

  std::vector<double> log_probs(std::span<const TokenId> prompt,
                                std::span<const TokenId> response) const {
    return log_probs_at(context_id(prompt, response));
  }

  bool operator==(const ContextPolicy&) const = default;

 private:
  std::size_t vocab_size_ = 0;
  std::size_t order_ = 0;
  std::size_t table_size_ = 0;
  std::vector<double> logits_;
};

inline std::vector<double> next_token_log_probs(const ContextPolicy& policy,
                                                std::span<const TokenId> prompt,
                                                std::span<const TokenId> response) {
  return policy.log_probs(prompt, response);
}

// Sparse d(objective)/d(logits), keyed by context row. std::map keeps the
// accumulation and application order deterministic.
class PolicyGradient {
 public:
  explicit PolicyGradient(std::size_t vocab_size = 0) : vocab_size_(vocab_size) {}

  std::size_t vocab_size() const { return vocab_size_; }
  const std::map<ContextId, std::vector<double>>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  void add(ContextId c, TokenId v, double value) { row(c)[v] += value; }

  void add_row(ContextId c, double scale, std::span<const double> values) {
    auto& r = row(c);
    for (std::size_t v = 0; v < values.size(); ++v) r[v] += scale * values[v];
  }

  PolicyGradient& operator+=(const PolicyGradient& other) {
    if (vocab_size_ == 0) vocab_size_ = other.vocab_size_;
    for (const auto& [c, values] : other.rows_) add_row(c, 1.0, values);
    return *this;
  }

  double at(ContextId c, TokenId v) const {
    auto it = rows_.find(c);
    return it == rows_.end() ? 0.0 : it->second[v];
  }

  bool all_finite() const {
    for (const auto& [c, values] : rows_)
      for (double x : values)
        if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  std::vector<double>& row(ContextId c) {
    auto it = rows_.find(c);
    if (it == rows_.end()) it = rows_.emplace(c, std::vector<double>(vocab_size_, 0.0)).first;
    return it->second;
  }

  std::size_t vocab_size_;
  std::map<ContextId, std::vector<double>> rows_;
};

// d log pi(token | context) / d logit(context, v) = 1{v = token} - softmax(v).
inline PolicyGradient log_prob_grad(const ContextPolicy& policy, std::span<const TokenId> prompt,
                                    std::span<const TokenId> response, TokenId token) {
  const ContextId c = policy.context_id(prompt, response);
  auto lp = policy.log_probs_at(c);
  std::vector<double> g(policy.vocab_size());
  for (std::size_t v = 0; v < g.size(); ++v) g[v] = (v == token ? 1.0 : 0.0) - std::exp(lp[v]);
  PolicyGradient out(policy.vocab_size());
  out.add_row(c, 1.0, g);
  return out;
}

// Gradient descent step: logits <- logits - lr * grad.
inline void apply_update(ContextPolicy& policy, const PolicyGradient& grad, double lr) {
  if (!grad.all_finite()) throw Error(ErrorCode::NonFiniteGradient, "gradient has NaN/inf entries");
  for (const auto& [c, values] : grad.rows()) {
    auto r = policy.row(c);
    for (std::size_t v = 0; v < values.size(); ++v) r[v] -= lr * values[v];
  }
}

// The HMM predictive distribution viewed as a policy; used where the guidance
// model must coincide with the sampling process.
class HmmPolicy {
 public:
  explicit HmmPolicy(const Hmm& hmm) : hmm_(&hmm) {}
  std::size_t vocab_size() const { return hmm_->vocab_size; }
  std::vector<double> log_probs(std::span<const TokenId> prompt,
                                std::span<const TokenId> response) const {
    TokenSeq all(prompt.begin(), prompt.end());
    all.insert(all.end(), response.begin(), response.end());
    return predictive_log_probs(*hmm_, forward_run(*hmm_, all));
  }

 private:
  const Hmm* hmm_;
};

}  // namespace ctrlr

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "ctrlr/policy.hpp"
#include "ctrlr/random.hpp"

namespace ctrlr {
namespace {

ContextPolicy random_policy(std::size_t V, std::size_t k, std::size_t C, Rng& rng, double scale = 1.0) {
  ContextPolicy p(V, k, C);
  for (double& x : p.logits()) x = scale * rng.normal();
  return p;
}

TEST(ContextPolicy, ZeroRowIsUniform) {
  const ContextPolicy p(5, 2, 16);
  const TokenSeq prompt{1};
  for (double lp : p.log_probs(prompt, {})) EXPECT_NEAR(lp, std::log(0.2), 1e-15);
}

TEST(ContextPolicy, PeakedRowMatchesDirectSoftmax) {
  ContextPolicy p(4, 1, 8);
  const TokenSeq prompt{0}, resp{2};
  const ContextId c = p.context_id(prompt, resp);
  p.row(c)[3] = 10.0;
  const auto lp = p.log_probs(prompt, resp);
  const double denom = 3.0 + std::exp(10.0);
  EXPECT_NEAR(std::exp(lp[3]), std::exp(10.0) / denom, 1e-14);
  for (int v = 0; v < 3; ++v) EXPECT_NEAR(std::exp(lp[v]), 1.0 / denom, 1e-14);
}

TEST(ContextPolicy, WindowLocality) {
  const ContextPolicy p(6, 2, 1024);
  const TokenSeq prompt{3, 1};
  const TokenSeq a{0, 4, 2, 5}, b{1, 4, 2, 5}, c{1, 4, 3, 5};
  EXPECT_EQ(p.context_id(prompt, a), p.context_id(prompt, b));
  const TokenSeq shortA{2, 5};
  EXPECT_EQ(p.context_id(prompt, a), p.context_id(prompt, shortA));
  // The padded window differs from a full one.
  const TokenSeq one{5};
  const TokenSeq two{4, 5};
  EXPECT_NE(p.context_id(prompt, one), p.context_id(prompt, two));
  EXPECT_NE(p.context_id(prompt, b), p.context_id(prompt, c));
}

TEST(ContextPolicy, HashIsDocumentedFunction) {
  const ContextPolicy p(10, 1, 97);
  const TokenSeq prompt{2};
  const TokenSeq resp{7};
  std::uint64_t h = 1469598103934665603ULL;
  const std::uint64_t P = 1099511628211ULL;
  h = h * P + 3;
  h = h * P;
  h = h * P + 8;
  EXPECT_EQ(p.context_id(prompt, resp), static_cast<ContextId>(h % 97));
  std::uint64_t g = 1469598103934665603ULL;
  g = g * P + 3;
  g = g * P;
  g = g * P + 11;
  EXPECT_EQ(p.context_id(prompt, {}), static_cast<ContextId>(g % 97));
}

TEST(ContextPolicy, RejectsEmptyShapes) {
  EXPECT_THROW(ContextPolicy(0, 1, 4), Error);
  EXPECT_THROW(ContextPolicy(4, 1, 0), Error);
}

TEST(ContextPolicyProperty, NormalizedEverywhere) {
  Rng rng(1);
  const auto p = random_policy(7, 3, 64, rng, 5.0);
  for (ContextId c = 0; c < 64; ++c) {
    double s = 0.0;
    for (double lp : p.log_probs_at(c)) s += std::exp(lp);
    ASSERT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(LogProbGrad, UniformRowClosedForm) {
  const ContextPolicy p(4, 1, 8);
  const TokenSeq prompt{0};
  const auto g = log_prob_grad(p, prompt, {}, 2);
  const ContextId c = p.context_id(prompt, {});
  ASSERT_EQ(g.rows().size(), 1u);
  EXPECT_DOUBLE_EQ(g.at(c, 0), -0.25);
  EXPECT_DOUBLE_EQ(g.at(c, 1), -0.25);
  EXPECT_DOUBLE_EQ(g.at(c, 2), 0.75);
  EXPECT_DOUBLE_EQ(g.at(c, 3), -0.25);
}

TEST(LogProbGradProperty, SumsToZeroAndMatchesFiniteDifferences) {
  Rng rng(2);
  auto p = random_policy(6, 2, 32, rng);
  const double h = 1e-5;
  for (int probe = 0; probe < 50; ++probe) {
    TokenSeq prompt{static_cast<TokenId>(rng.below(6))};
    TokenSeq resp;
    for (std::size_t i = 0, n = rng.below(4); i < n; ++i) resp.push_back(static_cast<TokenId>(rng.below(6)));
    const auto x = static_cast<TokenId>(rng.below(6));
    const auto g = log_prob_grad(p, prompt, resp, x);
    const ContextId c = p.context_id(prompt, resp);
    double total = 0.0;
    for (TokenId v = 0; v < 6; ++v) total += g.at(c, v);
    ASSERT_NEAR(total, 0.0, 1e-12);
    const auto v = static_cast<TokenId>(rng.below(6));
    double& logit = p.row(c)[v];
    const double saved = logit;
    logit = saved + h;
    const double up = p.log_probs(prompt, resp)[x];
    logit = saved - h;
    const double down = p.log_probs(prompt, resp)[x];
    logit = saved;
    const double fd = (up - down) / (2 * h);
    ASSERT_LE(std::abs(fd - g.at(c, v)), 1e-4 * std::max(1e-3, std::abs(g.at(c, v))));
  }
}

TEST(ApplyUpdate, ZeroGradAndZeroRateLeavePolicyUnchanged) {
  Rng rng(3);
  auto p = random_policy(4, 1, 8, rng);
  const auto before = p;
  apply_update(p, PolicyGradient(4), 0.5);
  EXPECT_EQ(p, before);
  PolicyGradient g(4);
  g.add(3, 1, 2.5);
  apply_update(p, g, 0.0);
  EXPECT_EQ(p, before);
}

TEST(ApplyUpdate, SingleEntryMovesByRateTimesGrad) {
  ContextPolicy p(4, 1, 8);
  p.row(5)[2] = 1.0;
  PolicyGradient g(4);
  g.add(5, 2, 0.5);
  apply_update(p, g, 0.1);
  EXPECT_EQ(p.row(5)[2], 1.0 - 0.1 * 0.5);
  EXPECT_EQ(p.row(5)[1], 0.0);
}

TEST(ApplyUpdate, RejectsNonFiniteGradient) {
  ContextPolicy p(3, 1, 4);
  PolicyGradient g(3);
  g.add(0, 0, std::nan(""));
  try {
    apply_update(p, g, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteGradient);
  }
}

TEST(ApplyUpdate, SnapshotIsolation) {
  Rng rng(4);
  auto target = random_policy(5, 2, 16, rng);
  const auto snapshot = target;
  const auto copy_bits = snapshot.logits();
  for (int i = 0; i < 20; ++i) {
    PolicyGradient g(5);
    g.add(static_cast<ContextId>(rng.below(16)), static_cast<TokenId>(rng.below(5)), rng.normal());
    apply_update(target, g, 0.3);
  }
  EXPECT_NE(target, snapshot);
  EXPECT_EQ(std::memcmp(snapshot.logits().data(), copy_bits.data(), copy_bits.size() * sizeof(double)), 0);
}

TEST(PolicyGradient, AdditionIsOrderIndependent) {
  Rng rng(5);
  std::vector<PolicyGradient> parts;
  for (int i = 0; i < 10; ++i) {
    PolicyGradient g(3);
    for (int j = 0; j < 4; ++j)
      g.add(static_cast<ContextId>(rng.below(5)), static_cast<TokenId>(rng.below(3)),
            static_cast<double>(rng.below(100)) / 8.0);
    parts.push_back(g);
  }
  PolicyGradient fwd(3), rev(3);
  for (const auto& g : parts) fwd += g;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) rev += *it;
  EXPECT_EQ(fwd.rows(), rev.rows());
}

TEST(HmmPolicy, IsAPredictiveDistribution) {
  Rng rng(6);
  const Hmm m = random_hmm(3, 4, rng);
  const HmmPolicy p(m);
  const TokenSeq prompt{1, 2}, resp{0};
  const auto lp = p.log_probs(prompt, resp);
  double s = 0.0;
  for (double x : lp) s += std::exp(x);
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_NEAR(lp[3], sequence_log_prob(m, TokenSeq{1, 2, 0, 3}) - sequence_log_prob(m, TokenSeq{1, 2, 0}),
              1e-12);
  static_assert(NextTokenModel<HmmPolicy>);
  static_assert(NextTokenModel<ContextPolicy>);
}

}  // namespace
}  // namespace ctrlr

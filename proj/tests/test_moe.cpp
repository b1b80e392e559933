#include "btx/moe.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "btx/model.hpp"
#include "oracles.hpp"

using btx::MoeConfig;
using btx::RoutingTrace;
using btx::Tensor;

namespace {

using ExpertParams = std::array<Tensor<double>, 3>;

ExpertParams random_expert(int64_t d, int64_t ff, btx::Rng& rng) {
  auto mk = [&](btx::Shape shape) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.normal(0.0, 0.4);
    return t;
  };
  return {mk({d, ff}), mk({d, ff}), mk({ff, d})};
}

// Dense oracle: every expert evaluated on every token, combined with the
// renormalized top-k gate matrix.
std::vector<double> dense_moe_oracle(const Tensor<double>& x,
                                     const std::vector<ExpertParams>& experts,
                                     const Tensor<double>& router, int k) {
  const int64_t t = x.dim(0), d = x.dim(1);
  const int64_t n = router.dim(1);
  std::vector<double> y(static_cast<size_t>(t * d), 0.0);
  for (int64_t row = 0; row < t; ++row) {
    std::vector<double> logits(static_cast<size_t>(n), 0.0);
    for (int64_t e = 0; e < n; ++e)
      for (int64_t c = 0; c < d; ++c) logits[static_cast<size_t>(e)] += x.at(row, c) * router.at(c, e);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
        return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
      return a < b;
    });
    double z = 0;
    std::vector<double> gate(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < k; ++i) z += std::exp(logits[static_cast<size_t>(order[static_cast<size_t>(i)])] - logits[static_cast<size_t>(order[0])]);
    for (int i = 0; i < k; ++i)
      gate[static_cast<size_t>(order[static_cast<size_t>(i)])] =
          std::exp(logits[static_cast<size_t>(order[static_cast<size_t>(i)])] - logits[static_cast<size_t>(order[0])]) / z;
    for (int64_t e = 0; e < n; ++e) {
      if (gate[static_cast<size_t>(e)] == 0.0) continue;
      const auto& up = experts[static_cast<size_t>(e)][0];
      const auto& gt = experts[static_cast<size_t>(e)][1];
      const auto& dn = experts[static_cast<size_t>(e)][2];
      const int64_t ff = up.dim(1);
      std::vector<double> act(static_cast<size_t>(ff));
      for (int64_t j = 0; j < ff; ++j) {
        double zu = 0, zg = 0;
        for (int64_t c = 0; c < d; ++c) {
          zu += x.at(row, c) * up.at(c, j);
          zg += x.at(row, c) * gt.at(c, j);
        }
        act[static_cast<size_t>(j)] = zg / (1.0 + std::exp(-zg)) * zu;
      }
      for (int64_t c = 0; c < d; ++c) {
        double o = 0;
        for (int64_t j = 0; j < ff; ++j) o += act[static_cast<size_t>(j)] * dn.at(j, c);
        y[static_cast<size_t>(row * d + c)] += gate[static_cast<size_t>(e)] * o;
      }
    }
  }
  return y;
}

}  // namespace

TEST(RouteTopk, ZeroLogitsTieBreakLowestIndex) {
  auto logits = Tensor<double>::zeros({1, 3});
  auto topk = btx::route_topk(logits, 2);
  EXPECT_EQ(topk.ids[0], 0);
  EXPECT_EQ(topk.ids[1], 1);
  EXPECT_EQ(topk.gates[0], 0.5);
  EXPECT_EQ(topk.gates[1], 0.5);
}

TEST(RouteTopk, ClosedFormGates) {
  auto logits = Tensor<double>::from({1, 3}, {2, 1, 0});
  auto topk = btx::route_topk(logits, 2);
  EXPECT_EQ(topk.ids[0], 0);
  EXPECT_EQ(topk.ids[1], 1);
  const double e = std::exp(1.0);
  EXPECT_NEAR(topk.gates[0], e / (e + 1.0), 1e-12);
  EXPECT_NEAR(topk.gates[1], 1.0 / (e + 1.0), 1e-12);
}

TEST(RouteTopk, FullKEqualsSoftmax) {
  auto logits = Tensor<double>::from({1, 3}, {0.3, -1.2, 0.7});
  auto topk = btx::route_topk(logits, 3);
  auto sm = btx::softmax(logits, -1);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(topk.gates[static_cast<size_t>(i)], sm.at(0, topk.ids[static_cast<size_t>(i)]), 1e-12);
}

TEST(RouteTopk, KTooLargeThrows) {
  auto logits = Tensor<double>::zeros({2, 3});
  EXPECT_THROW(btx::route_topk(logits, 4), btx::Error);
}

TEST(RouteTopk, GatesPositiveSumToOneProperty) {
  btx::Rng rng(77);
  auto logits = Tensor<double>::zeros({40, 5});
  for (auto& v : logits.values()) v = rng.normal(0.0, 2.0);
  for (int k = 1; k <= 5; ++k) {
    auto topk = btx::route_topk(logits, k);
    for (int64_t row = 0; row < 40; ++row) {
      double s = 0;
      std::set<int> seen;
      for (int i = 0; i < k; ++i) {
        EXPECT_GT(topk.gates[static_cast<size_t>(row * k + i)], 0.0);
        s += topk.gates[static_cast<size_t>(row * k + i)];
        seen.insert(topk.ids[static_cast<size_t>(row * k + i)]);
      }
      EXPECT_EQ(static_cast<int>(seen.size()), k);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(MoeForward, IdenticalExpertsMatchDenseFfn) {
  btx::Rng rng(5);
  const int64_t d = 6, ff = 10, t = 9;
  auto shared = random_expert(d, ff, rng);
  std::vector<ExpertParams> experts = {shared, shared, shared};
  auto router = Tensor<double>::zeros({d, 3});
  for (auto& v : router.values()) v = rng.normal(0.0, 1.0);
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);

  auto out = btx::moe_forward(x, experts, router, MoeConfig{3, 2, 0.01});
  std::vector<ExpertParams> one = {shared};
  auto dense = btx::moe_forward(x, one, Tensor<double>::zeros({d, 1}), MoeConfig{1, 1, 0.0});
  for (int64_t i = 0; i < out.y.numel(); ++i)
    EXPECT_NEAR(out.y.values()[static_cast<size_t>(i)], dense.y.values()[static_cast<size_t>(i)], 1e-6);
}

TEST(MoeForward, MatchesDenseEvaluationOracle) {
  btx::Rng rng(9);
  const int64_t d = 6, ff = 8, t = 11;
  std::vector<ExpertParams> experts = {random_expert(d, ff, rng), random_expert(d, ff, rng)};
  auto router = Tensor<double>::zeros({d, 2});
  for (auto& v : router.values()) v = rng.normal(0.0, 1.0);
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);

  auto out = btx::moe_forward(x, experts, router, MoeConfig{2, 1, 0.01});
  auto expect = dense_moe_oracle(x, experts, router, 1);
  for (int64_t i = 0; i < out.y.numel(); ++i)
    EXPECT_NEAR(out.y.values()[static_cast<size_t>(i)], expect[static_cast<size_t>(i)], 1e-10);
}

TEST(MoeForward, PermutingExpertsAndRouterColumnsIsInvariant) {
  btx::Rng rng(13);
  const int64_t d = 5, ff = 7, t = 8;
  std::vector<ExpertParams> experts = {random_expert(d, ff, rng), random_expert(d, ff, rng),
                                       random_expert(d, ff, rng)};
  auto router = Tensor<double>::zeros({d, 3});
  for (auto& v : router.values()) v = rng.normal(0.0, 1.0);
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);

  auto base = btx::moe_forward(x, experts, router, MoeConfig{3, 2, 0.01});

  const int perm[3] = {2, 0, 1};  // new index -> old index
  std::vector<ExpertParams> permuted(3);
  auto router_p = Tensor<double>::zeros({d, 3});
  for (int e = 0; e < 3; ++e) {
    permuted[static_cast<size_t>(e)] = experts[static_cast<size_t>(perm[e])];
    for (int64_t c = 0; c < d; ++c) router_p.at(c, e) = router.at(c, perm[e]);
  }
  auto got = btx::moe_forward(x, permuted, router_p, MoeConfig{3, 2, 0.01});
  for (int64_t i = 0; i < base.y.numel(); ++i)
    EXPECT_NEAR(base.y.values()[static_cast<size_t>(i)], got.y.values()[static_cast<size_t>(i)], 1e-6);
  // trace permutes accordingly: old id e appears as the new index mapping to it
  int inverse[3];
  for (int e = 0; e < 3; ++e) inverse[perm[e]] = e;
  for (size_t row = 0; row < base.trace.entries.size(); ++row) {
    const auto& b = base.trace.entries[row];
    const auto& g = got.trace.entries[row];
    for (size_t i = 0; i < b.expert_ids.size(); ++i) {
      EXPECT_EQ(inverse[b.expert_ids[i]], g.expert_ids[i]);
      EXPECT_NEAR(b.gates[i], g.gates[i], 1e-9);
    }
  }
}

TEST(MoeForward, OnlySelectedExpertsContribute) {
  // with a hard-routed input, the unselected expert's weights are irrelevant
  btx::Rng rng(17);
  const int64_t d = 4, ff = 6, t = 5;
  auto e0 = random_expert(d, ff, rng);
  auto e1 = random_expert(d, ff, rng);
  auto router = Tensor<double>::zeros({d, 2});
  for (int64_t c = 0; c < d; ++c) router.at(c, 0) = 5.0;  // all tokens to expert 0
  auto x = Tensor<double>::full({t, d}, 1.0);
  auto a = btx::moe_forward(x, {e0, e1}, router, MoeConfig{2, 1, 0.01});
  for (auto& v : e1[0].values()) v = 1e9;  // garbage in the unselected expert
  auto b = btx::moe_forward(x, {e0, e1}, router, MoeConfig{2, 1, 0.01});
  for (int64_t i = 0; i < a.y.numel(); ++i)
    EXPECT_EQ(a.y.values()[static_cast<size_t>(i)], b.y.values()[static_cast<size_t>(i)]);
}

TEST(MoeForward, GradientsMatchFiniteDifferences) {
  btx::Rng rng(21);
  const int64_t d = 4, ff = 5, t = 6;
  std::vector<ExpertParams> experts = {random_expert(d, ff, rng), random_expert(d, ff, rng),
                                       random_expert(d, ff, rng)};
  auto router = Tensor<double>::zeros({d, 3});
  for (auto& v : router.values()) v = rng.normal(0.0, 1.0);
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);
  auto w = Tensor<double>::zeros({t, d});
  for (auto& v : w.values()) v = rng.normal(0.0, 1.0);

  auto build = [&]() {
    auto out = btx::moe_forward(x, experts, router, MoeConfig{3, 2, 0.01});
    return btx::add(btx::sum(btx::mul(out.y, w)), btx::scale(out.aux_loss, 0.01));
  };
  double err = oracle::check_gradients(build, {x, router, experts[0][0], experts[1][2]});
  EXPECT_LE(err, 1e-6);
}

TEST(LoadBalance, UniformRoutingIsOne) {
  // top-1 spread evenly over 4 experts with uniform router probabilities
  RoutingTrace trace;
  for (int t = 0; t < 20; ++t) {
    btx::RoutingEntry e;
    e.position = t;
    e.expert_ids = {t % 4, (t + 1) % 4};
    e.gates = {0.5, 0.5};
    e.router_probs = {0.25, 0.25, 0.25, 0.25};
    trace.entries.push_back(e);
  }
  EXPECT_NEAR(btx::load_balance_loss(trace, 4), 1.0, 1e-12);
}

TEST(LoadBalance, DegenerateRoutingIsN) {
  RoutingTrace trace;
  for (int t = 0; t < 12; ++t) {
    btx::RoutingEntry e;
    e.position = t;
    e.expert_ids = {2};
    e.gates = {1.0};
    e.router_probs = {0.0, 0.0, 1.0};
    trace.entries.push_back(e);
  }
  EXPECT_NEAR(btx::load_balance_loss(trace, 3), 3.0, 1e-12);
}

TEST(LoadBalance, MatchesDirectFormula) {
  btx::Rng rng(33);
  const int n = 3;
  RoutingTrace trace;
  std::vector<double> f(n, 0.0), p(n, 0.0);
  const int t = 50;
  for (int i = 0; i < t; ++i) {
    btx::RoutingEntry e;
    e.position = i;
    std::vector<double> probs(n);
    double z = 0;
    for (int j = 0; j < n; ++j) {
      probs[static_cast<size_t>(j)] = rng.uniform() + 0.01;
      z += probs[static_cast<size_t>(j)];
    }
    for (int j = 0; j < n; ++j) probs[static_cast<size_t>(j)] /= z;
    // consistent routing: top-1 is the argmax of this token's own probabilities
    int top = 0;
    for (int j = 1; j < n; ++j)
      if (probs[static_cast<size_t>(j)] > probs[static_cast<size_t>(top)]) top = j;
    e.expert_ids = {top};
    e.gates = {1.0};
    e.router_probs = probs;
    f[static_cast<size_t>(top)] += 1.0 / t;
    for (int j = 0; j < n; ++j) p[static_cast<size_t>(j)] += probs[static_cast<size_t>(j)] / t;
    trace.entries.push_back(e);
  }
  double expect = 0;
  for (int j = 0; j < n; ++j) expect += f[static_cast<size_t>(j)] * p[static_cast<size_t>(j)];
  expect *= n;
  EXPECT_NEAR(btx::load_balance_loss(trace, n), expect, 1e-12);
  EXPECT_GE(btx::load_balance_loss(trace, n), 1.0 - 1e-9);
  EXPECT_LE(btx::load_balance_loss(trace, n), static_cast<double>(n) + 1e-9);
  RoutingTrace empty;
  EXPECT_THROW(btx::load_balance_loss(empty, n), btx::Error);
}

TEST(LoadBalance, InGraphAuxAgreesWithTraceFormula) {
  btx::Rng rng(37);
  const int64_t d = 4, ff = 5, t = 16;
  std::vector<ExpertParams> experts = {random_expert(d, ff, rng), random_expert(d, ff, rng)};
  auto router = Tensor<double>::zeros({d, 2});
  for (auto& v : router.values()) v = rng.normal(0.0, 1.0);
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);
  auto out = btx::moe_forward(x, experts, router, MoeConfig{2, 1, 0.01});
  EXPECT_NEAR(out.aux_loss.item(), btx::load_balance_loss(out.trace, 2), 1e-9);
}

TEST(Trace, ExportParseRoundTrip) {
  RoutingTrace trace;
  btx::RoutingEntry e;
  e.position = 7;
  e.script = btx::ScriptLabel::Latin;
  e.expert_ids = {1, 0};
  e.gates = {0.75, 0.25};
  e.router_probs = {0.4, 0.6};
  trace.entries.push_back(e);
  std::string text = btx::export_trace(trace);
  EXPECT_EQ(text, "7\tlatin\t1:0.750000\t0:0.250000\n");
  auto parsed = btx::parse_trace(text);
  ASSERT_EQ(parsed.entries.size(), 1u);
  EXPECT_EQ(parsed.entries[0].position, 7);
  EXPECT_EQ(parsed.entries[0].script, btx::ScriptLabel::Latin);
  EXPECT_EQ(parsed.entries[0].expert_ids, (std::vector<int>{1, 0}));
}

TEST(Trace, ZeroRouterGivesUniformProbabilities) {
  btx::Rng rng(41);
  const int64_t d = 4, ff = 5, t = 6;
  std::vector<ExpertParams> experts = {random_expert(d, ff, rng), random_expert(d, ff, rng),
                                       random_expert(d, ff, rng)};
  auto router = Tensor<double>::zeros({d, 3});
  auto x = Tensor<double>::zeros({t, d});
  for (auto& v : x.values()) v = rng.normal(0.0, 1.0);
  auto out = btx::moe_forward(x, experts, router, MoeConfig{3, 2, 0.01});
  for (const auto& entry : out.trace.entries) {
    for (double p : entry.router_probs) EXPECT_EQ(p, 1.0 / 3.0);
    // tie-break picks experts {0, 1} with exactly equal gates
    EXPECT_EQ(entry.expert_ids, (std::vector<int>{0, 1}));
    EXPECT_EQ(entry.gates[0], 0.5);
    EXPECT_EQ(entry.gates[1], 0.5);
  }
}

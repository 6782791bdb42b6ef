/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "epsim/oracle.hpp"
#include "epsim/scenario.hpp"
#include "test_util.hpp"

using namespace epsim;
using namespace epsim::oracle;

namespace {

Problem one_token(int experts, int hidden, std::vector<std::int32_t> topk,
                  std::vector<float> weights) {
  Problem p;
  p.num_experts = experts;
  p.topk = static_cast<int>(topk.size());
  p.hidden = hidden;
  RankInput r;
  r.tokens = 1;
  r.rows.resize(static_cast<std::size_t>(hidden));
  std::iota(r.rows.begin(), r.rows.end(), 1.0f);
  r.topk = std::move(topk);
  r.weights = std::move(weights);
  p.ranks.push_back(r);
  return p;
}

std::vector<std::vector<float>> identity_rows(const std::vector<ExpertBatch>& b) {
  std::vector<std::vector<float>> out;
  for (const auto& e : b) out.push_back(e.rows);
  return out;
}

}  // namespace

TEST(Oracle, SingleTokenLandsOnItsExpert) {
  const auto p = one_token(8, 4, {3}, {1.0f});
  const auto b = ref_dispatch(p);
  for (int e = 0; e < 8; ++e) EXPECT_EQ(b[static_cast<std::size_t>(e)].count(), e == 3 ? 1 : 0);
  EXPECT_EQ(b[3].src_rank[0], 0);
  EXPECT_EQ(b[3].src_token[0], 0);
  EXPECT_EQ(b[3].src_k[0], 0);
  EXPECT_EQ(b[3].rows, p.ranks[0].rows);
}

TEST(Oracle, ConservationAndConcentration) {
  const EpConfig c = test::small_config(4, 2, 16, 8, 3, 4);
  const auto data = scenario::generate(c, 3);
  const auto p = scenario::to_problem(c, data);
  const auto counts = ref_counts(p);
  EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::int64_t{0}), 4 * 8 * 3);

  EpConfig c1 = c;
  c1.top_k = 1;
  const auto conc = scenario::to_problem(
      c1, scenario::generate(c1, 3, -1, scenario::RoutingPattern::Concentrated));
  const auto cc = ref_counts(conc);
  EXPECT_EQ(cc[0], 4 * 8);
  EXPECT_EQ(std::accumulate(cc.begin() + 1, cc.end(), std::int64_t{0}), 0);
}

TEST(Oracle, DispatchOrderIsSourceThenToken) {
  const EpConfig c = test::small_config(4, 4, 8, 16, 2, 2);
  const auto p = scenario::to_problem(c, scenario::generate(c, 11));
  for (const auto& b : ref_dispatch(p)) {
    for (int i = 1; i < b.count(); ++i) {
      const auto prev = std::pair(b.src_rank[static_cast<std::size_t>(i - 1)],
                                  b.src_token[static_cast<std::size_t>(i - 1)]);
      const auto cur = std::pair(b.src_rank[static_cast<std::size_t>(i)],
                                 b.src_token[static_cast<std::size_t>(i)]);
      EXPECT_LT(prev, cur);
    }
  }
}

TEST(Oracle, UniformWeightsWithIdentityReproduceInput) {
  const auto p = one_token(8, 4, {1, 5, 6, 2}, {0.25f, 0.25f, 0.25f, 0.25f});
  const auto b = ref_dispatch(p);
  const auto out = ref_combine(p, b, identity_rows(b));
  EXPECT_EQ(out[0], p.ranks[0].rows);
}

TEST(Oracle, OneHotWeightsSelect) {
  auto p = one_token(8, 3, {1, 5}, {0.0f, 1.0f});
  const auto b = ref_dispatch(p);
  auto rows = identity_rows(b);
  for (auto& v : rows[5]) v *= 3.0f;
  const auto out = ref_combine(p, b, rows);
  EXPECT_EQ(out[0], (std::vector<float>{3.0f, 6.0f, 9.0f}));
}

TEST(Oracle, InternodeMessagesDeduplicatePerNode) {
  // Ranks 0,1 on node 0; ranks 2,3 on node 1; two experts per rank.
  Problem p;
  p.num_experts = 8;
  p.topk = 3;
  p.hidden = 1;
  RankInput r0;
  r0.tokens = 2;
  r0.rows = {1, 2};
  r0.topk = {4, 5, 6,   // all on node 1: one message
             0, 2, 7};  // node 0 twice, node 1 once: one message
  r0.weights.assign(6, 1.0f / 3);
  p.ranks.push_back(r0);
  for (int i = 0; i < 3; ++i) {
    RankInput empty;
    p.ranks.push_back(empty);
  }
  EXPECT_EQ(ref_internode_messages(p, 4, 2), 2);
  EXPECT_EQ(ref_internode_messages(p, 4, 4), 0);
}

TEST(Oracle, RelativeErrorIsRowWise) {
  EXPECT_EQ(relative_error({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(relative_error({1, 2, 0, 0}, {1, 2, 0, 1e-3f}, 2), 1.0);
  EXPECT_DOUBLE_EQ(relative_error({0, 0}, {0, 0}, 1), 0.0);
  EXPECT_EQ(relative_error({std::nanf("")}, {1.0f}), std::numeric_limits<double>::infinity());
  EXPECT_EQ(relative_error({1.0f}, {1.0f, 2.0f}), std::numeric_limits<double>::infinity());
}

TEST(Scenario, DeterministicAndWellFormed) {
  EpConfig c = test::small_config(4, 2, 32, 16, 8, 256);
  c.token_dtype = Dtype::FP8;
  c.with_scales = true;
  const auto a = scenario::generate(c, 42);
  const auto b = scenario::generate(c, 42);
  const auto other = scenario::generate(c, 43);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].routing.experts, b[r].routing.experts);
    EXPECT_EQ(a[r].tokens, b[r].tokens);
    EXPECT_EQ(a[r].scales, b[r].scales);
    EXPECT_NO_THROW(validate_routing(a[r].routing, c));
    EXPECT_EQ(a[r].scales.size(), 16u * 2);
    for (int t = 0; t < 16; ++t) {
      float sum = 0;
      for (int k = 0; k < 8; ++k) sum += a[r].weights[static_cast<std::size_t>(t * 8 + k)];
      EXPECT_EQ(sum, 1.0f);
    }
  }
  EXPECT_NE(a[0].routing.experts, other[0].routing.experts);
}

TEST(Scenario, ExpertCoefficients) {
  const auto id = scenario::expert_coefficients(scenario::ExpertKind::Identity, 1, 5, 4);
  EXPECT_EQ(id.scale, 1.0f);
  EXPECT_TRUE(id.bias.empty());
  const auto sc = scenario::expert_coefficients(scenario::ExpertKind::Scale, 1, 5, 4);
  EXPECT_EQ(sc.scale, 6.0f);
  const auto af = scenario::expert_coefficients(scenario::ExpertKind::Affine, 1, 5, 4);
  const auto af2 = scenario::expert_coefficients(scenario::ExpertKind::Affine, 1, 5, 4);
  EXPECT_EQ(af.scale, af2.scale);
  EXPECT_EQ(af.bias, af2.bias);
  EXPECT_EQ(af.bias.size(), 4u);
  std::vector<float> in = {1, 2, 3, 4}, out(4);
  scenario::apply_expert(sc, in, out);
  EXPECT_EQ(out, (std::vector<float>{6, 12, 18, 24}));
  EXPECT_EQ(scenario::parse_expert_kind("affine"), scenario::ExpertKind::Affine);
  EXPECT_EP_ERROR(scenario::parse_expert_kind("relu"), ErrorCode::InvalidArgument);
}

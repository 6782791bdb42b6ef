/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "epsim/driver.hpp"
#include "epsim/oracle.hpp"
#include "test_util.hpp"

using namespace epsim;
using driver::CaseOptions;

namespace {

CaseOptions ht_case(int ranks, int rpn, int experts, int tokens, int topk, int hidden = 8) {
  CaseOptions o;
  o.config = test::small_config(ranks, rpn, experts, tokens, topk, hidden, Algorithm::HT);
  o.expert = scenario::ExpertKind::Affine;
  o.timeout = std::chrono::seconds(30);
  return o;
}

std::uint64_t internode(const driver::RankResult& r, const char* op) {
  std::uint64_t n = 0;
  for (const auto& s : r.iterations[0].stats) {
    if (s.op == op) n += s.inter_node_msgs;
  }
  return n;
}

}  // namespace

TEST(HtStructure, InternodeMessagesMatchOracle) {
  for (int topk : {1, 4, 8}) {
    for (int nodes : {2, 4}) {
      auto o = ht_case(8, 8 / nodes, 32, 16, topk);
      o.seed = static_cast<std::uint64_t>(topk * 10 + nodes);
      o.delay_seed = 2;
      const auto r = driver::run_case(o);
      ASSERT_EQ(driver::check_case(o, r), "") << driver::describe(o);
      const auto problem = scenario::to_problem(o.config, r.inputs[0]);
      const auto want = oracle::ref_internode_messages(problem, 8, 8 / nodes);
      std::uint64_t got = 0;
      for (const auto& rank : r.ranks) got += internode(rank, "dispatch");
      EXPECT_EQ(got, static_cast<std::uint64_t>(want)) << "topk " << topk << " nodes " << nodes;
      if (topk > 1) EXPECT_LT(got, 8u * 16 * topk);
    }
  }
}

TEST(HtStructure, SingleNodeSendsNothingAcrossNodes) {
  auto o = ht_case(4, 4, 16, 8, 4);
  const auto r = driver::run_case(o);
  ASSERT_EQ(driver::check_case(o, r), "");
  for (const auto& rank : r.ranks) EXPECT_EQ(internode(rank, "dispatch"), 0u);
}

TEST(HtOrdering, OutputRowsIndependentOfDelays) {
  auto o = ht_case(8, 2, 32, 16, 4);
  o.seed = 5;
  std::vector<std::vector<std::tuple<int, int, int, int>>> reference;
  for (int d = 0; d < 10; ++d) {
    o.delay_seed = static_cast<std::uint64_t>(100 + d);
    const auto r = driver::run_case(o);
    ASSERT_EQ(driver::check_case(o, r), "") << driver::describe(o);
    std::vector<std::vector<std::tuple<int, int, int, int>>> order;
    for (const auto& rank : r.ranks) {
      auto& rows = order.emplace_back();
      for (const auto& row : rank.iterations[0].received) {
        rows.emplace_back(row.expert, row.src_rank, row.src_token, row.k);
      }
    }
    if (d == 0) {
      reference = order;
    } else {
      EXPECT_EQ(order, reference) << "delay seed " << o.delay_seed.value();
    }
  }
}

TEST(HtFlowControl, DepthOneFifoDoesNotDeadlock) {
  for (int chunk : {1, 3}) {
    auto o = ht_case(8, 2, 16, 32, 8);
    o.config.ht_fifo_depth = 1;
    o.config.ht_chunk_tokens = chunk;
    o.delay_seed = static_cast<std::uint64_t>(chunk);
    o.iterations = 2;
    const auto r = driver::run_case(o);
    EXPECT_EQ(driver::check_case(o, r), "") << driver::describe(o);
  }
}

TEST(HtCombine, FlatPathMatchesHierarchical) {
  for (int nodes : {1, 2, 4}) {
    auto o = ht_case(8, 8 / nodes, 32, 16, 4);
    o.seed = static_cast<std::uint64_t>(nodes);
    o.delay_seed = 8;
    o.config.ht_combine_path = HtCombinePath::Hierarchical;
    const auto hier = driver::run_case(o);
    ASSERT_EQ(driver::check_case(o, hier), "");
    o.config.ht_combine_path = HtCombinePath::Flat;
    const auto flat = driver::run_case(o);
    ASSERT_EQ(driver::check_case(o, flat), "");
    for (std::size_t rk = 0; rk < flat.ranks.size(); ++rk) {
      EXPECT_EQ(flat.ranks[rk].iterations[0].combined, hier.ranks[rk].iterations[0].combined);
    }
  }
}

TEST(HtDtypes, Bf16AndIdentity) {
  auto o = ht_case(4, 2, 16, 8, 4, 128);
  o.config.token_dtype = Dtype::BF16;
  o.delay_seed = 1;
  auto r = driver::run_case(o);
  EXPECT_EQ(driver::check_case(o, r), "");

  o.config.token_dtype = Dtype::F32;
  o.expert = scenario::ExpertKind::Identity;
  r = driver::run_case(o);
  ASSERT_EQ(driver::check_case(o, r), "");
  for (std::size_t rk = 0; rk < r.ranks.size(); ++rk) {
    EXPECT_EQ(r.ranks[rk].iterations[0].combined, r.inputs[0][rk].tokens);
  }
}

TEST(HtHandle, ReceiveCountKnownAfterCreate) {
  auto o = ht_case(4, 2, 16, 8, 2);
  o.config.ht_fifo_depth = 2;
  const auto r = driver::run_case(o);
  ASSERT_EQ(driver::check_case(o, r), "");
  const auto counts = oracle::ref_counts(scenario::to_problem(o.config, r.inputs[0]));
  const int L = o.config.experts_per_rank();
  for (std::size_t rk = 0; rk < r.ranks.size(); ++rk) {
    const auto first = counts.begin() + static_cast<std::ptrdiff_t>(rk) * L;
    EXPECT_EQ(r.ranks[rk].iterations[0].num_recv_tokens,
              std::accumulate(first, first + L, std::int64_t{0}));
  }
}

TEST(HtStats, CsvIndependentOfDelays) {
  auto o = ht_case(8, 2, 32, 32, 8);
  o.config.ht_fifo_depth = 1;
  o.config.ht_chunk_tokens = 3;
  o.iterations = 3;
  std::string reference;
  for (int d = 0; d < 8; ++d) {
    o.delay_seed = static_cast<std::uint64_t>(d);
    std::ostringstream os;
    driver::write_stats_csv(os, driver::run_case(o));
    if (d == 0) {
      reference = os.str();
    } else {
      EXPECT_EQ(os.str(), reference) << "delay seed " << d;
    }
  }
}

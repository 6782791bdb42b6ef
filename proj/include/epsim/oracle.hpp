/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

// Brute-force reference for routing, dispatch placement and weighted
// combine. Single-threaded, no fabric, no shared code with the engines.
namespace epsim::oracle {

struct RankInput {
  int tokens = 0;
  std::vector<float> rows;           // [tokens x hidden]
  std::vector<std::int32_t> topk;    // [tokens x K]
  std::vector<float> weights;        // [tokens x K]
};

struct ExpertBatch {
  std::vector<int> src_rank;
  std::vector<int> src_token;
  std::vector<int> src_k;
  std::vector<float> rows;  // [count x hidden]

  int count() const { return static_cast<int>(src_rank.size()); }
};

struct Problem {
  int num_experts = 1;
  int topk = 1;
  int hidden = 1;
  std::vector<RankInput> ranks;
};

// Every expert's (src rank, token) multiset in (src rank, token) order.
std::vector<ExpertBatch> ref_dispatch(const Problem& p);

// out[r][t] = sum over ascending k of w[t,k] * row of (r, t) in the batch of
// expert topk[t,k]. `expert_rows[e]` is aligned with ref_dispatch's order.
std::vector<std::vector<float>> ref_combine(const Problem& p,
                                            const std::vector<ExpertBatch>& batches,
                                            const std::vector<std::vector<float>>& expert_rows);

// Rows routed to each expert, summed over all ranks.
std::vector<std::int64_t> ref_counts(const Problem& p);

// Distinct (token, destination node) pairs whose node differs from the
// token's own node: the inter-node message count of node-deduplicated
// forwarding.
std::int64_t ref_internode_messages(const Problem& p, int num_ranks, int ranks_per_node);

// Worst per-row max|a - b| / max|b| over rows of `row_len` elements (the
// whole vector when 0). A row that is zero in both counts as exact.
double relative_error(const std::vector<float>& got, const std::vector<float>& want,
                      std::size_t row_len = 0);

}  // namespace epsim::oracle

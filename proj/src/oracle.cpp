/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <utility>

namespace epsim::oracle {

std::vector<ExpertBatch> ref_dispatch(const Problem& p) {
  std::vector<ExpertBatch> out(static_cast<std::size_t>(p.num_experts));
  const auto H = static_cast<std::size_t>(p.hidden);
  for (int e = 0; e < p.num_experts; ++e) {
    auto& batch = out[static_cast<std::size_t>(e)];
    for (std::size_t r = 0; r < p.ranks.size(); ++r) {
      const auto& in = p.ranks[r];
      for (int t = 0; t < in.tokens; ++t) {
        for (int k = 0; k < p.topk; ++k) {
          if (in.topk[static_cast<std::size_t>(t * p.topk + k)] != e) continue;
          batch.src_rank.push_back(static_cast<int>(r));
          batch.src_token.push_back(t);
          batch.src_k.push_back(k);
          const auto* row = in.rows.data() + static_cast<std::size_t>(t) * H;
          batch.rows.insert(batch.rows.end(), row, row + H);
        }
      }
    }
  }
  return out;
}

std::vector<std::vector<float>> ref_combine(const Problem& p,
                                            const std::vector<ExpertBatch>& batches,
                                            const std::vector<std::vector<float>>& expert_rows) {
  const auto H = static_cast<std::size_t>(p.hidden);
  // (expert, rank, token) -> row position inside that expert's batch
  std::map<std::tuple<int, int, int>, std::size_t> where;
  for (std::size_t e = 0; e < batches.size(); ++e) {
    const auto& b = batches[e];
    for (int i = 0; i < b.count(); ++i) {
      where[{static_cast<int>(e), b.src_rank[static_cast<std::size_t>(i)],
             b.src_token[static_cast<std::size_t>(i)]}] = static_cast<std::size_t>(i);
    }
  }
  std::vector<std::vector<float>> out(p.ranks.size());
  for (std::size_t r = 0; r < p.ranks.size(); ++r) {
    const auto& in = p.ranks[r];
    auto& dst = out[r];
    dst.assign(static_cast<std::size_t>(in.tokens) * H, 0.0f);
    for (int t = 0; t < in.tokens; ++t) {
      for (int k = 0; k < p.topk; ++k) {
        const int e = in.topk[static_cast<std::size_t>(t * p.topk + k)];
        const float w = in.weights[static_cast<std::size_t>(t * p.topk + k)];
        const auto it = where.find({e, static_cast<int>(r), t});
        if (it == where.end()) throw std::logic_error("oracle: routed row missing");
        const float* y = expert_rows[static_cast<std::size_t>(e)].data() + it->second * H;
        for (std::size_t h = 0; h < H; ++h) {
          const float prod = w * y[h];
          dst[static_cast<std::size_t>(t) * H + h] += prod;
        }
      }
    }
  }
  return out;
}

std::vector<std::int64_t> ref_counts(const Problem& p) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(p.num_experts), 0);
  for (const auto& in : p.ranks) {
    for (auto e : in.topk) ++counts[static_cast<std::size_t>(e)];
  }
  return counts;
}

std::int64_t ref_internode_messages(const Problem& p, int num_ranks, int ranks_per_node) {
  const int L = (p.num_experts + num_ranks - 1) / num_ranks;
  std::int64_t msgs = 0;
  for (std::size_t r = 0; r < p.ranks.size(); ++r) {
    const int my_node = static_cast<int>(r) / ranks_per_node;
    const auto& in = p.ranks[r];
    for (int t = 0; t < in.tokens; ++t) {
      std::set<int> nodes;
      for (int k = 0; k < p.topk; ++k) {
        const int e = in.topk[static_cast<std::size_t>(t * p.topk + k)];
        const int node = (e / L) / ranks_per_node;
        if (node != my_node) nodes.insert(node);
      }
      msgs += static_cast<std::int64_t>(nodes.size());
    }
  }
  return msgs;
}

double relative_error(const std::vector<float>& got, const std::vector<float>& want,
                      std::size_t row_len) {
  if (got.size() != want.size()) return INFINITY;
  if (row_len == 0) row_len = got.empty() ? 1 : got.size();
  double worst = 0.0;
  for (std::size_t base = 0; base < got.size(); base += row_len) {
    double diff = 0.0;
    double mag = 0.0;
    const std::size_t end = std::min(got.size(), base + row_len);
    for (std::size_t i = base; i < end; ++i) {
      if (std::isnan(got[i]) != std::isnan(want[i])) return INFINITY;
      diff = std::max(diff, std::fabs(static_cast<double>(got[i]) - want[i]));
      mag = std::max(mag, std::fabs(static_cast<double>(want[i])));
    }
    if (diff == 0.0) continue;
    worst = std::max(worst, mag == 0.0 ? INFINITY : diff / mag);
  }
  return worst;
}

}  // namespace epsim::oracle

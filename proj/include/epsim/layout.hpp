/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epsim/core.hpp"

// Index math and sizing shared by the LL and HT engines. Everything here is
// a pure function of its arguments.
namespace epsim::layout {

struct MoeShape {
  int experts = 1;  // E
  int ranks = 1;    // N
  int tokens = 1;   // B, per rank
  int topk = 1;     // K
  int hidden = 1;   // H

  static MoeShape from(const EpConfig& c) {
    return {c.num_experts, c.num_ranks, c.max_tokens_per_rank, c.top_k, c.hidden};
  }

  // L = ceil(E / N)
  int experts_per_rank() const { return (experts + ranks - 1) / ranks; }
  int rank_of_expert(int e) const { return e / experts_per_rank(); }
  int first_expert(int rank) const { return rank * experts_per_rank(); }
  // Real (non-padding) experts hosted on `rank`; may be zero.
  int local_experts(int rank) const {
    const int n = experts - first_expert(rank);
    return n <= 0 ? 0 : (n < experts_per_rank() ? n : experts_per_rank());
  }

  void validate() const {
    require(ranks >= 1 && experts >= ranks, ErrorCode::InvalidArgument, "need E >= N >= 1");
    require(tokens >= 1 && topk >= 1 && hidden >= 1, ErrorCode::InvalidArgument,
            "B, K and H must be positive");
  }
};

struct ExpertRankPair {
  int expert;
  int rank;
  friend bool operator==(const ExpertRankPair&, const ExpertRankPair&) = default;
};

// Remote rank of pair (e, r) seen from the data-parallel side.
inline int rem_dp(const MoeShape& s, int e) { return s.rank_of_expert(e); }

// Pairs of data-parallel rank r: one per expert.
inline std::vector<ExpertRankPair> valid_pairs_dp(const MoeShape& s, int r) {
  require(r >= 0 && r < s.ranks, ErrorCode::InvalidArgument, "rank out of range");
  std::vector<ExpertRankPair> out;
  out.reserve(static_cast<std::size_t>(s.experts));
  for (int e = 0; e < s.experts; ++e) out.push_back({e, r});
  return out;
}

// Pairs hosted by rank r on the expert side: (local expert, any source rank).
inline std::vector<ExpertRankPair> valid_pairs_expert(const MoeShape& s, int r) {
  require(r >= 0 && r < s.ranks, ErrorCode::InvalidArgument, "rank out of range");
  std::vector<ExpertRankPair> out;
  const int first = s.first_expert(r);
  for (int le = 0; le < s.local_experts(r); ++le) {
    for (int src = 0; src < s.ranks; ++src) out.push_back({first + le, src});
  }
  return out;
}

// Legacy dispatch sub-region on the expert rank: (e mod L) * N + r.
// `strict` evaluates the (e mod N) * N + r form, which only coincides with
// the L-based one (and only fits the region) when L == N.
inline int idx_dp_legacy(const MoeShape& s, int e, int r, bool strict = false) {
  require(e >= 0 && e < s.experts && r >= 0 && r < s.ranks, ErrorCode::InvalidArgument,
          "invalid expert-rank pair");
  const int L = s.experts_per_rank();
  if (strict) {
    require(L == s.ranks, ErrorCode::InvalidArgument, "strict legacy index needs L == N");
    return (e % s.ranks) * s.ranks + r;
  }
  return (e % L) * s.ranks + r;
}

inline constexpr int idx_e(int e) { return e; }
inline constexpr int idx_d_opt(int r) { return r; }
inline constexpr int idx_c_opt(int t, int k, int K) { return t * K + k; }

// ---- payload header ------------------------------------------------------
// Little-endian: u32 src_token_idx, u32 k_count, k_count x u32 expert id.

inline constexpr std::size_t header_bytes(int k_count) {
  return 8 + 4 * static_cast<std::size_t>(k_count);
}

namespace detail {
inline void put_u32(std::byte* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFFu);
}
inline std::uint32_t get_u32(const std::byte* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void encode_header_into(std::span<std::byte> out, std::uint32_t src_token,
                               std::span<const std::int32_t> routing, int num_experts) {
  require(out.size() >= header_bytes(static_cast<int>(routing.size())),
          ErrorCode::InvalidArgument, "header buffer too small");
  detail::put_u32(out.data(), src_token);
  detail::put_u32(out.data() + 4, static_cast<std::uint32_t>(routing.size()));
  for (std::size_t k = 0; k < routing.size(); ++k) {
    require(routing[k] >= 0 && routing[k] < num_experts, ErrorCode::InvalidArgument,
            "routing entry out of range");
    detail::put_u32(out.data() + 8 + 4 * k, static_cast<std::uint32_t>(routing[k]));
  }
}

inline std::vector<std::byte> encode_header(std::uint32_t src_token,
                                            std::span<const std::int32_t> routing,
                                            int num_experts) {
  std::vector<std::byte> out(header_bytes(static_cast<int>(routing.size())));
  encode_header_into(out, src_token, routing, num_experts);
  return out;
}

struct Header {
  std::uint32_t src_token = 0;
  std::vector<std::int32_t> routing;
  friend bool operator==(const Header&, const Header&) = default;
};

inline Header decode_header(std::span<const std::byte> in) {
  require(in.size() >= 8, ErrorCode::InvalidArgument, "header truncated");
  Header h;
  h.src_token = detail::get_u32(in.data());
  const std::uint32_t k = detail::get_u32(in.data() + 4);
  require(in.size() >= header_bytes(static_cast<int>(k)), ErrorCode::InvalidArgument,
          "header routing truncated");
  h.routing.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    h.routing[i] = static_cast<std::int32_t>(detail::get_u32(in.data() + 8 + 4 * i));
  }
  return h;
}

// ---- slot geometry and footprint ----------------------------------------

struct SlotGeometry {
  std::size_t header_bytes = 0;
  std::size_t token_bytes = 0;
  std::size_t scale_bytes = 0;
  std::size_t combine_token_bytes = 0;

  std::size_t dispatch_slot() const { return header_bytes + token_bytes + scale_bytes; }
  std::size_t combine_slot() const { return combine_token_bytes; }
};

// Legacy headers carry only the source token index; optimized headers add
// the K routing entries.
inline SlotGeometry slot_geometry(Dtype dtype, int hidden, int topk, bool with_scales,
                                  LlLayout layout) {
  SlotGeometry g;
  g.header_bytes = layout::header_bytes(layout == LlLayout::Optimized ? topk : 0);
  g.token_bytes = static_cast<std::size_t>(hidden) * byte_width(dtype);
  g.scale_bytes = with_scales ? static_cast<std::size_t>(hidden / kQuantBlock) * 4 : 0;
  g.combine_token_bytes = g.token_bytes;
  return g;
}

inline SlotGeometry slot_geometry(const EpConfig& c) {
  return slot_geometry(c.token_dtype, c.hidden, c.top_k, c.with_scales, c.ll_layout);
}

// Receive-region bytes for one dispatch + one combine on a rank:
// legacy E*B*(P_d + P_c), optimized N*B*P_d + B*K*P_c.
inline std::size_t footprint(const MoeShape& s, const SlotGeometry& g, LlLayout layout) {
  const auto E = static_cast<std::size_t>(s.experts);
  const auto N = static_cast<std::size_t>(s.ranks);
  const auto B = static_cast<std::size_t>(s.tokens);
  const auto K = static_cast<std::size_t>(s.topk);
  if (layout == LlLayout::Legacy) return E * B * g.dispatch_slot() + E * B * g.combine_slot();
  return N * B * g.dispatch_slot() + B * K * g.combine_slot();
}

// 2E / (N + K)
inline double reduction_ratio(int experts, int ranks, int topk) {
  return 2.0 * experts / static_cast<double>(ranks + topk);
}

// ---- worker partitions ---------------------------------------------------

struct LaneAssignment {
  int block;
  int lane_begin;
  int lane_end;  // exclusive
  int target;    // pair index or reduction group
};

struct WorkerPartition {
  int blocks = 0;  // S
  int lanes = 0;   // W
  std::vector<LaneAssignment> assignments;

  std::optional<int> target_of(int block, int lane) const {
    for (const auto& a : assignments) {
      if (a.block == block && lane >= a.lane_begin && lane < a.lane_end) return a.target;
    }
    return std::nullopt;
  }
  int num_targets() const { return static_cast<int>(assignments.size()); }
};

// Block i owns pairs [i*E_SM, (i+1)*E_SM) with E_SM = floor(E/S); pair
// i*E_SM + g is served by lanes [g*G, (g+1)*G), G = floor(W/E_SM).
inline WorkerPartition assign_pair_workers(int blocks, int lanes, int experts) {
  require(blocks >= 1 && lanes >= 1, ErrorCode::InvalidArgument, "S and W must be positive");
  const int per_block = experts / blocks;
  require(per_block >= 1, ErrorCode::InvalidArgument, "fewer pairs than blocks (E_SM == 0)");
  const int group = lanes / per_block;
  require(group >= 1, ErrorCode::InvalidArgument, "more pairs per block than lanes (G == 0)");
  WorkerPartition p{blocks, lanes, {}};
  p.assignments.reserve(static_cast<std::size_t>(blocks * per_block));
  for (int i = 0; i < blocks; ++i) {
    for (int g = 0; g < per_block; ++g) {
      p.assignments.push_back({i, g * group, (g + 1) * group, i * per_block + g});
    }
  }
  return p;
}

// Group m = i*Gp + floor(j/R) for lanes j < Gp*R of block i.
inline WorkerPartition assign_reduction_groups(int blocks, int lanes, int group_lanes,
                                               int groups_per_block) {
  require(blocks >= 1 && lanes >= 1 && group_lanes >= 1 && groups_per_block >= 1,
          ErrorCode::InvalidArgument, "partition parameters must be positive");
  require(groups_per_block * group_lanes <= lanes, ErrorCode::InvalidArgument,
          "Gp * R exceeds lanes per block");
  WorkerPartition p{blocks, lanes, {}};
  for (int i = 0; i < blocks; ++i) {
    for (int g = 0; g < groups_per_block; ++g) {
      p.assignments.push_back(
          {i, g * group_lanes, (g + 1) * group_lanes, i * groups_per_block + g});
    }
  }
  return p;
}

// Contiguous share [begin, end) of `total` items for worker `i` of `parts`.
inline std::pair<int, int> even_split(int total, int parts, int i) {
  const int base = total / parts;
  const int extra = total % parts;
  const int begin = i * base + (i < extra ? i : extra);
  return {begin, begin + base + (i < extra ? 1 : 0)};
}

// Order in which a rank walks `pairs` pair indices: partition order first,
// then the floor(E/S) remainder that the partition leaves uncovered.
inline std::vector<int> pair_schedule(int blocks, int lanes, int pairs) {
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(pairs));
  const auto part = assign_pair_workers(blocks, lanes, pairs);
  for (const auto& a : part.assignments) order.push_back(a.target);
  for (int p = static_cast<int>(order.size()); p < pairs; ++p) order.push_back(p);
  return order;
}

}  // namespace epsim::layout

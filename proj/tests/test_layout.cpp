/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "epsim/layout.hpp"
#include "epsim/ll.hpp"
#include "test_util.hpp"

using namespace epsim;
using namespace epsim::layout;

TEST(LayoutIndex, LegacyDispatchIsInjectivePerExpertRank) {
  for (int E = 1; E <= 64; ++E) {
    for (int N = 1; N <= E; ++N) {
      const MoeShape s{E, N, 1, 1, 1};
      const int L = s.experts_per_rank();
      for (int owner = 0; owner < N; ++owner) {
        std::vector<char> used(static_cast<std::size_t>(L * N), 0);
        for (const auto& p : valid_pairs_expert(s, owner)) {
          ASSERT_EQ(s.rank_of_expert(p.expert), owner);
          const int idx = idx_dp_legacy(s, p.expert, p.rank);
          ASSERT_GE(idx, 0);
          ASSERT_LT(idx, L * N) << "E=" << E << " N=" << N;
          ASSERT_FALSE(used[static_cast<std::size_t>(idx)]) << "E=" << E << " N=" << N;
          used[static_cast<std::size_t>(idx)] = 1;
        }
      }
    }
  }
}

TEST(LayoutIndex, StrictLegacyFormAgreesOnlyWhenExpertsPerRankEqualsRanks) {
  for (int N = 1; N <= 8; ++N) {
    const MoeShape s{N * N, N, 1, 1, 1};
    for (int e = 0; e < s.experts; ++e) {
      for (int r = 0; r < N; ++r) EXPECT_EQ(idx_dp_legacy(s, e, r, true), idx_dp_legacy(s, e, r));
    }
  }
  const MoeShape uneven{16, 8, 1, 1, 1};
  EXPECT_EP_ERROR(idx_dp_legacy(uneven, 3, 0, true), ErrorCode::InvalidArgument);
}

TEST(LayoutIndex, OptimizedCombineAndLegacyCombineAreBijective) {
  for (int B = 1; B <= 64; ++B) {
    for (int K = 1; K <= 64; ++K) {
      std::vector<char> used(static_cast<std::size_t>(B * K), 0);
      for (int t = 0; t < B; ++t) {
        for (int k = 0; k < K; ++k) {
          const int idx = idx_c_opt(t, k, K);
          ASSERT_LT(idx, B * K);
          ASSERT_FALSE(used[static_cast<std::size_t>(idx)]);
          used[static_cast<std::size_t>(idx)] = 1;
        }
      }
    }
  }
  for (int E = 1; E <= 64; ++E) {
    for (int B = 1; B <= 64; ++B) {
      std::set<int> seen;
      for (int e = 0; e < E; ++e) {
        for (int t = 0; t < B; ++t) seen.insert(idx_e(e) * B + t);
      }
      ASSERT_EQ(seen.size(), static_cast<std::size_t>(E * B));
      ASSERT_EQ(*seen.rbegin(), E * B - 1);
    }
  }
  for (int N = 1; N <= 64; ++N) {
    for (int r = 0; r < N; ++r) ASSERT_EQ(idx_d_opt(r), r);
  }
}

TEST(LayoutPairs, ExpertSidePairsPartitionAllPairs) {
  for (int E = 1; E <= 64; ++E) {
    for (int N = 1; N <= E; ++N) {
      const MoeShape s{E, N, 1, 1, 1};
      std::set<std::pair<int, int>> all;
      std::size_t total = 0;
      for (int r = 0; r < N; ++r) {
        for (const auto& p : valid_pairs_expert(s, r)) {
          all.insert({p.expert, p.rank});
          ++total;
        }
        const auto dp = valid_pairs_dp(s, r);
        ASSERT_EQ(dp.size(), static_cast<std::size_t>(E));
      }
      ASSERT_EQ(total, static_cast<std::size_t>(E * N));
      ASSERT_EQ(all.size(), total);
    }
  }
}

TEST(LayoutPartition, PairWorkersAreDisjointAndScheduleIsPermutation) {
  for (int pairs = 1; pairs <= 64; ++pairs) {
    for (int S = 1; S <= pairs; ++S) {
      for (int W : {1, 2, 4, 8, 32, 64}) {
        const int per = pairs / S;
        if (W / per < 1) {
          EXPECT_EP_ERROR(assign_pair_workers(S, W, pairs), ErrorCode::InvalidArgument);
          continue;
        }
        const auto p = assign_pair_workers(S, W, pairs);
        std::set<int> targets;
        for (const auto& a : p.assignments) {
          ASSERT_TRUE(targets.insert(a.target).second);
          ASSERT_GE(a.lane_begin, 0);
          ASSERT_LE(a.lane_end, W);
          ASSERT_LT(a.lane_begin, a.lane_end);
        }
        ASSERT_EQ(targets.size(), static_cast<std::size_t>(S * per));
        for (int b = 0; b < S; ++b) {
          std::vector<int> owner(static_cast<std::size_t>(W), -1);
          for (const auto& a : p.assignments) {
            if (a.block != b) continue;
            for (int l = a.lane_begin; l < a.lane_end; ++l) {
              ASSERT_EQ(owner[static_cast<std::size_t>(l)], -1);
              owner[static_cast<std::size_t>(l)] = a.target;
            }
          }
          for (int l = 0; l < W; ++l) {
            const auto t = p.target_of(b, l);
            ASSERT_EQ(t.value_or(-1), owner[static_cast<std::size_t>(l)]);
          }
        }
        auto order = pair_schedule(S, W, pairs);
        std::sort(order.begin(), order.end());
        std::vector<int> iota(static_cast<std::size_t>(pairs));
        std::iota(iota.begin(), iota.end(), 0);
        ASSERT_EQ(order, iota);
      }
    }
  }
}

TEST(LayoutPartition, ReductionGroupsAreDisjoint) {
  for (int S = 1; S <= 16; ++S) {
    for (int W : {4, 8, 32, 64}) {
      for (int R = 1; R <= W; ++R) {
        for (int G = 1; G * R <= W; ++G) {
          const auto p = assign_reduction_groups(S, W, R, G);
          ASSERT_EQ(p.num_targets(), S * G);
          std::set<int> ids;
          for (const auto& a : p.assignments) {
            ASSERT_EQ(a.target, a.block * G + a.lane_begin / R);
            ASSERT_EQ(a.lane_end - a.lane_begin, R);
            ids.insert(a.target);
          }
          ASSERT_EQ(ids.size(), static_cast<std::size_t>(S * G));
          for (int b = 0; b < S; ++b) {
            for (int l = 0; l < W; ++l) {
              const auto t = p.target_of(b, l);
              if (l < G * R) {
                ASSERT_EQ(t.value_or(-1), b * G + l / R);
              } else {
                ASSERT_FALSE(t.has_value());
              }
            }
          }
        }
      }
    }
  }
  EXPECT_EP_ERROR(assign_reduction_groups(1, 4, 3, 2), ErrorCode::InvalidArgument);
}

TEST(LayoutPartition, EvenSplitCovers) {
  for (int total = 0; total <= 64; ++total) {
    for (int parts = 1; parts <= 16; ++parts) {
      int next = 0;
      for (int i = 0; i < parts; ++i) {
        const auto [b, e] = even_split(total, parts, i);
        ASSERT_EQ(b, next);
        ASSERT_LE(e - b, total / parts + 1);
        next = e;
      }
      ASSERT_EQ(next, total);
    }
  }
}

TEST(LayoutHeader, GoldenBytes) {
  const std::int32_t routing[] = {3, 260};
  const auto bytes = encode_header(5, routing, 512);
  const std::vector<std::uint8_t> want = {5, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4, 1, 0, 0};
  ASSERT_EQ(bytes.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(static_cast<std::uint8_t>(bytes[i]), want[i]) << i;
  const auto h = decode_header(bytes);
  EXPECT_EQ(h.src_token, 5u);
  EXPECT_EQ(h.routing, (std::vector<std::int32_t>{3, 260}));
  EXPECT_EQ(header_bytes(0), 8u);
  EXPECT_EQ(header_bytes(8), 40u);
  EXPECT_EP_ERROR(encode_header(0, routing, 100), ErrorCode::InvalidArgument);
}

TEST(LayoutFootprint, RatioIsExactForEqualSlots) {
  for (int E : {8, 64, 256, 512}) {
    for (int N : {1, 8, 64}) {
      for (int K : {1, 2, 8}) {
        if (N > E || K > E) continue;
        const MoeShape s{E, N, 128, K, 7168};
        SlotGeometry g;
        g.token_bytes = 14336;
        g.combine_token_bytes = 14336;
        const double ratio = static_cast<double>(footprint(s, g, LlLayout::Legacy)) /
                             static_cast<double>(footprint(s, g, LlLayout::Optimized));
        EXPECT_DOUBLE_EQ(ratio, reduction_ratio(E, N, K));
      }
    }
  }
  EXPECT_NEAR(reduction_ratio(512, 64, 8), 14.22, 0.01);
  EXPECT_DOUBLE_EQ(reduction_ratio(8, 8, 8), 1.0);
}

TEST(LayoutFootprint, EnginePlanMatchesFormula) {
  for (auto layout : {LlLayout::Legacy, LlLayout::Optimized}) {
    EpConfig c = test::small_config(8, 8, 256, 128, 8, 7168);
    c.token_dtype = Dtype::BF16;
    c.ll_layout = layout;
    const auto plan = ll::plan_buffers(c);
    EXPECT_EQ(plan.footprint_bytes(), footprint(MoeShape::from(c), slot_geometry(c), layout));
    EXPECT_EQ(plan.window_bytes(), 2 * plan.footprint_bytes());
  }
}

/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <gtest/gtest.h>

#include <span>
#include <vector>

#include "epsim/core.hpp"

#define EXPECT_EP_ERROR(stmt, expected_code)                                          \
  do {                                                                                \
    try {                                                                             \
      stmt;                                                                           \
      ADD_FAILURE() << "expected " << ::epsim::to_string(expected_code) << " from "   \
                    << #stmt;                                                         \
    } catch (const ::epsim::EpError& e_) {                                            \
      EXPECT_EQ(e_.code(), expected_code)                                             \
          << ::epsim::to_string(e_.code()) << ": " << e_.detail();                    \
    }                                                                                 \
  } while (0)

namespace epsim::test {

inline EpConfig small_config(int ranks, int ranks_per_node, int experts, int tokens, int topk,
                             int hidden, Algorithm algorithm = Algorithm::LL) {
  EpConfig c;
  c.algorithm = algorithm;
  c.num_ranks = ranks;
  c.ranks_per_node = ranks_per_node;
  c.num_experts = experts;
  c.max_tokens_per_rank = tokens;
  c.top_k = topk;
  c.hidden = hidden;
  return c;
}

template <typename T>
std::span<std::byte> bytes_of(std::vector<T>& v) {
  return {reinterpret_cast<std::byte*>(v.data()), v.size() * sizeof(T)};
}

}  // namespace epsim::test

/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/oracle.hpp"

// Seeded workloads: routing, token rows, combine weights and stub experts.
namespace epsim::scenario {

enum class ExpertKind : std::uint8_t { Identity, Scale, Affine };
enum class RoutingPattern : std::uint8_t { Uniform, Concentrated };

const char* to_string(ExpertKind kind);
ExpertKind parse_expert_kind(std::string_view name);

struct RankData {
  Routing routing;
  std::vector<std::byte> tokens;  // [T x H] encoded in the token dtype
  std::vector<float> scales;      // [T x H/128] when the config carries scales
  std::vector<float> values;      // [T x H] what the encoded tokens decode to
  std::vector<float> weights;     // [T x K], each row sums to exactly 1
};

// `tokens` < 0 means max_tokens_per_rank. Draws are independent per rank.
RankData generate_rank(const EpConfig& config, std::uint64_t seed, int rank, int tokens = -1,
                       RoutingPattern pattern = RoutingPattern::Uniform);
std::vector<RankData> generate(const EpConfig& config, std::uint64_t seed, int tokens = -1,
                               RoutingPattern pattern = RoutingPattern::Uniform);

// y = a * x + b[h]; all coefficients are dyadic so products stay exact.
struct ExpertCoefficients {
  float scale = 1.0f;
  std::vector<float> bias;  // empty means zero
};
ExpertCoefficients expert_coefficients(ExpertKind kind, std::uint64_t seed, int expert,
                                       int hidden);

void apply_expert(const ExpertCoefficients& c, std::span<const float> in, std::span<float> out);

// Value a float row takes after being stored in `dt` (FP8 unscaled).
std::vector<float> round_trip(Dtype dt, std::span<const float> row);

oracle::Problem to_problem(const EpConfig& config, const std::vector<RankData>& data);

}  // namespace epsim::scenario

/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/scenario.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

namespace epsim::scenario {

const char* to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::Identity: return "identity";
    case ExpertKind::Scale: return "scale";
    case ExpertKind::Affine: return "affine";
  }
  return "?";
}

ExpertKind parse_expert_kind(std::string_view name) {
  for (auto k : {ExpertKind::Identity, ExpertKind::Scale, ExpertKind::Affine}) {
    if (name == to_string(k)) return k;
  }
  raise(ErrorCode::InvalidArgument, "unknown expert kind '" + std::string(name) + "'");
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

// K positive integers summing to a power of two >= max(64, K), as fractions.
std::vector<float> draw_weights(std::mt19937_64& rng, int K) {
  int total = 64;
  while (total < K) total *= 2;
  std::vector<int> parts(static_cast<std::size_t>(K), 1);
  std::uniform_int_distribution<int> pick(0, K - 1);
  for (int i = K; i < total; ++i) ++parts[static_cast<std::size_t>(pick(rng))];
  std::vector<float> w(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    w[i] = static_cast<float>(parts[i]) / static_cast<float>(total);
  }
  return w;
}

}  // namespace

RankData generate_rank(const EpConfig& config, std::uint64_t seed, int rank, int tokens,
                       RoutingPattern pattern) {
  const int T = tokens < 0 ? config.max_tokens_per_rank : tokens;
  const int K = config.top_k;
  const int E = config.num_experts;
  const auto H = static_cast<std::size_t>(config.hidden);
  auto rng = stream(seed, 1, static_cast<std::uint64_t>(rank));

  RankData d;
  d.routing.tokens = T;
  d.routing.topk = K;
  d.routing.experts.reserve(static_cast<std::size_t>(T * K));
  std::vector<std::int32_t> pool(static_cast<std::size_t>(E));
  for (int t = 0; t < T; ++t) {
    if (pattern == RoutingPattern::Concentrated) {
      for (int k = 0; k < K; ++k) d.routing.experts.push_back(k);
      continue;
    }
    std::iota(pool.begin(), pool.end(), 0);
    for (int k = 0; k < K; ++k) {
      std::uniform_int_distribution<int> pick(k, E - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(pick(rng))]);
      d.routing.experts.push_back(pool[static_cast<std::size_t>(k)]);
    }
  }

  std::uniform_int_distribution<int> value(-512, 512);
  std::vector<float> raw(static_cast<std::size_t>(T) * H);
  for (auto& v : raw) v = static_cast<float>(value(rng)) / 64.0f;

  const std::size_t w = byte_width(config.token_dtype);
  d.tokens.resize(raw.size() * w);
  d.values.resize(raw.size());
  if (config.with_scales) {
    const std::size_t blocks = H / kQuantBlock;
    d.scales.resize(static_cast<std::size_t>(T) * blocks);
    for (int t = 0; t < T; ++t) {
      const auto row = std::span(raw).subspan(static_cast<std::size_t>(t) * H, H);
      auto codes = std::span(reinterpret_cast<std::uint8_t*>(d.tokens.data()), d.tokens.size())
                       .subspan(static_cast<std::size_t>(t) * H, H);
      auto sc = std::span(d.scales).subspan(static_cast<std::size_t>(t) * blocks, blocks);
      quantize_block(row, codes, sc);
      dequantize_block(codes, sc, std::span(d.values).subspan(static_cast<std::size_t>(t) * H, H));
    }
  } else {
    encode_row(config.token_dtype, raw, d.tokens);
    decode_row(config.token_dtype, d.tokens, d.values);
  }

  d.weights.reserve(static_cast<std::size_t>(T * K));
  for (int t = 0; t < T; ++t) {
    const auto w_row = draw_weights(rng, K);
    d.weights.insert(d.weights.end(), w_row.begin(), w_row.end());
  }
  return d;
}

std::vector<RankData> generate(const EpConfig& config, std::uint64_t seed, int tokens,
                               RoutingPattern pattern) {
  std::vector<RankData> out;
  out.reserve(static_cast<std::size_t>(config.num_ranks));
  for (int r = 0; r < config.num_ranks; ++r) {
    out.push_back(generate_rank(config, seed, r, tokens, pattern));
  }
  return out;
}

ExpertCoefficients expert_coefficients(ExpertKind kind, std::uint64_t seed, int expert,
                                       int hidden) {
  ExpertCoefficients c;
  switch (kind) {
    case ExpertKind::Identity: break;
    case ExpertKind::Scale: c.scale = static_cast<float>(expert + 1); break;
    case ExpertKind::Affine: {
      auto rng = stream(seed, 2, static_cast<std::uint64_t>(expert));
      std::uniform_int_distribution<int> a(-16, 16);
      std::uniform_int_distribution<int> b(-64, 64);
      c.scale = static_cast<float>(a(rng)) / 8.0f;
      c.bias.resize(static_cast<std::size_t>(hidden));
      for (auto& v : c.bias) v = static_cast<float>(b(rng)) / 16.0f;
      break;
    }
  }
  return c;
}

void apply_expert(const ExpertCoefficients& c, std::span<const float> in, std::span<float> out) {
  for (std::size_t h = 0; h < in.size(); ++h) {
    const float scaled = c.scale * in[h];
    out[h] = c.bias.empty() ? scaled : scaled + c.bias[h];
  }
}

std::vector<float> round_trip(Dtype dt, std::span<const float> row) {
  std::vector<std::byte> bytes(row.size() * byte_width(dt));
  encode_row(dt, row, bytes);
  std::vector<float> out(row.size());
  decode_row(dt, bytes, out);
  return out;
}

oracle::Problem to_problem(const EpConfig& config, const std::vector<RankData>& data) {
  oracle::Problem p;
  p.num_experts = config.num_experts;
  p.topk = config.top_k;
  p.hidden = config.hidden;
  for (const auto& d : data) {
    oracle::RankInput in;
    in.tokens = d.routing.tokens;
    in.rows = d.values;
    in.topk = d.routing.experts;
    in.weights = d.weights;
    p.ranks.push_back(std::move(in));
  }
  return p;
}

}  // namespace epsim::scenario

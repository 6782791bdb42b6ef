/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <algorithm>
#include <array>
#include <bit>
#include <cfloat>
#include <cmath>
#include <cstring>

#include "epsim/core.hpp"

namespace epsim {

namespace {

// E4M3 (bias 7, no infinities, S.1111.111 is NaN): positive codes 0..126
// are monotonically increasing in value.
constexpr float e4m3_value(unsigned code) {
  const unsigned e = (code >> 3) & 0xF;
  const unsigned m = code & 0x7;
  float mag = 0.0f;
  if (e == 0) {
    mag = static_cast<float>(m) / 8.0f / 64.0f;
  } else {
    mag = 1.0f + static_cast<float>(m) / 8.0f;
    int shift = static_cast<int>(e) - 7;
    while (shift > 0) { mag *= 2.0f; --shift; }
    while (shift < 0) { mag /= 2.0f; ++shift; }
  }
  return (code & 0x80) ? -mag : mag;
}

constexpr std::array<float, 127> make_positive_table() {
  std::array<float, 127> t{};
  for (unsigned c = 0; c < t.size(); ++c) t[c] = e4m3_value(c);
  return t;
}

constexpr auto kPositive = make_positive_table();

float pick_scale(float absmax) {
  // Nearest scale to absmax/448 that survives fl(fl(448*s)/448), so that
  // requantizing a dequantized block reproduces the same scale.
  const float s0 = std::max(absmax / kFp8Max, FLT_TRUE_MIN);
  auto round_trips = [](float s) {
    volatile float hi = kFp8Max * s;
    volatile float back = hi / kFp8Max;
    return back == s;
  };
  if (round_trips(s0)) return s0;
  float up = s0;
  float down = s0;
  for (int i = 0; i < 64; ++i) {
    up = std::nextafter(up, FLT_MAX);
    if (round_trips(up)) return up;
    down = std::nextafter(down, 0.0f);
    if (down > 0.0f && round_trips(down)) return down;
  }
  return s0;
}

}  // namespace

float fp8_e4m3_decode(std::uint8_t code) {
  if ((code & 0x7F) == 0x7F) return std::nanf("");
  return e4m3_value(code);
}

std::uint8_t fp8_e4m3_encode(float value) {
  if (std::isnan(value)) return 0x7F;
  const std::uint8_t sign = std::signbit(value) ? 0x80 : 0x00;
  const float mag = std::fabs(value);
  if (mag >= kPositive.back()) return sign | 0x7E;
  const auto it = std::lower_bound(kPositive.begin(), kPositive.end(), mag);
  auto hi = static_cast<unsigned>(it - kPositive.begin());
  if (kPositive[hi] == mag || hi == 0) return sign | static_cast<std::uint8_t>(hi);
  const unsigned lo = hi - 1;
  const float dlo = mag - kPositive[lo];
  const float dhi = kPositive[hi] - mag;
  unsigned pick = dlo < dhi ? lo : hi;
  if (dlo == dhi) pick = (lo % 2 == 0) ? lo : hi;
  return sign | static_cast<std::uint8_t>(pick);
}

std::uint16_t bf16_encode(float value) {
  const auto x = std::bit_cast<std::uint32_t>(value);
  if ((x & 0x7FFFFFFFu) > 0x7F800000u) return static_cast<std::uint16_t>((x >> 16) | 0x0040u);
  const std::uint32_t rounded = x + 0x7FFFu + ((x >> 16) & 1u);
  return static_cast<std::uint16_t>(rounded >> 16);
}

float bf16_decode(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f16_encode(float value) {
  const auto x = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t mag = x & 0x7FFFFFFFu;
  if (mag >= 0x7F800000u) {
    return sign | 0x7C00u | (mag > 0x7F800000u ? 0x0200u : 0u);
  }
  if (mag >= 0x477FF000u) return sign | 0x7C00u;  // rounds past 65504
  if (mag < 0x38800000u) {
    // Subnormal half: units of 2^-24; rint rounds half to even.
    const float f = std::bit_cast<float>(mag);
    return sign | static_cast<std::uint16_t>(std::rint(f * 16777216.0f));
  }
  const std::uint32_t exp = (mag >> 23) - 127 + 15;
  std::uint32_t h = (exp << 10) | ((mag & 0x7FFFFFu) >> 13);
  const std::uint32_t rest = mag & 0x1FFFu;
  if (rest > 0x1000u || (rest == 0x1000u && (h & 1u))) ++h;
  return sign | static_cast<std::uint16_t>(h);
}

float f16_decode(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1Fu;
  const std::uint32_t mant = bits & 0x3FFu;
  if (exp == 0) {
    const float mag = static_cast<float>(mant) / 16777216.0f;
    return sign ? -mag : mag;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

float decode_value(Dtype dt, const std::byte* p) {
  switch (dt) {
    case Dtype::F32: {
      float v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case Dtype::BF16: {
      std::uint16_t v;
      std::memcpy(&v, p, 2);
      return bf16_decode(v);
    }
    case Dtype::F16: {
      std::uint16_t v;
      std::memcpy(&v, p, 2);
      return f16_decode(v);
    }
    case Dtype::FP8: return fp8_e4m3_decode(static_cast<std::uint8_t>(*p));
    default: raise(ErrorCode::InvalidArgument, "decode_value on integer dtype");
  }
}

void encode_value(Dtype dt, float value, std::byte* p) {
  switch (dt) {
    case Dtype::F32: std::memcpy(p, &value, 4); return;
    case Dtype::BF16: {
      const auto v = bf16_encode(value);
      std::memcpy(p, &v, 2);
      return;
    }
    case Dtype::F16: {
      const auto v = f16_encode(value);
      std::memcpy(p, &v, 2);
      return;
    }
    case Dtype::FP8: *p = static_cast<std::byte>(fp8_e4m3_encode(value)); return;
    default: raise(ErrorCode::InvalidArgument, "encode_value on integer dtype");
  }
}

void encode_row(Dtype dt, std::span<const float> in, std::span<std::byte> out) {
  const std::size_t w = byte_width(dt);
  require(out.size() >= in.size() * w, ErrorCode::CapacityExceeded, "encode_row output too small");
  if (dt == Dtype::F32) {
    std::memcpy(out.data(), in.data(), in.size() * 4);
    return;
  }
  for (std::size_t i = 0; i < in.size(); ++i) encode_value(dt, in[i], out.data() + i * w);
}

void decode_row(Dtype dt, std::span<const std::byte> in, std::span<float> out) {
  const std::size_t w = byte_width(dt);
  require(in.size() >= out.size() * w, ErrorCode::CapacityExceeded, "decode_row input too small");
  if (dt == Dtype::F32) {
    std::memcpy(out.data(), in.data(), out.size() * 4);
    return;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = decode_value(dt, in.data() + i * w);
}

// ---- block quantization --------------------------------------------------

void quantize_block(std::span<const float> row, std::span<std::uint8_t> codes,
                    std::span<float> scales) {
  require(row.size() % kQuantBlock == 0, ErrorCode::InvalidArgument,
          "row length must be a multiple of 128");
  const std::size_t blocks = row.size() / kQuantBlock;
  require(codes.size() == row.size() && scales.size() == blocks, ErrorCode::InvalidArgument,
          "quantize_block output size mismatch");
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto block = row.subspan(b * kQuantBlock, kQuantBlock);
    float absmax = 0.0f;
    for (float v : block) absmax = std::max(absmax, std::fabs(v));
    auto out = codes.subspan(b * kQuantBlock, kQuantBlock);
    if (absmax == 0.0f) {
      scales[b] = 0.0f;
      std::fill(out.begin(), out.end(), std::uint8_t{0});
      continue;
    }
    const float scale = pick_scale(absmax);
    scales[b] = scale;
    for (std::size_t i = 0; i < block.size(); ++i) out[i] = fp8_e4m3_encode(block[i] / scale);
  }
}

QuantizedRow quantize_block(std::span<const float> row) {
  require(row.size() % kQuantBlock == 0, ErrorCode::InvalidArgument,
          "row length must be a multiple of 128");
  QuantizedRow q;
  q.codes.resize(row.size());
  q.scales.resize(row.size() / kQuantBlock);
  quantize_block(row, q.codes, q.scales);
  return q;
}

void dequantize_block(std::span<const std::uint8_t> codes, std::span<const float> scales,
                      std::span<float> out) {
  require(codes.size() == scales.size() * kQuantBlock, ErrorCode::InvalidArgument,
          "codes length must equal 128 * scales length");
  require(out.size() == codes.size(), ErrorCode::InvalidArgument, "dequantize output size");
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const float s = scales[i / kQuantBlock];
    out[i] = s == 0.0f ? 0.0f : fp8_e4m3_decode(codes[i]) * s;
  }
}

std::vector<float> dequantize_block(std::span<const std::uint8_t> codes,
                                    std::span<const float> scales) {
  std::vector<float> out(codes.size());
  dequantize_block(codes, scales, out);
  return out;
}

}  // namespace epsim

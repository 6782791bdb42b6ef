/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "epsim/core.hpp"
#include "test_util.hpp"

using namespace epsim;

TEST(Fp8, EveryCodeRoundTrips) {
  int finite = 0;
  for (int code = 0; code < 256; ++code) {
    const float v = fp8_e4m3_decode(static_cast<std::uint8_t>(code));
    if (std::isnan(v)) {
      EXPECT_TRUE(code == 0x7F || code == 0xFF) << code;
      continue;
    }
    ++finite;
    const auto back = fp8_e4m3_encode(v);
    if (v == 0.0f) {
      // +0 and -0 keep their sign bit.
      EXPECT_EQ(back, static_cast<std::uint8_t>(code));
    } else {
      EXPECT_EQ(back, static_cast<std::uint8_t>(code)) << "value " << v;
    }
  }
  EXPECT_EQ(finite, 254);
  EXPECT_EQ(fp8_e4m3_decode(0x7E), 448.0f);
  EXPECT_EQ(fp8_e4m3_decode(0x01), std::ldexp(1.0f, -9));
}

TEST(Fp8, EncodeIsNearestTiesToEven) {
  std::vector<float> pos;
  for (int code = 0; code <= 0x7E; ++code) pos.push_back(fp8_e4m3_decode(static_cast<std::uint8_t>(code)));
  for (std::size_t i = 0; i + 1 < pos.size(); ++i) {
    const float lo = pos[i], hi = pos[i + 1];
    const float mid = lo + (hi - lo) / 2;
    const auto even = (i % 2 == 0) ? i : i + 1;
    EXPECT_EQ(fp8_e4m3_encode(mid), even) << lo << " " << hi;
    EXPECT_EQ(fp8_e4m3_encode(std::nextafter(mid, lo)), i);
    EXPECT_EQ(fp8_e4m3_encode(std::nextafter(mid, hi)), i + 1);
  }
  EXPECT_EQ(fp8_e4m3_encode(1e9f), 0x7E);
  EXPECT_EQ(fp8_e4m3_encode(-1e9f), 0xFE);
}

TEST(Quant, BlockRoundTripErrorBound) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> dist(0.0f, 3.0f);
  std::vector<float> row(7168);
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& v : row) v = dist(rng) * (trial % 4 == 0 ? 1e-3f : 1.0f);
    const auto q = quantize_block(row);
    ASSERT_EQ(q.scales.size(), 56u);
    ASSERT_EQ(q.scales.size() * sizeof(float), 224u);
    const auto back = dequantize_block(q.codes, q.scales);
    for (std::size_t i = 0; i < row.size(); ++i) {
      const float s = q.scales[i / kQuantBlock];
      if (std::fabs(row[i]) < s) continue;
      EXPECT_LE(std::fabs(back[i] - row[i]) / std::fabs(row[i]), 0.125f) << i;
    }
  }
}

TEST(Quant, RequantizingIsStable) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> dist(-100.0f, 100.0f);
  std::vector<float> row(256);
  for (auto& v : row) v = dist(rng);
  const auto q1 = quantize_block(row);
  const auto back = dequantize_block(q1.codes, q1.scales);
  const auto q2 = quantize_block(back);
  EXPECT_EQ(q1.codes, q2.codes);
  EXPECT_EQ(q1.scales, q2.scales);
}

TEST(Quant, RejectsPartialBlocks) {
  std::vector<float> row(100);
  EXPECT_EP_ERROR(quantize_block(row), ErrorCode::InvalidArgument);
}

TEST(Codecs, HalfFormats) {
  EXPECT_EQ(bf16_decode(bf16_encode(1.5f)), 1.5f);
  EXPECT_EQ(f16_decode(f16_encode(-2.25f)), -2.25f);
  EXPECT_EQ(bf16_encode(1.0f), 0x3F80);
  EXPECT_EQ(f16_encode(1.0f), 0x3C00);
  // 1 + 2^-8 is halfway between two bf16 values; ties go to even.
  EXPECT_EQ(bf16_encode(1.0f + std::ldexp(1.0f, -8)), 0x3F80);
  EXPECT_EQ(f16_decode(f16_encode(65504.0f)), 65504.0f);
  EXPECT_TRUE(std::isinf(f16_decode(f16_encode(1e6f))));
}

TEST(Tensor, StridedRowsAndBounds) {
  std::vector<std::byte> buf(4 * 6 * 4);
  // Column-major 4x3 view over a 4x6 buffer: strides (1, 8).
  NDTensor t({4, 3}, {1, 8}, Dtype::F32, TensorTag::Tokens, buf);
  t.store_f32({2, 1}, 7.0f);
  EXPECT_EQ(t.load_f32({2, 1}), 7.0f);
  float raw = 0;
  std::memcpy(&raw, buf.data() + (2 + 8) * 4, 4);
  EXPECT_EQ(raw, 7.0f);
  EXPECT_FALSE(t.is_contiguous());
  EXPECT_EP_ERROR(NDTensor({4, 4}, {1, 8}, Dtype::F32, TensorTag::Tokens, buf),
                  ErrorCode::InvalidArgument);
  EXPECT_EP_ERROR(tensor_create({10, 10}, Dtype::F32, TensorTag::Tokens, buf),
                  ErrorCode::InvalidArgument);

  auto c = tensor_create({2, 3}, Dtype::BF16, TensorTag::Tokens, buf);
  const float row[3] = {1.0f, -2.0f, 0.5f};
  const std::int64_t lead[] = {1};
  c.write_row(lead, row);
  float out[3];
  c.read_row(lead, out);
  EXPECT_EQ(out[1], -2.0f);
  std::byte bytes[6];
  c.read_row_bytes(lead, bytes);
  EXPECT_EQ(std::memcmp(bytes, buf.data() + 6, 6), 0);
}

TEST(Tensor, TagNamesRoundTrip) {
  for (auto tag : kAllTags) EXPECT_EQ(parse_tag(to_string(tag)), tag);
  for (auto dt : {Dtype::F32, Dtype::BF16, Dtype::F16, Dtype::FP8, Dtype::I32, Dtype::I64}) {
    EXPECT_EQ(parse_dtype(to_string(dt)), dt);
  }
  EXPECT_EP_ERROR(parse_dtype("f64"), ErrorCode::InvalidArgument);
}

TEST(Config, Validation) {
  EpConfig c = test::small_config(4, 2, 16, 8, 2, 8);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.ranks_per_node = 3;
  EXPECT_EP_ERROR(bad.validate(), ErrorCode::InvalidArgument);
  bad = c;
  bad.top_k = 17;
  EXPECT_EP_ERROR(bad.validate(), ErrorCode::InvalidArgument);
  bad = c;
  bad.with_scales = true;
  EXPECT_EP_ERROR(bad.validate(), ErrorCode::InvalidArgument);
  bad.token_dtype = Dtype::FP8;
  bad.hidden = 256;
  EXPECT_NO_THROW(bad.validate());
  bad.algorithm = Algorithm::HT;
  EXPECT_EP_ERROR(bad.validate(), ErrorCode::InvalidArgument);

  auto other = c;
  EXPECT_EQ(c.fingerprint(), other.fingerprint());
  other.num_experts = 32;
  EXPECT_NE(c.fingerprint(), other.fingerprint());
}

TEST(Routing, Validation) {
  const EpConfig c = test::small_config(2, 2, 8, 4, 2, 8);
  std::vector<std::int32_t> ids = {0, 1, 2, 3, 7, 6};
  auto t = tensor_create({3, 2}, Dtype::I32, TensorTag::TopkIdx, test::bytes_of(ids));
  const auto r = routing_from_tensor(t, c);
  EXPECT_EQ(r.tokens, 3);
  EXPECT_EQ(r.at(2, 0), 7);

  ids[3] = 2;  // duplicate in row 1
  EXPECT_EP_ERROR(routing_from_tensor(t, c), ErrorCode::InvalidArgument);
  ids[3] = 8;  // out of range
  EXPECT_EP_ERROR(routing_from_tensor(t, c), ErrorCode::InvalidArgument);
  ids[3] = -1;
  EXPECT_EP_ERROR(routing_from_tensor(t, c), ErrorCode::InvalidArgument);

  std::vector<std::int32_t> wide(15, 0);
  auto w = tensor_create({5, 3}, Dtype::I32, TensorTag::TopkIdx, test::bytes_of(wide));
  EXPECT_EP_ERROR(routing_from_tensor(w, c), ErrorCode::ShapeMismatch);

  std::vector<std::int64_t> big(10);
  for (int i = 0; i < 10; ++i) big[static_cast<std::size_t>(i)] = i % 2;
  auto over = tensor_create({5, 2}, Dtype::I64, TensorTag::TopkIdx, test::bytes_of(big));
  EXPECT_EP_ERROR(routing_from_tensor(over, c), ErrorCode::InvalidArgument);  // 5 > B = 4
}

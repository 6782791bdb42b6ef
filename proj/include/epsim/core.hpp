/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace epsim {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  TagMismatch,
  ConfigMismatch,
  CapacityExceeded,
  HandleStateError,
  TransportClosed,
};

const char* to_string(ErrorCode code);

class EpError : public std::runtime_error {
 public:
  EpError(ErrorCode code, const std::string& detail);
  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& detail);

inline void require(bool cond, ErrorCode code, const char* detail) {
  if (!cond) raise(code, detail);
}

// Element types. The four float kinds carry token data; I32/I64 carry
// routing indices and per-expert counters.
enum class Dtype : std::uint8_t { F32, BF16, F16, FP8, I32, I64 };

constexpr std::size_t byte_width(Dtype dt) {
  switch (dt) {
    case Dtype::F32: return 4;
    case Dtype::BF16: return 2;
    case Dtype::F16: return 2;
    case Dtype::FP8: return 1;
    case Dtype::I32: return 4;
    case Dtype::I64: return 8;
  }
  return 0;
}

constexpr bool is_float(Dtype dt) {
  return dt == Dtype::F32 || dt == Dtype::BF16 || dt == Dtype::F16 || dt == Dtype::FP8;
}

const char* to_string(Dtype dt);
Dtype parse_dtype(std::string_view name);

enum class TensorTag : std::uint8_t {
  Tokens,
  TopkIdx,
  TopkWeights,
  Scales,
  RecvExpertCounterDevice,
  RecvExpertCounterHost,
  None,
  TokensPerExperts,
};

inline constexpr TensorTag kAllTags[] = {
    TensorTag::Tokens,          TensorTag::TopkIdx,
    TensorTag::TopkWeights,     TensorTag::Scales,
    TensorTag::RecvExpertCounterDevice, TensorTag::RecvExpertCounterHost,
    TensorTag::None,            TensorTag::TokensPerExperts,
};

const char* to_string(TensorTag tag);
TensorTag parse_tag(std::string_view name);

// Tagged, typed, strided N-D view over a caller-owned byte buffer.
class NDTensor {
 public:
  NDTensor() = default;
  NDTensor(std::vector<std::int64_t> shape, std::vector<std::int64_t> strides, Dtype dtype,
           TensorTag tag, std::span<std::byte> buffer, std::int64_t offset = 0);

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  const std::vector<std::int64_t>& strides() const { return strides_; }
  std::int64_t extent(int dim) const { return shape_.at(static_cast<std::size_t>(dim)); }
  std::int64_t numel() const;
  Dtype dtype() const { return dtype_; }
  TensorTag tag() const { return tag_; }
  std::span<std::byte> buffer() const { return buffer_; }
  std::int64_t offset() const { return offset_; }
  bool is_contiguous() const;

  std::byte* element_ptr(std::span<const std::int64_t> index) const;
  std::byte* element_ptr(std::initializer_list<std::int64_t> index) const {
    return element_ptr(std::span<const std::int64_t>(index.begin(), index.size()));
  }

  // Float elements decode through the dtype (FP8 as raw E4M3, no scale).
  float load_f32(std::initializer_list<std::int64_t> index) const;
  void store_f32(std::initializer_list<std::int64_t> index, float value) const;
  std::int64_t load_int(std::initializer_list<std::int64_t> index) const;
  void store_int(std::initializer_list<std::int64_t> index, std::int64_t value) const;

  // Innermost-dimension row at `lead` (all leading indices).
  void read_row(std::span<const std::int64_t> lead, std::span<float> out) const;
  void write_row(std::span<const std::int64_t> lead, std::span<const float> in) const;
  // Same rows as raw element bytes, no decoding.
  void read_row_bytes(std::span<const std::int64_t> lead, std::span<std::byte> out) const;
  void write_row_bytes(std::span<const std::int64_t> lead, std::span<const std::byte> in) const;

 private:
  std::vector<std::int64_t> shape_;
  std::vector<std::int64_t> strides_;
  Dtype dtype_ = Dtype::F32;
  TensorTag tag_ = TensorTag::None;
  std::span<std::byte> buffer_;
  std::int64_t offset_ = 0;
};

// Contiguous row-major descriptor; fails if the buffer is too small.
NDTensor tensor_create(std::vector<std::int64_t> shape, Dtype dtype, TensorTag tag,
                       std::span<std::byte> buffer);

std::vector<std::int64_t> row_major_strides(std::span<const std::int64_t> shape);

enum class Algorithm : std::uint8_t { LL, HT };
enum class LlLayout : std::uint8_t { Optimized, Legacy };
enum class HtCombinePath : std::uint8_t { Hierarchical, Flat };

const char* to_string(Algorithm a);
const char* to_string(LlLayout l);

struct EpConfig {
  Algorithm algorithm = Algorithm::LL;
  int num_ranks = 1;
  int ranks_per_node = 1;
  int num_experts = 1;
  int top_k = 1;
  int hidden = 1;
  int max_tokens_per_rank = 1;
  Dtype token_dtype = Dtype::F32;
  bool with_scales = false;
  int ht_chunk_tokens = 4;
  int ht_fifo_depth = 8;

  LlLayout ll_layout = LlLayout::Optimized;
  // Worker partition used to order LL work; 0 selects ceil(E / warps).
  int ll_blocks = 0;
  int ll_warps = 32;
  int ll_groups_per_block = 2;
  HtCombinePath ht_combine_path = HtCombinePath::Hierarchical;

  // Mutation hook for the verifier smoke test: shifts the optimized
  // combine slot index by one routing position.
  bool debug_corrupt_combine_slot = false;

  int experts_per_rank() const { return (num_experts + num_ranks - 1) / num_ranks; }
  int num_nodes() const { return num_ranks / ranks_per_node; }
  void validate() const;
  std::vector<std::byte> fingerprint() const;
  friend bool operator==(const EpConfig&, const EpConfig&) = default;
};

// Top-k expert ids of the tokens on one rank, row-major [tokens x topk].
struct Routing {
  int tokens = 0;
  int topk = 0;
  std::vector<std::int32_t> experts;

  int at(int t, int k) const { return experts[static_cast<std::size_t>(t * topk + k)]; }
  std::span<const std::int32_t> row(int t) const {
    return std::span(experts).subspan(static_cast<std::size_t>(t * topk),
                                      static_cast<std::size_t>(topk));
  }
};

// Checks tokens <= B, width == K, ids in [0, E) and distinct within a row.
void validate_routing(const Routing& routing, const EpConfig& config);
Routing routing_from_tensor(const NDTensor& topk_idx, const EpConfig& config);

// ---- value codecs -------------------------------------------------------

inline constexpr int kQuantBlock = 128;
inline constexpr float kFp8Max = 448.0f;

float fp8_e4m3_decode(std::uint8_t code);
// Nearest representable E4M3 value, ties to even, saturating at +-448.
std::uint8_t fp8_e4m3_encode(float value);

std::uint16_t bf16_encode(float value);
float bf16_decode(std::uint16_t bits);
std::uint16_t f16_encode(float value);
float f16_decode(std::uint16_t bits);

float decode_value(Dtype dt, const std::byte* p);
void encode_value(Dtype dt, float value, std::byte* p);

// Contiguous element runs in a float dtype (FP8 unscaled).
void encode_row(Dtype dt, std::span<const float> in, std::span<std::byte> out);
void decode_row(Dtype dt, std::span<const std::byte> in, std::span<float> out);

struct QuantizedRow {
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;
};

QuantizedRow quantize_block(std::span<const float> row);
void quantize_block(std::span<const float> row, std::span<std::uint8_t> codes,
                    std::span<float> scales);
std::vector<float> dequantize_block(std::span<const std::uint8_t> codes,
                                    std::span<const float> scales);
void dequantize_block(std::span<const std::uint8_t> codes, std::span<const float> scales,
                      std::span<float> out);

// Calloc-backed zeroed bytes; large untouched regions stay unmapped.
class HostBuffer {
 public:
  HostBuffer() = default;
  explicit HostBuffer(std::size_t bytes);
  HostBuffer(HostBuffer&& other) noexcept;
  HostBuffer& operator=(HostBuffer&& other) noexcept;
  HostBuffer(const HostBuffer&) = delete;
  HostBuffer& operator=(const HostBuffer&) = delete;
  ~HostBuffer();

  std::span<std::byte> bytes() const { return {data_, size_}; }
  std::byte* data() const { return data_; }
  std::size_t size() const { return size_; }

 private:
  std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

}  // namespace epsim

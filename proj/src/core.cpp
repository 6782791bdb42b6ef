/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/core.hpp"

#include <cstdlib>
#include <cstring>
#include <new>
#include <utility>

namespace epsim {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TagMismatch: return "TagMismatch";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::HandleStateError: return "HandleStateError";
    case ErrorCode::TransportClosed: return "TransportClosed";
  }
  return "Unknown";
}

EpError::EpError(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail),
      code_(code),
      detail_(detail) {}

void raise(ErrorCode code, const std::string& detail) { throw EpError(code, detail); }

const char* to_string(Dtype dt) {
  switch (dt) {
    case Dtype::F32: return "f32";
    case Dtype::BF16: return "bf16";
    case Dtype::F16: return "f16";
    case Dtype::FP8: return "fp8";
    case Dtype::I32: return "i32";
    case Dtype::I64: return "i64";
  }
  return "?";
}

Dtype parse_dtype(std::string_view name) {
  for (Dtype dt : {Dtype::F32, Dtype::BF16, Dtype::F16, Dtype::FP8, Dtype::I32, Dtype::I64}) {
    if (name == to_string(dt)) return dt;
  }
  raise(ErrorCode::InvalidArgument, "unknown dtype '" + std::string(name) + "'");
}

const char* to_string(TensorTag tag) {
  switch (tag) {
    case TensorTag::Tokens: return "TOKENS";
    case TensorTag::TopkIdx: return "TOPK_IDX";
    case TensorTag::TopkWeights: return "TOPK_WEIGHTS";
    case TensorTag::Scales: return "SCALES";
    case TensorTag::RecvExpertCounterDevice: return "RECV_EXPERT_COUNTER_DEVICE";
    case TensorTag::RecvExpertCounterHost: return "RECV_EXPERT_COUNTER_HOST";
    case TensorTag::None: return "NONE";
    case TensorTag::TokensPerExperts: return "TOKENS_PER_EXPERTS";
  }
  return "?";
}

TensorTag parse_tag(std::string_view name) {
  for (TensorTag tag : kAllTags) {
    if (name == to_string(tag)) return tag;
  }
  raise(ErrorCode::InvalidArgument, "unknown tensor tag '" + std::string(name) + "'");
}

const char* to_string(Algorithm a) { return a == Algorithm::LL ? "ll" : "ht"; }
const char* to_string(LlLayout l) { return l == LlLayout::Optimized ? "optimized" : "legacy"; }

// ---- NDTensor ------------------------------------------------------------

std::vector<std::int64_t> row_major_strides(std::span<const std::int64_t> shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

NDTensor::NDTensor(std::vector<std::int64_t> shape, std::vector<std::int64_t> strides, Dtype dtype,
                   TensorTag tag, std::span<std::byte> buffer, std::int64_t offset)
    : shape_(std::move(shape)),
      strides_(std::move(strides)),
      dtype_(dtype),
      tag_(tag),
      buffer_(buffer),
      offset_(offset) {
  require(!shape_.empty(), ErrorCode::InvalidArgument, "tensor shape is empty");
  require(shape_.size() == strides_.size(), ErrorCode::InvalidArgument,
          "shape and strides differ in rank");
  require(offset_ >= 0, ErrorCode::InvalidArgument, "negative element offset");
  // Largest reachable element offset must stay inside the buffer.
  std::int64_t hi = offset_;
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    require(shape_[i] >= 0, ErrorCode::InvalidArgument, "negative extent");
    require(strides_[i] >= 0, ErrorCode::InvalidArgument, "negative stride");
    if (shape_[i] == 0) return;
    hi += (shape_[i] - 1) * strides_[i];
  }
  const auto needed = static_cast<std::size_t>(hi + 1) * byte_width(dtype_);
  require(needed <= buffer_.size(), ErrorCode::InvalidArgument,
          "buffer too small for tensor extent");
}

std::int64_t NDTensor::numel() const {
  std::int64_t n = 1;
  for (auto e : shape_) n *= e;
  return n;
}

bool NDTensor::is_contiguous() const { return strides_ == row_major_strides(shape_); }

std::byte* NDTensor::element_ptr(std::span<const std::int64_t> index) const {
  require(index.size() == shape_.size(), ErrorCode::ShapeMismatch, "index rank mismatch");
  std::int64_t off = offset_;
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < shape_[i], ErrorCode::ShapeMismatch,
            "index out of bounds");
    off += index[i] * strides_[i];
  }
  return buffer_.data() + static_cast<std::size_t>(off) * byte_width(dtype_);
}

float NDTensor::load_f32(std::initializer_list<std::int64_t> index) const {
  require(is_float(dtype_), ErrorCode::InvalidArgument, "load_f32 on integer tensor");
  return decode_value(dtype_, element_ptr(index));
}

void NDTensor::store_f32(std::initializer_list<std::int64_t> index, float value) const {
  require(is_float(dtype_), ErrorCode::InvalidArgument, "store_f32 on integer tensor");
  encode_value(dtype_, value, element_ptr(index));
}

std::int64_t NDTensor::load_int(std::initializer_list<std::int64_t> index) const {
  const std::byte* p = element_ptr(index);
  if (dtype_ == Dtype::I32) {
    std::int32_t v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  require(dtype_ == Dtype::I64, ErrorCode::InvalidArgument, "load_int on float tensor");
  std::int64_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

void NDTensor::store_int(std::initializer_list<std::int64_t> index, std::int64_t value) const {
  std::byte* p = element_ptr(index);
  if (dtype_ == Dtype::I32) {
    auto v = static_cast<std::int32_t>(value);
    std::memcpy(p, &v, sizeof v);
    return;
  }
  require(dtype_ == Dtype::I64, ErrorCode::InvalidArgument, "store_int on float tensor");
  std::memcpy(p, &value, sizeof value);
}

namespace {

std::int64_t row_base(const NDTensor& t, std::span<const std::int64_t> lead, std::size_t n) {
  require(lead.size() + 1 == t.shape().size(), ErrorCode::ShapeMismatch, "row index rank");
  require(static_cast<std::int64_t>(n) == t.shape().back(), ErrorCode::ShapeMismatch,
          "row length mismatch");
  std::int64_t off = t.offset();
  for (std::size_t i = 0; i < lead.size(); ++i) {
    require(lead[i] >= 0 && lead[i] < t.shape()[i], ErrorCode::ShapeMismatch,
            "row index out of bounds");
    off += lead[i] * t.strides()[i];
  }
  return off;
}

}  // namespace

void NDTensor::read_row(std::span<const std::int64_t> lead, std::span<float> out) const {
  require(is_float(dtype_), ErrorCode::InvalidArgument, "read_row on integer tensor");
  const std::int64_t base = row_base(*this, lead, out.size());
  const std::int64_t step = strides_.back();
  const std::size_t w = byte_width(dtype_);
  if (step == 1) {
    decode_row(dtype_, buffer_.subspan(static_cast<std::size_t>(base) * w, out.size() * w), out);
    return;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = decode_value(dtype_, buffer_.data() + static_cast<std::size_t>(base + i * step) * w);
  }
}

void NDTensor::write_row(std::span<const std::int64_t> lead, std::span<const float> in) const {
  require(is_float(dtype_), ErrorCode::InvalidArgument, "write_row on integer tensor");
  const std::int64_t base = row_base(*this, lead, in.size());
  const std::int64_t step = strides_.back();
  const std::size_t w = byte_width(dtype_);
  if (step == 1) {
    encode_row(dtype_, in, buffer_.subspan(static_cast<std::size_t>(base) * w, in.size() * w));
    return;
  }
  for (std::size_t i = 0; i < in.size(); ++i) {
    encode_value(dtype_, in[i], buffer_.data() + static_cast<std::size_t>(base + i * step) * w);
  }
}

void NDTensor::read_row_bytes(std::span<const std::int64_t> lead,
                              std::span<std::byte> out) const {
  const std::size_t w = byte_width(dtype_);
  require(out.size() % w == 0, ErrorCode::ShapeMismatch, "row byte length");
  const std::int64_t base = row_base(*this, lead, out.size() / w);
  const std::int64_t step = strides_.back();
  if (step == 1) {
    std::memcpy(out.data(), buffer_.data() + static_cast<std::size_t>(base) * w, out.size());
    return;
  }
  for (std::size_t i = 0; i < out.size() / w; ++i) {
    std::memcpy(out.data() + i * w,
                buffer_.data() + static_cast<std::size_t>(base + static_cast<std::int64_t>(i) * step) * w, w);
  }
}

void NDTensor::write_row_bytes(std::span<const std::int64_t> lead,
                               std::span<const std::byte> in) const {
  const std::size_t w = byte_width(dtype_);
  require(in.size() % w == 0, ErrorCode::ShapeMismatch, "row byte length");
  const std::int64_t base = row_base(*this, lead, in.size() / w);
  const std::int64_t step = strides_.back();
  if (step == 1) {
    std::memcpy(buffer_.data() + static_cast<std::size_t>(base) * w, in.data(), in.size());
    return;
  }
  for (std::size_t i = 0; i < in.size() / w; ++i) {
    std::memcpy(buffer_.data() + static_cast<std::size_t>(base + static_cast<std::int64_t>(i) * step) * w,
                in.data() + i * w, w);
  }
}

NDTensor tensor_create(std::vector<std::int64_t> shape, Dtype dtype, TensorTag tag,
                       std::span<std::byte> buffer) {
  require(!shape.empty(), ErrorCode::InvalidArgument, "tensor shape is empty");
  auto strides = row_major_strides(shape);
  return NDTensor(std::move(shape), std::move(strides), dtype, tag, buffer, 0);
}

// ---- EpConfig ------------------------------------------------------------

void EpConfig::validate() const {
  using E = ErrorCode;
  require(num_ranks >= 1, E::InvalidArgument, "num_ranks must be >= 1");
  require(ranks_per_node >= 1 && num_ranks % ranks_per_node == 0, E::InvalidArgument,
          "ranks_per_node must divide num_ranks");
  require(num_experts >= num_ranks, E::InvalidArgument, "num_experts must be >= num_ranks");
  require(top_k >= 1 && top_k <= num_experts, E::InvalidArgument, "top_k must be in [1, E]");
  require(hidden >= 1, E::InvalidArgument, "hidden must be >= 1");
  require(max_tokens_per_rank >= 1, E::InvalidArgument, "max_tokens_per_rank must be >= 1");
  require(is_float(token_dtype), E::InvalidArgument, "token dtype must be a float type");
  if (with_scales) {
    require(token_dtype == Dtype::FP8, E::InvalidArgument, "scales require FP8 tokens");
    require(hidden % kQuantBlock == 0, E::InvalidArgument,
            "scales require hidden divisible by 128");
  }
  require(ht_chunk_tokens >= 1, E::InvalidArgument, "ht_chunk_tokens must be >= 1");
  require(ht_fifo_depth >= 1, E::InvalidArgument, "ht_fifo_depth must be >= 1");
  if (algorithm == Algorithm::HT) {
    require(token_dtype != Dtype::FP8, E::InvalidArgument, "FP8 payloads are LL-only");
  }
  require(ll_blocks >= 0 && ll_blocks <= num_experts, E::InvalidArgument,
          "ll_blocks must be in [0, E]");
  require(ll_warps >= 1, E::InvalidArgument, "ll_warps must be >= 1");
  require(ll_groups_per_block >= 1 && ll_groups_per_block <= ll_warps, E::InvalidArgument,
          "ll_groups_per_block must be in [1, ll_warps]");
}

std::vector<std::byte> EpConfig::fingerprint() const {
  const std::int64_t fields[] = {
      static_cast<std::int64_t>(algorithm),  num_ranks,
      ranks_per_node,                        num_experts,
      top_k,                                 hidden,
      max_tokens_per_rank,                   static_cast<std::int64_t>(token_dtype),
      with_scales ? 1 : 0,                   ht_chunk_tokens,
      ht_fifo_depth,                         static_cast<std::int64_t>(ll_layout),
      ll_blocks,                             ll_warps,
      ll_groups_per_block,                   static_cast<std::int64_t>(ht_combine_path),
      debug_corrupt_combine_slot ? 1 : 0,
  };
  std::vector<std::byte> out(sizeof fields);
  std::memcpy(out.data(), fields, sizeof fields);
  return out;
}

// ---- Routing -------------------------------------------------------------

void validate_routing(const Routing& routing, const EpConfig& config) {
  require(routing.tokens >= 0 && routing.tokens <= config.max_tokens_per_rank,
          ErrorCode::InvalidArgument, "more tokens than max_tokens_per_rank");
  require(routing.topk == config.top_k, ErrorCode::InvalidArgument, "routing width != top_k");
  require(routing.experts.size() == static_cast<std::size_t>(routing.tokens) * routing.topk,
          ErrorCode::InvalidArgument, "routing size mismatch");
  for (int t = 0; t < routing.tokens; ++t) {
    const auto row = routing.row(t);
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] < 0 || row[k] >= config.num_experts) {
        raise(ErrorCode::InvalidArgument, "token " + std::to_string(t) + " routes to expert " +
                                              std::to_string(row[k]) + " outside [0, E)");
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (row[j] == row[k]) {
          raise(ErrorCode::InvalidArgument,
                "token " + std::to_string(t) + " repeats expert " + std::to_string(row[k]));
        }
      }
    }
  }
}

Routing routing_from_tensor(const NDTensor& topk_idx, const EpConfig& config) {
  require(topk_idx.rank() == 2, ErrorCode::ShapeMismatch, "TOPK_IDX must be 2-D");
  require(topk_idx.dtype() == Dtype::I32 || topk_idx.dtype() == Dtype::I64,
          ErrorCode::TagMismatch, "TOPK_IDX must be i32 or i64");
  Routing r;
  r.tokens = static_cast<int>(topk_idx.extent(0));
  r.topk = static_cast<int>(topk_idx.extent(1));
  require(r.topk == config.top_k, ErrorCode::ShapeMismatch, "TOPK_IDX width != top_k");
  r.experts.resize(static_cast<std::size_t>(r.tokens) * r.topk);
  for (int t = 0; t < r.tokens; ++t) {
    for (int k = 0; k < r.topk; ++k) {
      const std::int64_t e = topk_idx.load_int({t, k});
      if (e < 0 || e >= config.num_experts) {
        raise(ErrorCode::InvalidArgument, "token " + std::to_string(t) + " routes to expert " +
                                              std::to_string(e) + " outside [0, E)");
      }
      r.experts[static_cast<std::size_t>(t * r.topk + k)] = static_cast<std::int32_t>(e);
    }
  }
  validate_routing(r, config);
  return r;
}

// ---- HostBuffer ----------------------------------------------------------

HostBuffer::HostBuffer(std::size_t bytes) : size_(bytes) {
  if (bytes == 0) return;
  data_ = static_cast<std::byte*>(std::calloc(bytes, 1));
  if (data_ == nullptr) throw std::bad_alloc();
}

HostBuffer::HostBuffer(HostBuffer&& other) noexcept
    : data_(std::exchange(other.data_, nullptr)), size_(std::exchange(other.size_, 0)) {}

HostBuffer& HostBuffer::operator=(HostBuffer&& other) noexcept {
  if (this != &other) {
    std::free(data_);
    data_ = std::exchange(other.data_, nullptr);
    size_ = std::exchange(other.size_, 0);
  }
  return *this;
}

HostBuffer::~HostBuffer() { std::free(data_); }

}  // namespace epsim

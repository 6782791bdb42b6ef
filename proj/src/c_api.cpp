/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/c_api.h"

#include <cstring>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "epsim/api.hpp"
#include "epsim/driver.hpp"

using namespace epsim;

struct epsim_world {
  std::unique_ptr<Fabric> fabric;
  std::vector<std::unique_ptr<EpGroup>> groups;
  // Set once a collective fails; ranks may disagree about state afterwards.
  bool poisoned = false;
};

struct epsim_handle {
  epsim_world* world;
  std::vector<std::unique_ptr<EpHandle>> ranks;
};

namespace {

thread_local std::string g_last_error;

int fail(int status, std::string msg) {
  g_last_error = std::move(msg);
  return status;
}

template <typename F>
int guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return EPSIM_OK;
  } catch (const EpError& e) {
    return fail(static_cast<int>(e.code()) + 1, e.detail());
  } catch (const std::exception& e) {
    return fail(EPSIM_INTERNAL_ERROR, e.what());
  } catch (...) {
    return fail(EPSIM_INTERNAL_ERROR, "unknown failure");
  }
}

EpConfig to_config(const epsim_config& c) {
  require(c.algorithm == EPSIM_LL || c.algorithm == EPSIM_HT, ErrorCode::InvalidArgument,
          "unknown algorithm");
  require(c.token_dtype >= EPSIM_F32 && c.token_dtype <= EPSIM_I64, ErrorCode::InvalidArgument,
          "unknown dtype");
  require(c.ll_layout == EPSIM_LAYOUT_OPTIMIZED || c.ll_layout == EPSIM_LAYOUT_LEGACY,
          ErrorCode::InvalidArgument, "unknown layout");
  require(c.ht_combine_path == EPSIM_COMBINE_HIERARCHICAL || c.ht_combine_path == EPSIM_COMBINE_FLAT,
          ErrorCode::InvalidArgument, "unknown combine path");
  EpConfig out;
  out.algorithm = c.algorithm == EPSIM_LL ? Algorithm::LL : Algorithm::HT;
  out.num_ranks = c.num_ranks;
  out.ranks_per_node = c.ranks_per_node;
  out.num_experts = c.num_experts;
  out.top_k = c.top_k;
  out.hidden = c.hidden;
  out.max_tokens_per_rank = c.max_tokens_per_rank;
  out.token_dtype = static_cast<Dtype>(c.token_dtype);
  out.with_scales = c.with_scales != 0;
  out.ht_chunk_tokens = c.ht_chunk_tokens;
  out.ht_fifo_depth = c.ht_fifo_depth;
  out.ll_layout = c.ll_layout == EPSIM_LAYOUT_LEGACY ? LlLayout::Legacy : LlLayout::Optimized;
  out.ll_blocks = c.ll_blocks;
  out.ll_warps = c.ll_warps;
  out.ll_groups_per_block = c.ll_groups_per_block;
  out.ht_combine_path =
      c.ht_combine_path == EPSIM_COMBINE_FLAT ? HtCombinePath::Flat : HtCombinePath::Hierarchical;
  return out;
}

NDTensor to_tensor(const epsim_tensor& t) {
  require(t.ndim >= 0 && t.ndim <= EPSIM_MAX_DIMS, ErrorCode::InvalidArgument,
          "tensor rank out of range");
  require(t.dtype >= EPSIM_F32 && t.dtype <= EPSIM_I64, ErrorCode::InvalidArgument,
          "unknown tensor dtype");
  require(t.tag >= EPSIM_TAG_TOKENS && t.tag <= EPSIM_TAG_TOKENS_PER_EXPERTS,
          ErrorCode::InvalidArgument, "unknown tensor tag");
  require(t.data != nullptr || t.nbytes == 0, ErrorCode::InvalidArgument, "null tensor data");
  std::vector<std::int64_t> shape(t.shape, t.shape + t.ndim);
  std::vector<std::int64_t> strides(t.strides, t.strides + t.ndim);
  bool any = false;
  for (auto s : strides) any |= s != 0;
  if (!any) strides = row_major_strides(shape);
  return NDTensor(std::move(shape), std::move(strides), static_cast<Dtype>(t.dtype),
                  static_cast<TensorTag>(t.tag),
                  std::span(static_cast<std::byte*>(t.data), t.nbytes), t.offset);
}

std::vector<NDTensor> rank_tensors(const epsim_tensor* list, int n, int rank) {
  require(n >= 0, ErrorCode::InvalidArgument, "negative tensor count");
  require(list != nullptr || n == 0, ErrorCode::InvalidArgument, "null tensor list");
  std::vector<NDTensor> out;
  for (int i = 0; i < n; ++i) out.push_back(to_tensor(list[rank * n + i]));
  return out;
}

void each_rank(epsim_world& w, const std::function<void(int, Endpoint)>& body) {
  try {
    driver::run_ranks(*w.fabric, [&](Endpoint ep) { body(ep.rank(), ep); });
  } catch (...) {
    w.poisoned = true;
    throw;
  }
}

int check_world(const epsim_world* w) {
  if (w == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null world");
  if (w->poisoned) return fail(EPSIM_TRANSPORT_CLOSED, "world unusable after an earlier failure");
  return EPSIM_OK;
}

int check_handle(const epsim_handle* h) {
  if (h == nullptr || h->world == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null handle");
  return check_world(h->world);
}

}  // namespace

extern "C" {

const char* epsim_last_error(void) { return g_last_error.c_str(); }

const char* epsim_status_name(int status) {
  switch (status) {
    case EPSIM_OK: return "Ok";
    case EPSIM_INTERNAL_ERROR: return "InternalError";
    default:
      if (status >= 1 && status <= EPSIM_TRANSPORT_CLOSED) {
        return to_string(static_cast<ErrorCode>(status - 1));
      }
      return "Unknown";
  }
}

void epsim_config_default(epsim_config* config) {
  if (config == nullptr) return;
  const EpConfig d;
  *config = epsim_config{EPSIM_LL,
                         d.num_ranks,
                         d.ranks_per_node,
                         d.num_experts,
                         d.top_k,
                         d.hidden,
                         d.max_tokens_per_rank,
                         EPSIM_F32,
                         0,
                         d.ht_chunk_tokens,
                         d.ht_fifo_depth,
                         EPSIM_LAYOUT_OPTIMIZED,
                         d.ll_blocks,
                         d.ll_warps,
                         d.ll_groups_per_block,
                         EPSIM_COMBINE_HIERARCHICAL};
}

int epsim_world_create(const epsim_config* configs, int32_t num_configs, int64_t delay_seed,
                       epsim_world** out) {
  if (configs == nullptr || out == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    std::vector<EpConfig> per_rank;
    for (int i = 0; i < num_configs; ++i) per_rank.push_back(to_config(configs[i]));
    require(!per_rank.empty(), ErrorCode::InvalidArgument, "no config given");
    const EpConfig& base = per_rank.front();
    require(base.num_ranks >= 1 && base.ranks_per_node >= 1 &&
                base.num_ranks % base.ranks_per_node == 0,
            ErrorCode::InvalidArgument, "bad rank topology");
    require(num_configs == 1 || num_configs == base.num_ranks, ErrorCode::InvalidArgument,
            "num_configs must be 1 or num_ranks");

    auto w = std::make_unique<epsim_world>();
    FabricOptions fo;
    fo.num_ranks = base.num_ranks;
    fo.ranks_per_node = base.ranks_per_node;
    if (delay_seed >= 0) fo.delay_seed = static_cast<std::uint64_t>(delay_seed);
    w->fabric = std::make_unique<Fabric>(fo);
    w->groups.resize(static_cast<std::size_t>(base.num_ranks));
    each_rank(*w, [&](int r, Endpoint ep) {
      const auto& c = per_rank[num_configs == 1 ? 0 : static_cast<std::size_t>(r)];
      w->groups[static_cast<std::size_t>(r)] = create_group(ep, c);
    });
    *out = w.release();
  });
}

int epsim_world_destroy(epsim_world* world) {
  if (world == nullptr) return EPSIM_OK;
  std::unique_ptr<epsim_world> owned(world);
  return guarded([&] {
    if (owned->fabric->is_closed()) return;
    each_rank(*owned, [&](int r, Endpoint) { destroy_group(*owned->groups[static_cast<std::size_t>(r)]); });
  });
}

int epsim_world_num_ranks(const epsim_world* world) {
  return world == nullptr ? 0 : static_cast<int>(world->groups.size());
}

int epsim_world_allocated_bytes(const epsim_world* world, int32_t rank, size_t* out) {
  if (int rc = check_world(world)) return rc;
  if (rank < 0 || rank >= epsim_world_num_ranks(world) || out == nullptr) {
    return fail(EPSIM_INVALID_ARGUMENT, "bad rank or null output");
  }
  *out = world->groups[static_cast<std::size_t>(rank)]->allocated_bytes();
  return EPSIM_OK;
}

int epsim_world_footprint_bytes(const epsim_world* world, int32_t rank, size_t* out) {
  if (int rc = check_world(world)) return rc;
  if (rank < 0 || rank >= epsim_world_num_ranks(world) || out == nullptr) {
    return fail(EPSIM_INVALID_ARGUMENT, "bad rank or null output");
  }
  *out = world->groups[static_cast<std::size_t>(rank)]->footprint_bytes();
  return EPSIM_OK;
}

int epsim_world_take_stats(epsim_world* world, int32_t rank, epsim_op_stats* out, size_t cap,
                           size_t* count) {
  if (int rc = check_world(world)) return rc;
  if (rank < 0 || rank >= epsim_world_num_ranks(world) || count == nullptr ||
      (out == nullptr && cap > 0)) {
    return fail(EPSIM_INVALID_ARGUMENT, "bad rank or null output");
  }
  auto& g = *world->groups[static_cast<std::size_t>(rank)];
  *count = g.stats().size();
  if (cap < *count) return fail(EPSIM_CAPACITY_EXCEEDED, "stats buffer too small");
  const auto all = g.take_stats();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& s = all[i];
    epsim_op_stats& o = out[i];
    std::memset(&o, 0, sizeof o);
    std::strncpy(o.op, s.op.c_str(), sizeof o.op - 1);
    o.bytes_put = s.bytes_put;
    o.msgs = s.msgs;
    o.signals = s.signals;
    o.slots_used = s.slots_used;
    o.buffer_bytes = s.buffer_bytes;
    o.inter_node_msgs = s.inter_node_msgs;
    o.intra_node_msgs = s.intra_node_msgs;
    o.fifo_stalls = s.fifo_stalls;
    o.copy_bytes = s.copy_bytes;
  }
  return EPSIM_OK;
}

int epsim_handle_create(epsim_world* world, const epsim_tensor* topk_idx, epsim_handle** out) {
  if (int rc = check_world(world)) return rc;
  if (topk_idx == nullptr || out == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto h = std::make_unique<epsim_handle>();
    h->world = world;
    h->ranks.resize(world->groups.size());
    each_rank(*world, [&](int r, Endpoint) {
      h->ranks[static_cast<std::size_t>(r)] =
          create_handle(*world->groups[static_cast<std::size_t>(r)], to_tensor(topk_idx[r]));
    });
    *out = h.release();
  });
}

int epsim_handle_destroy(epsim_handle* handle) {
  if (handle == nullptr) return EPSIM_OK;
  if (handle->world != nullptr && handle->world->poisoned) {
    delete handle;
    return EPSIM_OK;
  }
  const int rc = guarded([&] {
    for (auto& h : handle->ranks) {
      if (h && h->status() != HandleStatus::Destroyed) destroy_handle(*h);
    }
  });
  if (rc == EPSIM_OK) delete handle;
  return rc;
}

int epsim_dispatch(epsim_handle* handle, const epsim_tensor* inputs, int32_t num_inputs,
                   const epsim_tensor* outputs, int32_t num_outputs, int32_t send_only) {
  if (int rc = check_handle(handle)) return rc;
  return guarded([&] {
    each_rank(*handle->world, [&](int r, Endpoint) {
      const auto in = rank_tensors(inputs, num_inputs, r);
      const auto out = rank_tensors(outputs, num_outputs, r);
      dispatch(*handle->ranks[static_cast<std::size_t>(r)], in, out, send_only != 0);
    });
  });
}

int epsim_combine(epsim_handle* handle, const epsim_tensor* inputs, int32_t num_inputs,
                  const epsim_tensor* outputs, int32_t num_outputs, int32_t send_only) {
  if (int rc = check_handle(handle)) return rc;
  return guarded([&] {
    each_rank(*handle->world, [&](int r, Endpoint) {
      const auto in = rank_tensors(inputs, num_inputs, r);
      const auto out = rank_tensors(outputs, num_outputs, r);
      combine(*handle->ranks[static_cast<std::size_t>(r)], in, out, send_only != 0);
    });
  });
}

int epsim_complete(epsim_handle* handle) {
  if (int rc = check_handle(handle)) return rc;
  return guarded([&] {
    each_rank(*handle->world, [&](int r, Endpoint) {
      complete(*handle->ranks[static_cast<std::size_t>(r)]);
    });
  });
}

int epsim_get_num_recv_tokens(const epsim_handle* handle, int64_t* out) {
  if (int rc = check_handle(handle)) return rc;
  if (out == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null output");
  return guarded([&] {
    for (std::size_t r = 0; r < handle->ranks.size(); ++r) {
      out[r] = get_num_recv_tokens(*handle->ranks[r]);
    }
  });
}

int epsim_run_csv(const epsim_config* config, uint64_t seed, int32_t iterations, int32_t expert,
                  int32_t send_only, int64_t delay_seed, char* csv, size_t cap, size_t* csv_len) {
  if (config == nullptr || csv_len == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    require(expert >= EPSIM_EXPERT_IDENTITY && expert <= EPSIM_EXPERT_AFFINE,
            ErrorCode::InvalidArgument, "unknown expert kind");
    driver::CaseOptions o;
    o.config = to_config(*config);
    o.seed = seed;
    o.iterations = iterations;
    o.expert = static_cast<scenario::ExpertKind>(expert);
    o.staged = send_only != 0;
    if (delay_seed >= 0) o.delay_seed = static_cast<std::uint64_t>(delay_seed);
    o.timeout = std::nullopt;
    const auto result = driver::run_case(o);
    const auto problem = driver::check_case(o, result);
    if (!problem.empty()) throw std::runtime_error("invariant violated: " + problem);
    std::ostringstream os;
    driver::write_stats_csv(os, result);
    const std::string s = os.str();
    *csv_len = s.size();
    if (csv != nullptr && cap > s.size()) std::memcpy(csv, s.c_str(), s.size() + 1);
  });
}

int epsim_expert_coefficients(int32_t expert, uint64_t seed, int32_t expert_id, int32_t hidden,
                              float* scale, float* bias) {
  if (scale == nullptr || bias == nullptr) return fail(EPSIM_INVALID_ARGUMENT, "null output");
  return guarded([&] {
    require(expert >= EPSIM_EXPERT_IDENTITY && expert <= EPSIM_EXPERT_AFFINE,
            ErrorCode::InvalidArgument, "unknown expert kind");
    require(hidden >= 1, ErrorCode::InvalidArgument, "hidden must be >= 1");
    const auto c = scenario::expert_coefficients(static_cast<scenario::ExpertKind>(expert), seed,
                                                 expert_id, hidden);
    *scale = c.scale;
    for (int h = 0; h < hidden; ++h) {
      bias[h] = c.bias.empty() ? 0.0f : c.bias[static_cast<std::size_t>(h)];
    }
  });
}

}  // extern "C"

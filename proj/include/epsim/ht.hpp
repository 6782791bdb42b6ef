/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/fabric.hpp"
#include "epsim/layout.hpp"
#include "epsim/memory.hpp"
#include "epsim/stats.hpp"

// High-throughput engine: handle-time count exchange, node-deduplicated
// forwarding through same-rail rings, intra-node fan-out, and a reduction
// that sums within the expert node before crossing nodes.
namespace epsim::ht {

// Byte offsets inside one rank's window. Identical on every rank.
struct BufferPlan {
  std::size_t row_bytes = 0;     // H * byte_width
  std::size_t entry_bytes = 0;   // ring entry: header(K) + row
  std::size_t meta_blob_bytes = 0;
  std::size_t staging_rows = 0;  // N * B * min(K, L)
  std::size_t ring_entries = 0;  // depth * chunk, per source node

  std::size_t meta_offset = 0;
  std::size_t staging_offset = 0;
  std::size_t info_offset = 0;
  std::size_t ring_offset = 0;
  std::size_t combine_staging_offset = 0;
  std::size_t direct_offset = 0;
  std::size_t gather_offset = 0;
  std::size_t partial_offset = 0;
  std::size_t weights_offset = 0;
  std::size_t flat_offset = 0;
  std::size_t window_bytes = 0;
};

BufferPlan plan_buffers(const EpConfig& config);

inline constexpr std::uint32_t kEndOfStream = 0xFFFFFFFFu;

struct RowInfo {
  int src_rank;
  int src_token;
  int k;
};

// A token this rank forwarded into its node during dispatch; it aggregates
// the same token's partial sum during combine.
struct ForwardedToken {
  int src_node;
  int src_token;
  std::vector<std::int32_t> routing;
};

struct HandleState {
  std::vector<int> tokens_per_rank;     // [N]
  std::vector<std::int64_t> counts;     // [N x E], rows routed from src to e
  std::vector<std::int64_t> row_base;   // [N x L x N]: (dst, local expert, src)
  std::vector<std::int64_t> recv_per_expert;  // [L] on this rank
  std::int64_t recv_total = 0;
  bool dispatched = false;
  std::vector<RowInfo> rows;            // [recv_total], after dispatch
  std::vector<ForwardedToken> forwarded;
};

struct DispatchOutputs {
  NDTensor tokens;  // [recv_total x H]
  std::optional<NDTensor> tokens_per_expert;
  std::optional<NDTensor> counter_host;
};

class Engine {
 public:
  Engine(Endpoint ep, const EpConfig& config, BufferPool& pool);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const BufferPlan& plan() const { return plan_; }
  WindowId window() const { return window_.window_id; }

  // Collective: every rank learns every rank's per-expert counts.
  void exchange_metadata(HandleState& h, const Routing& routing);
  void dispatch(HandleState& h, const Routing& routing, const NDTensor& tokens,
                const DispatchOutputs& out, OpStats& stats);
  void combine(HandleState& h, const Routing& routing, const NDTensor& expert_out,
               const NDTensor& weights, const NDTensor& out, OpStats& stats);

 private:
  enum Sig : std::uint32_t {
    kMeta0,
    kMeta1,
    kDrain,
    kWriteDone,
    kCombineDrain,
    kRowsDone,
    kWeights,
    kPartial,
    kFlatDone,
    kFlatDrain,
    kFixedSignals,
  };
  SignalId sig(Sig s) const { return signal_base_ + s; }
  SignalId tail_sig(int src_node) const;
  SignalId head_sig(int fwd_node) const;

  std::int64_t row_of(const HandleState& h, int dst, int local_expert, int src) const;
  void store(int dst, std::size_t offset, std::span<const std::byte> bytes, OpStats& stats);
  void notify(int dst, SignalId id, OpStats& stats);
  void combine_hierarchical(HandleState& h, const Routing& routing, const NDTensor& weights,
                            const NDTensor& out, OpStats& stats);
  void combine_flat(HandleState& h, const Routing& routing, const NDTensor& weights,
                    const NDTensor& out, OpStats& stats);

  Endpoint ep_;
  EpConfig config_;
  layout::MoeShape shape_;
  NodeTopology topo_;
  BufferPlan plan_;
  std::span<std::byte> mem_;
  Window window_;
  SignalId signal_base_ = 0;

  std::uint64_t handles_ = 0;
  std::uint64_t dispatches_ = 0;
  std::uint64_t combines_ = 0;
  std::vector<std::uint64_t> ring_sent_;      // per forwarder node
  std::vector<std::uint64_t> ring_consumed_;  // per source node
};

}  // namespace epsim::ht

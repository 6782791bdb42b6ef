/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/fabric.hpp"
#include "epsim/layout.hpp"
#include "epsim/memory.hpp"
#include "epsim/stats.hpp"

// Low-latency engine: per-pair slots, update-and-flush counters, two parity
// buffers alternating between consecutive dispatch/combine pairs.
namespace epsim::ll {

// Byte layout of one rank's receive window and its counter block. The window
// holds two parity halves, each [dispatch region | combine region].
struct BufferPlan {
  LlLayout layout = LlLayout::Optimized;
  layout::SlotGeometry geometry;
  int experts_per_rank = 1;
  std::size_t dispatch_subregions = 0;  // legacy L*N, optimized N
  std::size_t slots_per_subregion = 0;  // B
  std::size_t combine_slots = 0;        // legacy E*B, optimized B*K
  std::size_t dispatch_region_bytes = 0;
  std::size_t combine_region_bytes = 0;
  std::size_t send_staging_bytes = 0;   // per parity, local only
  std::uint32_t signals_per_parity = 0;  // L*N dispatch + E combine

  std::size_t parity_bytes() const { return dispatch_region_bytes + combine_region_bytes; }
  std::size_t window_bytes() const { return 2 * parity_bytes(); }
  // Receive bytes needed by one dispatch + combine pair.
  std::size_t footprint_bytes() const { return parity_bytes(); }
};

BufferPlan plan_buffers(const EpConfig& config);

// Worker-block count used for the send schedule.
int schedule_blocks(const EpConfig& config);

struct DispatchEntry {
  int src_rank;
  int src_token;
  int k;  // routing position; -1 in the legacy layout, whose header omits it
  int local_expert;
  int row;
};

struct DispatchOutputs {
  NDTensor tokens;  // [L x N*B x H]
  std::optional<NDTensor> scales;
  std::optional<NDTensor> counter_host;
  std::optional<NDTensor> counter_device;
};

// Per-handle state the engine keeps between phases.
struct HandleState {
  int parity = -1;
  std::vector<DispatchEntry> cache;
  std::vector<std::int64_t> recv_counts;            // per local expert
  std::vector<std::uint64_t> dispatch_counter_seen;  // [L*N], before reset
  std::vector<std::uint64_t> combine_counter_seen;   // [E], before reset
};

class Engine {
 public:
  Engine(Endpoint ep, const EpConfig& config, BufferPool& pool);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const BufferPlan& plan() const { return plan_; }
  WindowId window() const { return window_.window_id; }
  SignalId dispatch_signal(int parity, int local_expert, int src) const;
  SignalId combine_signal(int parity, int expert) const;
  bool parity_busy(int parity) const { return busy_[static_cast<std::size_t>(parity)]; }

  void dispatch_send(HandleState& h, const Routing& routing, const NDTensor& tokens,
                     const NDTensor* scales, OpStats& stats);
  void dispatch_recv(HandleState& h, const DispatchOutputs& out, OpStats& stats);
  void combine_send(HandleState& h, const NDTensor& expert_out, OpStats& stats);
  void combine_recv(HandleState& h, const Routing& routing, const NDTensor& weights,
                    const NDTensor& out, OpStats& stats);

 private:
  std::size_t dispatch_offset(int parity, std::size_t subregion, std::size_t slot) const;
  std::size_t combine_offset(int parity, std::size_t slot) const;
  void transfer(int dst, std::size_t offset, std::span<const std::byte> bytes, OpStats& stats);
  void flush(int dst, SignalId id, std::uint64_t value, OpStats& stats);

  Endpoint ep_;
  EpConfig config_;
  layout::MoeShape shape_;
  BufferPlan plan_;
  std::vector<int> schedule_;
  std::span<std::byte> recv_;
  std::array<std::span<std::byte>, 2> send_;
  Window window_;
  SignalId signal_base_ = 0;
  std::uint64_t seq_ = 0;
  std::array<bool, 2> busy_{false, false};
};

}  // namespace epsim::ll

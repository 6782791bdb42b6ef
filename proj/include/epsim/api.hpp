/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/fabric.hpp"
#include "epsim/ht.hpp"
#include "epsim/ll.hpp"
#include "epsim/memory.hpp"
#include "epsim/stats.hpp"

namespace epsim {

class EpHandle;

// Long-lived per-rank resources: configuration, registered buffers and the
// engine for the configured algorithm. Must outlive its handles.
class EpGroup {
 public:
  ~EpGroup();
  EpGroup(const EpGroup&) = delete;
  EpGroup& operator=(const EpGroup&) = delete;

  const EpConfig& config() const { return config_; }
  Endpoint endpoint() const { return ep_; }
  bool destroyed() const { return destroyed_; }

  const std::vector<AllocationRecord>& allocations() const { return pool_.records(); }
  std::size_t allocated_bytes() const { return pool_.total_bytes(); }
  std::size_t live_allocations() const { return pool_.live_count(); }
  // Receive-region bytes one dispatch + combine needs on this rank.
  std::size_t footprint_bytes() const;

  // Completed operations, oldest first.
  const std::vector<OpStats>& stats() const { return stats_; }
  std::vector<OpStats> take_stats();

  ll::Engine* ll_engine() { return ll_.get(); }
  ht::Engine* ht_engine() { return ht_.get(); }

 private:
  friend std::unique_ptr<EpGroup> create_group(Endpoint, const EpConfig&, AllocationHooks);
  friend void destroy_group(EpGroup&);
  friend class EpHandle;
  friend void dispatch(EpHandle&, std::span<const NDTensor>, std::span<const NDTensor>, bool);
  friend void combine(EpHandle&, std::span<const NDTensor>, std::span<const NDTensor>, bool);
  friend void complete(EpHandle&);
  friend void destroy_handle(EpHandle&);
  EpGroup(Endpoint ep, const EpConfig& config, AllocationHooks hooks);

  Endpoint ep_;
  EpConfig config_;
  BufferPool pool_;
  std::unique_ptr<ll::Engine> ll_;
  std::unique_ptr<ht::Engine> ht_;
  std::vector<OpStats> stats_;
  int staged_ = 0;
  int open_dispatches_ = 0;
  bool destroyed_ = false;
};

enum class HandleStatus : std::uint8_t {
  Created,
  Dispatched,
  DispatchStaged,
  Combined,
  CombineStaged,
  Destroyed,
};

const char* to_string(HandleStatus s);

// Routing state of one forward pass, shared by its dispatch and combine and
// reusable for the matching backward pass.
class EpHandle {
 public:
  EpHandle(const EpHandle&) = delete;
  EpHandle& operator=(const EpHandle&) = delete;

  EpGroup& group() const { return *group_; }
  HandleStatus status() const { return status_; }
  const Routing& routing() const { return routing_; }
  const ll::HandleState& ll_state() const { return ll_; }
  const ht::HandleState& ht_state() const { return ht_; }

 private:
  friend std::unique_ptr<EpHandle> create_handle(EpGroup&, const NDTensor&);
  friend void destroy_handle(EpHandle&);
  friend void dispatch(EpHandle&, std::span<const NDTensor>, std::span<const NDTensor>, bool);
  friend void combine(EpHandle&, std::span<const NDTensor>, std::span<const NDTensor>, bool);
  friend void complete(EpHandle&);
  friend std::int64_t get_num_recv_tokens(const EpHandle&);
  EpHandle(EpGroup& group, Routing routing) : group_(&group), routing_(std::move(routing)) {}

  // Deferred receive half of a send_only operation.
  struct Pending {
    std::optional<ll::DispatchOutputs> dispatch_out;
    std::optional<NDTensor> combine_weights;
    std::optional<NDTensor> combine_out;
    OpStats stats;
  };

  EpGroup* group_;
  HandleStatus status_ = HandleStatus::Created;
  Routing routing_;
  ll::HandleState ll_;
  ht::HandleState ht_;
  Pending pending_;
};

// Collective over all ranks of the endpoint's fabric.
std::unique_ptr<EpGroup> create_group(Endpoint ep, const EpConfig& config,
                                      AllocationHooks hooks = {});
void destroy_group(EpGroup& group);

// LL: local snapshot, no traffic. HT: collective count exchange.
std::unique_ptr<EpHandle> create_handle(EpGroup& group, const NDTensor& topk_idx);
void destroy_handle(EpHandle& handle);

// Tensors are located by tag; each expected tag must appear exactly once and
// no other tag may appear.
void dispatch(EpHandle& handle, std::span<const NDTensor> inputs,
              std::span<const NDTensor> outputs, bool send_only = false);
void combine(EpHandle& handle, std::span<const NDTensor> inputs,
             std::span<const NDTensor> outputs, bool send_only = false);
void complete(EpHandle& handle);
std::int64_t get_num_recv_tokens(const EpHandle& handle);

}  // namespace epsim

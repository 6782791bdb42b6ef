/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epsim/core.hpp"

namespace epsim {

struct NodeTopology {
  int num_ranks = 1;
  int ranks_per_node = 1;

  int num_nodes() const { return num_ranks / ranks_per_node; }
  int node_of(int rank) const { return rank / ranks_per_node; }
  int rail_of(int rank) const { return rank % ranks_per_node; }
  int rank_at(int node, int rail) const { return node * ranks_per_node + rail; }
  bool same_node(int a, int b) const { return node_of(a) == node_of(b); }
};

using WindowId = std::uint32_t;
using SignalId = std::uint32_t;

struct Window {
  int owner_rank = 0;
  std::size_t byte_size = 0;
  WindowId window_id = 0;
};

struct FabricOptions {
  int num_ranks = 1;
  int ranks_per_node = 1;
  // When set, inbound operations are delivered in randomized batches drawn
  // from a random source, and LSA accesses yield at random points.
  std::optional<std::uint64_t> delay_seed;
  bool record_trace = false;
};

enum class TraceOp : std::uint8_t { Put, Signal, LsaStore, LsaSignal, LsaStoreRelease };

const char* to_string(TraceOp op);

struct TraceRecord {
  TraceOp op;
  int src;
  int dst;
  WindowId window;
  std::size_t offset;
  std::size_t len;
  SignalId signal_id;
  std::uint64_t value;
  std::uint64_t seq;
};

// `op,src,dst,window,offset,len,signal_id,value,seq`
std::string format_trace_line(const TraceRecord& r);
void write_trace(std::ostream& os, std::span<const TraceRecord> records);

// Read-only view of a rank's signal counters, valid inside wait predicates.
class SignalView {
 public:
  explicit SignalView(const std::vector<std::uint64_t>& signals) : signals_(&signals) {}
  std::uint64_t operator[](SignalId id) const {
    return id < signals_->size() ? (*signals_)[id] : 0;
  }

 private:
  const std::vector<std::uint64_t>* signals_;
};

class Fabric;

// A rank's handle on the fabric. Lightweight and copyable, but every call
// must come from the owning rank's execution context.
class Endpoint {
 public:
  Endpoint() = default;

  int rank() const { return rank_; }
  const NodeTopology& topology() const;
  Fabric& fabric() const { return *fabric_; }

  Window register_window(std::size_t byte_size);
  Window register_window(std::span<std::byte> memory);
  void deregister_window(WindowId id);
  // Contiguous block of fresh counters, all zero. Ranks that allocate in the
  // same order get the same ids.
  SignalId allocate_signals(std::uint32_t count);

  // One-sided write; visible at dst once a later signal from this endpoint
  // to dst has been observed.
  void put(int dst, WindowId window, std::size_t offset, std::span<const std::byte> payload);
  // Remote increment that also flushes every earlier put to dst.
  void signal_add(int dst, SignalId id, std::uint64_t value);

  void wait_signal(SignalId id, std::uint64_t threshold);
  void wait_until(const std::function<bool(const SignalView&)>& ready);
  std::uint64_t read_signal(SignalId id);
  void reset_signal(SignalId id);
  void reset_signals(SignalId base, std::uint32_t count);
  // Delivers pending inbound operations without blocking.
  void progress();

  bool lsa_accessible(int peer) const;
  void lsa_store(int peer, WindowId window, std::size_t offset, std::span<const std::byte> bytes);
  void lsa_load(int peer, WindowId window, std::size_t offset, std::span<std::byte> out);
  void lsa_store_release(int peer, WindowId window, std::size_t offset, std::uint64_t value);
  std::uint64_t lsa_load_acquire(int peer, WindowId window, std::size_t offset);
  // Release-increment of a same-node peer's counter.
  void lsa_signal_add(int peer, SignalId id, std::uint64_t value);

  void local_load(WindowId window, std::size_t offset, std::span<std::byte> out) {
    lsa_load(rank_, window, offset, out);
  }

  // Out-of-band rendezvous: every rank contributes a blob and receives all.
  std::vector<std::vector<std::byte>> bootstrap_allgather(std::span<const std::byte> blob);

 private:
  friend class Fabric;
  Endpoint(Fabric* fabric, int rank) : fabric_(fabric), rank_(rank) {}

  Fabric* fabric_ = nullptr;
  int rank_ = 0;
};

class Fabric {
 public:
  explicit Fabric(FabricOptions options);
  ~Fabric();
  Fabric(const Fabric&) = delete;
  Fabric& operator=(const Fabric&) = delete;

  const NodeTopology& topology() const { return topology_; }
  const FabricOptions& options() const { return options_; }
  Endpoint endpoint(int rank);

  Window register_window(int rank, std::size_t byte_size);
  Window register_window(int rank, std::span<std::byte> memory);
  void deregister_window(int rank, WindowId id);
  std::size_t window_count(int rank) const;

  // Wakes every waiter with TransportClosed; later calls fail the same way.
  void shutdown();
  bool is_closed() const { return closed_.load(); }

  std::vector<TraceRecord> trace() const;
  void clear_trace();

 private:
  friend class Endpoint;
  struct RankState;
  struct Bootstrap;

  RankState& state(int rank) const;
  void check_open() const;
  void check_rank(int rank) const;
  void record(TraceOp op, int src, int dst, WindowId w, std::size_t off, std::size_t len,
              SignalId sig, std::uint64_t value);

  FabricOptions options_;
  NodeTopology topology_;
  std::vector<std::unique_ptr<RankState>> ranks_;
  std::unique_ptr<Bootstrap> bootstrap_;
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> seq_{0};
  mutable std::mutex trace_mu_;
  std::vector<TraceRecord> trace_;
};

}  // namespace epsim

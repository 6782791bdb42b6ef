/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/fabric.hpp"

#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <ostream>
#include <random>
#include <thread>

namespace epsim {

const char* to_string(TraceOp op) {
  switch (op) {
    case TraceOp::Put: return "put";
    case TraceOp::Signal: return "signal";
    case TraceOp::LsaStore: return "lsa_store";
    case TraceOp::LsaSignal: return "lsa_signal";
    case TraceOp::LsaStoreRelease: return "lsa_store_release";
  }
  return "?";
}

std::string format_trace_line(const TraceRecord& r) {
  return std::string(to_string(r.op)) + ',' + std::to_string(r.src) + ',' + std::to_string(r.dst) +
         ',' + std::to_string(r.window) + ',' + std::to_string(r.offset) + ',' +
         std::to_string(r.len) + ',' + std::to_string(r.signal_id) + ',' +
         std::to_string(r.value) + ',' + std::to_string(r.seq);
}

void write_trace(std::ostream& os, std::span<const TraceRecord> records) {
  os << "op,src,dst,window,offset,len,signal_id,value,seq\n";
  for (const auto& r : records) os << format_trace_line(r) << '\n';
}

namespace {

struct PendingOp {
  bool is_signal = false;
  WindowId window = 0;
  std::size_t offset = 0;
  std::vector<std::byte> payload;
  SignalId signal = 0;
  std::uint64_t value = 0;
};

struct WindowSlot {
  std::span<std::byte> memory;
  HostBuffer owned;
};

}  // namespace

struct Fabric::RankState {
  std::mutex mu;
  std::condition_variable cv;
  std::map<WindowId, WindowSlot> windows;
  WindowId next_window = 0;
  std::vector<std::uint64_t> signals;
  // One FIFO per source rank: per-pair ordering is the only ordering.
  std::vector<std::deque<PendingOp>> inbox;
  std::size_t pending = 0;
  // Touched only by the owning rank's thread.
  std::mt19937_64 rng;
};

struct Fabric::Bootstrap {
  std::mutex mu;
  std::condition_variable cv;
  struct Round {
    std::vector<std::optional<std::vector<std::byte>>> blobs;
    int arrived = 0;
    int departed = 0;
  };
  std::map<std::uint64_t, Round> rounds;
  std::vector<std::uint64_t> generation;
};

Fabric::Fabric(FabricOptions options) : options_(options) {
  require(options_.num_ranks >= 1, ErrorCode::InvalidArgument, "fabric needs at least one rank");
  require(options_.ranks_per_node >= 1 && options_.num_ranks % options_.ranks_per_node == 0,
          ErrorCode::InvalidArgument, "ranks_per_node must divide num_ranks");
  topology_ = {options_.num_ranks, options_.ranks_per_node};
  ranks_.reserve(static_cast<std::size_t>(options_.num_ranks));
  for (int r = 0; r < options_.num_ranks; ++r) {
    auto st = std::make_unique<RankState>();
    st->inbox.resize(static_cast<std::size_t>(options_.num_ranks));
    st->rng.seed(options_.delay_seed.value_or(0) * 1000003u + static_cast<std::uint64_t>(r));
    ranks_.push_back(std::move(st));
  }
  bootstrap_ = std::make_unique<Bootstrap>();
  bootstrap_->generation.assign(static_cast<std::size_t>(options_.num_ranks), 0);
}

Fabric::~Fabric() = default;

Fabric::RankState& Fabric::state(int rank) const {
  return *ranks_[static_cast<std::size_t>(rank)];
}

void Fabric::check_open() const {
  if (closed_.load()) raise(ErrorCode::TransportClosed, "fabric is shut down");
}

void Fabric::check_rank(int rank) const {
  require(rank >= 0 && rank < options_.num_ranks, ErrorCode::InvalidArgument,
          "rank out of range");
}

Endpoint Fabric::endpoint(int rank) {
  check_rank(rank);
  return Endpoint(this, rank);
}

Window Fabric::register_window(int rank, std::size_t byte_size) {
  require(byte_size > 0, ErrorCode::InvalidArgument, "window size must be positive");
  check_rank(rank);
  HostBuffer owned(byte_size);
  auto& st = state(rank);
  std::lock_guard lk(st.mu);
  const WindowId id = st.next_window++;
  auto mem = owned.bytes();
  st.windows.emplace(id, WindowSlot{mem, std::move(owned)});
  return {rank, byte_size, id};
}

Window Fabric::register_window(int rank, std::span<std::byte> memory) {
  require(!memory.empty(), ErrorCode::InvalidArgument, "window size must be positive");
  check_rank(rank);
  auto& st = state(rank);
  std::lock_guard lk(st.mu);
  const WindowId id = st.next_window++;
  st.windows.emplace(id, WindowSlot{memory, HostBuffer()});
  return {rank, memory.size(), id};
}

void Fabric::deregister_window(int rank, WindowId id) {
  check_rank(rank);
  auto& st = state(rank);
  std::lock_guard lk(st.mu);
  require(st.windows.erase(id) == 1, ErrorCode::InvalidArgument, "unknown window");
}

std::size_t Fabric::window_count(int rank) const {
  check_rank(rank);
  auto& st = state(rank);
  std::lock_guard lk(st.mu);
  return st.windows.size();
}

void Fabric::shutdown() {
  closed_.store(true);
  for (auto& st : ranks_) {
    std::lock_guard lk(st->mu);
    st->cv.notify_all();
  }
  std::lock_guard lk(bootstrap_->mu);
  bootstrap_->cv.notify_all();
}

std::vector<TraceRecord> Fabric::trace() const {
  std::lock_guard lk(trace_mu_);
  return trace_;
}

void Fabric::clear_trace() {
  std::lock_guard lk(trace_mu_);
  trace_.clear();
}

void Fabric::record(TraceOp op, int src, int dst, WindowId w, std::size_t off, std::size_t len,
                    SignalId sig, std::uint64_t value) {
  const std::uint64_t seq = seq_.fetch_add(1);
  if (!options_.record_trace) return;
  std::lock_guard lk(trace_mu_);
  trace_.push_back({op, src, dst, w, off, len, sig, value, seq});
}

// ---- Endpoint ------------------------------------------------------------

namespace {

std::span<std::byte> window_range(std::map<WindowId, WindowSlot>& windows, WindowId id,
                                  std::size_t offset, std::size_t len) {
  auto it = windows.find(id);
  require(it != windows.end(), ErrorCode::InvalidArgument, "unknown window");
  auto mem = it->second.memory;
  if (offset > mem.size() || len > mem.size() - offset || (len == 0 && offset >= mem.size())) {
    raise(ErrorCode::CapacityExceeded, "access outside window [" + std::to_string(offset) + ", +" +
                                           std::to_string(len) + ") of " +
                                           std::to_string(mem.size()) + " bytes");
  }
  return mem.subspan(offset, len);
}

void check_signal(const std::vector<std::uint64_t>& signals, SignalId id) {
  if (id >= signals.size()) {
    raise(ErrorCode::InvalidArgument, "signal id " + std::to_string(id) + " not allocated");
  }
}

}  // namespace

const NodeTopology& Endpoint::topology() const { return fabric_->topology(); }

Window Endpoint::register_window(std::size_t byte_size) {
  return fabric_->register_window(rank_, byte_size);
}

Window Endpoint::register_window(std::span<std::byte> memory) {
  return fabric_->register_window(rank_, memory);
}

void Endpoint::deregister_window(WindowId id) { fabric_->deregister_window(rank_, id); }

SignalId Endpoint::allocate_signals(std::uint32_t count) {
  auto& st = fabric_->state(rank_);
  std::lock_guard lk(st.mu);
  const auto base = static_cast<SignalId>(st.signals.size());
  st.signals.resize(st.signals.size() + count, 0);
  return base;
}

void Endpoint::put(int dst, WindowId window, std::size_t offset,
                   std::span<const std::byte> payload) {
  fabric_->check_open();
  fabric_->check_rank(dst);
  auto& st = fabric_->state(dst);
  std::lock_guard lk(st.mu);
  // Bounds are checked against the registered window when the put is
  // issued and again when it lands.
  window_range(st.windows, window, offset, payload.size());
  PendingOp op;
  op.window = window;
  op.offset = offset;
  op.payload.assign(payload.begin(), payload.end());
  st.inbox[static_cast<std::size_t>(rank_)].push_back(std::move(op));
  ++st.pending;
  st.cv.notify_all();
}

void Endpoint::signal_add(int dst, SignalId id, std::uint64_t value) {
  fabric_->check_open();
  fabric_->check_rank(dst);
  auto& st = fabric_->state(dst);
  std::lock_guard lk(st.mu);
  check_signal(st.signals, id);
  PendingOp op;
  op.is_signal = true;
  op.signal = id;
  op.value = value;
  st.inbox[static_cast<std::size_t>(rank_)].push_back(std::move(op));
  ++st.pending;
  st.cv.notify_all();
}

namespace {

// Applies queued operations for `self` (lock held). Without delays everything
// lands in source order; with delays a random prefix of one random source's
// queue lands. Returns whether anything was delivered.
template <class Record>
bool deliver(std::vector<std::deque<PendingOp>>& inbox, std::size_t& pending,
             std::map<WindowId, WindowSlot>& windows, std::vector<std::uint64_t>& signals,
             std::mt19937_64* rng, Record&& record) {
  if (pending == 0) return false;
  auto apply = [&](int src, PendingOp& op) {
    if (op.is_signal) {
      signals[op.signal] += op.value;
      record(TraceOp::Signal, src, op.window, 0, 0, op.signal, op.value);
    } else {
      auto dst = window_range(windows, op.window, op.offset, op.payload.size());
      if (!op.payload.empty()) std::memcpy(dst.data(), op.payload.data(), op.payload.size());
      record(TraceOp::Put, src, op.window, op.offset, op.payload.size(), 0, 0);
    }
  };
  if (rng == nullptr) {
    for (std::size_t src = 0; src < inbox.size(); ++src) {
      auto& q = inbox[src];
      while (!q.empty()) {
        PendingOp op = std::move(q.front());
        q.pop_front();
        --pending;
        apply(static_cast<int>(src), op);
      }
    }
    return true;
  }
  std::vector<std::size_t> sources;
  for (std::size_t src = 0; src < inbox.size(); ++src) {
    if (!inbox[src].empty()) sources.push_back(src);
  }
  const std::size_t src = sources[(*rng)() % sources.size()];
  auto& q = inbox[src];
  const std::size_t n = 1 + (*rng)() % q.size();
  for (std::size_t i = 0; i < n; ++i) {
    PendingOp op = std::move(q.front());
    q.pop_front();
    --pending;
    apply(static_cast<int>(src), op);
  }
  return true;
}

}  // namespace

void Endpoint::wait_until(const std::function<bool(const SignalView&)>& ready) {
  auto& st = fabric_->state(rank_);
  const bool delays = fabric_->options().delay_seed.has_value();
  auto rec = [&](TraceOp op, int src, WindowId w, std::size_t off, std::size_t len, SignalId sig,
                 std::uint64_t v) { fabric_->record(op, src, rank_, w, off, len, sig, v); };
  std::unique_lock lk(st.mu);
  SignalView view(st.signals);
  for (;;) {
    fabric_->check_open();
    if (ready(view)) return;
    if (deliver(st.inbox, st.pending, st.windows, st.signals, delays ? &st.rng : nullptr, rec)) {
      if (delays && st.rng() % 4 == 0) {
        lk.unlock();
        std::this_thread::yield();
        lk.lock();
      }
      continue;
    }
    st.cv.wait(lk);
  }
}

void Endpoint::wait_signal(SignalId id, std::uint64_t threshold) {
  wait_until([&](const SignalView& s) { return s[id] >= threshold; });
}

std::uint64_t Endpoint::read_signal(SignalId id) {
  auto& st = fabric_->state(rank_);
  std::lock_guard lk(st.mu);
  check_signal(st.signals, id);
  return st.signals[id];
}

void Endpoint::reset_signal(SignalId id) { reset_signals(id, 1); }

void Endpoint::reset_signals(SignalId base, std::uint32_t count) {
  auto& st = fabric_->state(rank_);
  std::lock_guard lk(st.mu);
  require(static_cast<std::size_t>(base) + count <= st.signals.size(), ErrorCode::InvalidArgument,
          "signal range not allocated");
  std::fill_n(st.signals.begin() + base, count, 0);
}

void Endpoint::progress() {
  fabric_->check_open();
  auto& st = fabric_->state(rank_);
  const bool delays = fabric_->options().delay_seed.has_value();
  auto rec = [&](TraceOp op, int src, WindowId w, std::size_t off, std::size_t len, SignalId sig,
                 std::uint64_t v) { fabric_->record(op, src, rank_, w, off, len, sig, v); };
  std::lock_guard lk(st.mu);
  deliver(st.inbox, st.pending, st.windows, st.signals, delays ? &st.rng : nullptr, rec);
}

bool Endpoint::lsa_accessible(int peer) const {
  fabric_->check_rank(peer);
  return fabric_->topology().same_node(rank_, peer);
}

namespace {

void maybe_yield(Fabric& f, std::mt19937_64& rng) {
  if (f.options().delay_seed && rng() % 8 == 0) std::this_thread::yield();
}

}  // namespace

void Endpoint::lsa_store(int peer, WindowId window, std::size_t offset,
                         std::span<const std::byte> bytes) {
  fabric_->check_open();
  require(lsa_accessible(peer), ErrorCode::InvalidArgument, "peer is not load/store accessible");
  maybe_yield(*fabric_, fabric_->state(rank_).rng);
  auto& st = fabric_->state(peer);
  std::lock_guard lk(st.mu);
  auto dst = window_range(st.windows, window, offset, bytes.size());
  if (!bytes.empty()) std::memcpy(dst.data(), bytes.data(), bytes.size());
  fabric_->record(TraceOp::LsaStore, rank_, peer, window, offset, bytes.size(), 0, 0);
}

void Endpoint::lsa_load(int peer, WindowId window, std::size_t offset, std::span<std::byte> out) {
  fabric_->check_open();
  require(lsa_accessible(peer), ErrorCode::InvalidArgument, "peer is not load/store accessible");
  auto& st = fabric_->state(peer);
  std::lock_guard lk(st.mu);
  auto src = window_range(st.windows, window, offset, out.size());
  if (!out.empty()) std::memcpy(out.data(), src.data(), out.size());
}

void Endpoint::lsa_store_release(int peer, WindowId window, std::size_t offset,
                                 std::uint64_t value) {
  fabric_->check_open();
  require(lsa_accessible(peer), ErrorCode::InvalidArgument, "peer is not load/store accessible");
  maybe_yield(*fabric_, fabric_->state(rank_).rng);
  auto& st = fabric_->state(peer);
  std::lock_guard lk(st.mu);
  auto dst = window_range(st.windows, window, offset, sizeof value);
  std::memcpy(dst.data(), &value, sizeof value);
  fabric_->record(TraceOp::LsaStoreRelease, rank_, peer, window, offset, sizeof value, 0, value);
  st.cv.notify_all();
}

std::uint64_t Endpoint::lsa_load_acquire(int peer, WindowId window, std::size_t offset) {
  std::uint64_t value = 0;
  lsa_load(peer, window, offset, std::as_writable_bytes(std::span(&value, 1)));
  return value;
}

void Endpoint::lsa_signal_add(int peer, SignalId id, std::uint64_t value) {
  fabric_->check_open();
  require(lsa_accessible(peer), ErrorCode::InvalidArgument, "peer is not load/store accessible");
  maybe_yield(*fabric_, fabric_->state(rank_).rng);
  auto& st = fabric_->state(peer);
  std::lock_guard lk(st.mu);
  check_signal(st.signals, id);
  st.signals[id] += value;
  fabric_->record(TraceOp::LsaSignal, rank_, peer, 0, 0, 0, id, value);
  st.cv.notify_all();
}

std::vector<std::vector<std::byte>> Endpoint::bootstrap_allgather(
    std::span<const std::byte> blob) {
  fabric_->check_open();
  auto& bs = *fabric_->bootstrap_;
  const int n = fabric_->topology().num_ranks;
  std::unique_lock lk(bs.mu);
  const std::uint64_t gen = ++bs.generation[static_cast<std::size_t>(rank_)];
  auto& round = bs.rounds[gen];
  if (round.blobs.empty()) round.blobs.resize(static_cast<std::size_t>(n));
  round.blobs[static_cast<std::size_t>(rank_)] = std::vector<std::byte>(blob.begin(), blob.end());
  ++round.arrived;
  bs.cv.notify_all();
  bs.cv.wait(lk, [&] { return round.arrived == n || fabric_->is_closed(); });
  fabric_->check_open();
  std::vector<std::vector<std::byte>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (auto& b : round.blobs) out.push_back(*b);
  if (++round.departed == n) bs.rounds.erase(gen);
  return out;
}

}  // namespace epsim

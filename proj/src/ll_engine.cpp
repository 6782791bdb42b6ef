/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/ll.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace epsim::ll {

BufferPlan plan_buffers(const EpConfig& config) {
  const auto shape = layout::MoeShape::from(config);
  BufferPlan p;
  p.layout = config.ll_layout;
  p.geometry = layout::slot_geometry(config);
  p.experts_per_rank = shape.experts_per_rank();
  const auto N = static_cast<std::size_t>(shape.ranks);
  const auto B = static_cast<std::size_t>(shape.tokens);
  const auto E = static_cast<std::size_t>(shape.experts);
  const auto K = static_cast<std::size_t>(shape.topk);
  const auto L = static_cast<std::size_t>(p.experts_per_rank);
  p.dispatch_subregions = p.layout == LlLayout::Legacy ? L * N : N;
  p.slots_per_subregion = B;
  p.combine_slots = p.layout == LlLayout::Legacy ? E * B : B * K;
  p.dispatch_region_bytes = p.dispatch_subregions * B * p.geometry.dispatch_slot();
  p.combine_region_bytes = p.combine_slots * p.geometry.combine_slot();
  p.send_staging_bytes = B * p.geometry.dispatch_slot();
  p.signals_per_parity = static_cast<std::uint32_t>(L * N + E);
  return p;
}

int schedule_blocks(const EpConfig& config) {
  if (config.ll_blocks > 0) return config.ll_blocks;
  return (config.num_experts + config.ll_warps - 1) / config.ll_warps;
}

Engine::Engine(Endpoint ep, const EpConfig& config, BufferPool& pool)
    : ep_(ep), config_(config), shape_(layout::MoeShape::from(config)), plan_(plan_buffers(config)) {
  schedule_ = layout::pair_schedule(schedule_blocks(config), config.ll_warps, config.num_experts);
  recv_ = pool.acquire("ll.recv", plan_.window_bytes());
  send_[0] = pool.acquire("ll.send0", plan_.send_staging_bytes);
  send_[1] = pool.acquire("ll.send1", plan_.send_staging_bytes);
  window_ = ep_.register_window(recv_);
  signal_base_ = ep_.allocate_signals(2 * plan_.signals_per_parity);
}

Engine::~Engine() {
  try {
    ep_.deregister_window(window_.window_id);
  } catch (const EpError&) {
  }
}

SignalId Engine::dispatch_signal(int parity, int local_expert, int src) const {
  return signal_base_ + static_cast<SignalId>(parity) * plan_.signals_per_parity +
         static_cast<SignalId>(local_expert * shape_.ranks + src);
}

SignalId Engine::combine_signal(int parity, int expert) const {
  const auto L = static_cast<SignalId>(plan_.experts_per_rank);
  return signal_base_ + static_cast<SignalId>(parity) * plan_.signals_per_parity +
         L * static_cast<SignalId>(shape_.ranks) + static_cast<SignalId>(expert);
}

std::size_t Engine::dispatch_offset(int parity, std::size_t subregion, std::size_t slot) const {
  return static_cast<std::size_t>(parity) * plan_.parity_bytes() +
         (subregion * plan_.slots_per_subregion + slot) * plan_.geometry.dispatch_slot();
}

std::size_t Engine::combine_offset(int parity, std::size_t slot) const {
  return static_cast<std::size_t>(parity) * plan_.parity_bytes() + plan_.dispatch_region_bytes +
         slot * plan_.geometry.combine_slot();
}

void Engine::transfer(int dst, std::size_t offset, std::span<const std::byte> bytes,
                      OpStats& stats) {
  if (ep_.lsa_accessible(dst)) {
    ep_.lsa_store(dst, window_.window_id, offset, bytes);
    ++stats.intra_node_msgs;
  } else {
    ep_.put(dst, window_.window_id, offset, bytes);
    ++stats.inter_node_msgs;
  }
  stats.bytes_put += bytes.size();
  ++stats.msgs;
}

void Engine::flush(int dst, SignalId id, std::uint64_t value, OpStats& stats) {
  if (ep_.lsa_accessible(dst)) {
    ep_.lsa_signal_add(dst, id, value);
  } else {
    ep_.signal_add(dst, id, value);
  }
  ++stats.signals;
}

// ---- dispatch ------------------------------------------------------------

void Engine::dispatch_send(HandleState& h, const Routing& routing, const NDTensor& tokens,
                           const NDTensor* scales, OpStats& stats) {
  int parity = static_cast<int>(seq_ % 2);
  if (busy_[static_cast<std::size_t>(parity)]) parity ^= 1;
  require(!busy_[static_cast<std::size_t>(parity)], ErrorCode::HandleStateError,
          "both LL buffers hold operations awaiting combine");
  ++seq_;
  busy_[static_cast<std::size_t>(parity)] = true;
  h.parity = parity;
  stats.buffer_bytes = plan_.footprint_bytes();

  const int me = ep_.rank();
  const int T = routing.tokens;
  const int K = routing.topk;
  const int L = plan_.experts_per_rank;
  const auto& g = plan_.geometry;
  const bool optimized = plan_.layout == LlLayout::Optimized;

  // Count: tokens per destination expert.
  std::vector<std::uint64_t> count(static_cast<std::size_t>(shape_.experts), 0);
  for (auto e : routing.experts) ++count[static_cast<std::size_t>(e)];

  // Pack each token once: header, token bytes, scales.
  auto staging = send_[static_cast<std::size_t>(parity)];
  const std::size_t P = g.dispatch_slot();
  std::vector<std::int64_t> lead(1);
  for (int t = 0; t < T; ++t) {
    auto slot = staging.subspan(static_cast<std::size_t>(t) * P, P);
    const auto route = optimized ? routing.row(t) : std::span<const std::int32_t>{};
    layout::encode_header_into(slot.first(g.header_bytes), static_cast<std::uint32_t>(t), route,
                               shape_.experts);
    lead[0] = t;
    tokens.read_row_bytes(lead, slot.subspan(g.header_bytes, g.token_bytes));
    if (scales != nullptr) {
      auto dst = slot.subspan(g.header_bytes + g.token_bytes, g.scale_bytes);
      std::vector<float> row(g.scale_bytes / 4);
      scales->read_row(lead, row);
      std::memcpy(dst.data(), row.data(), dst.size());
    }
  }

  // Send: next unused slot per expert (legacy) or per destination rank.
  std::vector<std::size_t> next_expert(static_cast<std::size_t>(shape_.experts), 0);
  std::vector<std::size_t> next_rank(static_cast<std::size_t>(shape_.ranks), 0);
  std::vector<int> sent_to(static_cast<std::size_t>(shape_.ranks), -1);
  for (int t = 0; t < T; ++t) {
    const auto payload = staging.subspan(static_cast<std::size_t>(t) * P, P);
    for (int k = 0; k < K; ++k) {
      const int e = routing.at(t, k);
      const int dst = shape_.rank_of_expert(e);
      std::size_t offset = 0;
      if (optimized) {
        if (sent_to[static_cast<std::size_t>(dst)] == t) continue;
        sent_to[static_cast<std::size_t>(dst)] = t;
        const std::size_t slot = next_rank[static_cast<std::size_t>(dst)]++;
        offset = dispatch_offset(parity, static_cast<std::size_t>(layout::idx_d_opt(me)), slot);
      } else {
        const std::size_t slot = next_expert[static_cast<std::size_t>(e)]++;
        const auto sub = static_cast<std::size_t>(layout::idx_dp_legacy(shape_, e, me));
        offset = dispatch_offset(parity, sub, slot);
      }
      transfer(dst, offset, payload, stats);
      ++stats.slots_used;
    }
  }

  // Update: V = m + 1 per pair, so empty pairs still announce themselves.
  for (int e : schedule_) {
    const int dst = shape_.rank_of_expert(e);
    flush(dst, dispatch_signal(parity, e % L, me), count[static_cast<std::size_t>(e)] + 1, stats);
  }
}

void Engine::dispatch_recv(HandleState& h, const DispatchOutputs& out, OpStats& stats) {
  const int parity = h.parity;
  const int me = ep_.rank();
  const int N = shape_.ranks;
  const int L = plan_.experts_per_rank;
  const int local = shape_.local_experts(me);
  const int first = shape_.first_expert(me);
  const auto& g = plan_.geometry;
  const std::size_t P = g.dispatch_slot();
  const bool optimized = plan_.layout == LlLayout::Optimized;

  ep_.wait_until([&](const SignalView& s) {
    for (int le = 0; le < local; ++le) {
      for (int src = 0; src < N; ++src) {
        if (s[dispatch_signal(parity, le, src)] == 0) return false;
      }
    }
    return true;
  });

  // Reserve contiguous output rows per (local expert, source) in source order.
  h.dispatch_counter_seen.assign(static_cast<std::size_t>(L * N), 0);
  std::vector<std::int64_t> offset(static_cast<std::size_t>(L * N), 0);
  h.recv_counts.assign(static_cast<std::size_t>(L), 0);
  const std::int64_t capacity = static_cast<std::int64_t>(N) * shape_.tokens;
  for (int le = 0; le < local; ++le) {
    for (int src = 0; src < N; ++src) {
      const auto idx = static_cast<std::size_t>(le * N + src);
      const std::uint64_t v = ep_.read_signal(dispatch_signal(parity, le, src));
      h.dispatch_counter_seen[idx] = v;
      offset[idx] = h.recv_counts[static_cast<std::size_t>(le)];
      h.recv_counts[static_cast<std::size_t>(le)] += static_cast<std::int64_t>(v - 1);
    }
    if (h.recv_counts[static_cast<std::size_t>(le)] > capacity) {
      raise(ErrorCode::CapacityExceeded,
            "expert " + std::to_string(first + le) + " received more than N*B tokens");
    }
  }

  h.cache.clear();
  std::vector<std::int64_t> lead(2);
  std::vector<float> scale_row(g.scale_bytes / 4);
  auto place = [&](std::span<const std::byte> slot, int src, int t, int k, int le,
                   std::int64_t row) {
    require(row < capacity, ErrorCode::CapacityExceeded, "dispatch output row overflow");
    lead[0] = le;
    lead[1] = row;
    out.tokens.write_row_bytes(lead, slot.subspan(g.header_bytes, g.token_bytes));
    if (out.scales) {
      std::memcpy(scale_row.data(), slot.data() + g.header_bytes + g.token_bytes, g.scale_bytes);
      out.scales->write_row(lead, scale_row);
    }
    h.cache.push_back({src, t, k, le, static_cast<int>(row)});
    stats.copy_bytes += g.token_bytes + g.scale_bytes;
  };

  for (int le = 0; le < local && !optimized; ++le) {
    for (int src = 0; src < N; ++src) {
      const auto idx = static_cast<std::size_t>(le * N + src);
      const auto m = static_cast<std::size_t>(h.dispatch_counter_seen[idx] - 1);
      const auto sub = static_cast<std::size_t>(layout::idx_dp_legacy(shape_, first + le, src));
      for (std::size_t s = 0; s < m; ++s) {
        const auto slot = recv_.subspan(dispatch_offset(parity, sub, s), P);
        const auto hdr = layout::decode_header(slot.first(g.header_bytes));
        place(slot, src, static_cast<int>(hdr.src_token), -1, le,
              offset[idx] + static_cast<std::int64_t>(s));
      }
    }
  }

  for (int src = 0; src < N && optimized; ++src) {
    std::uint64_t need = 0;
    for (int le = 0; le < local; ++le) {
      need += h.dispatch_counter_seen[static_cast<std::size_t>(le * N + src)] - 1;
    }
    std::vector<std::int64_t> next(static_cast<std::size_t>(L), 0);
    std::uint64_t placed = 0;
    for (std::size_t s = 0; placed < need; ++s) {
      require(s < plan_.slots_per_subregion, ErrorCode::CapacityExceeded,
              "source sub-region holds fewer payloads than its counters announce");
      const auto slot = recv_.subspan(dispatch_offset(parity, static_cast<std::size_t>(src), s), P);
      const auto hdr = layout::decode_header(slot.first(g.header_bytes));
      for (std::size_t k = 0; k < hdr.routing.size(); ++k) {
        const int e = hdr.routing[k];
        if (shape_.rank_of_expert(e) != me) continue;
        const int le = e - first;
        const auto idx = static_cast<std::size_t>(le * N + src);
        place(slot, src, static_cast<int>(hdr.src_token), static_cast<int>(k), le,
              offset[idx] + next[static_cast<std::size_t>(le)]++);
        ++placed;
      }
    }
  }

  for (const auto* counter : {&out.counter_host, &out.counter_device}) {
    if (!*counter) continue;
    for (int le = 0; le < L; ++le) (*counter)->store_int({le}, h.recv_counts[static_cast<std::size_t>(le)]);
  }

  // Consumed: this parity's dispatch counters may now take the next round.
  ep_.reset_signals(dispatch_signal(parity, 0, 0), static_cast<std::uint32_t>(L * N));
}

// ---- combine -------------------------------------------------------------

void Engine::combine_send(HandleState& h, const NDTensor& expert_out, OpStats& stats) {
  const int parity = h.parity;
  const int me = ep_.rank();
  const int first = shape_.first_expert(me);
  const int K = shape_.topk;
  const auto& g = plan_.geometry;
  const bool optimized = plan_.layout == LlLayout::Optimized;
  stats.buffer_bytes = plan_.footprint_bytes();

  std::vector<std::byte> row(g.combine_token_bytes);
  std::vector<std::int64_t> lead(2);
  for (const auto& c : h.cache) {
    lead[0] = c.local_expert;
    lead[1] = c.row;
    expert_out.read_row_bytes(lead, row);
    std::size_t slot = 0;
    if (optimized) {
      const int k = config_.debug_corrupt_combine_slot ? (c.k + 1) % K : c.k;
      slot = static_cast<std::size_t>(layout::idx_c_opt(c.src_token, k, K));
    } else {
      slot = static_cast<std::size_t>(layout::idx_e(first + c.local_expert)) *
                 static_cast<std::size_t>(shape_.tokens) +
             static_cast<std::size_t>(c.src_token);
    }
    transfer(c.src_rank, combine_offset(parity, slot), row, stats);
    ++stats.slots_used;
  }

  for (const auto& pair : layout::valid_pairs_expert(shape_, me)) {
    flush(pair.rank, combine_signal(parity, pair.expert), 1, stats);
  }
}

void Engine::combine_recv(HandleState& h, const Routing& routing, const NDTensor& weights,
                          const NDTensor& out, OpStats& stats) {
  const int parity = h.parity;
  const int K = routing.topk;
  const int H = shape_.hidden;
  const auto& g = plan_.geometry;
  const bool optimized = plan_.layout == LlLayout::Optimized;
  const Dtype dt = config_.token_dtype;

  std::vector<float> acc(static_cast<std::size_t>(H));
  std::vector<float> y(static_cast<std::size_t>(H));
  std::vector<std::int64_t> lead(1);
  for (int t = 0; t < routing.tokens; ++t) {
    const auto route = routing.row(t);
    ep_.wait_until([&](const SignalView& s) {
      for (auto e : route) {
        if (s[combine_signal(parity, e)] == 0) return false;
      }
      return true;
    });
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (int k = 0; k < K; ++k) {
      const int e = route[static_cast<std::size_t>(k)];
      const std::size_t slot =
          optimized ? static_cast<std::size_t>(layout::idx_c_opt(t, k, K))
                    : static_cast<std::size_t>(e) * static_cast<std::size_t>(shape_.tokens) +
                          static_cast<std::size_t>(t);
      decode_row(dt, recv_.subspan(combine_offset(parity, slot), g.combine_slot()), y);
      const float w = weights.load_f32({t, k});
      for (int i = 0; i < H; ++i) {
        const float prod = w * y[static_cast<std::size_t>(i)];
        acc[static_cast<std::size_t>(i)] += prod;
      }
    }
    lead[0] = t;
    out.write_row(lead, acc);
    stats.copy_bytes += static_cast<std::uint64_t>(H) * byte_width(out.dtype());
  }

  // Every expert flushes once per source; draining all of them is what makes
  // this parity reusable.
  ep_.wait_until([&](const SignalView& s) {
    for (int e = 0; e < shape_.experts; ++e) {
      if (s[combine_signal(parity, e)] == 0) return false;
    }
    return true;
  });
  h.combine_counter_seen.assign(static_cast<std::size_t>(shape_.experts), 0);
  for (int e = 0; e < shape_.experts; ++e) {
    h.combine_counter_seen[static_cast<std::size_t>(e)] = ep_.read_signal(combine_signal(parity, e));
  }
  ep_.reset_signals(combine_signal(parity, 0), static_cast<std::uint32_t>(shape_.experts));
  busy_[static_cast<std::size_t>(parity)] = false;
}

}  // namespace epsim::ll

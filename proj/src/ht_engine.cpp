/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/ht.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace epsim::ht {

namespace {

std::size_t align_up(std::size_t v) { return (v + 63) & ~std::size_t{63}; }

void put_u32s(std::byte* p, std::initializer_list<std::uint32_t> values) {
  for (auto v : values) {
    std::memcpy(p, &v, 4);
    p += 4;
  }
}

std::uint32_t get_u32(const std::byte* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

constexpr std::size_t kInfoBytes = 12;

}  // namespace

BufferPlan plan_buffers(const EpConfig& config) {
  const auto shape = layout::MoeShape::from(config);
  const auto N = static_cast<std::size_t>(shape.ranks);
  const auto B = static_cast<std::size_t>(shape.tokens);
  const auto K = static_cast<std::size_t>(shape.topk);
  const auto E = static_cast<std::size_t>(shape.experts);
  const auto H = static_cast<std::size_t>(shape.hidden);
  const auto L = static_cast<std::size_t>(shape.experts_per_rank());
  const auto M = static_cast<std::size_t>(config.num_nodes());

  BufferPlan p;
  p.row_bytes = H * byte_width(config.token_dtype);
  p.entry_bytes = layout::header_bytes(shape.topk) + p.row_bytes;
  p.meta_blob_bytes = config.fingerprint().size() + 8 + 8 * E;
  // A token can land on a rank at most once per local expert it selects.
  p.staging_rows = N * B * std::min(K, L);
  p.ring_entries =
      static_cast<std::size_t>(config.ht_fifo_depth) * static_cast<std::size_t>(config.ht_chunk_tokens);

  std::size_t at = 0;
  auto region = [&](std::size_t bytes) {
    const std::size_t off = at;
    at = align_up(at + bytes);
    return off;
  };
  p.meta_offset = region(2 * N * p.meta_blob_bytes);
  p.staging_offset = region(p.staging_rows * p.row_bytes);
  p.info_offset = region(p.staging_rows * kInfoBytes);
  p.ring_offset = region(M * p.ring_entries * p.entry_bytes);
  p.combine_staging_offset = region(p.staging_rows * p.row_bytes);
  p.direct_offset = region(B * K * p.row_bytes);
  p.gather_offset = region(M * B * K * p.row_bytes);
  p.partial_offset = region(M * B * H * 4);
  p.weights_offset = region(M * B * K * 4);
  p.flat_offset = region(B * K * p.row_bytes);
  p.window_bytes = at;
  return p;
}

Engine::Engine(Endpoint ep, const EpConfig& config, BufferPool& pool)
    : ep_(ep),
      config_(config),
      shape_(layout::MoeShape::from(config)),
      topo_(ep.topology()),
      plan_(plan_buffers(config)) {
  mem_ = pool.acquire("ht.window", plan_.window_bytes);
  window_ = ep_.register_window(mem_);
  const auto M = static_cast<std::uint32_t>(topo_.num_nodes());
  signal_base_ = ep_.allocate_signals(kFixedSignals + 2 * M);
  ring_sent_.assign(M, 0);
  ring_consumed_.assign(M, 0);
}

Engine::~Engine() {
  try {
    ep_.deregister_window(window_.window_id);
  } catch (const EpError&) {
  }
}

SignalId Engine::tail_sig(int src_node) const {
  return signal_base_ + kFixedSignals + static_cast<SignalId>(src_node);
}

SignalId Engine::head_sig(int fwd_node) const {
  return signal_base_ + kFixedSignals + static_cast<SignalId>(topo_.num_nodes() + fwd_node);
}

std::int64_t Engine::row_of(const HandleState& h, int dst, int local_expert, int src) const {
  const int L = shape_.experts_per_rank();
  return h.row_base[static_cast<std::size_t>((dst * L + local_expert) * shape_.ranks + src)];
}

void Engine::store(int dst, std::size_t offset, std::span<const std::byte> bytes,
                   OpStats& stats) {
  if (ep_.lsa_accessible(dst)) {
    ep_.lsa_store(dst, window_.window_id, offset, bytes);
  } else {
    ep_.put(dst, window_.window_id, offset, bytes);
  }
  stats.bytes_put += bytes.size();
  ++stats.msgs;
}

void Engine::notify(int dst, SignalId id, OpStats& stats) {
  if (ep_.lsa_accessible(dst)) {
    ep_.lsa_signal_add(dst, id, 1);
  } else {
    ep_.signal_add(dst, id, 1);
  }
  ++stats.signals;
}

// ---- metadata ------------------------------------------------------------

void Engine::exchange_metadata(HandleState& h, const Routing& routing) {
  const int N = shape_.ranks;
  const int E = shape_.experts;
  const int L = shape_.experts_per_rank();
  const int me = ep_.rank();
  const std::uint64_t round = handles_++;
  const auto parity = static_cast<std::size_t>(round % 2);
  const SignalId meta = sig(parity == 0 ? kMeta0 : kMeta1);

  const auto fp = config_.fingerprint();
  std::vector<std::byte> blob(plan_.meta_blob_bytes);
  std::memcpy(blob.data(), fp.data(), fp.size());
  const std::int64_t tokens = routing.tokens;
  std::memcpy(blob.data() + fp.size(), &tokens, 8);
  std::vector<std::int64_t> mine(static_cast<std::size_t>(E), 0);
  for (auto e : routing.experts) ++mine[static_cast<std::size_t>(e)];
  std::memcpy(blob.data() + fp.size() + 8, mine.data(), 8 * mine.size());

  OpStats scratch;
  for (int d = 0; d < N; ++d) {
    store(d, plan_.meta_offset + (parity * N + static_cast<std::size_t>(me)) * plan_.meta_blob_bytes,
          blob, scratch);
    notify(d, meta, scratch);
  }
  ep_.wait_signal(meta, (round / 2 + 1) * static_cast<std::uint64_t>(N));

  h.tokens_per_rank.assign(static_cast<std::size_t>(N), 0);
  h.counts.assign(static_cast<std::size_t>(N * E), 0);
  bool mismatch = false;
  for (int s = 0; s < N; ++s) {
    const std::byte* p =
        mem_.data() + plan_.meta_offset + (parity * N + static_cast<std::size_t>(s)) * plan_.meta_blob_bytes;
    mismatch |= std::memcmp(p, fp.data(), fp.size()) != 0;
    std::int64_t t;
    std::memcpy(&t, p + fp.size(), 8);
    h.tokens_per_rank[static_cast<std::size_t>(s)] = static_cast<int>(t);
    std::memcpy(h.counts.data() + static_cast<std::size_t>(s * E), p + fp.size() + 8,
                8 * static_cast<std::size_t>(E));
  }
  if (mismatch) raise(ErrorCode::ConfigMismatch, "ranks disagree on the group configuration");

  // Output order on every destination: local expert, then source, then token.
  h.row_base.assign(static_cast<std::size_t>(N * L * N), 0);
  for (int d = 0; d < N; ++d) {
    std::int64_t running = 0;
    for (int le = 0; le < shape_.local_experts(d); ++le) {
      const int e = shape_.first_expert(d) + le;
      for (int s = 0; s < N; ++s) {
        h.row_base[static_cast<std::size_t>((d * L + le) * N + s)] = running;
        running += h.counts[static_cast<std::size_t>(s * E + e)];
      }
    }
    if (d == me) h.recv_total = running;
    if (static_cast<std::size_t>(running) > plan_.staging_rows) {
      raise(ErrorCode::CapacityExceeded, "rank " + std::to_string(d) + " would receive " +
                                             std::to_string(running) + " rows");
    }
  }
  h.recv_per_expert.assign(static_cast<std::size_t>(L), 0);
  for (int le = 0; le < shape_.local_experts(me); ++le) {
    for (int s = 0; s < N; ++s) {
      h.recv_per_expert[static_cast<std::size_t>(le)] +=
          h.counts[static_cast<std::size_t>(s * E + shape_.first_expert(me) + le)];
    }
  }
  h.dispatched = false;
}

// ---- dispatch ------------------------------------------------------------

void Engine::dispatch(HandleState& h, const Routing& routing, const NDTensor& tokens,
                      const DispatchOutputs& out, OpStats& stats) {
  const int me = ep_.rank();
  const int R = topo_.ranks_per_node;
  const int M = topo_.num_nodes();
  const int my_node = topo_.node_of(me);
  const int rail = topo_.rail_of(me);
  const int K = shape_.topk;
  const int E = shape_.experts;
  const int L = shape_.experts_per_rank();
  const std::size_t hdr_bytes = layout::header_bytes(K);
  const std::uint64_t round = dispatches_++;
  stats.buffer_bytes = plan_.window_bytes;

  // Node-mates must have copied out the previous round's staging.
  ep_.wait_signal(sig(kDrain), round * static_cast<std::uint64_t>(R - 1));

  auto write_row = [&](int dst, std::int64_t row, std::span<const std::byte> bytes, int src, int t,
                       int k) {
    store(dst, plan_.staging_offset + static_cast<std::size_t>(row) * plan_.row_bytes, bytes, stats);
    std::byte info[kInfoBytes];
    put_u32s(info, {static_cast<std::uint32_t>(src), static_cast<std::uint32_t>(t),
                    static_cast<std::uint32_t>(k)});
    store(dst, plan_.info_offset + static_cast<std::size_t>(row) * kInfoBytes, info, stats);
    ++stats.intra_node_msgs;
  };

  // Same-node targets directly; remote nodes once per (token, node).
  std::vector<std::vector<int>> queue(static_cast<std::size_t>(M));
  std::vector<std::int64_t> next(static_cast<std::size_t>(E), 0);
  std::vector<std::byte> row(plan_.row_bytes);
  std::vector<std::int64_t> lead(1);
  std::vector<int> last_queued(static_cast<std::size_t>(M), -1);
  for (int t = 0; t < routing.tokens; ++t) {
    lead[0] = t;
    tokens.read_row_bytes(lead, row);
    for (int k = 0; k < K; ++k) {
      const int e = routing.at(t, k);
      const int dst = shape_.rank_of_expert(e);
      const std::int64_t idx = next[static_cast<std::size_t>(e)]++;
      if (topo_.same_node(me, dst)) {
        write_row(dst, row_of(h, dst, e - shape_.first_expert(dst), me) + idx, row, me, t, k);
        continue;
      }
      const int node = topo_.node_of(dst);
      if (last_queued[static_cast<std::size_t>(node)] != t) {
        last_queued[static_cast<std::size_t>(node)] = t;
        queue[static_cast<std::size_t>(node)].push_back(t);
      }
    }
  }

  // Event loop: feed the outbound rings within credit while fanning out
  // whatever the same-rail peers pushed into ours.
  struct Outbound {
    std::size_t next = 0;
    bool end_sent = false;
  };
  std::vector<Outbound> outbound(static_cast<std::size_t>(M));
  std::vector<bool> ended(static_cast<std::size_t>(M), false);
  std::vector<std::int64_t> fwd_next(static_cast<std::size_t>(M * E), 0);
  std::vector<std::byte> entry(plan_.entry_bytes);
  const std::uint64_t ring = plan_.ring_entries;
  const auto chunk = static_cast<std::uint64_t>(config_.ht_chunk_tokens);
  h.forwarded.clear();

  auto remote = [&](int n) { return n != my_node; };
  for (;;) {
    bool progress = false;
    bool credit_blocked = false;
    bool sending = false;
    for (int n = 0; n < M; ++n) {
      auto& o = outbound[static_cast<std::size_t>(n)];
      if (!remote(n) || o.end_sent) continue;
      sending = true;
      const int fwd = topo_.rank_at(n, rail);
      auto& sent = ring_sent_[static_cast<std::size_t>(n)];
      const std::uint64_t head = ep_.read_signal(head_sig(n));
      const auto& q = queue[static_cast<std::size_t>(n)];
      std::uint64_t unflushed = 0;
      while (!o.end_sent && sent - head < ring) {
        std::fill(entry.begin(), entry.end(), std::byte{0});
        if (o.next < q.size()) {
          const int t = q[o.next++];
          layout::encode_header_into(entry, static_cast<std::uint32_t>(t), routing.row(t), E);
          lead[0] = t;
          tokens.read_row_bytes(lead, std::span(entry).subspan(hdr_bytes, plan_.row_bytes));
          ++stats.inter_node_msgs;
        } else {
          layout::encode_header_into(entry, kEndOfStream, {}, E);
          o.end_sent = true;
        }
        const std::size_t slot = static_cast<std::size_t>(sent % ring);
        store(fwd,
              plan_.ring_offset + (static_cast<std::size_t>(my_node) * ring + slot) * plan_.entry_bytes,
              entry, stats);
        ++sent;
        ++unflushed;
        if (o.end_sent) {
          // The end marker fills out its chunk so the next operation starts aligned.
          const std::uint64_t pad = (chunk - sent % chunk) % chunk;
          sent += pad;
          unflushed += pad;
        }
        progress = true;
        if (unflushed == chunk) {
          ep_.signal_add(fwd, tail_sig(my_node), unflushed);
          ++stats.signals;
          unflushed = 0;
        }
      }
      if (unflushed > 0) {
        ep_.signal_add(fwd, tail_sig(my_node), unflushed);
        ++stats.signals;
      }
      if (!o.end_sent) credit_blocked = true;
    }

    bool receiving = false;
    for (int n = 0; n < M; ++n) {
      if (!remote(n) || ended[static_cast<std::size_t>(n)]) continue;
      receiving = true;
      const int src = topo_.rank_at(n, rail);
      auto& consumed = ring_consumed_[static_cast<std::size_t>(n)];
      const std::uint64_t tail = ep_.read_signal(tail_sig(n));
      std::uint64_t processed = 0;
      while (consumed < tail && !ended[static_cast<std::size_t>(n)]) {
        const std::size_t slot = static_cast<std::size_t>(consumed % ring);
        const auto e_bytes = std::span<const std::byte>(mem_).subspan(
            plan_.ring_offset + (static_cast<std::size_t>(n) * ring + slot) * plan_.entry_bytes,
            plan_.entry_bytes);
        const auto hdr = layout::decode_header(e_bytes);
        ++consumed;
        ++processed;
        // Credit goes back one chunk at a time so the signal count does not
        // depend on how many chunks had arrived.
        const bool end = hdr.src_token == kEndOfStream;
        if (end) {
          const std::uint64_t pad = (chunk - consumed % chunk) % chunk;
          consumed += pad;
          processed += pad;
        }
        if (consumed % chunk == 0) {
          ep_.signal_add(src, head_sig(my_node), processed);
          ++stats.signals;
          processed = 0;
          progress = true;
        }
        if (end) {
          ended[static_cast<std::size_t>(n)] = true;
          break;
        }
        const auto payload = e_bytes.subspan(hdr_bytes, plan_.row_bytes);
        for (int k = 0; k < static_cast<int>(hdr.routing.size()); ++k) {
          const int e = hdr.routing[static_cast<std::size_t>(k)];
          const int dst = shape_.rank_of_expert(e);
          if (topo_.node_of(dst) != my_node) continue;
          const std::int64_t idx = fwd_next[static_cast<std::size_t>(n * E + e)]++;
          write_row(dst, row_of(h, dst, e - shape_.first_expert(dst), src) + idx, payload, src,
                    static_cast<int>(hdr.src_token), k);
        }
        h.forwarded.push_back({n, static_cast<int>(hdr.src_token), hdr.routing});
      }
      if (processed > 0) progress = true;
    }

    if (!sending && !receiving) break;
    if (progress) continue;
    if (credit_blocked) ++stats.fifo_stalls;
    ep_.wait_until([&](const SignalView& s) {
      for (int n = 0; n < M; ++n) {
        if (!remote(n)) continue;
        if (!ended[static_cast<std::size_t>(n)] &&
            s[tail_sig(n)] > ring_consumed_[static_cast<std::size_t>(n)]) {
          return true;
        }
        if (!outbound[static_cast<std::size_t>(n)].end_sent &&
            ring_sent_[static_cast<std::size_t>(n)] - s[head_sig(n)] < ring) {
          return true;
        }
      }
      return false;
    });
  }

  for (int r = 0; r < R; ++r) {
    ep_.lsa_signal_add(topo_.rank_at(my_node, r), sig(kWriteDone), 1);
    ++stats.signals;
  }
  ep_.wait_signal(sig(kWriteDone), (round + 1) * static_cast<std::uint64_t>(R));

  // Registered staging -> caller's output.
  h.rows.resize(static_cast<std::size_t>(h.recv_total));
  require(out.tokens.extent(0) == h.recv_total, ErrorCode::ShapeMismatch,
          "HT dispatch output rows != received tokens");
  for (std::int64_t i = 0; i < h.recv_total; ++i) {
    const auto off = static_cast<std::size_t>(i);
    lead[0] = i;
    out.tokens.write_row_bytes(
        lead, std::span(mem_).subspan(plan_.staging_offset + off * plan_.row_bytes, plan_.row_bytes));
    const std::byte* info = mem_.data() + plan_.info_offset + off * kInfoBytes;
    h.rows[off] = {static_cast<int>(get_u32(info)), static_cast<int>(get_u32(info + 4)),
                   static_cast<int>(get_u32(info + 8))};
    stats.copy_bytes += plan_.row_bytes;
  }
  for (const auto* counter : {&out.tokens_per_expert, &out.counter_host}) {
    if (!*counter) continue;
    for (int le = 0; le < L; ++le) {
      (*counter)->store_int({le}, h.recv_per_expert[static_cast<std::size_t>(le)]);
    }
  }
  stats.slots_used = static_cast<std::uint64_t>(h.recv_total);

  for (int r = 0; r < R; ++r) {
    const int mate = topo_.rank_at(my_node, r);
    if (mate == me) continue;
    ep_.lsa_signal_add(mate, sig(kDrain), 1);
    ++stats.signals;
  }
  h.dispatched = true;
}

// ---- combine -------------------------------------------------------------

void Engine::combine(HandleState& h, const Routing& routing, const NDTensor& expert_out,
                     const NDTensor& weights, const NDTensor& out, OpStats& stats) {
  require(h.dispatched, ErrorCode::HandleStateError, "HT combine without a dispatch");
  require(expert_out.extent(0) == h.recv_total, ErrorCode::ShapeMismatch,
          "HT combine input rows != received tokens");
  stats.buffer_bytes = plan_.window_bytes;
  // Registered-buffer copy of the caller's expert outputs.
  std::vector<std::int64_t> lead(1);
  for (std::int64_t i = 0; i < h.recv_total; ++i) {
    lead[0] = i;
    expert_out.read_row_bytes(
        lead, mem_.subspan(plan_.combine_staging_offset + static_cast<std::size_t>(i) * plan_.row_bytes,
                           plan_.row_bytes));
    stats.copy_bytes += plan_.row_bytes;
  }
  if (config_.ht_combine_path == HtCombinePath::Flat) {
    combine_flat(h, routing, weights, out, stats);
  } else {
    combine_hierarchical(h, routing, weights, out, stats);
  }
}

void Engine::combine_hierarchical(HandleState& h, const Routing& routing, const NDTensor& weights,
                                  const NDTensor& out, OpStats& stats) {
  const int me = ep_.rank();
  const int R = topo_.ranks_per_node;
  const int M = topo_.num_nodes();
  const int my_node = topo_.node_of(me);
  const int rail = topo_.rail_of(me);
  const int K = shape_.topk;
  const int H = shape_.hidden;
  const auto B = static_cast<std::size_t>(shape_.tokens);
  const auto BK = B * static_cast<std::size_t>(K);
  const Dtype dt = config_.token_dtype;
  const std::uint64_t round = combines_++;
  const auto peers = static_cast<std::uint64_t>((R - 1) + (M - 1));

  // Everyone who writes into our regions has finished reading theirs.
  ep_.wait_signal(sig(kCombineDrain), round * peers);

  // Weights go to the same-rail aggregator of every other node.
  std::vector<float> w(static_cast<std::size_t>(routing.tokens * K));
  for (int t = 0; t < routing.tokens; ++t) {
    for (int k = 0; k < K; ++k) w[static_cast<std::size_t>(t * K + k)] = weights.load_f32({t, k});
  }
  const auto w_bytes = std::as_bytes(std::span(w));
  for (int n = 0; n < M; ++n) {
    if (n == my_node) continue;
    const int agg = topo_.rank_at(n, rail);
    if (!w_bytes.empty()) {
      store(agg, plan_.weights_offset + static_cast<std::size_t>(my_node) * BK * 4, w_bytes, stats);
      ++stats.inter_node_msgs;
    }
    ep_.signal_add(agg, sig(kWeights), 1);
    ++stats.signals;
  }

  // Rows: straight to a node-mate source, else to the source's same-rail
  // aggregator on this node.
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    const auto& r = h.rows[i];
    const auto y = std::span<const std::byte>(mem_).subspan(
        plan_.combine_staging_offset + i * plan_.row_bytes, plan_.row_bytes);
    const auto tk = static_cast<std::size_t>(r.src_token * K + r.k);
    if (topo_.same_node(me, r.src_rank)) {
      store(r.src_rank, plan_.direct_offset + tk * plan_.row_bytes, y, stats);
    } else {
      const int agg = topo_.rank_at(my_node, topo_.rail_of(r.src_rank));
      const auto src_node = static_cast<std::size_t>(topo_.node_of(r.src_rank));
      store(agg, plan_.gather_offset + (src_node * BK + tk) * plan_.row_bytes, y, stats);
    }
    ++stats.intra_node_msgs;
  }
  for (int r = 0; r < R; ++r) {
    ep_.lsa_signal_add(topo_.rank_at(my_node, r), sig(kRowsDone), 1);
    ++stats.signals;
  }
  ep_.wait_signal(sig(kRowsDone), (round + 1) * static_cast<std::uint64_t>(R));

  // Aggregate: one partial per forwarded token, summed over ascending k.
  ep_.wait_signal(sig(kWeights), (round + 1) * static_cast<std::uint64_t>(M - 1));
  std::vector<float> acc(static_cast<std::size_t>(H));
  std::vector<float> y(static_cast<std::size_t>(H));
  for (const auto& f : h.forwarded) {
    const auto src_node = static_cast<std::size_t>(f.src_node);
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (int k = 0; k < K; ++k) {
      const int e = f.routing[static_cast<std::size_t>(k)];
      if (topo_.node_of(shape_.rank_of_expert(e)) != my_node) continue;
      const auto tk = static_cast<std::size_t>(f.src_token * K + k);
      float wk;
      std::memcpy(&wk, mem_.data() + plan_.weights_offset + (src_node * BK + tk) * 4, 4);
      decode_row(dt, mem_.subspan(plan_.gather_offset + (src_node * BK + tk) * plan_.row_bytes,
                                  plan_.row_bytes),
                 y);
      for (int i = 0; i < H; ++i) {
        const float prod = wk * y[static_cast<std::size_t>(i)];
        acc[static_cast<std::size_t>(i)] += prod;
      }
    }
    const int src = topo_.rank_at(f.src_node, rail);
    store(src,
          plan_.partial_offset +
              (static_cast<std::size_t>(my_node) * B + static_cast<std::size_t>(f.src_token)) * H * 4,
          std::as_bytes(std::span(acc)), stats);
    ++stats.inter_node_msgs;
  }
  for (int n = 0; n < M; ++n) {
    if (n == my_node) continue;
    ep_.signal_add(topo_.rank_at(n, rail), sig(kPartial), 1);
    ++stats.signals;
  }

  // Final reduction on the source: node partials in ascending node order.
  ep_.wait_signal(sig(kPartial), (round + 1) * static_cast<std::uint64_t>(M - 1));
  std::vector<float> total(static_cast<std::size_t>(H));
  std::vector<float> part(static_cast<std::size_t>(H));
  std::vector<bool> hits(static_cast<std::size_t>(M));
  for (int t = 0; t < routing.tokens; ++t) {
    std::fill(hits.begin(), hits.end(), false);
    for (int k = 0; k < K; ++k) {
      hits[static_cast<std::size_t>(topo_.node_of(shape_.rank_of_expert(routing.at(t, k))))] = true;
    }
    std::fill(total.begin(), total.end(), 0.0f);
    for (int n = 0; n < M; ++n) {
      if (!hits[static_cast<std::size_t>(n)]) continue;
      if (n == my_node) {
        std::fill(part.begin(), part.end(), 0.0f);
        for (int k = 0; k < K; ++k) {
          if (topo_.node_of(shape_.rank_of_expert(routing.at(t, k))) != my_node) continue;
          const auto tk = static_cast<std::size_t>(t * K + k);
          decode_row(dt, mem_.subspan(plan_.direct_offset + tk * plan_.row_bytes, plan_.row_bytes), y);
          const float wk = w[tk];
          for (int i = 0; i < H; ++i) {
            const float prod = wk * y[static_cast<std::size_t>(i)];
            part[static_cast<std::size_t>(i)] += prod;
          }
        }
      } else {
        std::memcpy(part.data(),
                    mem_.data() + plan_.partial_offset +
                        (static_cast<std::size_t>(n) * B + static_cast<std::size_t>(t)) * H * 4,
                    static_cast<std::size_t>(H) * 4);
      }
      for (int i = 0; i < H; ++i) total[static_cast<std::size_t>(i)] += part[static_cast<std::size_t>(i)];
    }
    const std::int64_t lead[] = {t};
    out.write_row(lead, total);
  }

  for (int r = 0; r < R; ++r) {
    const int mate = topo_.rank_at(my_node, r);
    if (mate != me) notify(mate, sig(kCombineDrain), stats);
  }
  for (int n = 0; n < M; ++n) {
    if (n != my_node) notify(topo_.rank_at(n, rail), sig(kCombineDrain), stats);
  }
}

void Engine::combine_flat(HandleState& h, const Routing& routing, const NDTensor& weights,
                          const NDTensor& out, OpStats& stats) {
  const int me = ep_.rank();
  const int N = shape_.ranks;
  const int K = shape_.topk;
  const int H = shape_.hidden;
  const Dtype dt = config_.token_dtype;
  const std::uint64_t round = combines_++;

  ep_.wait_signal(sig(kFlatDrain), round * static_cast<std::uint64_t>(N - 1));
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    const auto& r = h.rows[i];
    const auto y = std::span<const std::byte>(mem_).subspan(
        plan_.combine_staging_offset + i * plan_.row_bytes, plan_.row_bytes);
    store(r.src_rank,
          plan_.flat_offset + static_cast<std::size_t>(r.src_token * K + r.k) * plan_.row_bytes, y,
          stats);
    if (topo_.same_node(me, r.src_rank)) {
      ++stats.intra_node_msgs;
    } else {
      ++stats.inter_node_msgs;
    }
  }
  for (int d = 0; d < N; ++d) notify(d, sig(kFlatDone), stats);
  ep_.wait_signal(sig(kFlatDone), (round + 1) * static_cast<std::uint64_t>(N));

  std::vector<float> acc(static_cast<std::size_t>(H));
  std::vector<float> y(static_cast<std::size_t>(H));
  std::vector<std::int64_t> lead(1);
  for (int t = 0; t < routing.tokens; ++t) {
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (int k = 0; k < K; ++k) {
      const auto tk = static_cast<std::size_t>(t * K + k);
      decode_row(dt, mem_.subspan(plan_.flat_offset + tk * plan_.row_bytes, plan_.row_bytes), y);
      const float wk = weights.load_f32({t, k});
      for (int i = 0; i < H; ++i) {
        const float prod = wk * y[static_cast<std::size_t>(i)];
        acc[static_cast<std::size_t>(i)] += prod;
      }
    }
    lead[0] = t;
    out.write_row(lead, acc);
  }
  for (int d = 0; d < N; ++d) {
    if (d != me) notify(d, sig(kFlatDrain), stats);
  }
}

}  // namespace epsim::ht

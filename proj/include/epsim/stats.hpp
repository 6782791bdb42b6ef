/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

namespace epsim {

// Per-rank, per-operation transport counters.
struct OpStats {
  std::string op;  // "dispatch" | "combine"
  std::uint64_t bytes_put = 0;
  std::uint64_t msgs = 0;
  std::uint64_t signals = 0;
  std::uint64_t slots_used = 0;
  std::uint64_t buffer_bytes = 0;
  std::uint64_t inter_node_msgs = 0;
  std::uint64_t intra_node_msgs = 0;
  // Depends on thread timing; kept out of the CSV.
  std::uint64_t fifo_stalls = 0;
  std::uint64_t copy_bytes = 0;

  OpStats& operator+=(const OpStats& o);
};

inline OpStats& OpStats::operator+=(const OpStats& o) {
  bytes_put += o.bytes_put;
  msgs += o.msgs;
  signals += o.signals;
  slots_used += o.slots_used;
  buffer_bytes += o.buffer_bytes;
  inter_node_msgs += o.inter_node_msgs;
  intra_node_msgs += o.intra_node_msgs;
  fifo_stalls += o.fifo_stalls;
  copy_bytes += o.copy_bytes;
  return *this;
}

}  // namespace epsim

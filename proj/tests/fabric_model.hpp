/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <atomic>
#include <random>
#include <thread>
#include <vector>

#include "epsim/driver.hpp"
#include "epsim/fabric.hpp"

namespace epsim::test {

inline std::vector<std::byte> pattern(int src, int round, std::size_t len) {
  std::vector<std::byte> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    out[i] = static_cast<std::byte>((src * 131 + round * 17 + static_cast<int>(i)) & 0xFF);
  }
  return out;
}

// Every sender issues rounds of (payload, counter increment) to every peer,
// over put/signal or load/store (one channel per pair, picked at random
// where both are possible). Whenever a receiver
// observes counter value v from a source, rounds [0, v) of that source must
// already be fully visible.
inline int fabric_model_violations(int trials) {
  constexpr int kRounds = 3;
  constexpr std::size_t kLen = 24;
  std::mt19937_64 pick(2024);
  int violations = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const int n = 2 + static_cast<int>(pick() % 3);
    const int rpn = (n == 4 && pick() % 2 == 0) ? 2 : (pick() % 2 == 0 ? n : 1);
    Fabric f({n, rpn, static_cast<std::uint64_t>(trial), false});
    std::vector<std::vector<std::byte>> mem(static_cast<std::size_t>(n),
                                            std::vector<std::byte>(n * kRounds * kLen));
    std::atomic<int> bad{0};
    driver::run_ranks(
        f,
        [&](Endpoint ep) {
          const int me = ep.rank();
          auto& local = mem[static_cast<std::size_t>(me)];
          const auto w = ep.register_window(std::span(local));
          const auto sig = ep.allocate_signals(static_cast<std::uint32_t>(n));
          ep.bootstrap_allgather({});
          std::mt19937_64 rng(static_cast<std::uint64_t>(trial * 7 + me));
          std::vector<bool> use_lsa(static_cast<std::size_t>(n));
          for (int d = 0; d < n; ++d) use_lsa[static_cast<std::size_t>(d)] = ep.lsa_accessible(d) && rng() % 2 == 0;
          for (int round = 0; round < kRounds; ++round) {
            for (int d = 0; d < n; ++d) {
              if (d == me) continue;
              const auto data = pattern(me, round, kLen);
              const std::size_t off = (static_cast<std::size_t>(me) * kRounds + round) * kLen;
              if (use_lsa[static_cast<std::size_t>(d)]) {
                ep.lsa_store(d, w.window_id, off, data);
                ep.lsa_signal_add(d, sig + static_cast<SignalId>(me), 1);
              } else {
                // Split the payload so a signal can race more than one put.
                ep.put(d, w.window_id, off, std::span(data).first(kLen / 2));
                ep.put(d, w.window_id, off + kLen / 2, std::span(data).subspan(kLen / 2));
                ep.signal_add(d, sig + static_cast<SignalId>(me), 1);
              }
              if (rng() % 3 == 0) std::this_thread::yield();
            }
          }
          std::vector<std::uint64_t> seen(static_cast<std::size_t>(n), 0);
          const auto target = static_cast<std::uint64_t>(kRounds * (n - 1));
          std::uint64_t total = 0;
          while (total < target) {
            ep.wait_until([&](const SignalView& s) {
              std::uint64_t sum = 0;
              for (int src = 0; src < n; ++src) sum += s[sig + static_cast<SignalId>(src)];
              return sum > total;
            });
            total = 0;
            for (int src = 0; src < n; ++src) {
              const auto v = ep.read_signal(sig + static_cast<SignalId>(src));
              seen[static_cast<std::size_t>(src)] = v;
              total += v;
              for (std::uint64_t round = 0; round < v; ++round) {
                const auto want = pattern(src, static_cast<int>(round), kLen);
                const std::size_t off = (static_cast<std::size_t>(src) * kRounds + round) * kLen;
                if (!std::equal(want.begin(), want.end(), local.begin() + static_cast<std::ptrdiff_t>(off))) {
                  ++bad;
                }
              }
            }
          }
          ep.bootstrap_allgather({});
        },
        std::chrono::seconds(10));
    violations += bad.load();
  }
  return violations;
}

}  // namespace epsim::test

/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <thread>

#include "epsim/driver.hpp"
#include "epsim/fabric.hpp"
#include "fabric_model.hpp"
#include "test_util.hpp"

using namespace epsim;

using test::pattern;

TEST(Fabric, PutLandsOnlyWhenReceiverProgresses) {
  Fabric f({2, 2, std::nullopt, false});
  auto e0 = f.endpoint(0), e1 = f.endpoint(1);
  std::vector<std::byte> mem(64);
  const auto w = e1.register_window(std::span(mem));
  const auto sig = e1.allocate_signals(1);
  const auto data = pattern(0, 0, 16);
  e0.put(1, w.window_id, 8, data);
  e0.signal_add(1, sig, 1);
  EXPECT_EQ(mem[8], std::byte{0});
  e1.wait_signal(sig, 1);
  EXPECT_TRUE(std::equal(data.begin(), data.end(), mem.begin() + 8));
}

TEST(Fabric, PerPairOrderLastWriteWins) {
  Fabric f({2, 1, std::nullopt, false});
  auto e0 = f.endpoint(0), e1 = f.endpoint(1);
  const auto w = e1.register_window(8);
  const auto sig = e1.allocate_signals(1);
  std::vector<std::byte> a(8, std::byte{1}), b(8, std::byte{2});
  e0.put(1, w.window_id, 0, a);
  e0.put(1, w.window_id, 0, b);
  e0.signal_add(1, sig, 1);
  e1.wait_signal(sig, 1);
  std::vector<std::byte> got(8);
  e1.local_load(w.window_id, 0, got);
  EXPECT_EQ(got, b);
}

TEST(Fabric, BoundsAndIdsAreChecked) {
  Fabric f({2, 1, std::nullopt, false});
  auto e0 = f.endpoint(0), e1 = f.endpoint(1);
  const auto w = e1.register_window(16);
  e1.allocate_signals(2);
  std::vector<std::byte> data(8);
  EXPECT_EP_ERROR(e0.put(1, w.window_id, 12, data), ErrorCode::CapacityExceeded);
  EXPECT_EP_ERROR(e0.put(1, w.window_id + 7, 0, data), ErrorCode::InvalidArgument);
  EXPECT_EP_ERROR(e0.signal_add(1, 5, 1), ErrorCode::InvalidArgument);
  EXPECT_EP_ERROR(e0.put(2, w.window_id, 0, data), ErrorCode::InvalidArgument);
}

TEST(Fabric, LoadStoreIsNodeLocal) {
  Fabric f({4, 2, std::nullopt, true});
  auto e0 = f.endpoint(0);
  std::vector<Window> w;
  for (int r = 0; r < 4; ++r) w.push_back(f.endpoint(r).register_window(32));
  std::vector<std::byte> data(4, std::byte{9});
  EXPECT_TRUE(e0.lsa_accessible(1));
  EXPECT_FALSE(e0.lsa_accessible(2));
  e0.lsa_store(1, w[1].window_id, 0, data);
  std::vector<std::byte> got(4);
  f.endpoint(1).local_load(w[1].window_id, 0, got);
  EXPECT_EQ(got, data);
  EXPECT_EP_ERROR(e0.lsa_store(2, w[2].window_id, 0, data), ErrorCode::InvalidArgument);
  e0.lsa_store_release(1, w[1].window_id, 8, 42);
  EXPECT_EQ(f.endpoint(1).lsa_load_acquire(1, w[1].window_id, 8), 42u);

  const auto trace = f.trace();
  ASSERT_EQ(trace.size(), 2u);
  EXPECT_EQ(format_trace_line(trace[0]), "lsa_store,0,1," + std::to_string(w[1].window_id) +
                                              ",0,4,0,0," + std::to_string(trace[0].seq));
}

TEST(Fabric, TraceFileHasHeaderAndOneLinePerDelivery) {
  Fabric f({2, 1, std::nullopt, true});
  auto e0 = f.endpoint(0), e1 = f.endpoint(1);
  const auto w = e1.register_window(8);
  const auto sig = e1.allocate_signals(1);
  std::vector<std::byte> data(4);
  e0.put(1, w.window_id, 4, data);
  e0.signal_add(1, sig, 3);
  EXPECT_TRUE(f.trace().empty());  // nothing delivered yet
  e1.wait_signal(sig, 3);
  std::ostringstream os;
  write_trace(os, f.trace());
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "op,src,dst,window,offset,len,signal_id,value,seq");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("put,0,1,", 0), 0u) << line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("signal,0,1,0,0,0,", 0), 0u) << line;
}

TEST(Fabric, BootstrapAllgatherIsOrderedByRank) {
  Fabric f({3, 1, std::nullopt, false});
  std::vector<std::vector<std::vector<std::byte>>> seen(3);
  driver::run_ranks(f, [&](Endpoint ep) {
    for (int round = 0; round < 3; ++round) {
      const std::vector<std::byte> mine(static_cast<std::size_t>(ep.rank() + round + 1),
                                        static_cast<std::byte>(ep.rank()));
      auto all = ep.bootstrap_allgather(mine);
      if (round == 2) seen[static_cast<std::size_t>(ep.rank())] = all;
    }
  });
  for (const auto& all : seen) {
    ASSERT_EQ(all.size(), 3u);
    for (int r = 0; r < 3; ++r) EXPECT_EQ(all[static_cast<std::size_t>(r)].size(), static_cast<std::size_t>(r + 3));
  }
}

TEST(Fabric, ShutdownWakesWaiters) {
  Fabric f({2, 1, std::nullopt, false});
  auto e1 = f.endpoint(1);
  const auto sig = e1.allocate_signals(1);
  std::thread t([&] {
    EXPECT_EP_ERROR(e1.wait_signal(sig, 1), ErrorCode::TransportClosed);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  f.shutdown();
  t.join();
}

TEST(Fabric, RunRanksReportsTheCauseNotTheShutdown) {
  Fabric f({3, 1, std::nullopt, false});
  try {
    driver::run_ranks(f, [](Endpoint ep) {
      if (ep.rank() == 1) raise(ErrorCode::ShapeMismatch, "boom");
      const auto sig = ep.allocate_signals(1);
      ep.wait_signal(sig, 1);  // never satisfied
    });
    FAIL() << "expected an error";
  } catch (const EpError& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Fabric, RunRanksTimesOut) {
  Fabric f({2, 1, std::nullopt, false});
  EXPECT_EP_ERROR(driver::run_ranks(
                      f,
                      [](Endpoint ep) {
                        const auto sig = ep.allocate_signals(1);
                        ep.wait_signal(sig, 1);
                      },
                      std::chrono::milliseconds(50)),
                  ErrorCode::TransportClosed);
}

TEST(FabricModel, NoSignalObservedBeforeItsFlushedPuts) {
  EXPECT_EQ(test::fabric_model_violations(10000), 0);
}

/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/fabric.hpp"
#include "epsim/scenario.hpp"
#include "epsim/stats.hpp"

// Multi-rank harness shared by the CLI, the C ABI and the tests.
namespace epsim::driver {

// Runs body(endpoint) on one thread per rank. The first failure shuts the
// fabric down so blocked peers unwind, and is rethrown after the join. A
// timeout shuts down the same way and reports TransportClosed.
void run_ranks(Fabric& fabric, const std::function<void(Endpoint)>& body,
               std::optional<std::chrono::milliseconds> timeout = std::nullopt);

enum class Schedule : std::uint8_t {
  Sequential,  // one handle per iteration
  Pipelined,   // iterations in pairs: dispatch a, dispatch b, combine a, combine b
};

struct CaseOptions {
  EpConfig config;
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> delay_seed;
  bool staged = false;
  Schedule schedule = Schedule::Sequential;
  scenario::ExpertKind expert = scenario::ExpertKind::Identity;
  scenario::RoutingPattern pattern = scenario::RoutingPattern::Uniform;
  int iterations = 1;
  int tokens = -1;  // per rank; < 0 means max_tokens_per_rank
  bool collect_rows = true;
  bool record_trace = false;
  std::optional<std::chrono::milliseconds> timeout = std::chrono::seconds(60);
};

struct ReceivedRow {
  int expert;
  int src_rank;
  int src_token;
  int k;  // -1 when the layout does not carry it
  std::vector<std::byte> row;
  std::vector<float> scales;
};

struct IterationResult {
  std::vector<ReceivedRow> received;  // output order
  std::vector<std::byte> combined;    // [T x H] in the token dtype
  std::vector<std::int64_t> recv_counter;             // [L]
  std::vector<std::uint64_t> dispatch_counters_seen;  // LL: [L x N]
  std::vector<std::uint64_t> combine_counters_seen;   // LL: [E]
  int ll_parity = -1;
  std::int64_t num_recv_tokens = 0;
  std::vector<OpStats> stats;
};

struct RankResult {
  std::vector<IterationResult> iterations;
  std::size_t allocated_bytes = 0;
  std::size_t footprint_bytes = 0;
};

struct CaseResult {
  std::vector<std::vector<scenario::RankData>> inputs;  // [iteration][rank]
  std::vector<RankResult> ranks;
  std::vector<TraceRecord> trace;
};

std::uint64_t iteration_seed(std::uint64_t seed, int iteration);
CaseResult run_case(const CaseOptions& options);

// Empty when the case matches the oracle, else the first discrepancy.
std::string check_case(const CaseOptions& options, const CaseResult& result);

struct GridOptions {
  std::vector<std::uint64_t> delay_seeds{11, 22, 33};
  std::uint64_t seed = 1;
  int hidden = 8;
  std::optional<LlLayout> layout;  // both when unset
  std::optional<Algorithm> algorithm;
  bool debug_corrupt_combine_slot = false;
};

struct GridReport {
  int cases = 0;
  int failures = 0;
  std::string first_failure;  // config and message
};

// Sweeps ranks {1,2,4,8} x nodes {1,2} x E {8,16,32} x B {1,16,32} x
// K {1,2,8} over both layouts, staged and unstaged, and each delay seed,
// plus the HT engine with both combine paths.
GridReport verify_grid(const GridOptions& options,
                       const std::function<void(const std::string&)>& log = {});

std::string describe(const CaseOptions& options);

// Stats CSV: one row per (iteration, rank, op), then one summary row per op.
void write_stats_csv(std::ostream& os, const CaseResult& result);
inline constexpr const char* kStatsCsvHeader =
    "row_type,iter,rank,op,bytes_put,msgs,signals,slots_used,buffer_bytes,inter_node_msgs,"
    "intra_node_msgs,copy_bytes";

struct FootprintReport {
  std::size_t legacy_bytes = 0;
  std::size_t optimized_bytes = 0;
  double formula_ratio = 0;
  double measured_ratio = 0;
};

// Receive-window bytes the LL engine allocates per operation pair under each
// layout, from the same plan create_group uses.
FootprintReport footprint_report(const EpConfig& config);

}  // namespace epsim::driver

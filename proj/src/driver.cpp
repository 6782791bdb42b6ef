/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/driver.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstring>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "epsim/api.hpp"
#include "epsim/layout.hpp"
#include "epsim/ll.hpp"
#include "epsim/oracle.hpp"

namespace epsim::driver {

void run_ranks(Fabric& fabric, const std::function<void(Endpoint)>& body,
               std::optional<std::chrono::milliseconds> timeout) {
  const int n = fabric.topology().num_ranks;
  std::mutex mu;
  std::condition_variable cv;
  int done = 0;
  std::exception_ptr first;
  bool first_is_closed = false;

  auto fail = [&](std::exception_ptr e, bool closed) {
    {
      std::lock_guard lk(mu);
      // A peer's TransportClosed is a consequence; keep the cause.
      if (!first || (first_is_closed && !closed)) {
        first = e;
        first_is_closed = closed;
      }
    }
    fabric.shutdown();
  };

  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    threads.emplace_back([&, r] {
      try {
        body(fabric.endpoint(r));
      } catch (const EpError& e) {
        fail(std::current_exception(), e.code() == ErrorCode::TransportClosed);
      } catch (...) {
        fail(std::current_exception(), false);
      }
      {
        std::lock_guard lk(mu);
        ++done;
      }
      cv.notify_all();
    });
  }

  bool timed_out = false;
  if (timeout) {
    std::unique_lock lk(mu);
    if (!cv.wait_for(lk, *timeout, [&] { return done == n; })) {
      timed_out = true;
      lk.unlock();
      fabric.shutdown();
    }
  }
  for (auto& t : threads) t.join();
  if (timed_out && (!first || first_is_closed)) {
    raise(ErrorCode::TransportClosed, "ranks did not finish before the timeout");
  }
  if (first) std::rethrow_exception(first);
}

std::uint64_t iteration_seed(std::uint64_t seed, int iteration) {
  return seed * 1000003u + static_cast<std::uint64_t>(iteration);
}

namespace {

std::span<std::byte> as_bytes(std::vector<std::byte>& v) { return {v.data(), v.size()}; }

template <typename T>
std::vector<std::byte> to_bytes(const std::vector<T>& v) {
  std::vector<std::byte> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

// One in-flight forward pass on one rank.
struct Micro {
  int iter = 0;
  const scenario::RankData* data = nullptr;
  std::vector<std::byte> tokens, scales, topk, weights;
  HostBuffer recv, recv_scales, expert_out;
  std::vector<std::byte> counter_a, counter_b, combined;
  std::unique_ptr<EpHandle> handle;
  std::vector<NDTensor> d_in, d_out, c_in, c_out;
  NDTensor recv_t, recv_scales_t, expert_out_t;
  IterationResult result;
};

class RankRunner {
 public:
  RankRunner(const CaseOptions& o, const CaseResult& inputs, Endpoint ep)
      : o_(o), c_(o.config), inputs_(inputs), ep_(ep) {
    shape_ = {c_.num_experts, c_.num_ranks, c_.max_tokens_per_rank, c_.top_k, c_.hidden};
    const int L = c_.experts_per_rank();
    for (int le = 0; le < L; ++le) {
      coeffs_.push_back(scenario::expert_coefficients(o.expert, o.seed,
                                                      shape_.first_expert(ep.rank()) + le,
                                                      c_.hidden));
    }
  }

  RankResult run() {
    group_ = create_group(ep_, c_);
    RankResult out;
    out.allocated_bytes = group_->allocated_bytes();
    out.footprint_bytes = group_->footprint_bytes();
    out.iterations.resize(static_cast<std::size_t>(o_.iterations));

    int it = 0;
    while (it < o_.iterations) {
      if (o_.schedule == Schedule::Pipelined && it + 1 < o_.iterations) {
        Micro a = prepare(it), b = prepare(it + 1);
        start_dispatch(a);
        start_dispatch(b);
        finish_dispatch(a);
        finish_dispatch(b);
        run_experts(a);
        run_experts(b);
        start_combine(a);
        start_combine(b);
        finish_combine(a);
        finish_combine(b);
        out.iterations[static_cast<std::size_t>(it)] = finish(a);
        out.iterations[static_cast<std::size_t>(it + 1)] = finish(b);
        it += 2;
      } else {
        Micro a = prepare(it);
        start_dispatch(a);
        finish_dispatch(a);
        run_experts(a);
        start_combine(a);
        finish_combine(a);
        out.iterations[static_cast<std::size_t>(it)] = finish(a);
        ++it;
      }
    }
    destroy_group(*group_);
    return out;
  }

 private:
  std::int64_t capacity() const {
    return static_cast<std::int64_t>(c_.num_ranks) * c_.max_tokens_per_rank;
  }

  Micro prepare(int it) {
    Micro m;
    m.iter = it;
    m.data = &inputs_.inputs[static_cast<std::size_t>(it)][static_cast<std::size_t>(ep_.rank())];
    const std::int64_t T = m.data->routing.tokens;
    m.tokens = m.data->tokens;
    m.scales = to_bytes(m.data->scales);
    m.topk = to_bytes(m.data->routing.experts);
    m.weights = to_bytes(m.data->weights);
    const auto topk =
        tensor_create({T, c_.top_k}, Dtype::I32, TensorTag::TopkIdx, as_bytes(m.topk));
    m.handle = create_handle(*group_, topk);
    return m;
  }

  void take_stats(Micro& m) {
    for (auto& s : group_->take_stats()) m.result.stats.push_back(std::move(s));
  }

  void start_dispatch(Micro& m) {
    const std::int64_t T = m.data->routing.tokens;
    const std::int64_t H = c_.hidden;
    const std::int64_t L = c_.experts_per_rank();
    const Dtype dt = c_.token_dtype;
    m.d_in.push_back(tensor_create({T, H}, dt, TensorTag::Tokens, as_bytes(m.tokens)));
    if (c_.with_scales) {
      m.d_in.push_back(
          tensor_create({T, H / kQuantBlock}, Dtype::F32, TensorTag::Scales, as_bytes(m.scales)));
    }
    if (c_.algorithm == Algorithm::LL) {
      const std::int64_t cap = capacity();
      m.recv = HostBuffer(static_cast<std::size_t>(L * cap * H) * byte_width(dt));
      m.recv_t = tensor_create({L, cap, H}, dt, TensorTag::Tokens, m.recv.bytes());
      m.d_out.push_back(m.recv_t);
      if (c_.with_scales) {
        m.recv_scales = HostBuffer(static_cast<std::size_t>(L * cap * (H / kQuantBlock)) * 4);
        m.recv_scales_t = tensor_create({L, cap, H / kQuantBlock}, Dtype::F32, TensorTag::Scales,
                                        m.recv_scales.bytes());
        m.d_out.push_back(m.recv_scales_t);
      }
      m.counter_a.resize(static_cast<std::size_t>(L) * 8);
      m.counter_b.resize(static_cast<std::size_t>(L) * 8);
      m.d_out.push_back(
          tensor_create({L}, Dtype::I64, TensorTag::RecvExpertCounterHost, as_bytes(m.counter_a)));
      m.d_out.push_back(tensor_create({L}, Dtype::I64, TensorTag::RecvExpertCounterDevice,
                                      as_bytes(m.counter_b)));
    } else {
      const std::int64_t R = get_num_recv_tokens(*m.handle);
      m.recv = HostBuffer(static_cast<std::size_t>(std::max<std::int64_t>(R * H, 1)) *
                          byte_width(dt));
      m.recv_t = tensor_create({R, H}, dt, TensorTag::Tokens, m.recv.bytes());
      m.d_out.push_back(m.recv_t);
      m.counter_a.resize(static_cast<std::size_t>(L) * 4);
      m.counter_b.resize(static_cast<std::size_t>(L) * 4);
      m.d_out.push_back(
          tensor_create({L}, Dtype::I32, TensorTag::TokensPerExperts, as_bytes(m.counter_a)));
      m.d_out.push_back(
          tensor_create({L}, Dtype::I32, TensorTag::RecvExpertCounterHost, as_bytes(m.counter_b)));
    }
    dispatch(*m.handle, m.d_in, m.d_out, o_.staged);
    if (!o_.staged) take_stats(m);
  }

  void finish_dispatch(Micro& m) {
    if (o_.staged) {
      complete(*m.handle);
      take_stats(m);
    }
    m.result.num_recv_tokens = get_num_recv_tokens(*m.handle);
    m.result.ll_parity = m.handle->ll_state().parity;
  }

  // Rows of the dispatch output as (local expert, lead index).
  std::vector<std::pair<int, std::vector<std::int64_t>>> received_rows(const Micro& m) const {
    std::vector<std::pair<int, std::vector<std::int64_t>>> rows;
    if (c_.algorithm == Algorithm::LL) {
      for (const auto& e : m.handle->ll_state().cache) {
        rows.push_back({e.local_expert, {e.local_expert, e.row}});
      }
    } else {
      const auto& per_expert = m.handle->ht_state().recv_per_expert;
      std::int64_t row = 0;
      for (std::size_t le = 0; le < per_expert.size(); ++le) {
        for (std::int64_t i = 0; i < per_expert[le]; ++i, ++row) {
          rows.push_back({static_cast<int>(le), {row}});
        }
      }
    }
    return rows;
  }

  void run_experts(Micro& m) {
    const std::int64_t H = c_.hidden;
    const std::int64_t L = c_.experts_per_rank();
    const Dtype dt = c_.token_dtype;
    const std::int64_t lead = c_.algorithm == Algorithm::LL ? L * capacity()
                                                            : std::max<std::int64_t>(
                                                                  m.handle->ht_state().recv_total, 1);
    m.expert_out = HostBuffer(static_cast<std::size_t>(lead * H) * byte_width(dt));
    if (c_.algorithm == Algorithm::LL) {
      m.expert_out_t = tensor_create({L, capacity(), H}, dt, TensorTag::Tokens, m.expert_out.bytes());
    } else {
      m.expert_out_t = tensor_create({m.handle->ht_state().recv_total, H}, dt, TensorTag::Tokens,
                                     m.expert_out.bytes());
    }

    const int first = shape_.first_expert(ep_.rank());
    const std::size_t blocks = static_cast<std::size_t>(H / kQuantBlock);
    std::vector<float> x(static_cast<std::size_t>(H)), y(x.size());
    std::vector<std::byte> codes(static_cast<std::size_t>(H));
    std::vector<float> sc(blocks);
    const auto& ll_cache = m.handle->ll_state().cache;
    const auto& ht_info = m.handle->ht_state().rows;
    std::size_t idx = 0;
    for (const auto& [le, lead_idx] : received_rows(m)) {
      if (c_.with_scales) {
        m.recv_t.read_row_bytes(lead_idx, codes);
        m.recv_scales_t.read_row(lead_idx, sc);
        dequantize_block(std::span(reinterpret_cast<const std::uint8_t*>(codes.data()), codes.size()),
                         sc, x);
      } else {
        m.recv_t.read_row(lead_idx, x);
      }
      scenario::apply_expert(coeffs_[static_cast<std::size_t>(le)], x, y);
      m.expert_out_t.write_row(lead_idx, y);

      if (o_.collect_rows) {
        ReceivedRow r;
        r.expert = first + le;
        if (c_.algorithm == Algorithm::LL) {
          const auto& e = ll_cache[idx];
          r.src_rank = e.src_rank;
          r.src_token = e.src_token;
          r.k = e.k;
        } else {
          const auto& e = ht_info[idx];
          r.src_rank = e.src_rank;
          r.src_token = e.src_token;
          r.k = e.k;
        }
        r.row.resize(static_cast<std::size_t>(H) * byte_width(dt));
        m.recv_t.read_row_bytes(lead_idx, r.row);
        if (c_.with_scales) {
          r.scales.resize(blocks);
          m.recv_scales_t.read_row(lead_idx, r.scales);
        }
        m.result.received.push_back(std::move(r));
      }
      ++idx;
    }

    const NDTensor counter = c_.algorithm == Algorithm::LL ? m.d_out[c_.with_scales ? 2 : 1]
                                                           : m.d_out[2];
    for (std::int64_t le = 0; le < L; ++le) m.result.recv_counter.push_back(counter.load_int({le}));
  }

  void start_combine(Micro& m) {
    const std::int64_t T = m.data->routing.tokens;
    const std::int64_t H = c_.hidden;
    m.combined.resize(static_cast<std::size_t>(T * H) * byte_width(c_.token_dtype));
    m.c_in.push_back(m.expert_out_t);
    m.c_in.push_back(
        tensor_create({T, c_.top_k}, Dtype::F32, TensorTag::TopkWeights, as_bytes(m.weights)));
    m.c_out.push_back(
        tensor_create({T, H}, c_.token_dtype, TensorTag::Tokens, as_bytes(m.combined)));
    combine(*m.handle, m.c_in, m.c_out, o_.staged);
    if (!o_.staged) take_stats(m);
  }

  void finish_combine(Micro& m) {
    if (o_.staged) {
      complete(*m.handle);
      take_stats(m);
    }
  }

  IterationResult finish(Micro& m) {
    m.result.combined = m.combined;
    m.result.dispatch_counters_seen = m.handle->ll_state().dispatch_counter_seen;
    m.result.combine_counters_seen = m.handle->ll_state().combine_counter_seen;
    destroy_handle(*m.handle);
    return std::move(m.result);
  }

  const CaseOptions& o_;
  const EpConfig& c_;
  const CaseResult& inputs_;
  Endpoint ep_;
  layout::MoeShape shape_;
  std::vector<scenario::ExpertCoefficients> coeffs_;
  std::unique_ptr<EpGroup> group_;
};

}  // namespace

CaseResult run_case(const CaseOptions& o) {
  o.config.validate();
  require(o.iterations >= 1, ErrorCode::InvalidArgument, "iterations must be >= 1");
  CaseResult result;
  for (int it = 0; it < o.iterations; ++it) {
    result.inputs.push_back(
        scenario::generate(o.config, iteration_seed(o.seed, it), o.tokens, o.pattern));
  }
  result.ranks.resize(static_cast<std::size_t>(o.config.num_ranks));

  FabricOptions fo;
  fo.num_ranks = o.config.num_ranks;
  fo.ranks_per_node = o.config.ranks_per_node;
  fo.delay_seed = o.delay_seed;
  fo.record_trace = o.record_trace;
  Fabric fabric(fo);
  run_ranks(
      fabric,
      [&](Endpoint ep) {
        RankRunner runner(o, result, ep);
        result.ranks[static_cast<std::size_t>(ep.rank())] = runner.run();
      },
      o.timeout);
  if (o.record_trace) result.trace = fabric.trace();
  return result;
}

// ---- verification ----------------------------------------------------------

namespace {

std::string fmt_row(int expert, int src, int t) {
  std::ostringstream os;
  os << "expert " << expert << " row (src " << src << ", token " << t << ")";
  return os.str();
}

std::string check_iteration(const CaseOptions& o, const CaseResult& res, int it) {
  const EpConfig& c = o.config;
  const auto& data = res.inputs[static_cast<std::size_t>(it)];
  const auto problem = scenario::to_problem(c, data);
  const auto batches = oracle::ref_dispatch(problem);
  const auto counts = oracle::ref_counts(problem);
  const layout::MoeShape shape{c.num_experts, c.num_ranks, c.max_tokens_per_rank, c.top_k,
                               c.hidden};
  const int N = c.num_ranks;
  const int E = c.num_experts;
  const int L = c.experts_per_rank();
  const auto H = static_cast<std::size_t>(c.hidden);
  const Dtype dt = c.token_dtype;
  const std::size_t row_bytes = H * byte_width(dt);
  const std::size_t blocks = H / kQuantBlock;
  std::ostringstream err;

  auto iter_of = [&](int r) -> const IterationResult& {
    return res.ranks[static_cast<std::size_t>(r)].iterations[static_cast<std::size_t>(it)];
  };

  // Receive counts and counter protocol.
  for (int r = 0; r < N; ++r) {
    const auto& ir = iter_of(r);
    std::int64_t expected_total = 0;
    for (int le = 0; le < L; ++le) {
      const int e = shape.first_expert(r) + le;
      const std::int64_t want = e < E ? counts[static_cast<std::size_t>(e)] : 0;
      expected_total += want;
      if (ir.recv_counter.size() != static_cast<std::size_t>(L) ||
          ir.recv_counter[static_cast<std::size_t>(le)] != want) {
        err << "rank " << r << " expert " << e << ": receive counter "
            << (ir.recv_counter.size() > static_cast<std::size_t>(le)
                    ? ir.recv_counter[static_cast<std::size_t>(le)]
                    : -1)
            << ", oracle " << want;
        return err.str();
      }
    }
    if (ir.num_recv_tokens != expected_total) {
      err << "rank " << r << ": get_num_recv_tokens " << ir.num_recv_tokens << ", oracle "
          << expected_total;
      return err.str();
    }
    if (c.algorithm != Algorithm::LL) continue;
    if (ir.dispatch_counters_seen.size() != static_cast<std::size_t>(L * N) ||
        ir.combine_counters_seen.size() != static_cast<std::size_t>(E)) {
      err << "rank " << r << ": counter records missing";
      return err.str();
    }
    for (int le = 0; le < L; ++le) {
      const int e = shape.first_expert(r) + le;
      if (e >= E) continue;
      for (int src = 0; src < N; ++src) {
        std::uint64_t m = 0;
        const auto& ri = problem.ranks[static_cast<std::size_t>(src)];
        for (int t = 0; t < ri.tokens; ++t) {
          for (int k = 0; k < c.top_k; ++k) {
            m += ri.topk[static_cast<std::size_t>(t * c.top_k + k)] == e ? 1 : 0;
          }
        }
        const auto seen = ir.dispatch_counters_seen[static_cast<std::size_t>(le * N + src)];
        if (seen != m + 1) {
          err << "rank " << r << " dispatch counter (expert " << e << ", src " << src << ") = "
              << seen << ", want " << m + 1;
          return err.str();
        }
      }
    }
    for (int e = 0; e < E; ++e) {
      if (ir.combine_counters_seen[static_cast<std::size_t>(e)] != 1) {
        err << "rank " << r << " combine counter for expert " << e << " = "
            << ir.combine_counters_seen[static_cast<std::size_t>(e)] << ", want 1";
        return err.str();
      }
    }
  }

  // Dispatch placement and payload.
  if (o.collect_rows) {
    std::vector<std::vector<const ReceivedRow*>> got(static_cast<std::size_t>(E));
    for (int r = 0; r < N; ++r) {
      for (const auto& row : iter_of(r).received) {
        if (row.expert < 0 || row.expert >= E || shape.rank_of_expert(row.expert) != r) {
          err << "rank " << r << " holds a row for foreign expert " << row.expert;
          return err.str();
        }
        got[static_cast<std::size_t>(row.expert)].push_back(&row);
      }
    }
    const bool any_order = c.algorithm == Algorithm::LL && c.ll_layout == LlLayout::Legacy;
    for (int e = 0; e < E; ++e) {
      auto& g = got[static_cast<std::size_t>(e)];
      const auto& want = batches[static_cast<std::size_t>(e)];
      if (static_cast<int>(g.size()) != want.count()) {
        err << "expert " << e << ": received " << g.size() << " rows, oracle " << want.count();
        return err.str();
      }
      if (any_order) {
        std::sort(g.begin(), g.end(), [](const ReceivedRow* a, const ReceivedRow* b) {
          return std::pair(a->src_rank, a->src_token) < std::pair(b->src_rank, b->src_token);
        });
      }
      for (int i = 0; i < want.count(); ++i) {
        const auto* row = g[static_cast<std::size_t>(i)];
        const int src = want.src_rank[static_cast<std::size_t>(i)];
        const int t = want.src_token[static_cast<std::size_t>(i)];
        if (row->src_rank != src || row->src_token != t) {
          err << "expert " << e << " position " << i << ": got " << fmt_row(e, row->src_rank,
                                                                               row->src_token)
              << ", oracle (src " << src << ", token " << t << ")";
          return err.str();
        }
        const auto& sd = data[static_cast<std::size_t>(src)];
        if (row->k >= 0 && sd.routing.at(t, row->k) != e) {
          err << fmt_row(e, src, t) << ": cached routing position " << row->k
              << " names expert " << sd.routing.at(t, row->k);
          return err.str();
        }
        if (row->row.size() != row_bytes ||
            std::memcmp(row->row.data(), sd.tokens.data() + static_cast<std::size_t>(t) * row_bytes,
                        row_bytes) != 0) {
          err << fmt_row(e, src, t) << ": payload differs from the sent token";
          return err.str();
        }
        if (c.with_scales &&
            (row->scales.size() != blocks ||
             std::memcmp(row->scales.data(), sd.scales.data() + static_cast<std::size_t>(t) * blocks,
                         blocks * sizeof(float)) != 0)) {
          err << fmt_row(e, src, t) << ": scales differ from the sent token";
          return err.str();
        }
      }
    }
  }

  // Combine against the oracle.
  std::vector<std::vector<float>> expert_rows(static_cast<std::size_t>(E));
  std::vector<float> y(H);
  for (int e = 0; e < E; ++e) {
    const auto coeff = scenario::expert_coefficients(o.expert, o.seed, e, c.hidden);
    const auto& b = batches[static_cast<std::size_t>(e)];
    auto& out = expert_rows[static_cast<std::size_t>(e)];
    for (int i = 0; i < b.count(); ++i) {
      scenario::apply_expert(coeff,
                             std::span(b.rows).subspan(static_cast<std::size_t>(i) * H, H), y);
      const auto stored = scenario::round_trip(dt, y);
      out.insert(out.end(), stored.begin(), stored.end());
    }
  }
  const auto combined = oracle::ref_combine(problem, batches, expert_rows);
  const double tol = c.algorithm == Algorithm::LL ? 1e-6 : 1e-5;
  for (int r = 0; r < N; ++r) {
    const auto& ir = iter_of(r);
    const auto want = scenario::round_trip(dt, combined[static_cast<std::size_t>(r)]);
    std::vector<float> got_vals(want.size());
    if (ir.combined.size() != want.size() * byte_width(dt)) {
      err << "rank " << r << ": combine output has " << ir.combined.size() << " bytes";
      return err.str();
    }
    decode_row(dt, ir.combined, got_vals);
    const double rel = oracle::relative_error(got_vals, want, H);
    if (!(rel <= tol)) {
      err << "rank " << r << ": combine relative error " << rel << " exceeds " << tol;
      return err.str();
    }
    if (o.expert == scenario::ExpertKind::Identity && dt == Dtype::F32 &&
        ir.combined != data[static_cast<std::size_t>(r)].tokens) {
      err << "rank " << r << ": identity round trip does not reproduce the input";
      return err.str();
    }
  }

  if (c.algorithm == Algorithm::HT) {
    std::uint64_t inter = 0;
    for (int r = 0; r < N; ++r) {
      for (const auto& s : iter_of(r).stats) {
        if (s.op == "dispatch") inter += s.inter_node_msgs;
      }
    }
    const auto want = oracle::ref_internode_messages(problem, N, c.ranks_per_node);
    if (inter != static_cast<std::uint64_t>(want)) {
      err << "inter-node messages " << inter << ", oracle " << want;
      return err.str();
    }
  }
  return {};
}

}  // namespace

std::string check_case(const CaseOptions& o, const CaseResult& res) {
  for (int it = 0; it < o.iterations; ++it) {
    auto msg = check_iteration(o, res, it);
    if (!msg.empty()) return "iteration " + std::to_string(it) + ": " + msg;
  }
  return {};
}

std::string describe(const CaseOptions& o) {
  const auto& c = o.config;
  std::ostringstream os;
  os << "mode=" << (c.algorithm == Algorithm::LL ? "ll" : "ht");
  if (c.algorithm == Algorithm::LL) {
    os << " layout=" << to_string(c.ll_layout);
  } else {
    os << " combine=" << (c.ht_combine_path == HtCombinePath::Flat ? "flat" : "hierarchical");
  }
  os << " ranks=" << c.num_ranks << " ranks_per_node=" << c.ranks_per_node
     << " experts=" << c.num_experts << " tokens=" << c.max_tokens_per_rank
     << " topk=" << c.top_k << " hidden=" << c.hidden << " dtype=" << to_string(c.token_dtype)
     << " scales=" << c.with_scales << " staged=" << o.staged << " schedule="
     << (o.schedule == Schedule::Pipelined ? "pipelined" : "sequential")
     << " expert=" << scenario::to_string(o.expert) << " seed=" << o.seed << " delay_seed=";
  if (o.delay_seed) {
    os << *o.delay_seed;
  } else {
    os << "none";
  }
  return os.str();
}

GridReport verify_grid(const GridOptions& g, const std::function<void(const std::string&)>& log) {
  GridReport report;
  static constexpr scenario::ExpertKind kinds[] = {
      scenario::ExpertKind::Identity, scenario::ExpertKind::Scale, scenario::ExpertKind::Affine};

  auto run_one = [&](const CaseOptions& o) {
    ++report.cases;
    std::string msg;
    try {
      msg = check_case(o, run_case(o));
    } catch (const EpError& e) {
      msg = std::string("error ") + to_string(e.code()) + ": " + e.detail();
    }
    if (msg.empty()) return;
    ++report.failures;
    if (report.first_failure.empty()) {
      report.first_failure = describe(o) + "\n  " + msg;
      if (log) log("counterexample: " + report.first_failure);
    }
  };

  for (int ranks : {1, 2, 4, 8}) {
    for (int nodes : {1, 2}) {
      if (ranks % nodes != 0 || ranks < nodes) continue;
      for (int experts : {8, 16, 32}) {
        for (int tokens : {1, 16, 32}) {
          for (int topk : {1, 2, 8}) {
            EpConfig c;
            c.num_ranks = ranks;
            c.ranks_per_node = ranks / nodes;
            c.num_experts = experts;
            c.max_tokens_per_rank = tokens;
            c.top_k = topk;
            c.hidden = g.hidden;
            c.debug_corrupt_combine_slot = g.debug_corrupt_combine_slot;

            for (std::size_t s = 0; s < g.delay_seeds.size(); ++s) {
              CaseOptions o;
              o.seed = g.seed + static_cast<std::uint64_t>(s);
              o.delay_seed = g.delay_seeds[s];
              o.expert = kinds[s % 3];
              o.iterations = 2;
              if (!g.algorithm || *g.algorithm == Algorithm::LL) {
                for (LlLayout layout : {LlLayout::Optimized, LlLayout::Legacy}) {
                  if (g.layout && *g.layout != layout) continue;
                  for (bool staged : {false, true}) {
                    o.config = c;
                    o.config.algorithm = Algorithm::LL;
                    o.config.ll_layout = layout;
                    o.staged = staged;
                    run_one(o);
                  }
                }
              }
              if (!g.algorithm || *g.algorithm == Algorithm::HT) {
                for (auto path : {HtCombinePath::Hierarchical, HtCombinePath::Flat}) {
                  o.config = c;
                  o.config.algorithm = Algorithm::HT;
                  o.config.ht_combine_path = path;
                  o.staged = false;
                  run_one(o);
                }
              }
            }
          }
        }
      }
    }
  }
  return report;
}

// ---- reporting -------------------------------------------------------------

void write_stats_csv(std::ostream& os, const CaseResult& result) {
  os << kStatsCsvHeader << '\n';
  std::map<std::string, OpStats> totals;
  std::vector<std::string> order;
  auto row = [&](const char* type, long iter, long rank, const OpStats& s) {
    os << type << ',' << iter << ',' << rank << ',' << s.op << ',' << s.bytes_put << ','
       << s.msgs << ',' << s.signals << ',' << s.slots_used << ',' << s.buffer_bytes << ','
       << s.inter_node_msgs << ',' << s.intra_node_msgs << ',' << s.copy_bytes << '\n';
  };
  const std::size_t iters = result.ranks.empty() ? 0 : result.ranks.front().iterations.size();
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t r = 0; r < result.ranks.size(); ++r) {
      for (const auto& s : result.ranks[r].iterations[it].stats) {
        row("iter", static_cast<long>(it), static_cast<long>(r), s);
        auto [pos, fresh] = totals.try_emplace(s.op);
        if (fresh) {
          pos->second.op = s.op;
          order.push_back(s.op);
        }
        pos->second += s;
      }
    }
  }
  for (const auto& op : order) row("summary", -1, -1, totals[op]);
}

FootprintReport footprint_report(const EpConfig& config) {
  EpConfig c = config;
  c.algorithm = Algorithm::LL;
  c.ll_layout = LlLayout::Legacy;
  FootprintReport r;
  r.legacy_bytes = ll::plan_buffers(c).footprint_bytes();
  c.ll_layout = LlLayout::Optimized;
  r.optimized_bytes = ll::plan_buffers(c).footprint_bytes();
  r.formula_ratio = layout::reduction_ratio(c.num_experts, c.num_ranks, c.top_k);
  r.measured_ratio = static_cast<double>(r.legacy_bytes) / static_cast<double>(r.optimized_bytes);
  return r;
}

}  // namespace epsim::driver

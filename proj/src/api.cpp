/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/api.hpp"

#include <cstring>
#include <initializer_list>
#include <string>

namespace epsim {

const char* to_string(HandleStatus s) {
  switch (s) {
    case HandleStatus::Created: return "Created";
    case HandleStatus::Dispatched: return "Dispatched";
    case HandleStatus::DispatchStaged: return "DispatchStaged";
    case HandleStatus::Combined: return "Combined";
    case HandleStatus::CombineStaged: return "CombineStaged";
    case HandleStatus::Destroyed: return "Destroyed";
  }
  return "?";
}

namespace {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Exactly-one lookup over a tagged list; `allowed` lists every tag the call
// understands.
class TagSet {
 public:
  TagSet(std::span<const NDTensor> list, std::initializer_list<TensorTag> allowed,
         const char* what)
      : list_(list), what_(what) {
    for (const auto& t : list_) {
      bool ok = false;
      for (auto a : allowed) ok |= a == t.tag();
      if (!ok) {
        raise(ErrorCode::TagMismatch,
              std::string(what_) + ": unexpected tensor tag " + to_string(t.tag()));
      }
    }
  }

  const NDTensor* find(TensorTag tag) const {
    const NDTensor* hit = nullptr;
    for (const auto& t : list_) {
      if (t.tag() != tag) continue;
      if (hit != nullptr) {
        raise(ErrorCode::TagMismatch, std::string(what_) + ": duplicate tag " + to_string(tag));
      }
      hit = &t;
    }
    return hit;
  }

  const NDTensor& need(TensorTag tag) const {
    const NDTensor* t = find(tag);
    if (t == nullptr) {
      raise(ErrorCode::TagMismatch, std::string(what_) + ": missing tag " + to_string(tag));
    }
    return *t;
  }

  void forbid(TensorTag tag) const {
    if (find(tag) != nullptr) {
      raise(ErrorCode::TagMismatch,
            std::string(what_) + ": tag " + to_string(tag) + " not used by this configuration");
    }
  }

 private:
  std::span<const NDTensor> list_;
  const char* what_;
};

void expect(const NDTensor& t, const Shape& shape, Dtype dtype) {
  if (t.dtype() != dtype) {
    raise(ErrorCode::TagMismatch, std::string(to_string(t.tag())) + " must be " +
                                      to_string(dtype) + ", got " + to_string(t.dtype()));
  }
  if (t.shape() != shape) {
    raise(ErrorCode::ShapeMismatch, std::string(to_string(t.tag())) + " must be " +
                                        shape_str(shape) + ", got " + shape_str(t.shape()));
  }
}

void expect_counter(const NDTensor& t, std::int64_t experts) {
  if (t.dtype() != Dtype::I32 && t.dtype() != Dtype::I64) {
    raise(ErrorCode::TagMismatch, std::string(to_string(t.tag())) + " must be i32 or i64");
  }
  if (t.shape() != Shape{experts}) {
    raise(ErrorCode::ShapeMismatch, std::string(to_string(t.tag())) + " must be [" +
                                        std::to_string(experts) + "], got " +
                                        shape_str(t.shape()));
  }
}

std::optional<NDTensor> opt(const NDTensor* t) {
  return t ? std::optional<NDTensor>(*t) : std::nullopt;
}

void check_live(const EpHandle& h) {
  require(h.status() != HandleStatus::Destroyed, ErrorCode::HandleStateError,
          "handle already destroyed");
  require(!h.group().destroyed(), ErrorCode::HandleStateError, "group already destroyed");
}

}  // namespace

// ---- group ---------------------------------------------------------------

EpGroup::EpGroup(Endpoint ep, const EpConfig& config, AllocationHooks hooks)
    : ep_(ep), config_(config), pool_(std::move(hooks)) {}

EpGroup::~EpGroup() = default;

std::size_t EpGroup::footprint_bytes() const {
  if (ll_) return ll_->plan().footprint_bytes();
  if (ht_) return ht_->plan().window_bytes;
  return 0;
}

std::vector<OpStats> EpGroup::take_stats() { return std::exchange(stats_, {}); }

std::unique_ptr<EpGroup> create_group(Endpoint ep, const EpConfig& config, AllocationHooks hooks) {
  config.validate();
  const auto& topo = ep.topology();
  require(config.num_ranks == topo.num_ranks && config.ranks_per_node == topo.ranks_per_node,
          ErrorCode::InvalidArgument, "config topology differs from the fabric's");

  const auto fp = config.fingerprint();
  const auto all = ep.bootstrap_allgather(fp);
  for (const auto& other : all) {
    if (other != fp) raise(ErrorCode::ConfigMismatch, "ranks passed different group configs");
  }

  std::unique_ptr<EpGroup> g(new EpGroup(ep, config, std::move(hooks)));
  if (config.algorithm == Algorithm::LL) {
    g->ll_ = std::make_unique<ll::Engine>(ep, config, g->pool_);
  } else {
    g->ht_ = std::make_unique<ht::Engine>(ep, config, g->pool_);
  }
  // Every window must exist before any peer targets it; ids must agree.
  const WindowId id = g->ll_ ? g->ll_->window() : g->ht_->window();
  std::vector<std::byte> blob(sizeof id);
  std::memcpy(blob.data(), &id, sizeof id);
  for (const auto& other : ep.bootstrap_allgather(blob)) {
    if (other != blob) raise(ErrorCode::ConfigMismatch, "window ids differ across ranks");
  }
  return g;
}

void destroy_group(EpGroup& group) {
  require(!group.destroyed_, ErrorCode::HandleStateError, "group already destroyed");
  require(group.staged_ == 0, ErrorCode::HandleStateError,
          "group has staged operations awaiting complete");
  require(group.open_dispatches_ == 0, ErrorCode::HandleStateError,
          "group has dispatched tokens awaiting combine");
  // Nobody may release windows a peer could still be writing.
  group.ep_.bootstrap_allgather({});
  group.ll_.reset();
  group.ht_.reset();
  group.pool_.release_all();
  group.destroyed_ = true;
}

// ---- handle --------------------------------------------------------------

std::unique_ptr<EpHandle> create_handle(EpGroup& group, const NDTensor& topk_idx) {
  require(!group.destroyed(), ErrorCode::HandleStateError, "group already destroyed");
  require(topk_idx.tag() == TensorTag::TopkIdx, ErrorCode::TagMismatch,
          "create_handle expects a TOPK_IDX tensor");
  auto routing = routing_from_tensor(topk_idx, group.config());
  std::unique_ptr<EpHandle> h(new EpHandle(group, std::move(routing)));
  if (auto* ht = group.ht_engine()) ht->exchange_metadata(h->ht_, h->routing_);
  return h;
}

void destroy_handle(EpHandle& h) {
  check_live(h);
  require(h.status_ != HandleStatus::DispatchStaged && h.status_ != HandleStatus::CombineStaged,
          ErrorCode::HandleStateError, "handle has a staged operation awaiting complete");
  require(h.status_ != HandleStatus::Dispatched, ErrorCode::HandleStateError,
          "handle has dispatched tokens awaiting combine");
  h.status_ = HandleStatus::Destroyed;
}

std::int64_t get_num_recv_tokens(const EpHandle& h) {
  check_live(h);
  const auto& g = h.group();
  if (g.config().algorithm == Algorithm::HT) return h.ht_.recv_total;
  require(h.status_ != HandleStatus::Created && h.status_ != HandleStatus::DispatchStaged,
          ErrorCode::HandleStateError, "LL receive counts are known once dispatch completes");
  std::int64_t total = 0;
  for (auto c : h.ll_.recv_counts) total += c;
  return total;
}

// ---- dispatch / combine --------------------------------------------------

void dispatch(EpHandle& h, std::span<const NDTensor> inputs, std::span<const NDTensor> outputs,
              bool send_only) {
  check_live(h);
  if (h.status_ != HandleStatus::Created && h.status_ != HandleStatus::Combined) {
    raise(ErrorCode::HandleStateError,
          std::string("dispatch not allowed in state ") + to_string(h.status_));
  }
  EpGroup& g = h.group();
  const EpConfig& c = g.config();
  const std::int64_t T = h.routing_.tokens;
  const std::int64_t H = c.hidden;
  const std::int64_t L = c.experts_per_rank();

  const TagSet in(inputs, {TensorTag::Tokens, TensorTag::Scales}, "dispatch inputs");
  const NDTensor& tokens = in.need(TensorTag::Tokens);
  expect(tokens, {T, H}, c.token_dtype);
  const NDTensor* scales = nullptr;
  if (c.with_scales) {
    scales = &in.need(TensorTag::Scales);
    expect(*scales, {T, H / kQuantBlock}, Dtype::F32);
  } else {
    in.forbid(TensorTag::Scales);
  }

  OpStats stats;
  stats.op = "dispatch";
  if (c.algorithm == Algorithm::HT) {
    require(!send_only, ErrorCode::InvalidArgument, "staged execution is LL-only");
    const TagSet out(outputs,
                     {TensorTag::Tokens, TensorTag::TokensPerExperts,
                      TensorTag::RecvExpertCounterHost},
                     "dispatch outputs");
    ht::DispatchOutputs o{out.need(TensorTag::Tokens), opt(out.find(TensorTag::TokensPerExperts)),
                          opt(out.find(TensorTag::RecvExpertCounterHost))};
    expect(o.tokens, {h.ht_.recv_total, H}, c.token_dtype);
    for (const auto& ctr : {o.tokens_per_expert, o.counter_host}) {
      if (ctr) expect_counter(*ctr, L);
    }
    g.ht_engine()->dispatch(h.ht_, h.routing_, tokens, o, stats);
    g.stats_.push_back(stats);
    h.status_ = HandleStatus::Dispatched;
    ++g.open_dispatches_;
    return;
  }

  const std::int64_t cap = static_cast<std::int64_t>(c.num_ranks) * c.max_tokens_per_rank;
  const TagSet out(outputs,
                   {TensorTag::Tokens, TensorTag::Scales, TensorTag::RecvExpertCounterHost,
                    TensorTag::RecvExpertCounterDevice},
                   "dispatch outputs");
  ll::DispatchOutputs o{out.need(TensorTag::Tokens), std::nullopt,
                        opt(out.find(TensorTag::RecvExpertCounterHost)),
                        opt(out.find(TensorTag::RecvExpertCounterDevice))};
  expect(o.tokens, {L, cap, H}, c.token_dtype);
  if (c.with_scales) {
    o.scales = out.need(TensorTag::Scales);
    expect(*o.scales, {L, cap, H / kQuantBlock}, Dtype::F32);
  } else {
    out.forbid(TensorTag::Scales);
  }
  for (const auto& ctr : {o.counter_host, o.counter_device}) {
    if (ctr) expect_counter(*ctr, L);
  }

  auto* ll = g.ll_engine();
  ll->dispatch_send(h.ll_, h.routing_, tokens, scales, stats);
  ++g.open_dispatches_;
  if (send_only) {
    h.pending_ = {};
    h.pending_.dispatch_out = o;
    h.pending_.stats = stats;
    h.status_ = HandleStatus::DispatchStaged;
    ++g.staged_;
    return;
  }
  ll->dispatch_recv(h.ll_, o, stats);
  g.stats_.push_back(stats);
  h.status_ = HandleStatus::Dispatched;
}

void combine(EpHandle& h, std::span<const NDTensor> inputs, std::span<const NDTensor> outputs,
             bool send_only) {
  check_live(h);
  if (h.status_ != HandleStatus::Dispatched) {
    raise(ErrorCode::HandleStateError,
          std::string("combine not allowed in state ") + to_string(h.status_));
  }
  EpGroup& g = h.group();
  const EpConfig& c = g.config();
  const std::int64_t T = h.routing_.tokens;
  const std::int64_t H = c.hidden;
  const std::int64_t K = c.top_k;
  const std::int64_t L = c.experts_per_rank();

  const TagSet in(inputs, {TensorTag::Tokens, TensorTag::TopkWeights}, "combine inputs");
  const NDTensor& expert_out = in.need(TensorTag::Tokens);
  const NDTensor& weights = in.need(TensorTag::TopkWeights);
  expect(weights, {T, K}, Dtype::F32);
  const TagSet out(outputs, {TensorTag::Tokens}, "combine outputs");
  const NDTensor& result = out.need(TensorTag::Tokens);
  expect(result, {T, H}, c.token_dtype);

  OpStats stats;
  stats.op = "combine";
  if (c.algorithm == Algorithm::HT) {
    require(!send_only, ErrorCode::InvalidArgument, "staged execution is LL-only");
    expect(expert_out, {h.ht_.recv_total, H}, c.token_dtype);
    g.ht_engine()->combine(h.ht_, h.routing_, expert_out, weights, result, stats);
    g.stats_.push_back(stats);
    h.status_ = HandleStatus::Combined;
    --g.open_dispatches_;
    return;
  }

  const std::int64_t cap = static_cast<std::int64_t>(c.num_ranks) * c.max_tokens_per_rank;
  expect(expert_out, {L, cap, H}, c.token_dtype);
  auto* ll = g.ll_engine();
  ll->combine_send(h.ll_, expert_out, stats);
  if (send_only) {
    h.pending_ = {};
    h.pending_.combine_weights = weights;
    h.pending_.combine_out = result;
    h.pending_.stats = stats;
    h.status_ = HandleStatus::CombineStaged;
    ++g.staged_;
    return;
  }
  ll->combine_recv(h.ll_, h.routing_, weights, result, stats);
  g.stats_.push_back(stats);
  h.status_ = HandleStatus::Combined;
  --g.open_dispatches_;
}

void complete(EpHandle& h) {
  check_live(h);
  EpGroup& g = h.group();
  require(g.config().algorithm == Algorithm::LL, ErrorCode::HandleStateError,
          "complete applies to staged LL operations only");
  auto* ll = g.ll_engine();
  if (h.status_ == HandleStatus::DispatchStaged) {
    ll->dispatch_recv(h.ll_, *h.pending_.dispatch_out, h.pending_.stats);
    g.stats_.push_back(h.pending_.stats);
    h.status_ = HandleStatus::Dispatched;
  } else if (h.status_ == HandleStatus::CombineStaged) {
    ll->combine_recv(h.ll_, h.routing_, *h.pending_.combine_weights, *h.pending_.combine_out,
                     h.pending_.stats);
    g.stats_.push_back(h.pending_.stats);
    h.status_ = HandleStatus::Combined;
    --g.open_dispatches_;
  } else {
    raise(ErrorCode::HandleStateError,
          std::string("nothing staged to complete in state ") + to_string(h.status_));
  }
  h.pending_ = {};
  --g.staged_;
}

}  // namespace epsim

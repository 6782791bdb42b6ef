/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#include "epsim/memory.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <new>

#include "epsim/core.hpp"

namespace epsim {

namespace {
std::atomic<std::size_t> g_default_live{0};
}

std::size_t default_allocations_live() { return g_default_live.load(); }

BufferPool::BufferPool(AllocationHooks hooks) : hooks_(std::move(hooks)) {
  require(!hooks_ || static_cast<bool>(hooks_.release), ErrorCode::InvalidArgument,
          "allocation hooks need both allocate and release");
}

BufferPool::~BufferPool() { release_all(); }

std::span<std::byte> BufferPool::acquire(const std::string& name, std::size_t bytes) {
  const std::size_t n = bytes == 0 ? 1 : bytes;
  void* p = nullptr;
  if (hooks_) {
    p = hooks_.allocate(n, kAlignment);
    if (p == nullptr) raise(ErrorCode::CapacityExceeded, "allocation hook refused " + name);
    std::memset(p, 0, n);
  } else {
    // calloc keeps untouched pages of large, sparsely used regions unmapped.
    p = std::calloc(n, 1);
    if (p == nullptr) throw std::bad_alloc();
    ++g_default_live;
  }
  blocks_.push_back({p, n, static_cast<bool>(hooks_)});
  records_.push_back({name, bytes, static_cast<bool>(hooks_)});
  return {static_cast<std::byte*>(p), bytes};
}

void BufferPool::release_all() {
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    if (it->from_hooks) {
      hooks_.release(it->ptr, it->bytes);
    } else {
      std::free(it->ptr);
      --g_default_live;
    }
  }
  blocks_.clear();
}

std::size_t BufferPool::total_bytes() const {
  std::size_t total = 0;
  for (const auto& r : records_) total += r.bytes;
  return total;
}

}  // namespace epsim

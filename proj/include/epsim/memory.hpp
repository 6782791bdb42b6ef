/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace epsim {

// Optional allocator callbacks. When set, every internal group buffer is
// obtained through `allocate` and returned through `release`.
struct AllocationHooks {
  std::function<void*(std::size_t bytes, std::size_t alignment)> allocate;
  std::function<void(void* ptr, std::size_t bytes)> release;

  explicit operator bool() const { return static_cast<bool>(allocate); }
};

struct AllocationRecord {
  std::string name;
  std::size_t bytes = 0;
  bool from_hooks = false;
};

// Owns the buffers of one group. Hook memory is zeroed on acquisition.
class BufferPool {
 public:
  static constexpr std::size_t kAlignment = 256;

  explicit BufferPool(AllocationHooks hooks = {});
  ~BufferPool();
  BufferPool(const BufferPool&) = delete;
  BufferPool& operator=(const BufferPool&) = delete;

  std::span<std::byte> acquire(const std::string& name, std::size_t bytes);
  void release_all();

  const std::vector<AllocationRecord>& records() const { return records_; }
  std::size_t total_bytes() const;
  std::size_t live_count() const { return blocks_.size(); }

 private:
  struct Block {
    void* ptr;
    std::size_t bytes;
    bool from_hooks;
  };
  AllocationHooks hooks_;
  std::vector<Block> blocks_;
  std::vector<AllocationRecord> records_;
};

// Buffers currently held by default (non-hook) allocations, process-wide.
std::size_t default_allocations_live();

}  // namespace epsim

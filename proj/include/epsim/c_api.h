/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The epsim authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 */

#ifndef EPSIM_C_API_H
#define EPSIM_C_API_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* A world is one in-process fabric with a group on every rank. Calls taking
 * per-rank arrays run every rank on a library-owned thread and return once
 * all ranks finish. Any failure shuts the world's fabric down; later
 * collective calls on it report EPSIM_TRANSPORT_CLOSED. */
typedef struct epsim_world epsim_world;
typedef struct epsim_handle epsim_handle;

enum {
  EPSIM_OK = 0,
  EPSIM_INVALID_ARGUMENT = 1,
  EPSIM_SHAPE_MISMATCH = 2,
  EPSIM_TAG_MISMATCH = 3,
  EPSIM_CONFIG_MISMATCH = 4,
  EPSIM_CAPACITY_EXCEEDED = 5,
  EPSIM_HANDLE_STATE_ERROR = 6,
  EPSIM_TRANSPORT_CLOSED = 7,
  EPSIM_INTERNAL_ERROR = 99
};

enum { EPSIM_F32 = 0, EPSIM_BF16, EPSIM_F16, EPSIM_FP8, EPSIM_I32, EPSIM_I64 };

enum {
  EPSIM_TAG_TOKENS = 0,
  EPSIM_TAG_TOPK_IDX,
  EPSIM_TAG_TOPK_WEIGHTS,
  EPSIM_TAG_SCALES,
  EPSIM_TAG_RECV_EXPERT_COUNTER_DEVICE,
  EPSIM_TAG_RECV_EXPERT_COUNTER_HOST,
  EPSIM_TAG_NONE,
  EPSIM_TAG_TOKENS_PER_EXPERTS
};

enum { EPSIM_LL = 0, EPSIM_HT = 1 };
enum { EPSIM_LAYOUT_OPTIMIZED = 0, EPSIM_LAYOUT_LEGACY = 1 };
enum { EPSIM_COMBINE_HIERARCHICAL = 0, EPSIM_COMBINE_FLAT = 1 };
enum { EPSIM_EXPERT_IDENTITY = 0, EPSIM_EXPERT_SCALE = 1, EPSIM_EXPERT_AFFINE = 2 };

#define EPSIM_MAX_DIMS 8

/* Strides are in elements; all zero means row-major. */
typedef struct {
  void* data;
  size_t nbytes;
  int32_t dtype;
  int32_t tag;
  int32_t ndim;
  int64_t shape[EPSIM_MAX_DIMS];
  int64_t strides[EPSIM_MAX_DIMS];
  int64_t offset;
} epsim_tensor;

typedef struct {
  int32_t algorithm;
  int32_t num_ranks;
  int32_t ranks_per_node;
  int32_t num_experts;
  int32_t top_k;
  int32_t hidden;
  int32_t max_tokens_per_rank;
  int32_t token_dtype;
  int32_t with_scales;
  int32_t ht_chunk_tokens;
  int32_t ht_fifo_depth;
  int32_t ll_layout;
  int32_t ll_blocks;
  int32_t ll_warps;
  int32_t ll_groups_per_block;
  int32_t ht_combine_path;
} epsim_config;

typedef struct {
  char op[16];
  uint64_t bytes_put;
  uint64_t msgs;
  uint64_t signals;
  uint64_t slots_used;
  uint64_t buffer_bytes;
  uint64_t inter_node_msgs;
  uint64_t intra_node_msgs;
  uint64_t fifo_stalls;
  uint64_t copy_bytes;
} epsim_op_stats;

/* Message of the last failing call on this thread. */
const char* epsim_last_error(void);
const char* epsim_status_name(int status);
void epsim_config_default(epsim_config* config);

/* `configs` holds 1 entry (shared) or num_ranks entries (one per rank).
 * delay_seed < 0 delivers in order. */
int epsim_world_create(const epsim_config* configs, int32_t num_configs, int64_t delay_seed,
                       epsim_world** out);
/* Destroys every rank's group and frees the world. The world is freed even
 * when the groups refuse destruction; the refusal is still reported. */
int epsim_world_destroy(epsim_world* world);
int epsim_world_num_ranks(const epsim_world* world);
int epsim_world_allocated_bytes(const epsim_world* world, int32_t rank, size_t* out);
int epsim_world_footprint_bytes(const epsim_world* world, int32_t rank, size_t* out);
/* Moves the completed-operation records of `rank` into `out`. `count`
 * receives the number pending; if it exceeds `cap` nothing is moved and
 * EPSIM_CAPACITY_EXCEEDED is returned. */
int epsim_world_take_stats(epsim_world* world, int32_t rank, epsim_op_stats* out, size_t cap,
                           size_t* count);

/* Per-rank arrays are rank-major: entry [r * n + i]. */
int epsim_handle_create(epsim_world* world, const epsim_tensor* topk_idx, epsim_handle** out);
int epsim_handle_destroy(epsim_handle* handle);
int epsim_dispatch(epsim_handle* handle, const epsim_tensor* inputs, int32_t num_inputs,
                   const epsim_tensor* outputs, int32_t num_outputs, int32_t send_only);
int epsim_combine(epsim_handle* handle, const epsim_tensor* inputs, int32_t num_inputs,
                  const epsim_tensor* outputs, int32_t num_outputs, int32_t send_only);
int epsim_complete(epsim_handle* handle);
/* out[r] for every rank. */
int epsim_get_num_recv_tokens(const epsim_handle* handle, int64_t* out);

/* Same workload and CSV as `epsim run`. When `csv` is null or too small,
 * only `csv_len` (bytes, excluding the terminator) is set and the status is
 * EPSIM_OK; call again with a larger buffer. */
int epsim_run_csv(const epsim_config* config, uint64_t seed, int32_t iterations, int32_t expert,
                  int32_t send_only, int64_t delay_seed, char* csv, size_t cap, size_t* csv_len);

/* Expert coefficients used by the stub experts: y = scale * x + bias[h]. */
int epsim_expert_coefficients(int32_t expert, uint64_t seed, int32_t expert_id, int32_t hidden,
                              float* scale, float* bias);

#ifdef __cplusplus
}
#endif

#endif /* EPSIM_C_API_H */

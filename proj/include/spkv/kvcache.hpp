#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spkv/model.hpp"

namespace spkv {

struct CacheConfig {
  int page_size = 16;
  int initial_headroom = 4;     // page-index slots preallocated per head stream
  bool allow_pool_growth = true;
  int max_pages = 0;            // 0 = no cap; reaching the cap is an error

  void validate() const;
};

// Shared pool of fixed-size pages; each page stores page_size slots of
// (key row, value row). A page belongs to at most one head stream.
struct PagePool {
  int page_size = 0;
  int d_head = 0;
  bool allow_growth = true;
  int max_pages = 0;
  std::vector<std::vector<float>> pages;
  std::vector<int> free_list;
  int allocated = 0;

  void init(int page_size_, int d_head_, bool allow_growth_, int max_pages_);
  int alloc();
  void release(int page);
  int capacity() const { return static_cast<int>(pages.size()); }
  float* slot(int page, int s) {
    return pages[static_cast<std::size_t>(page)].data() +
           static_cast<std::size_t>(s) * 2 * d_head;
  }
  const float* slot(int page, int s) const {
    return pages[static_cast<std::size_t>(page)].data() +
           static_cast<std::size_t>(s) * 2 * d_head;
  }
};

// One (layer, kv head) stream: a circular window of the last w entries with
// their gate decisions, plus the long-term paged region holding every entry
// that left the window with z = 1. Gate decisions are fixed at write time.
struct HeadCache {
  int d_head = 0;
  int window = 0;

  std::vector<int> page_indices;  // headroom-doubling page index array
  int used_pages = 0;
  int slots_in_last_page = 0;
  int retained_count = 0;
  int realloc_count = 0;

  std::vector<float> ring_k, ring_v;  // window x d_head each
  std::vector<std::uint8_t> ring_z;
  int write_ptr = 0;
  int fill = 0;

  void init(int d_head_, int window_, int initial_headroom);
  // Insert the (already position-encoded) kv row for the next position; when
  // the ring is full the displaced entry moves to the long-term region iff
  // its stored z = 1.
  void append(const float* k, const float* v, bool z, PagePool& pool);

  const float* longterm_slot(const PagePool& pool, int e) const {
    return pool.slot(page_indices[static_cast<std::size_t>(e / pool.page_size)],
                     e % pool.page_size);
  }
};

struct GateTraceEntry {
  int layer = 0;
  int head = 0;
  int position = 0;
  float u = 0.0f;
  std::uint8_t z = 0;
};

struct MemoryReport {
  std::size_t bytes_window = 0;    // allocated ring storage
  std::size_t bytes_longterm = 0;  // allocated long-term pages
  double density = 0.0;            // retained / evicted, pooled over streams
  int pages_used = 0;
  int headroom_grows = 0;          // index-array reallocations, summed
  int max_stream_reallocs = 0;
  std::size_t retained_total = 0;
};

// Incremental gated decoding over a frozen model. Each decode_step appends
// the new position's kv (with its thresholded gate decision) first, then
// attends over window + retained entries, mirroring the training-path
// hard-gated forward position by position.
struct DecodeState {
  const Model* model = nullptr;
  CacheConfig cache_cfg;
  PagePool pool;
  std::vector<HeadCache> heads;  // n_layers * n_kv_heads, row-major
  int t = -1;                    // last decoded position
  bool record_trace = false;
  std::vector<GateTraceEntry> trace;

  // scratch (persistent to keep decode allocation-free after warmup)
  std::vector<float> x_, hn_, q_, k_, v_, u_, attn_, proj_, ffn_, scores_, probs_;

  static DecodeState init(const Model& m, const CacheConfig& cc, bool record_trace = false);

  HeadCache& head(int layer, int kv) {
    return heads[static_cast<std::size_t>(layer) * model->cfg.n_kv_heads + kv];
  }
  const HeadCache& head(int layer, int kv) const {
    return heads[static_cast<std::size_t>(layer) * model->cfg.n_kv_heads + kv];
  }

  // Runs one position; returns logits over the vocabulary.
  std::vector<float> decode_step(int token);
};

MemoryReport memory_report(const DecodeState& st);

// Throws std::runtime_error if pool bookkeeping, page ownership, or the
// retained-count bounds are inconsistent.
void check_page_conservation(const DecodeState& st);

void write_gate_trace_jsonl(const std::string& path, const std::vector<GateTraceEntry>& trace);
std::vector<GateTraceEntry> read_gate_trace_jsonl(const std::string& path);

}  // namespace spkv

#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kfstream/model.hpp"
#include "kfstream/tensor.hpp"

namespace kfs {

class CacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Where the content of a cached frame came from. Training asserts on this to
// make sure self-rollouts never condition on ground truth.
enum class Lineage { conditioning, generated, keyframe, ground_truth };
const char* lineage_name(Lineage l);

struct CacheEntry {
  std::size_t position = 0;
  Lineage lineage = Lineage::generated;
  std::vector<Tensor> keys;    // per layer [P x width], rotated at `position`
  std::vector<Tensor> values;  // per layer [P x width]
};

struct Gathered {
  Tensor keys;    // [n * P x head_dim]
  Tensor values;  // [n * P x head_dim]
  std::vector<std::size_t> positions;
};

class DualRegionKVCache {
 public:
  DualRegionKVCache(std::size_t capacity_past, std::size_t capacity_future);

  std::size_t capacity_past() const { return cap_past_; }
  std::size_t capacity_future() const { return cap_future_; }
  const std::deque<CacheEntry>& past() const { return past_; }
  const std::deque<CacheEntry>& future() const { return future_; }
  std::vector<std::size_t> past_positions() const;
  std::vector<std::size_t> future_positions() const;
  std::size_t size() const { return past_.size() + future_.size(); }
  bool empty() const { return size() == 0; }

  // Returns the evicted entry's position, if any.
  std::optional<std::size_t> append_past(CacheEntry entry);
  std::optional<std::size_t> set_future(CacheEntry entry);
  // Moves the earliest future entry into the past region.
  std::optional<std::size_t> consume_future(std::size_t position);
  // Drops every future entry at or after `position` (used when a pending keyframe is re-predicted).
  void discard_future_from(std::size_t position);

  // One head's keys/values: past ascending, then future ascending.
  Gathered gather(std::size_t layer, std::size_t head, std::size_t heads) const;
  // Every layer at full width, in the same order, for the model's forward pass.
  KVContext context(bool include_future = true) const;

  // Throws CacheError if any region invariant is violated.
  void check_invariants() const;
  // "past 3\npast 4\nfuture 21\n"
  std::string dump() const;

 private:
  std::size_t cap_past_;
  std::size_t cap_future_;
  std::deque<CacheEntry> past_;
  std::deque<CacheEntry> future_;
};

}  // namespace kfs

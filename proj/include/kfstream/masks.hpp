#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kfs {

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense boolean query x key admissibility matrix. true = attend.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill = false);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }

  std::size_t row_count(std::size_t r) const;
  bool has_empty_row() const;
  std::vector<std::size_t> visible(std::size_t r) const;

  // '#' = attend, '.' = blocked, one line per row.
  std::string to_ascii() const;

  bool operator==(const AttentionMask& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct SpanSpec {
  std::size_t query_chunk = 0;
  std::size_t hidden_count = 0;
  bool operator==(const SpanSpec&) const = default;
};

struct SegmentRange {
  std::size_t frame_start = 0;
  std::size_t frame_end = 0;
  std::size_t token_start = 0;
  std::size_t token_end = 0;
};

struct SegmentMap {
  std::vector<SegmentRange> segments;
  std::pair<std::size_t, std::size_t> global_tokens{0, 0};

  // Index of the segment containing `frame`, or segments.size() if none.
  std::size_t segment_of(std::size_t frame) const;
  std::size_t num_frames() const { return segments.empty() ? 0 : segments.back().frame_end; }
  // Throws MaskError unless segments are sorted, disjoint, and contiguous from frame 0.
  void validate(std::size_t num_text_tokens) const;
};

inline std::size_t chunk_of(std::size_t frame, std::size_t chunk_size) { return frame / chunk_size; }
inline std::size_t chunk_count(std::size_t frames, std::size_t chunk_size) {
  return (frames + chunk_size - 1) / chunk_size;
}

AttentionMask full_mask(std::size_t rows, std::size_t cols);

AttentionMask causal_chunk_mask(std::size_t num_frames, std::size_t chunk_size);

// Causal chunk mask where each span hides the `hidden_count` chunks immediately
// preceding its query chunk. Spans for the same query chunk accumulate.
AttentionMask pca_mask(std::size_t num_frames, std::size_t chunk_size, std::span<const SpanSpec> spans);

// Per chunk (excluding chunk 0) with probability p_block: one span of length
// uniform in [1, min(max_hidden, chunk)].
std::vector<SpanSpec> sample_spans(std::mt19937_64& rng, std::size_t num_chunks, double p_block,
                                   std::size_t max_hidden);

AttentionMask temporal_cross_mask(std::size_t num_frames, const SegmentMap& seg, std::size_t num_text_tokens);

// Single row: global tokens plus the local tokens of the segment containing kf_frame_index.
AttentionMask kf_cross_mask(const SegmentMap& seg, std::size_t kf_frame_index, std::size_t num_text_tokens);

// Repeats every row `row_repeat` times and every column `col_repeat` times (frame mask -> token mask).
AttentionMask expand(const AttentionMask& mask, std::size_t row_repeat, std::size_t col_repeat);

}  // namespace kfs

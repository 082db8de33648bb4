#include "kfstream/masks.hpp"

#include <algorithm>

namespace kfs {

AttentionMask::AttentionMask(std::size_t rows, std::size_t cols, bool fill)
    : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

std::size_t AttentionMask::row_count(std::size_t r) const {
  return static_cast<std::size_t>(
      std::count(bits_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                 bits_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_), std::uint8_t{1}));
}

bool AttentionMask::has_empty_row() const {
  for (std::size_t r = 0; r < rows_; ++r)
    if (row_count(r) == 0) return true;
  return false;
}

std::vector<std::size_t> AttentionMask::visible(std::size_t r) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < cols_; ++c)
    if ((*this)(r, c)) out.push_back(c);
  return out;
}

std::string AttentionMask::to_ascii() const {
  std::string s;
  s.reserve(rows_ * (cols_ + 1));
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) s.push_back((*this)(r, c) ? '#' : '.');
    s.push_back('\n');
  }
  return s;
}

std::size_t SegmentMap::segment_of(std::size_t frame) const {
  for (std::size_t i = 0; i < segments.size(); ++i)
    if (frame >= segments[i].frame_start && frame < segments[i].frame_end) return i;
  return segments.size();
}

void SegmentMap::validate(std::size_t num_text_tokens) const {
  if (global_tokens.first > global_tokens.second || global_tokens.second > num_text_tokens) {
    throw MaskError("global token range outside the text sequence");
  }
  std::size_t expect = 0;
  for (const auto& s : segments) {
    if (s.frame_start != expect || s.frame_end <= s.frame_start) {
      throw MaskError("segments must be sorted, non-empty and contiguous from frame 0");
    }
    if (s.token_start > s.token_end || s.token_end > num_text_tokens) {
      throw MaskError("segment token range outside the text sequence");
    }
    expect = s.frame_end;
  }
  for (std::size_t i = 0; i < segments.size(); ++i) {
    for (std::size_t j = i + 1; j < segments.size(); ++j) {
      const auto& a = segments[i];
      const auto& b = segments[j];
      if (a.token_start < b.token_end && b.token_start < a.token_end) throw MaskError("segment token ranges overlap");
    }
  }
}

AttentionMask full_mask(std::size_t rows, std::size_t cols) { return AttentionMask(rows, cols, true); }

AttentionMask causal_chunk_mask(std::size_t num_frames, std::size_t chunk_size) {
  if (num_frames == 0) throw MaskError("causal_chunk_mask: zero frames");
  if (chunk_size == 0) throw MaskError("causal_chunk_mask: zero chunk size");
  AttentionMask m(num_frames, num_frames);
  for (std::size_t i = 0; i < num_frames; ++i) {
    const auto ci = chunk_of(i, chunk_size);
    const auto last = std::min(num_frames, (ci + 1) * chunk_size);
    for (std::size_t j = 0; j < last; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask pca_mask(std::size_t num_frames, std::size_t chunk_size, std::span<const SpanSpec> spans) {
  auto m = causal_chunk_mask(num_frames, chunk_size);
  const auto chunks = chunk_count(num_frames, chunk_size);
  for (const auto& s : spans) {
    if (s.query_chunk >= chunks) {
      throw MaskError("pca_mask: query chunk " + std::to_string(s.query_chunk) + " beyond " + std::to_string(chunks) +
                      " chunks");
    }
    if (s.hidden_count > s.query_chunk) {
      throw MaskError("pca_mask: span hides " + std::to_string(s.hidden_count) + " chunks before chunk " +
                      std::to_string(s.query_chunk));
    }
    if (s.hidden_count == 0) continue;
    const auto q_begin = s.query_chunk * chunk_size;
    const auto q_end = std::min(num_frames, q_begin + chunk_size);
    const auto k_begin = (s.query_chunk - s.hidden_count) * chunk_size;
    for (std::size_t i = q_begin; i < q_end; ++i)
      for (std::size_t j = k_begin; j < q_begin; ++j) m.set(i, j, false);
  }
  return m;
}

std::vector<SpanSpec> sample_spans(std::mt19937_64& rng, std::size_t num_chunks, double p_block,
                                   std::size_t max_hidden) {
  if (!(p_block >= 0.0 && p_block <= 1.0)) throw std::invalid_argument("sample_spans: p_block outside [0,1]");
  std::vector<SpanSpec> out;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (std::size_t q = 1; q < num_chunks; ++q) {
    const auto upper = std::min(max_hidden, q);
    if (upper == 0) continue;
    if (coin(rng) >= p_block) continue;
    std::uniform_int_distribution<std::size_t> len(1, upper);
    out.push_back({q, len(rng)});
  }
  return out;
}

namespace {

void fill_cross_row(AttentionMask& m, std::size_t row, const SegmentMap& seg, std::size_t segment) {
  for (std::size_t t = seg.global_tokens.first; t < seg.global_tokens.second; ++t) m.set(row, t, true);
  const auto& s = seg.segments[segment];
  for (std::size_t t = s.token_start; t < s.token_end; ++t) m.set(row, t, true);
}

}  // namespace

AttentionMask temporal_cross_mask(std::size_t num_frames, const SegmentMap& seg, std::size_t num_text_tokens) {
  seg.validate(num_text_tokens);
  AttentionMask m(num_frames, num_text_tokens);
  for (std::size_t f = 0; f < num_frames; ++f) {
    const auto s = seg.segment_of(f);
    if (s == seg.segments.size()) throw MaskError("temporal_cross_mask: frame " + std::to_string(f) + " is outside every segment");
    fill_cross_row(m, f, seg, s);
  }
  return m;
}

AttentionMask kf_cross_mask(const SegmentMap& seg, std::size_t kf_frame_index, std::size_t num_text_tokens) {
  seg.validate(num_text_tokens);
  const auto s = seg.segment_of(kf_frame_index);
  if (s == seg.segments.size()) {
    throw MaskError("kf_cross_mask: keyframe index " + std::to_string(kf_frame_index) + " beyond the prompt schedule");
  }
  AttentionMask m(1, num_text_tokens);
  fill_cross_row(m, 0, seg, s);
  return m;
}

AttentionMask expand(const AttentionMask& mask, std::size_t row_repeat, std::size_t col_repeat) {
  if (row_repeat == 1 && col_repeat == 1) return mask;
  AttentionMask out(mask.rows() * row_repeat, mask.cols() * col_repeat);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.set(r, c, mask(r / row_repeat, c / col_repeat));
  return out;
}

}  // namespace kfs

#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kfstream/diffusion.hpp"
#include "kfstream/kvcache.hpp"
#include "kfstream/masks.hpp"
#include "kfstream/model.hpp"

namespace kfs {

enum class SampleMode { plain_ar, future_guided };
const char* mode_name(SampleMode m);
SampleMode parse_mode(const std::string& s);

struct SamplerConfig {
  std::size_t chunk_size = 3;
  std::size_t kf_period = 6;  // rollouts between keyframe emissions; 0 disables keyframes
  std::size_t kf_horizon = 18;
  std::size_t total_frames = 48;
  SampleMode mode = SampleMode::future_guided;
  StepSchedule schedule;
  std::size_t capacity_past = 9;
  std::size_t capacity_future = 3;
  bool temporal_masking = true;
  // false: recompute the full history every step instead of reading the cache.
  bool use_cache = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PromptUpdate {
  std::size_t effective_from_frame = 0;
  std::size_t segment = 0;
  std::vector<int> tokens;
};

// Append-only token table. Replacing a segment's prompt appends the new tokens
// and repoints the segment, so token indices seen by earlier frames stay valid.
class PromptTable {
 public:
  PromptTable() = default;
  explicit PromptTable(const PromptSchedule& schedule);

  const std::vector<int>& tokens() const { return tokens_; }
  const SegmentMap& map() const { return map_; }
  const PromptSchedule& schedule() const { return schedule_; }
  void replace(std::size_t segment, const std::vector<int>& tokens);

  // Visible token indices for a frame / a keyframe targeted at `frame`.
  std::vector<std::size_t> frame_row(std::size_t frame, bool temporal_masking) const;
  std::vector<std::size_t> keyframe_row(std::size_t frame, bool temporal_masking) const;
  AttentionMask cross_mask(const std::vector<std::vector<std::size_t>>& rows) const;

 private:
  std::vector<std::size_t> all_current() const;
  PromptSchedule schedule_;
  std::vector<int> tokens_;
  SegmentMap map_;
};

struct StreamEvent {
  std::string type;  // chunk | kf | consume | prompt_update | error
  std::size_t frame_begin = 0;
  std::size_t frame_end = 0;
  double wall_time = 0.0;  // seconds since stream start
  std::string detail;
  std::string to_json() const;
};

struct StreamStats {
  std::size_t denoise_calls = 0;
  std::size_t kf_denoise_calls = 0;
  std::size_t forward_calls = 0;
  std::size_t chunks = 0;
  std::size_t keyframes = 0;
  std::size_t consumed = 0;
  std::size_t repredicted = 0;
  double first_chunk_seconds = 0.0;
};

class Stream {
 public:
  // conditioning_frame: [P x channels], becomes frame 0.
  Stream(const Model& model, SamplerConfig config, Tensor conditioning_frame, PromptSchedule prompts,
         std::vector<PromptUpdate> updates = {});

  bool done() const { return cursor_ >= config_.total_frames; }
  // One rollout: apply due updates, maybe emit a keyframe, then produce the next chunk.
  void step();
  void run();

  // Denoises and commits the chunk at the cursor (consuming the pending
  // keyframe instead when the cursor has reached it).
  void next_chunk();
  // Predicts a keyframe at cursor + kf_horizon; returns false (and logs) if it would overrun the stream.
  bool predict_kf();
  // Queues an update; rejected immediately if it targets emitted frames.
  void submit_update(PromptUpdate u);

  std::size_t cursor() const { return cursor_; }
  const Tensor& video() const { return video_; }  // [T*P x channels]; rows past the cursor are zero
  const std::vector<StreamEvent>& events() const { return events_; }
  const StreamStats& stats() const { return stats_; }
  const DualRegionKVCache& cache() const { return cache_; }
  const PromptTable& prompts() const { return prompts_; }
  std::optional<std::size_t> pending_kf() const;
  const SamplerConfig& config() const { return config_; }

  // Every velocity evaluation (local rows) in order, when enabled.
  void enable_trace() { trace_enabled_ = true; }
  const std::vector<Tensor>& trace() const { return trace_; }
  // Cross-attention rows recorded for each emitted frame at emission time.
  const std::map<std::size_t, std::vector<std::size_t>>& emitted_cross_rows() const { return emitted_rows_; }

 private:
  struct Record {
    std::size_t position = 0;
    Tensor latent;                    // [P x channels]
    std::vector<std::size_t> visible;  // record ids attended to when committed
    std::vector<std::size_t> cross;    // token indices attended to when committed
    Lineage lineage = Lineage::generated;
  };
  struct Pending {
    std::size_t position = 0;
    Tensor latent;  // [chunk*P x channels]
    std::vector<std::size_t> cross;
  };

  Tensor noise_for(const char* kind, std::size_t position, std::size_t frames) const;
  // Denoise `frames` local frames at `positions`; the context is the current
  // cache (optionally including the future region).
  Tensor denoise(const std::vector<std::size_t>& positions, const std::vector<std::vector<std::size_t>>& cross,
                 bool include_future, Tensor init, const std::vector<bool>& frozen);
  Tensor velocity(const Tensor& x, const std::vector<double>& levels, const std::vector<std::size_t>& positions,
                  const std::vector<std::vector<std::size_t>>& cross, const KVContext* ctx,
                  const std::vector<std::size_t>& context_records);
  // Commits clean frames: records, cache entries (with K/V in cached mode).
  void commit(const std::vector<std::size_t>& positions, const Tensor& clean,
              const std::vector<std::vector<std::size_t>>& cross, bool include_future, bool to_future,
              const std::vector<Lineage>& lineage);
  std::vector<std::size_t> context_records(bool include_future) const;
  void apply_due_updates();
  bool apply_update(const PromptUpdate& u);
  void emit(std::size_t frame, const Tensor& rows, std::size_t row_offset, const std::vector<std::size_t>& cross);
  void log(std::string type, std::size_t begin, std::size_t end, std::string detail = {});
  bool kf_due() const;
  bool predict_kf_at(std::size_t position);

  const Model& model_;
  SamplerConfig config_;
  PromptTable prompts_;
  std::vector<PromptUpdate> queued_;
  DualRegionKVCache cache_;
  std::vector<Record> records_;
  std::map<std::size_t, std::size_t> record_at_;  // cache position -> record id
  std::optional<Pending> pending_;
  std::size_t cursor_ = 0;
  std::size_t since_kf_ = 0;
  Tensor conditioning_;
  Tensor video_;
  std::vector<bool> emitted_;
  std::map<std::size_t, std::vector<std::size_t>> emitted_rows_;
  std::vector<StreamEvent> events_;
  StreamStats stats_;
  bool trace_enabled_ = false;
  std::vector<Tensor> trace_;
  std::chrono::steady_clock::time_point start_;
};

struct StreamResult {
  Tensor video;
  std::vector<StreamEvent> events;
  StreamStats stats;
};

StreamResult stream(const Model& model, const SamplerConfig& config, const Tensor& conditioning_frame,
                    const PromptSchedule& prompts, const std::vector<PromptUpdate>& updates = {});

}  // namespace kfs

#include "kfstream/sampler.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "kfstream/random.hpp"

namespace kfs {

const char* mode_name(SampleMode m) { return m == SampleMode::plain_ar ? "plain_ar" : "future_guided"; }

SampleMode parse_mode(const std::string& s) {
  if (s == "plain_ar") return SampleMode::plain_ar;
  if (s == "future_guided") return SampleMode::future_guided;
  throw std::invalid_argument("unknown sampling mode '" + s + "' (expected plain_ar or future_guided)");
}

void SamplerConfig::validate() const {
  if (chunk_size == 0) throw std::invalid_argument("sampler: chunk_size must be positive");
  if (total_frames == 0) throw std::invalid_argument("sampler: total_frames must be positive");
  if (mode == SampleMode::future_guided && kf_period > 0) {
    if (kf_horizon <= chunk_size) throw std::invalid_argument("sampler: kf_horizon must exceed chunk_size");
    if (kf_horizon % chunk_size != 0) throw std::invalid_argument("sampler: kf_horizon must be a multiple of chunk_size");
    if (capacity_future < chunk_size) {
      throw std::invalid_argument("sampler: future capacity must hold one keyframe chunk");
    }
  }
  if (capacity_past == 0 || capacity_future == 0) throw std::invalid_argument("sampler: cache capacities must be positive");
  schedule.validate();
}

PromptTable::PromptTable(const PromptSchedule& schedule) : schedule_(schedule) {
  tokens_ = schedule.global_tokens;
  map_.global_tokens = {0, tokens_.size()};
  for (const auto& s : schedule.segments) {
    const auto start = tokens_.size();
    tokens_.insert(tokens_.end(), s.tokens.begin(), s.tokens.end());
    map_.segments.push_back({s.frame_start, s.frame_end, start, tokens_.size()});
  }
  map_.validate(tokens_.size());
}

void PromptTable::replace(std::size_t segment, const std::vector<int>& tokens) {
  if (segment >= map_.segments.size()) throw std::out_of_range("prompt update: no segment " + std::to_string(segment));
  const auto start = tokens_.size();
  tokens_.insert(tokens_.end(), tokens.begin(), tokens.end());
  map_.segments[segment].token_start = start;
  map_.segments[segment].token_end = tokens_.size();
  schedule_.segments[segment].tokens = tokens;
}

std::vector<std::size_t> PromptTable::all_current() const {
  std::vector<std::size_t> out;
  for (auto t = map_.global_tokens.first; t < map_.global_tokens.second; ++t) out.push_back(t);
  for (const auto& s : map_.segments)
    for (auto t = s.token_start; t < s.token_end; ++t) out.push_back(t);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> PromptTable::frame_row(std::size_t frame, bool temporal_masking) const {
  if (!temporal_masking) return all_current();
  if (map_.segment_of(frame) == map_.segments.size()) {
    throw MaskError("frame " + std::to_string(frame) + " is outside every prompt segment");
  }
  return kf_cross_mask(map_, frame, tokens_.size()).visible(0);
}

std::vector<std::size_t> PromptTable::keyframe_row(std::size_t frame, bool temporal_masking) const {
  if (!temporal_masking) return all_current();
  return kf_cross_mask(map_, frame, tokens_.size()).visible(0);
}

AttentionMask PromptTable::cross_mask(const std::vector<std::vector<std::size_t>>& rows) const {
  AttentionMask m(rows.size(), tokens_.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (auto t : rows[r]) m.set(r, t, true);
  return m;
}

std::string StreamEvent::to_json() const {
  nlohmann::json j{{"type", type}, {"frame_range", {frame_begin, frame_end}}, {"wall_time", wall_time}};
  if (!detail.empty()) j["detail"] = detail;
  return j.dump();
}

Stream::Stream(const Model& model, SamplerConfig config, Tensor conditioning_frame, PromptSchedule prompts,
               std::vector<PromptUpdate> updates)
    : model_(model),
      config_(std::move(config)),
      cache_(config_.capacity_past, config_.capacity_future),
      conditioning_(std::move(conditioning_frame)),
      start_(std::chrono::steady_clock::now()) {
  config_.validate();
  const auto& mc = model_.config();
  prompts.validate(mc.vocab);
  if (prompts.num_frames() < config_.total_frames) {
    throw std::invalid_argument("prompt schedule covers " + std::to_string(prompts.num_frames()) + " frames, stream needs " +
                                std::to_string(config_.total_frames));
  }
  prompts_ = PromptTable(prompts);
  if (conditioning_.shape() != Shape{mc.patches, mc.channels}) {
    throw DimensionError("conditioning frame must be " + shape_string({mc.patches, mc.channels}));
  }
  video_ = Tensor::zeros({config_.total_frames * mc.patches, mc.channels});
  emitted_.assign(config_.total_frames, false);
  since_kf_ = config_.kf_period;
  std::stable_sort(updates.begin(), updates.end(),
                   [](const auto& a, const auto& b) { return a.effective_from_frame < b.effective_from_frame; });
  queued_ = std::move(updates);
}

std::optional<std::size_t> Stream::pending_kf() const {
  if (!pending_) return std::nullopt;
  return pending_->position;
}

void Stream::log(std::string type, std::size_t begin, std::size_t end, std::string detail) {
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  events_.push_back({std::move(type), begin, end, t, std::move(detail)});
}

Tensor Stream::noise_for(const char* kind, std::size_t position, std::size_t frames) const {
  auto rng = substream(config_.seed, kind, position);
  return gaussian(rng, {frames * model_.config().patches, model_.config().channels});
}

std::vector<std::size_t> Stream::context_records(bool include_future) const {
  std::vector<std::size_t> out;
  for (const auto& e : cache_.past()) out.push_back(record_at_.at(e.position));
  if (include_future)
    for (const auto& e : cache_.future()) out.push_back(record_at_.at(e.position));
  return out;
}

Tensor Stream::velocity(const Tensor& x, const std::vector<double>& levels, const std::vector<std::size_t>& positions,
                        const std::vector<std::vector<std::size_t>>& cross, const KVContext* ctx,
                        const std::vector<std::size_t>& ctx_records) {
  ++stats_.forward_calls;
  const auto T = positions.size();
  const auto P = model_.config().patches;
  const bool has_text = !prompts_.tokens().empty();
  ForwardSpec spec;
  spec.tokens = prompts_.tokens();
  Tensor out;
  if (config_.use_cache) {
    const auto n_ctx = ctx ? ctx->frames() : 0;
    spec.positions = positions;
    spec.levels = levels;
    spec.self_mask = full_mask(T, n_ctx + T);
    if (has_text) spec.cross_mask = prompts_.cross_mask(cross);
    spec.context = n_ctx ? ctx : nullptr;
    out = infer(model_, x, spec).velocity;
  } else {
    // Dense recomputation: every record the current frames depend on, at its
    // commit-time visibility, followed by the local frames.
    std::set<std::size_t> needed;
    std::vector<std::size_t> stack(ctx_records.begin(), ctx_records.end());
    while (!stack.empty()) {
      auto r = stack.back();
      stack.pop_back();
      if (!needed.insert(r).second) continue;
      for (auto v : records_[r].visible)
        if (!needed.count(v)) stack.push_back(v);
    }
    std::vector<std::size_t> order(needed.begin(), needed.end());
    std::map<std::size_t, std::size_t> index;
    for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;
    const auto R = order.size();
    const auto C = model_.config().channels;
    std::vector<double> data;
    data.reserve((R + T) * P * C);
    std::vector<std::vector<std::size_t>> rows;
    for (auto r : order) {
      const auto& rec = records_[r];
      data.insert(data.end(), rec.latent.values().begin(), rec.latent.values().end());
      spec.positions.push_back(rec.position);
      spec.levels.push_back(0.0);
      rows.push_back(rec.cross);
    }
    data.insert(data.end(), x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < T; ++i) {
      spec.positions.push_back(positions[i]);
      spec.levels.push_back(levels[i]);
      rows.push_back(cross[i]);
    }
    AttentionMask mask(R + T, R + T);
    for (std::size_t i = 0; i < R; ++i)
      for (auto v : records_[order[i]].visible) mask.set(i, index.at(v), true);
    for (std::size_t i = 0; i < T; ++i) {
      for (auto r : ctx_records) mask.set(R + i, index.at(r), true);
      for (std::size_t j = 0; j < T; ++j) mask.set(R + i, R + j, true);
    }
    spec.self_mask = std::move(mask);
    if (has_text) spec.cross_mask = prompts_.cross_mask(rows);
    auto full = infer(model_, Tensor({(R + T) * P, C}, std::move(data)), spec).velocity;
    out = Tensor({T * P, C}, std::vector<double>(full.data() + R * P * C, full.data() + (R + T) * P * C));
  }
  if (trace_enabled_) trace_.push_back(out);
  return out;
}

Tensor Stream::denoise(const std::vector<std::size_t>& positions, const std::vector<std::vector<std::size_t>>& cross,
                       bool include_future, Tensor init, const std::vector<bool>& frozen) {
  ++stats_.denoise_calls;
  KVContext ctx;
  if (config_.use_cache) ctx = cache_.context(include_future);
  const auto records = context_records(include_future);
  VelocityFn fn = [&](const Tensor& x, const std::vector<double>& levels) {
    return velocity(x, levels, positions, cross, &ctx, records);
  };
  return few_step_denoise(fn, std::move(init), config_.schedule, model_.config().patches, frozen);
}

void Stream::commit(const std::vector<std::size_t>& positions, const Tensor& clean,
                    const std::vector<std::vector<std::size_t>>& cross, bool include_future, bool to_future,
                    const std::vector<Lineage>& lineage) {
  const auto T = positions.size();
  const auto P = model_.config().patches;
  const auto C = model_.config().channels;
  const auto W = model_.config().width;
  std::vector<Tensor> keys, values;
  if (config_.use_cache) {
    ++stats_.forward_calls;
    auto ctx = cache_.context(include_future);
    ForwardSpec spec;
    spec.positions = positions;
    spec.levels.assign(T, 0.0);
    spec.self_mask = full_mask(T, ctx.frames() + T);
    spec.tokens = prompts_.tokens();
    if (!spec.tokens.empty()) spec.cross_mask = prompts_.cross_mask(cross);
    spec.context = ctx.frames() ? &ctx : nullptr;
    spec.capture_kv = true;
    auto r = infer(model_, clean, spec);
    keys = std::move(r.keys);
    values = std::move(r.values);
  }
  auto visible = context_records(include_future);
  const auto first_id = records_.size();
  for (std::size_t i = 0; i < T; ++i) visible.push_back(first_id + i);
  for (std::size_t i = 0; i < T; ++i) {
    Record rec;
    rec.position = positions[i];
    rec.latent = Tensor({P, C}, std::vector<double>(clean.data() + i * P * C, clean.data() + (i + 1) * P * C));
    rec.visible = visible;
    rec.cross = cross[i];
    rec.lineage = lineage[i];
    records_.push_back(std::move(rec));

    CacheEntry e;
    e.position = positions[i];
    e.lineage = lineage[i];
    for (std::size_t l = 0; l < keys.size(); ++l) {
      e.keys.emplace_back(Shape{P, W}, std::vector<double>(keys[l].data() + i * P * W, keys[l].data() + (i + 1) * P * W));
      e.values.emplace_back(Shape{P, W},
                            std::vector<double>(values[l].data() + i * P * W, values[l].data() + (i + 1) * P * W));
    }
    auto evicted = to_future ? cache_.set_future(std::move(e)) : cache_.append_past(std::move(e));
    if (evicted) record_at_.erase(*evicted);
    record_at_[positions[i]] = first_id + i;
  }
}

void Stream::emit(std::size_t frame, const Tensor& rows, std::size_t row_offset, const std::vector<std::size_t>& cross) {
  if (emitted_.at(frame)) throw std::logic_error("frame " + std::to_string(frame) + " was already emitted");
  const auto P = model_.config().patches;
  const auto C = model_.config().channels;
  std::copy_n(rows.data() + row_offset * P * C, P * C, video_.data() + frame * P * C);
  emitted_[frame] = true;
  emitted_rows_[frame] = cross;
}

bool Stream::kf_due() const {
  return config_.mode == SampleMode::future_guided && config_.kf_period > 0 && !pending_ &&
         cursor_ >= config_.chunk_size && since_kf_ >= config_.kf_period;
}

void Stream::step() {
  if (done()) throw std::logic_error("stream already complete");
  apply_due_updates();
  if (kf_due()) predict_kf();
  next_chunk();
}

void Stream::run() {
  while (!done()) step();
}

void Stream::next_chunk() {
  if (done()) throw std::out_of_range("next_chunk: stream horizon exceeded");
  const auto chunk = config_.chunk_size;
  if (pending_ && pending_->position == cursor_) {
    const auto pos = pending_->position;
    for (std::size_t i = 0; i < chunk; ++i) {
      cache_.consume_future(pos + i);
      emit(pos + i, pending_->latent, i, pending_->cross);
    }
    log("consume", pos, pos + chunk);
    pending_.reset();
    cursor_ += chunk;
    ++since_kf_;
    ++stats_.consumed;
    return;
  }
  if (pending_ && pending_->position < cursor_) throw std::logic_error("pending keyframe lies behind the cursor");
  const auto n = std::min(chunk, config_.total_frames - cursor_);
  std::vector<std::size_t> positions;
  std::vector<std::vector<std::size_t>> cross;
  std::vector<bool> frozen(n, false);
  std::vector<Lineage> lineage(n, Lineage::generated);
  for (std::size_t i = 0; i < n; ++i) {
    positions.push_back(cursor_ + i);
    cross.push_back(prompts_.frame_row(cursor_ + i, config_.temporal_masking));
  }
  auto init = noise_for("chunk", cursor_, n);
  if (cursor_ == 0) {
    frozen[0] = true;
    lineage[0] = Lineage::conditioning;
    std::copy_n(conditioning_.data(), conditioning_.size(), init.data());
  }
  const bool with_kf = pending_.has_value();
  auto clean = denoise(positions, cross, with_kf, std::move(init), frozen);
  commit(positions, clean, cross, with_kf, false, lineage);
  for (std::size_t i = 0; i < n; ++i) emit(cursor_ + i, clean, i, cross[i]);
  log("chunk", cursor_, cursor_ + n, with_kf ? "guided by keyframe at " + std::to_string(pending_->position) : "");
  if (stats_.chunks == 0) {
    stats_.first_chunk_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  cursor_ += n;
  ++since_kf_;
  ++stats_.chunks;
}

bool Stream::predict_kf() { return predict_kf_at(cursor_ + config_.kf_horizon); }

bool Stream::predict_kf_at(std::size_t pos) {
  const auto chunk = config_.chunk_size;
  if (pos + chunk > config_.total_frames) {
    log("kf", pos, pos + chunk, "skipped: beyond the end of the stream");
    since_kf_ = 0;
    return false;
  }
  if (pending_) throw std::logic_error("predict_kf: a keyframe is already pending");
  std::vector<std::size_t> positions;
  std::vector<std::vector<std::size_t>> cross;
  const auto row = prompts_.keyframe_row(pos, config_.temporal_masking);
  for (std::size_t i = 0; i < chunk; ++i) {
    positions.push_back(pos + i);
    cross.push_back(row);
  }
  ++stats_.kf_denoise_calls;
  auto clean = denoise(positions, cross, false, noise_for("kf", pos, chunk), {});
  commit(positions, clean, cross, false, true, std::vector<Lineage>(chunk, Lineage::keyframe));
  pending_ = Pending{pos, std::move(clean), row};
  since_kf_ = 0;
  ++stats_.keyframes;
  log("kf", pos, pos + chunk);
  return true;
}

void Stream::submit_update(PromptUpdate u) {
  if (u.effective_from_frame < cursor_) {
    log("error", u.effective_from_frame, cursor_, "prompt update targets already-emitted frames");
    return;
  }
  auto it = std::upper_bound(queued_.begin(), queued_.end(), u.effective_from_frame,
                             [](std::size_t f, const PromptUpdate& q) { return f < q.effective_from_frame; });
  queued_.insert(it, std::move(u));
}

void Stream::apply_due_updates() {
  while (!queued_.empty() && queued_.front().effective_from_frame <= cursor_) {
    auto u = std::move(queued_.front());
    queued_.erase(queued_.begin());
    apply_update(u);
  }
}

bool Stream::apply_update(const PromptUpdate& u) {
  const auto& segs = prompts_.map().segments;
  if (u.segment >= segs.size()) {
    log("error", u.effective_from_frame, u.effective_from_frame, "prompt update names unknown segment " + std::to_string(u.segment));
    return false;
  }
  for (int t : u.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= model_.config().vocab) {
      log("error", u.effective_from_frame, u.effective_from_frame, "prompt update token outside vocabulary");
      return false;
    }
  }
  if (segs[u.segment].frame_end <= cursor_) {
    log("error", segs[u.segment].frame_start, segs[u.segment].frame_end, "prompt update targets already-emitted frames");
    return false;
  }
  prompts_.replace(u.segment, u.tokens);
  log("prompt_update", std::max(segs[u.segment].frame_start, cursor_), segs[u.segment].frame_end,
      "segment " + std::to_string(u.segment));
  if (pending_) {
    const auto pos = pending_->position;
    if (prompts_.keyframe_row(pos, config_.temporal_masking) != pending_->cross) {
      cache_.discard_future_from(pos);
      for (std::size_t i = 0; i < config_.chunk_size; ++i) record_at_.erase(pos + i);
      pending_.reset();
      const auto keep = since_kf_;
      const bool ok = predict_kf_at(pos);
      since_kf_ = keep;
      if (ok) {
        ++stats_.repredicted;
        events_.back().detail = "re-predicted after prompt update";
      }
    }
  }
  return true;
}

StreamResult stream(const Model& model, const SamplerConfig& config, const Tensor& conditioning_frame,
                    const PromptSchedule& prompts, const std::vector<PromptUpdate>& updates) {
  Stream s(model, config, conditioning_frame, prompts, updates);
  s.run();
  return {s.video(), s.events(), s.stats()};
}

}  // namespace kfs

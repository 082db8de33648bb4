#include "kfstream/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "kfstream/random.hpp"
#include "kfstream/sampler.hpp"

namespace kfs {

const char* fm_target_name(FmTarget t) { return t == FmTarget::teacher ? "teacher" : "ground_truth"; }

FmTarget parse_fm_target(const std::string& s) {
  if (s == "teacher") return FmTarget::teacher;
  if (s == "ground_truth") return FmTarget::ground_truth;
  throw std::invalid_argument("unknown flow-matching target '" + s + "' (expected ground_truth or teacher)");
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::teacher: return "teacher";
    case Stage::pca: return "pca";
    case Stage::fsf: return "fsf";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "teacher") return Stage::teacher;
  if (s == "pca") return Stage::pca;
  if (s == "fsf") return Stage::fsf;
  throw std::invalid_argument("unknown stage '" + s + "' (expected teacher, pca or fsf)");
}

void TrainConfig::validate() const {
  if (iterations == 0) throw std::invalid_argument("train: iterations must be positive");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(learning_rate > 0.0) || !(disc_learning_rate > 0.0)) throw std::invalid_argument("train: learning rates must be positive");
  if (chunk_size == 0) throw std::invalid_argument("train: chunk_size must be positive");
  if (window_frames < 2 * chunk_size) throw std::invalid_argument("train: window must hold at least two chunks");
  if (window_frames % chunk_size != 0) throw std::invalid_argument("train: window_frames must be a multiple of chunk_size");
  if (p_block < 0.0 || p_block > 1.0) throw std::invalid_argument("train: p_block must lie in [0,1]");
  if (lambda_reg < 0 || lambda_cos < 0 || lambda_fm < 0 || lambda_adv < 0) {
    throw std::invalid_argument("train: loss weights must be non-negative");
  }
  if (stage == Stage::fsf && window_frames < 4 * chunk_size) {
    throw std::invalid_argument("train: F-SF needs a window of at least four chunks");
  }
  if (capacity_past == 0 || capacity_future < chunk_size) {
    throw std::invalid_argument("train: cache must hold a past frame and one keyframe chunk");
  }
  if (episode_frames < window_frames) throw std::invalid_argument("train: episodes shorter than the window");
  schedule.validate();
}

TrainConfig TrainConfig::for_stage(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::teacher:
      c.iterations = 8000;
      c.learning_rate = 5e-3;
      c.grad_clip = 5.0;
      break;
    case Stage::pca:
      c.iterations = 2000;
      c.learning_rate = 3e-4;
      break;
    case Stage::fsf:
      c.iterations = 500;
      c.learning_rate = 3e-5;
      break;
  }
  return c;
}

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw DimensionError("AdamW: one gradient slot per parameter required");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (wd_ > 0.0)
      for (auto& x : p.values()) x -= lr_ * wd_ * x;
    if (grads[i].size() == 0) continue;
    if (grads[i].shape() != p.shape()) throw DimensionError("AdamW: gradient shape mismatch");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      m[j] = b1_ * m[j] + (1.0 - b1_) * g;
      v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g.values()) x *= s;
  }
  return norm;
}

std::vector<Tensor> gather_grads(const std::map<ParamId, Tensor>& grads, std::size_t offset, std::size_t count) {
  std::vector<Tensor> out(count);
  for (const auto& [id, g] : grads)
    if (id >= offset && id < offset + count) out[id - offset] = g;
  return out;
}

namespace {

void accumulate_into(std::vector<Tensor>& acc, const std::vector<Tensor>& g, double w) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (g[i].size() == 0) continue;
    if (acc[i].size() == 0) acc[i] = Tensor::zeros(g[i].shape());
    for (std::size_t j = 0; j < g[i].size(); ++j) acc[i][j] += w * g[i][j];
  }
}

void check_finite(double loss, Stage stage, std::size_t it, const std::string& what) {
  if (!std::isfinite(loss)) {
    std::ostringstream o;
    o << stage_name(stage) << " training diverged at iteration " << it << ": " << what << " = " << loss
      << " (try a lower learning rate or tighter gradient clipping)";
    throw NumericalError(o.str());
  }
}

Tensor row_range(const Tensor& t, std::size_t begin, std::size_t end) {
  const auto c = t.cols();
  return Tensor({end - begin, c}, std::vector<double>(t.data() + begin * c, t.data() + end * c));
}

// [rows x cols] matrix whose row r holds levels[r / patches].
Tensor level_rows(const std::vector<double>& levels, std::size_t patches, std::size_t cols) {
  auto t = Tensor::zeros({levels.size() * patches, cols});
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = levels[r / patches];
  return t;
}

// Rows of the given frames, concatenated.
Var select_frames(Var v, const std::vector<std::size_t>& frames, std::size_t patches) {
  std::vector<Var> parts;
  parts.reserve(frames.size());
  for (auto f : frames) parts.push_back(slice_rows(v, f * patches, (f + 1) * patches));
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

// Latent view of world frames: [T x d] -> [T*P x d/P].
Tensor as_latent(const Tensor& frames, const ModelConfig& mc) {
  if (frames.cols() != mc.patches * mc.channels) {
    throw DimensionError("world state dim " + std::to_string(frames.cols()) + " != patches x channels (" +
                         std::to_string(mc.patches * mc.channels) + ")");
  }
  return frames.reshaped({frames.rows() * mc.patches, mc.channels});
}

struct Prompted {
  std::vector<int> tokens;
  AttentionMask cross;
};

Prompted prompted(const PromptSchedule& s, std::size_t frames, bool tm) {
  Prompted p;
  p.cross = schedule_cross_mask(s, frames, tm, &p.tokens);
  return p;
}

// Cross mask rows for a subset of frames.
AttentionMask cross_rows(const AttentionMask& full, const std::vector<std::size_t>& frames) {
  AttentionMask m(frames.size(), full.cols());
  for (std::size_t i = 0; i < frames.size(); ++i)
    for (std::size_t c = 0; c < full.cols(); ++c) m.set(i, c, full(frames[i], c));
  return m;
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

void report(TrainLog* log, const ProgressFn& progress, std::size_t it, const std::map<std::string, double>& m) {
  if (log)
    for (const auto& [k, v] : m) log->add(it, k, v);
  if (progress) progress(it, m);
}

}  // namespace

// ---------------------------------------------------------------- discriminator

Discriminator Discriminator::init(std::size_t feature_dim, std::size_t hidden, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto dense = [&](std::size_t in, std::size_t out) {
    std::vector<double> v(in * out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& x : v) x = sd * normal(rng);
    return Tensor({in, out}, std::move(v));
  };
  Discriminator d;
  d.params = {dense(feature_dim, hidden), Tensor::zeros({1, hidden}), dense(hidden, 1), Tensor::zeros({1, 1})};
  return d;
}

Var Discriminator::logits(Graph& g, Var features, bool trainable, ParamId offset) const {
  if (features.cols() != feature_dim()) throw DimensionError("discriminator: feature width mismatch");
  std::vector<Var> p;
  for (std::size_t i = 0; i < params.size(); ++i)
    p.push_back(trainable ? g.parameter(offset + i, params[i]) : g.constant_ref(params[i]));
  auto h = gelu(add_row(matmul(features, p[0]), p[1]));
  return add_row(matmul(h, p[2]), p[3]);
}

// ---------------------------------------------------------------- data

PromptSchedule crop_schedule(const PromptSchedule& s, std::size_t start, std::size_t length) {
  PromptSchedule out;
  out.global_tokens = s.global_tokens;
  const auto end = start + length;
  if (end > s.num_frames()) throw std::out_of_range("crop_schedule: window beyond the schedule");
  for (const auto& seg : s.segments) {
    const auto a = std::max(seg.frame_start, start), b = std::min(seg.frame_end, end);
    if (a < b) out.segments.push_back({a - start, b - start, seg.tokens});
  }
  return out;
}

AttentionMask schedule_cross_mask(const PromptSchedule& s, std::size_t frames, bool temporal_masking,
                                  std::vector<int>* tokens) {
  SegmentMap map;
  std::vector<int> toks = s.global_tokens;
  map.global_tokens = {0, toks.size()};
  for (const auto& seg : s.segments) {
    const auto start = toks.size();
    toks.insert(toks.end(), seg.tokens.begin(), seg.tokens.end());
    map.segments.push_back({seg.frame_start, seg.frame_end, start, toks.size()});
  }
  map.validate(toks.size());
  if (frames > map.num_frames()) throw MaskError("schedule_cross_mask: schedule shorter than the frame count");
  AttentionMask m = temporal_masking ? temporal_cross_mask(frames, map, toks.size()) : full_mask(frames, toks.size());
  if (tokens) *tokens = std::move(toks);
  return m;
}

WorldDataset::WorldDataset(WorldSpec spec, std::size_t episodes, std::size_t episode_frames, std::uint64_t seed,
                           bool validation)
    : spec_(std::move(spec)) {
  if (episodes == 0) throw std::invalid_argument("dataset: need at least one episode");
  const auto max_segments = std::max<std::size_t>(1, std::min<std::size_t>(4, episode_frames / spec_.params.min_segment));
  std::size_t found = 0;
  for (std::uint64_t s = seed; found < episodes; ++s) {
    if (is_validation_seed(s) != validation) continue;
    const auto segments = 1 + splitmix64(s ^ 0xa11ceULL) % max_segments;
    episodes_.push_back(episode_for_seed(spec_, s, episode_frames, segments));
    ++found;
  }
}

WorldDataset::Window WorldDataset::sample(std::mt19937_64& rng, std::size_t frames) const {
  const auto& ep = episodes_[std::uniform_int_distribution<std::size_t>(0, episodes_.size() - 1)(rng)];
  if (frames > ep.num_frames()) throw std::invalid_argument("dataset: window longer than the episodes");
  const auto start = std::uniform_int_distribution<std::size_t>(0, ep.num_frames() - frames)(rng);
  return {row_range(ep.frames, start, start + frames), crop_schedule(ep.schedule, start, frames), ep.seed};
}

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "iteration,metric,value\n";
  out.precision(10);
  for (const auto& r : rows) out << r.iteration << ',' << r.metric << ',' << r.value << '\n';
}

// ---------------------------------------------------------------- assertions

void assert_pca_mask(const AttentionMask& mask, std::size_t chunk_size, std::span<const SpanSpec> spans) {
  const auto T = mask.rows();
  for (const auto& s : spans) {
    const auto q0 = s.query_chunk * chunk_size;
    const auto h0 = (s.query_chunk - s.hidden_count) * chunk_size;
    for (auto r = q0; r < std::min(T, q0 + chunk_size); ++r)
      for (auto c = h0; c < q0; ++c)
        if (mask(r, c)) {
          throw std::logic_error("PCA mask lets frame " + std::to_string(r) + " attend hidden frame " + std::to_string(c));
        }
  }
}

void assert_self_generated(const DualRegionKVCache& cache) {
  auto check = [](const std::deque<CacheEntry>& region) {
    for (const auto& e : region)
      if (e.lineage == Lineage::ground_truth) {
        throw std::logic_error("self-rollout context holds ground truth at frame " + std::to_string(e.position));
      }
  };
  check(cache.past());
  check(cache.future());
}

// ---------------------------------------------------------------- teacher

namespace {

struct TeacherSample {
  Tensor x;
  Tensor target;
  std::vector<double> levels;
};

// One level for the whole window, or (with probability `mixed`) one per frame.
TeacherSample teacher_sample(const Tensor& clean, std::size_t frames, std::size_t patches, double mixed,
                             std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool per_frame = u(rng) < mixed;
  const double t = u(rng);
  std::vector<double> levels(frames, t);
  if (per_frame)
    for (auto& l : levels) l = u(rng);
  levels[0] = 0.0;
  auto noise = gaussian(rng, clean.shape());
  return {interpolate(clean, noise, levels, patches), target_velocity(clean, noise), std::move(levels)};
}

Var teacher_loss(const Bound& b, Graph& g, const WorldDataset::Window& w, const TeacherSample& s, std::size_t frames) {
  const auto& mc = *b.config;
  const auto P = mc.patches;
  auto pr = prompted(w.schedule, frames, true);
  ForwardSpec spec;
  spec.positions = iota(0, frames);
  spec.levels = s.levels;
  spec.self_mask = full_mask(frames, frames);
  spec.tokens = pr.tokens;
  spec.cross_mask = pr.cross;
  auto r = forward(b, g.constant_ref(s.x), spec);
  auto pred = slice_rows(r.velocity, P, frames * P);
  return mse(pred, g.constant(row_range(s.target, P, frames * P)));
}

}  // namespace

Model train_teacher(const TrainConfig& config, const WorldDataset& data, const ModelConfig& model_config,
                    TrainLog* log, const ProgressFn& progress) {
  config.validate();
  if (data.episodes().empty()) throw std::invalid_argument("train_teacher: empty dataset");
  auto init_rng = substream(config.seed, "teacher.init");
  auto model = Model::init(model_config, init_rng);
  auto rng = substream(config.seed, "teacher.data");
  AdamW opt(config.learning_rate, config.weight_decay);
  const auto n = model.num_tensors();
  const auto T = config.window_frames;
  double smoothed = 0.0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::vector<Tensor> acc(n);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      auto w = data.sample(rng, T);
      auto clean = as_latent(w.frames, model.config());
      auto s = teacher_sample(clean, T, model.config().patches, config.teacher_mixed_fraction, rng);
      Graph g;
      auto bound = bind(g, model, true);
      auto loss = teacher_loss(bound, g, w, s, T);
      loss_sum += loss.value().item();
      accumulate_into(acc, gather_grads(g.backward(loss), 0, n), 1.0 / config.batch_size);
    }
    const double loss = loss_sum / config.batch_size;
    check_finite(loss, Stage::teacher, it, "flow-matching loss");
    const double gnorm = clip_gradients(acc, config.grad_clip);
    opt.step(model.params(), acc);
    smoothed = it == 0 ? loss : 0.98 * smoothed + 0.02 * loss;
    if (it % config.log_every == 0 || it + 1 == config.iterations) {
      report(log, progress, it, {{"fm_loss", loss}, {"fm_loss_smoothed", smoothed}, {"grad_norm", gnorm}});
    }
  }
  return model;
}

double teacher_validation_loss(const Model& teacher, const WorldDataset& val, std::size_t windows, std::size_t frames,
                               std::uint64_t seed) {
  auto rng = substream(seed, "teacher.validation");
  double total = 0.0;
  for (std::size_t i = 0; i < windows; ++i) {
    auto w = val.sample(rng, frames);
    auto clean = as_latent(w.frames, teacher.config());
    auto s = teacher_sample(clean, frames, teacher.config().patches, 0.0, rng);
    Graph g(false);
    auto bound = bind(g, teacher, false);
    total += teacher_loss(bound, g, w, s, frames).value().item();
  }
  return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------- PCA distillation

namespace {

struct PcaLoss {
  double total = 0.0, reg = 0.0, cos = 0.0;
};

PcaLoss pca_sample(const Model& student, const Model& teacher, const TrainConfig& config, const WorldDataset::Window& w,
                   std::mt19937_64& rng, std::vector<Tensor>& acc) {
  const auto& mc = student.config();
  const auto P = mc.patches;
  const auto T = config.window_frames;
  auto clean = as_latent(w.frames, mc);
  const auto& lv = config.schedule.levels;
  std::vector<double> level_set{0.0};
  level_set.insert(level_set.end(), lv.begin(), lv.end());
  std::uniform_int_distribution<std::size_t> pick(0, level_set.size() - 1);
  std::vector<double> levels(T);
  for (std::size_t f = 1; f < T; ++f) levels[f] = level_set[pick(rng)];
  auto noise = gaussian(rng, clean.shape());
  auto x = interpolate(clean, noise, levels, P);

  std::vector<std::size_t> scored;
  for (std::size_t f = 0; f < T; ++f)
    if (levels[f] > 0.0) scored.push_back(f);
  const auto spans = sample_spans(rng, chunk_count(T, config.chunk_size), config.p_block, config.max_hidden);
  if (scored.empty()) return {};

  // Teacher clean prediction with bidirectional context.
  auto tp = prompted(w.schedule, T, true);
  ForwardSpec ts;
  ts.positions = iota(0, T);
  ts.levels = levels;
  ts.self_mask = full_mask(T, T);
  ts.tokens = tp.tokens;
  ts.cross_mask = tp.cross;
  auto teacher_x0 = clean_estimate(x, infer(teacher, x, ts).velocity, levels, P);

  auto sp = prompted(w.schedule, T, config.temporal_masking);
  ForwardSpec ss;
  ss.positions = ts.positions;
  ss.levels = levels;
  ss.self_mask = pca_mask(T, config.chunk_size, spans);
  assert_pca_mask(ss.self_mask, config.chunk_size, spans);
  ss.tokens = sp.tokens;
  ss.cross_mask = sp.cross;

  Graph g;
  auto bound = bind(g, student, true);
  auto xv = g.constant_ref(x);
  auto r = forward(bound, xv, ss);
  auto student_x0 = xv - g.constant(level_rows(levels, P, mc.channels)) * r.velocity;
  auto s_sel = select_frames(student_x0, scored, P);
  auto t_sel = select_frames(g.constant(std::move(teacher_x0)), scored, P);
  auto reg = mse(s_sel, t_sel);
  auto cos = cosine_similarity(s_sel, t_sel);
  auto loss = config.lambda_reg * reg + config.lambda_cos * (g.constant(Tensor::scalar(1.0)) - cos);
  accumulate_into(acc, gather_grads(g.backward(loss), 0, student.num_tensors()), 1.0 / config.batch_size);
  return {loss.value().item(), reg.value().item(), cos.value().item()};
}

// Drift ratio of one plain autoregressive stream on a held-out single-segment episode.
double drift_probe(const Model& m, const WorldSpec& spec, std::uint64_t seed) {
  auto ep = episode_for_seed(spec, split_seed(seed, 0, true), 48, 1);
  SamplerConfig sc;
  sc.mode = SampleMode::plain_ar;
  sc.total_frames = 48;
  sc.seed = seed;
  auto latent = as_latent(ep.frames, m.config());
  const auto P = m.config().patches;
  auto res = stream(m, sc, row_range(latent, 0, P), ep.schedule);
  return drift_report(res.video.reshaped({48, P * m.config().channels}), raw_state_embedder()).ratio;
}

}  // namespace

Model pca_distill(const Model& teacher, const TrainConfig& config, const WorldDataset& data, TrainLog* log,
                  const ProgressFn& progress) {
  config.validate();
  Model student = teacher;
  auto rng = substream(config.seed, "pca.data");
  AdamW opt(config.learning_rate, config.weight_decay);
  const auto n = student.num_tensors();
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::vector<Tensor> acc(n);
    PcaLoss sum;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      auto w = data.sample(rng, config.window_frames);
      auto l = pca_sample(student, teacher, config, w, rng, acc);
      sum.total += l.total / config.batch_size;
      sum.reg += l.reg / config.batch_size;
      sum.cos += l.cos / config.batch_size;
    }
    check_finite(sum.total, Stage::pca, it, "distillation loss");
    const double gnorm = clip_gradients(acc, config.grad_clip);
    opt.step(student.params(), acc);
    if (it % config.log_every == 0 || it + 1 == config.iterations) {
      std::map<std::string, double> m{{"loss", sum.total}, {"reg_loss", sum.reg}, {"cosine", sum.cos}, {"grad_norm", gnorm}};
      if (it % (config.log_every * 10) == 0 || it + 1 == config.iterations)
        m["drift_probe"] = drift_probe(student, data.spec(), config.seed);
      report(log, progress, it, m);
    }
  }
  return student;
}

// ---------------------------------------------------------------- F-SF

namespace {

struct Rollout {
  const Model& student;
  const Model& teacher;
  const Discriminator& disc;
  const TrainConfig& cfg;
  Graph& g;
  Bound sb, tb;
  std::vector<int> tokens;
  AttentionMask cross_tm, cross_student;
  DualRegionKVCache cache;
  std::vector<Var> fm_terms, adv_terms;
  std::vector<Tensor> fake_features, real_features;
  std::map<std::size_t, Tensor> latents;  // clean content of every committed frame

  // Self mask for local frames over the current cache context.
  ForwardSpec spec(const std::vector<std::size_t>& positions, const std::vector<double>& levels, const KVContext& ctx,
                   const AttentionMask& cross_full) const {
    ForwardSpec s;
    s.positions = positions;
    s.levels = levels;
    s.self_mask = full_mask(positions.size(), ctx.frames() + positions.size());
    s.tokens = tokens;
    if (!tokens.empty()) s.cross_mask = cross_rows(cross_full, positions);
    s.context = ctx.frames() ? &ctx : nullptr;
    return s;
  }
  // Few-step denoise; the final Euler step is recorded in the graph.
  Var denoise(const std::vector<std::size_t>& positions, const std::vector<bool>& frozen, Tensor x, const KVContext& ctx,
              const AttentionMask& cross_full) {
    const auto P = student.config().patches;
    const auto C = student.config().channels;
    const auto& lv = cfg.schedule.levels;
    auto levels_at = [&](double t) {
      std::vector<double> l(positions.size(), t);
      for (std::size_t i = 0; i < l.size(); ++i)
        if (frozen[i]) l[i] = 0.0;
      return l;
    };
    for (std::size_t k = 0; k + 1 < lv.size(); ++k) {
      auto levels = levels_at(lv[k]);
      auto v = infer(student, x, spec(positions, levels, ctx, cross_full)).velocity;
      const double dt = lv[k + 1] - lv[k];
      for (std::size_t r = 0; r < x.rows(); ++r)
        if (!frozen[r / P])
          for (std::size_t c = 0; c < C; ++c) x.at(r, c) += dt * v.at(r, c);
    }
    auto levels = levels_at(lv.back());
    auto xv = g.constant(std::move(x));
    auto r = forward(sb, xv, spec(positions, levels, ctx, cross_full));
    return xv - g.constant(level_rows(levels, P, C)) * r.velocity;
  }

  // Flow matching at a sampler level. Ground-truth target: the noised
  // ground-truth chunk. Teacher target: the noised self-generated chunk, with
  // the teacher's clean prediction given the same self-generated context.
  void fm_loss(const std::vector<std::size_t>& positions, const std::vector<bool>& frozen, const Tensor& gt,
               const Tensor& own, bool include_future, const KVContext& ctx, const AttentionMask& cross_full,
               std::mt19937_64& rng) {
    const auto P = student.config().patches;
    const auto C = student.config().channels;
    // Levels the few-step sampler visits; small continuous t would dominate the velocity loss.
    const auto& lv = cfg.schedule.levels;
    const double t = lv[std::uniform_int_distribution<std::size_t>(0, lv.size() - 1)(rng)];
    std::vector<double> levels(positions.size(), t);
    std::vector<std::size_t> scored;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (frozen[i]) levels[i] = 0.0;
      else scored.push_back(i);
    }
    const bool teacher_target = cfg.fm_target == FmTarget::teacher;
    const Tensor& clean = teacher_target ? own : gt;
    auto noise = gaussian(rng, clean.shape());
    auto x = interpolate(clean, noise, levels, P);
    Tensor target;
    if (teacher_target) {
      auto ctx_pos = cache.past_positions();
      if (include_future)
        for (auto f : cache.future_positions()) ctx_pos.push_back(f);
      std::vector<double> data;
      for (auto f : ctx_pos) data.insert(data.end(), latents.at(f).values().begin(), latents.at(f).values().end());
      data.insert(data.end(), x.values().begin(), x.values().end());
      auto all_pos = ctx_pos;
      all_pos.insert(all_pos.end(), positions.begin(), positions.end());
      std::vector<double> all_levels(ctx_pos.size(), 0.0);
      all_levels.insert(all_levels.end(), levels.begin(), levels.end());
      ForwardSpec s;
      s.positions = all_pos;
      s.levels = all_levels;
      s.self_mask = full_mask(all_pos.size(), all_pos.size());
      s.tokens = tokens;
      if (!tokens.empty()) s.cross_mask = cross_rows(cross_tm, all_pos);
      const auto n = all_pos.size();
      auto v = infer(teacher, Tensor({n * P, C}, std::move(data)), s).velocity;
      target = row_range(v, ctx_pos.size() * P, n * P);
    } else {
      target = target_velocity(gt, noise);
    }
    auto r = forward(sb, g.constant(std::move(x)), spec(positions, levels, ctx, cross_full));
    auto tv = g.constant(std::move(target));
    fm_terms.push_back(mse(select_frames(r.velocity, scored, P), select_frames(tv, scored, P)));
  }

  Var teacher_features(Var x, const std::vector<std::size_t>& positions) {
    ForwardSpec s;
    s.positions = positions;
    s.levels.assign(positions.size(), 0.0);
    s.self_mask = full_mask(positions.size(), positions.size());
    s.tokens = tokens;
    if (!tokens.empty()) s.cross_mask = cross_rows(cross_tm, positions);
    return forward(tb, x, s).features;
  }

  void adversarial(Var fake, const Tensor& gt, const std::vector<std::size_t>& positions, const std::vector<bool>& frozen) {
    const auto P = student.config().patches;
    std::vector<std::size_t> keep, keep_pos;
    for (std::size_t i = 0; i < positions.size(); ++i)
      if (!frozen[i]) {
        keep.push_back(i);
        keep_pos.push_back(positions[i]);
      }
    auto ff = teacher_features(select_frames(fake, keep, P), keep_pos);
    fake_features.push_back(ff.value());
    {
      Graph rg(false);
      auto rb = bind(rg, teacher, false);
      ForwardSpec s;
      s.positions = keep_pos;
      s.levels.assign(keep.size(), 0.0);
      s.self_mask = full_mask(keep.size(), keep.size());
      s.tokens = tokens;
      if (!tokens.empty()) s.cross_mask = cross_rows(cross_tm, keep_pos);
      auto real = select_frames(rg.constant_ref(gt), keep, P);
      real_features.push_back(forward(rb, real, s).features.value());
    }
    if (cfg.lambda_adv > 0.0) adv_terms.push_back(scale(mean(log_sigmoid(disc.logits(g, ff, false, 0))), -1.0));
  }

  // t = 0 pass over clean frames to capture their keys and values.
  void commit(const std::vector<std::size_t>& positions, const Tensor& clean, const KVContext& ctx,
              const AttentionMask& cross_full, bool to_future, const std::vector<Lineage>& lineage) {
    const auto P = student.config().patches;
    auto s = spec(positions, std::vector<double>(positions.size(), 0.0), ctx, cross_full);
    s.capture_kv = true;
    auto r = infer(student, clean, s);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      CacheEntry e;
      e.position = positions[i];
      e.lineage = lineage[i];
      latents[positions[i]] = row_range(clean, i * P, (i + 1) * P);
      for (std::size_t l = 0; l < r.keys.size(); ++l) {
        e.keys.push_back(row_range(r.keys[l], i * P, (i + 1) * P));
        e.values.push_back(row_range(r.values[l], i * P, (i + 1) * P));
      }
      if (to_future) cache.set_future(std::move(e));
      else cache.append_past(std::move(e));
    }
  }
};

// Keyframe cross rows: every KF frame reads the row of the KF's first frame.
AttentionMask keyframe_cross(const AttentionMask& full, std::size_t first, std::size_t frames) {
  AttentionMask m = full;
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t c = 0; c < full.cols(); ++c) m.set(first + i, c, full(first, c));
  return m;
}

}  // namespace

FsfRollout fsf_rollout(const Model& student, const Model& teacher, const Discriminator& disc, const TrainConfig& cfg,
                       const WorldDataset::Window& w, std::mt19937_64& rng) {
  const auto& mc = student.config();
  const auto P = mc.patches;
  const auto C = mc.channels;
  const auto chunk = cfg.chunk_size;
  const auto T = cfg.window_frames;
  const auto n_chunks = T / chunk;
  auto gt = as_latent(w.frames, mc);

  Graph g;
  Rollout ro{student, teacher, disc, cfg, g, bind(g, student, true), bind(g, teacher, false), {}, {}, {},
             DualRegionKVCache(cfg.capacity_past, cfg.capacity_future), {}, {}, {}, {}, {}};
  ro.cross_tm = schedule_cross_mask(w.schedule, T, true, &ro.tokens);
  ro.cross_student = schedule_cross_mask(w.schedule, T, cfg.temporal_masking, nullptr);

  // Keyframes are emitted repeatedly: the first at a uniformly random rollout
  // index, later ones a few rollouts after the previous one is consumed, each
  // at a random offset. Fixed timing mirrors the sampler defaults (one keyframe
  // 6 chunks ahead, the next right after consumption).
  const std::size_t last = n_chunks - 1;
  const std::size_t fixed_offset = 6;
  auto draw = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::size_t next_emit = cfg.random_kf_timing ? draw(1, n_chunks - 3) : 1;

  FsfRollout out;
  std::optional<std::size_t> pending;  // keyframe chunk index
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const auto cursor = c * chunk;
    if (pending == c) {
      for (std::size_t i = 0; i < chunk; ++i) ro.cache.consume_future(cursor + i);
      pending.reset();
      next_emit = c + 1 + (cfg.random_kf_timing ? draw(0, 2) : 0);
      continue;
    }
    if (!pending && c >= next_emit && c >= 1 && c + 2 <= last) {
      const auto offset = cfg.random_kf_timing ? draw(2, std::min<std::size_t>(8, last - c)) : fixed_offset;
      if (c + offset <= last) {
        const auto kf_pos = (c + offset) * chunk;
        const auto kf_cross = keyframe_cross(ro.cross_student, kf_pos, chunk);
        assert_self_generated(ro.cache);
        auto ctx = ro.cache.context(false);
        auto positions = iota(kf_pos, kf_pos + chunk);
        std::vector<bool> frozen(chunk, false);
        auto kf_gt = row_range(gt, kf_pos * P, (kf_pos + chunk) * P);
        auto x0 = ro.denoise(positions, frozen, gaussian(rng, {chunk * P, C}), ctx, kf_cross);
        ro.fm_loss(positions, frozen, kf_gt, x0.value(), false, ctx, kf_cross, rng);
        ro.adversarial(x0, kf_gt, positions, frozen);
        ro.commit(positions, x0.value(), ctx, kf_cross, true, std::vector<Lineage>(chunk, Lineage::keyframe));
        if (out.keyframes == 0) out.kf_emitted_at = cursor;
        ++out.keyframes;
        pending = c + offset;
      } else {
        next_emit = n_chunks;
      }
    }
    assert_self_generated(ro.cache);
    for (const auto& e : ro.cache.past()) out.context_lineage.push_back(e.lineage);
    for (const auto& e : ro.cache.future()) out.context_lineage.push_back(e.lineage);
    const bool guided = pending.has_value();
    auto ctx = ro.cache.context(guided);
    auto positions = iota(cursor, cursor + chunk);
    std::vector<bool> frozen(chunk, false);
    std::vector<Lineage> lineage(chunk, Lineage::generated);
    auto chunk_gt = row_range(gt, cursor * P, (cursor + chunk) * P);
    auto init = gaussian(rng, {chunk * P, C});
    if (c == 0) {
      frozen[0] = true;
      lineage[0] = Lineage::conditioning;
      std::copy_n(gt.data(), P * C, init.data());
    }
    auto x0 = ro.denoise(positions, frozen, std::move(init), ctx, ro.cross_student);
    ro.fm_loss(positions, frozen, chunk_gt, x0.value(), guided, ctx, ro.cross_student, rng);
    ro.adversarial(x0, chunk_gt, positions, frozen);
    ro.commit(positions, x0.value(), ctx, ro.cross_student, false, lineage);
  }
  ro.cache.check_invariants();

  auto avg = [&](const std::vector<Var>& terms) {
    Var s = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) s = s + terms[i];
    return scale(s, 1.0 / static_cast<double>(terms.size()));
  };
  auto fm = avg(ro.fm_terms);
  Var loss = scale(fm, cfg.lambda_fm);
  out.fm = fm.value().item();
  if (!ro.adv_terms.empty()) {
    auto adv = avg(ro.adv_terms);
    out.adv = adv.value().item();
    loss = loss + scale(adv, cfg.lambda_adv);
  }
  out.total = loss.value().item();
  if (std::isfinite(out.total)) out.grads = gather_grads(g.backward(loss), 0, student.num_tensors());
  out.fake_features = std::move(ro.fake_features);
  out.real_features = std::move(ro.real_features);
  return out;
}

namespace {

struct DiscStep {
  double loss = 0.0, accuracy = 0.0;
};

DiscStep disc_step(Discriminator& d, AdamW& opt, const std::vector<Tensor>& fake, const std::vector<Tensor>& real,
                   double clip) {
  auto stack = [](const std::vector<Tensor>& parts) {
    std::vector<double> data;
    std::size_t rows = 0, cols = parts.at(0).cols();
    for (const auto& p : parts) {
      data.insert(data.end(), p.values().begin(), p.values().end());
      rows += p.rows();
    }
    return Tensor({rows, cols}, std::move(data));
  };
  Graph g;
  auto rl = d.logits(g, g.constant(stack(real)), true, 0);
  auto fl = d.logits(g, g.constant(stack(fake)), true, 0);
  auto loss = scale(mean(log_sigmoid(rl)) + mean(log_sigmoid(scale(fl, -1.0))), -1.0);
  std::size_t correct = 0, total = 0;
  for (double v : rl.value().values()) correct += v > 0.0, ++total;
  for (double v : fl.value().values()) correct += v < 0.0, ++total;
  auto grads = gather_grads(g.backward(loss), 0, d.params.size());
  clip_gradients(grads, clip);
  opt.step(d.params, grads);
  return {loss.value().item(), static_cast<double>(correct) / static_cast<double>(total)};
}

}  // namespace

bool CollapseMonitor::update(double accuracy) {
  run_ = accuracy > threshold_ ? run_ + 1 : 0;
  if (tripped_ || run_ < patience_) return false;
  tripped_ = true;
  return true;
}

FsfResult fsf_train(const Model& student, const Model& teacher, Discriminator disc, const TrainConfig& config,
                    const WorldDataset& data, TrainLog* log, const ProgressFn& progress) {
  config.validate();
  if (disc.feature_dim() != teacher.config().width) throw DimensionError("discriminator input must match teacher features");
  Model s = student;
  auto rng = substream(config.seed, "fsf.data");
  AdamW opt(config.learning_rate, config.weight_decay);
  AdamW dopt(config.disc_learning_rate);
  const auto n = s.num_tensors();
  CollapseMonitor collapse;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::vector<Tensor> acc(n);
    std::vector<Tensor> fake, real;
    double fm = 0.0, adv = 0.0, total = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      auto w = data.sample(rng, config.window_frames);
      auto ro = fsf_rollout(s, teacher, disc, config, w, rng);
      check_finite(ro.total, Stage::fsf, it, "rollout loss");
      accumulate_into(acc, ro.grads, 1.0 / config.batch_size);
      fm += ro.fm / config.batch_size;
      adv += ro.adv / config.batch_size;
      total += ro.total / config.batch_size;
      fake.insert(fake.end(), ro.fake_features.begin(), ro.fake_features.end());
      real.insert(real.end(), ro.real_features.begin(), ro.real_features.end());
    }
    const double gnorm = clip_gradients(acc, config.grad_clip);
    opt.step(s.params(), acc);

    DiscStep ds;
    if (config.lambda_adv > 0.0) {
      ds = disc_step(disc, dopt, fake, real, config.grad_clip);
      check_finite(ds.loss, Stage::fsf, it, "discriminator loss");
      if (collapse.update(ds.accuracy)) {
        std::string msg = "discriminator collapse: accuracy above 0.99 for 100 consecutive steps (iteration " +
                          std::to_string(it) + ")";
        if (log) log->warnings.push_back(msg);
      }
    }
    if (it % config.log_every == 0 || it + 1 == config.iterations) {
      std::map<std::string, double> m{{"loss", total}, {"fm_loss", fm}, {"grad_norm", gnorm}};
      if (config.lambda_adv > 0.0) {
        m["adv_loss"] = adv;
        m["disc_loss"] = ds.loss;
        m["disc_accuracy"] = ds.accuracy;
      }
      if (it % (config.log_every * 10) == 0 || it + 1 == config.iterations)
        m["drift_probe"] = drift_probe(s, data.spec(), config.seed);
      report(log, progress, it, m);
    }
  }
  return {std::move(s), std::move(disc)};
}

// ---------------------------------------------------------------- probes

Tensor forecast_chunk(const Model& student, const Tensor& frames, const PromptSchedule& schedule, std::size_t cursor,
                      std::size_t offset_chunks, std::size_t chunk_size, std::size_t context_frames,
                      const StepSchedule& steps, bool temporal_masking, std::uint64_t noise_seed) {
  const auto& mc = student.config();
  const auto P = mc.patches;
  const auto C = mc.channels;
  const auto kf = cursor + offset_chunks * chunk_size;
  if (cursor == 0 || kf + chunk_size > frames.rows()) throw std::out_of_range("forecast_chunk: keyframe outside the episode");
  const auto c0 = cursor > context_frames ? cursor - context_frames : 0;
  const auto n_ctx = cursor - c0;
  auto latent = as_latent(frames, mc);

  std::vector<int> tokens;
  auto cross_full = schedule_cross_mask(schedule, frames.rows(), temporal_masking, &tokens);
  std::vector<std::size_t> positions = iota(c0, cursor), cross_idx = positions;
  for (std::size_t i = 0; i < chunk_size; ++i) {
    positions.push_back(kf + i);
    cross_idx.push_back(kf);
  }
  const auto n = positions.size();
  // Context frames attend causally by chunk; keyframe frames see all context and each other.
  AttentionMask mask(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool kf_row = i >= n_ctx, kf_col = j >= n_ctx;
      if (kf_row) mask.set(i, j, true);
      else if (!kf_col) mask.set(i, j, chunk_of(positions[j], chunk_size) <= chunk_of(positions[i], chunk_size));
    }
  auto rng = substream(noise_seed, "forecast", kf);
  auto noise = gaussian(rng, {chunk_size * P, C});
  std::vector<bool> frozen(n, false);
  for (std::size_t i = 0; i < n_ctx; ++i) frozen[i] = true;
  std::vector<double> init(latent.data() + c0 * P * C, latent.data() + cursor * P * C);
  init.insert(init.end(), noise.values().begin(), noise.values().end());
  VelocityFn fn = [&](const Tensor& x, const std::vector<double>& levels) {
    ForwardSpec s;
    s.positions = positions;
    s.levels = levels;
    s.self_mask = mask;
    s.tokens = tokens;
    if (!tokens.empty()) s.cross_mask = cross_rows(cross_full, cross_idx);
    return infer(student, x, s).velocity;
  };
  auto out = few_step_denoise(fn, Tensor({n * P, C}, std::move(init)), steps, P, frozen);
  return row_range(out, n_ctx * P, n * P).reshaped({chunk_size, P * C});
}

Embedder teacher_embedder(const Model& teacher) {
  return [&teacher](const Tensor& frame) {
    const auto P = teacher.config().patches;
    ForwardSpec spec;
    spec.positions = {0};
    spec.levels = {0.0};
    spec.self_mask = bidirectional_mask(1, P);
    spec.cross_mask = AttentionMask(1, 0);
    const auto inf = infer(teacher, frame.reshaped({P, teacher.config().channels}), spec);
    return std::vector<double>(inf.features.values().begin(), inf.features.values().end());
  };
}

}  // namespace kfs

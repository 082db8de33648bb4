#include "kfstream/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "kfstream/random.hpp"

namespace kfs {

using nlohmann::json;

namespace {

template <class T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= k == a;
    if (!ok) throw std::invalid_argument("config: unknown key '" + where + "." + k + "'");
  }
}

json world_json(const WorldParams& w) {
  return {{"state_dim", w.state_dim},     {"num_steps", w.num_steps},   {"num_tasks", w.num_tasks},
          {"steps_per_task", w.steps_per_task}, {"noise_std", w.noise_std}, {"scene_std", w.scene_std},
          {"goal_std", w.goal_std},       {"init_std", w.init_std},     {"rho_min", w.rho_min},
          {"rho_max", w.rho_max},         {"rotation", w.rotation},     {"min_segment", w.min_segment},
          {"global_token_base", w.global_token_base}, {"local_token_base", w.local_token_base}};
}

void world_from(const json& j, WorldParams& w) {
  check_keys(j, "world", {"state_dim", "num_steps", "num_tasks", "steps_per_task", "noise_std", "scene_std", "goal_std",
                          "init_std", "rho_min", "rho_max", "rotation", "min_segment", "global_token_base",
                          "local_token_base"});
  read(j, "state_dim", w.state_dim);
  read(j, "num_steps", w.num_steps);
  read(j, "num_tasks", w.num_tasks);
  read(j, "steps_per_task", w.steps_per_task);
  read(j, "noise_std", w.noise_std);
  read(j, "scene_std", w.scene_std);
  read(j, "goal_std", w.goal_std);
  read(j, "init_std", w.init_std);
  read(j, "rho_min", w.rho_min);
  read(j, "rho_max", w.rho_max);
  read(j, "rotation", w.rotation);
  read(j, "min_segment", w.min_segment);
  read(j, "global_token_base", w.global_token_base);
  read(j, "local_token_base", w.local_token_base);
}

json model_json(const ModelConfig& m) {
  return {{"width", m.width},       {"layers", m.layers},       {"heads", m.heads},
          {"patches", m.patches},   {"vocab", m.vocab},         {"channels", m.channels},
          {"mlp_ratio", m.mlp_ratio}, {"rope_base", m.rope_base}};
}

void model_from(const json& j, ModelConfig& m) {
  check_keys(j, "model", {"width", "layers", "heads", "patches", "vocab", "channels", "mlp_ratio", "rope_base"});
  read(j, "width", m.width);
  read(j, "layers", m.layers);
  read(j, "heads", m.heads);
  read(j, "patches", m.patches);
  read(j, "vocab", m.vocab);
  read(j, "channels", m.channels);
  read(j, "mlp_ratio", m.mlp_ratio);
  read(j, "rope_base", m.rope_base);
}

json train_json(const TrainConfig& t) {
  return {{"iterations", t.iterations},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"window_frames", t.window_frames},
          {"chunk_size", t.chunk_size},
          {"p_block", t.p_block},
          {"max_hidden", t.max_hidden},
          {"lambda_reg", t.lambda_reg},
          {"lambda_cos", t.lambda_cos},
          {"lambda_fm", t.lambda_fm},
          {"lambda_adv", t.lambda_adv},
          {"disc_learning_rate", t.disc_learning_rate},
          {"fm_target", fm_target_name(t.fm_target)},
          {"grad_clip", t.grad_clip},
          {"weight_decay", t.weight_decay},
          {"random_kf_timing", t.random_kf_timing},
          {"capacity_past", t.capacity_past},
          {"capacity_future", t.capacity_future},
          {"schedule", t.schedule.levels},
          {"train_episodes", t.train_episodes},
          {"episode_frames", t.episode_frames},
          {"log_every", t.log_every},
          {"teacher_mixed_fraction", t.teacher_mixed_fraction},
          {"teacher_loss_threshold", t.teacher_loss_threshold}};
}

void train_from(const json& j, const std::string& where, TrainConfig& t) {
  check_keys(j, where,
             {"iterations", "learning_rate", "batch_size", "window_frames", "chunk_size", "p_block", "max_hidden",
              "lambda_reg", "lambda_cos", "lambda_fm", "lambda_adv", "disc_learning_rate", "fm_target", "grad_clip",
              "weight_decay", "random_kf_timing", "capacity_past", "capacity_future", "schedule", "train_episodes",
              "episode_frames", "log_every", "teacher_mixed_fraction", "teacher_loss_threshold"});
  read(j, "iterations", t.iterations);
  read(j, "learning_rate", t.learning_rate);
  read(j, "batch_size", t.batch_size);
  read(j, "window_frames", t.window_frames);
  read(j, "chunk_size", t.chunk_size);
  read(j, "p_block", t.p_block);
  read(j, "max_hidden", t.max_hidden);
  read(j, "lambda_reg", t.lambda_reg);
  read(j, "lambda_cos", t.lambda_cos);
  read(j, "lambda_fm", t.lambda_fm);
  read(j, "lambda_adv", t.lambda_adv);
  read(j, "disc_learning_rate", t.disc_learning_rate);
  if (j.contains("fm_target")) t.fm_target = parse_fm_target(j.at("fm_target").get<std::string>());
  read(j, "grad_clip", t.grad_clip);
  read(j, "weight_decay", t.weight_decay);
  read(j, "random_kf_timing", t.random_kf_timing);
  read(j, "capacity_past", t.capacity_past);
  read(j, "capacity_future", t.capacity_future);
  read(j, "schedule", t.schedule.levels);
  read(j, "train_episodes", t.train_episodes);
  read(j, "episode_frames", t.episode_frames);
  read(j, "log_every", t.log_every);
  read(j, "teacher_mixed_fraction", t.teacher_mixed_fraction);
  read(j, "teacher_loss_threshold", t.teacher_loss_threshold);
}

json sampler_json(const SamplerConfig& s) {
  return {{"chunk_size", s.chunk_size},
          {"kf_period", s.kf_period},
          {"kf_horizon", s.kf_horizon},
          {"total_frames", s.total_frames},
          {"mode", mode_name(s.mode)},
          {"schedule", s.schedule.levels},
          {"capacity_past", s.capacity_past},
          {"capacity_future", s.capacity_future},
          {"temporal_masking", s.temporal_masking},
          {"use_cache", s.use_cache}};
}

void sampler_from(const json& j, SamplerConfig& s) {
  check_keys(j, "sampler", {"chunk_size", "kf_period", "kf_horizon", "total_frames", "mode", "schedule",
                            "capacity_past", "capacity_future", "temporal_masking", "use_cache"});
  read(j, "chunk_size", s.chunk_size);
  read(j, "kf_period", s.kf_period);
  read(j, "kf_horizon", s.kf_horizon);
  read(j, "total_frames", s.total_frames);
  if (j.contains("mode")) s.mode = parse_mode(j.at("mode").get<std::string>());
  read(j, "schedule", s.schedule.levels);
  read(j, "capacity_past", s.capacity_past);
  read(j, "capacity_future", s.capacity_future);
  read(j, "temporal_masking", s.temporal_masking);
  read(j, "use_cache", s.use_cache);
}

json config_json(const RunConfig& c, bool with_runtime) {
  json j = {{"seed", c.seed},
            {"world", world_json(c.world)},
            {"model", model_json(c.model)},
            {"train", {{"teacher", train_json(c.teacher)}, {"pca", train_json(c.pca)}, {"fsf", train_json(c.fsf)}}},
            {"sampler", sampler_json(c.sampler)},
            {"eval",
             {{"adherence_episodes", c.eval_episodes},
              {"drift_episodes", c.drift_episodes},
              {"segments", c.eval_segments},
              {"frames", c.eval_frames},
              {"val_windows", c.val_episodes}}}};
  if (with_runtime) {
    j["workers"] = c.workers;
    j["out"] = c.out;
  }
  return j;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(what + ": " + e.what());
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view name) {
  return splitmix64(splitmix64(run_seed ^ fnv1a(name)));
}

RunConfig RunConfig::parse(const std::string& json_text) {
  const auto j = parse_json(json_text, "config");
  RunConfig c;
  try {
    check_keys(j, "config", {"seed", "workers", "out", "world", "model", "train", "sampler", "eval"});
    read(j, "seed", c.seed);
    read(j, "workers", c.workers);
    read(j, "out", c.out);
    if (j.contains("world")) world_from(j["world"], c.world);
    if (j.contains("model")) model_from(j["model"], c.model);
    if (j.contains("train")) {
      const auto& t = j["train"];
      check_keys(t, "train", {"teacher", "pca", "fsf"});
      if (t.contains("teacher")) train_from(t["teacher"], "train.teacher", c.teacher);
      if (t.contains("pca")) train_from(t["pca"], "train.pca", c.pca);
      if (t.contains("fsf")) train_from(t["fsf"], "train.fsf", c.fsf);
    }
    if (j.contains("sampler")) sampler_from(j["sampler"], c.sampler);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      check_keys(e, "eval", {"adherence_episodes", "drift_episodes", "segments", "frames", "val_windows"});
      read(e, "adherence_episodes", c.eval_episodes);
      read(e, "drift_episodes", c.drift_episodes);
      read(e, "segments", c.eval_segments);
      read(e, "frames", c.eval_frames);
      read(e, "val_windows", c.val_episodes);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.derive_seeds();
  return c;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_text(path)); }

std::string RunConfig::to_json() const { return config_json(*this, true).dump(2); }

void RunConfig::derive_seeds() {
  world.seed = derive_seed(seed, "world");
  teacher.seed = derive_seed(seed, "train.teacher");
  pca.seed = derive_seed(seed, "train.pca");
  fsf.seed = derive_seed(seed, "train.fsf");
  sampler.seed = derive_seed(seed, "sampler");
}

void RunConfig::validate() const {
  model.validate();
  if (world.state_dim != model.patches * model.channels) {
    throw std::invalid_argument("config: world.state_dim must equal model.patches * model.channels");
  }
  if (world.local_token_base + static_cast<int>(world.num_steps) > static_cast<int>(model.vocab) ||
      world.global_token_base + static_cast<int>(world.num_tasks) > static_cast<int>(model.vocab)) {
    throw std::invalid_argument("config: world tokens exceed the model vocabulary");
  }
  teacher.validate();
  pca.validate();
  fsf.validate();
  sampler.validate();
  if (teacher.stage != Stage::teacher || pca.stage != Stage::pca || fsf.stage != Stage::fsf) {
    throw std::logic_error("config: stage configs out of place");
  }
  if (eval_episodes == 0 || drift_episodes == 0 || eval_segments == 0 || val_episodes == 0) {
    throw std::invalid_argument("config: evaluation sizes must be positive");
  }
  if (eval_frames < 30) throw std::invalid_argument("config: eval.frames must be at least 30 for drift reports");
  if (eval_frames < eval_segments * 2) throw std::invalid_argument("config: eval.frames too short for the segments");
  if (workers == 0) throw std::invalid_argument("config: workers must be positive");
}

std::string RunConfig::hash() const { return hex(fnv1a(config_json(*this, false).dump())); }

std::string RunConfig::training_hash() const {
  auto j = config_json(*this, false);
  j.erase("sampler");
  j.erase("eval");
  return hex(fnv1a(j.dump()));
}

const TrainConfig& RunConfig::stage_config(Stage s) const {
  switch (s) {
    case Stage::teacher: return teacher;
    case Stage::pca: return pca;
    case Stage::fsf: return fsf;
  }
  throw std::logic_error("unknown stage");
}

// ---------------------------------------------------------------- variants

std::string Variant::name() const {
  if (stage == Stage::teacher) return "teacher";
  std::string n = causal ? "causal" : stage_name(stage);
  return n + (temporal_masking ? "_tm" : "_notm");
}

Variant Variant::parse(const std::string& name) {
  if (name == "teacher") return {};
  const auto us = name.rfind('_');
  if (us == std::string::npos) throw std::invalid_argument("unknown variant '" + name + "'");
  const auto head = name.substr(0, us), tail = name.substr(us + 1);
  if (tail != "tm" && tail != "notm") throw std::invalid_argument("unknown variant '" + name + "'");
  Variant v;
  v.temporal_masking = tail == "tm";
  if (head == "causal") {
    v.stage = Stage::pca;
    v.causal = true;
  } else if (head == "pca" || head == "fsf") {
    v.stage = parse_stage(head);
  } else {
    throw std::invalid_argument("unknown variant '" + name + "'");
  }
  return v;
}

std::string checkpoint_path(const RunConfig& cfg, const Variant& v) {
  return (std::filesystem::path(cfg.out) / (v.name() + ".ckpt")).string();
}

namespace {

std::optional<Model> load_matching(const RunConfig& cfg, const Variant& v) {
  const auto path = checkpoint_path(cfg, v);
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::map<std::string, std::string> extra;
  auto m = Model::load_file(path, &extra);
  if (extra["training_hash"] != cfg.training_hash()) return std::nullopt;
  return m;
}

Model require(const RunConfig& cfg, const Variant& needed, const Variant& for_variant) {
  auto m = load_matching(cfg, needed);
  if (!m) {
    throw PrerequisiteError("training " + for_variant.name() + " needs " + checkpoint_path(cfg, needed) +
                            " trained under this config (training hash " + cfg.training_hash() +
                            "); run `kfstream train --stage " + needed.name() + "` with the same config and seed first");
  }
  return std::move(*m);
}

WorldDataset training_data(const RunConfig& cfg, const WorldSpec& spec, const TrainConfig& t) {
  return WorldDataset(spec, t.train_episodes, t.episode_frames, derive_seed(cfg.seed, "data"));
}

}  // namespace

std::optional<Model> load_variant(const RunConfig& cfg, const Variant& v) { return load_matching(cfg, v); }

TrainOutcome train_variant(const RunConfig& cfg, const Variant& v, const ProgressFn& progress) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = WorldSpec::generate(cfg.world);
  TrainOutcome out;
  out.path = checkpoint_path(cfg, v);
  std::filesystem::create_directories(cfg.out);
  std::map<std::string, std::string> extra{{"training_hash", cfg.training_hash()},
                                           {"config_hash", cfg.hash()},
                                           {"variant", v.name()},
                                           {"seed", std::to_string(cfg.seed)}};
  if (v.stage == Stage::teacher) {
    const auto data = training_data(cfg, spec, cfg.teacher);
    out.model = train_teacher(cfg.teacher, data, cfg.model, &out.log, progress);
    WorldDataset val(spec, std::max<std::size_t>(1, cfg.val_episodes), cfg.teacher.episode_frames,
                     derive_seed(cfg.seed, "data"), true);
    out.validation_loss =
        teacher_validation_loss(out.model, val, cfg.val_episodes, cfg.teacher.window_frames, derive_seed(cfg.seed, "val"));
    out.log.add(cfg.teacher.iterations, "validation_loss", out.validation_loss);
    if (!(out.validation_loss <= cfg.teacher.teacher_loss_threshold)) {
      throw NumericalError("teacher validation loss " + std::to_string(out.validation_loss) + " above threshold " +
                           std::to_string(cfg.teacher.teacher_loss_threshold));
    }
  } else if (v.stage == Stage::pca) {
    auto teacher = require(cfg, Variant{}, v);
    auto tc = cfg.pca;
    tc.temporal_masking = v.temporal_masking;
    if (v.causal) tc.p_block = 0.0;
    const auto data = training_data(cfg, spec, tc);
    out.model = pca_distill(teacher, tc, data, &out.log, progress);
  } else {
    if (v.causal) throw std::invalid_argument("F-SF is trained on top of a PCA student, not a causal one");
    auto teacher = require(cfg, Variant{}, v);
    auto student = require(cfg, Variant{Stage::pca, false, v.temporal_masking}, v);
    auto tc = cfg.fsf;
    tc.temporal_masking = v.temporal_masking;
    const auto data = training_data(cfg, spec, tc);
    auto rng = substream(cfg.fsf.seed, "disc");
    auto disc = Discriminator::init(teacher.config().width, 64, rng);
    out.model = fsf_train(student, teacher, disc, tc, data, &out.log, progress).student;
  }
  out.model.save_file(out.path, extra);
  out.log.write_csv((std::filesystem::path(cfg.out) / (v.name() + "_train.csv")).string());
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

TrainOutcome ensure_variant(const RunConfig& cfg, const Variant& v, bool train_prerequisites,
                            const ProgressFn& progress) {
  if (auto m = load_matching(cfg, v)) {
    TrainOutcome out;
    out.model = std::move(*m);
    out.path = checkpoint_path(cfg, v);
    out.reused = true;
    return out;
  }
  if (train_prerequisites && v.stage != Stage::teacher) {
    ensure_variant(cfg, Variant{}, true, progress);
    if (v.stage == Stage::fsf) ensure_variant(cfg, Variant{Stage::pca, false, v.temporal_masking}, true, progress);
  }
  return train_variant(cfg, v, progress);
}

// ---------------------------------------------------------------- evaluation

std::vector<Episode> adherence_episodes(const RunConfig& cfg, const WorldSpec& spec) {
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < cfg.eval_episodes; ++i)
    eps.push_back(episode_for_seed(spec, split_seed(0, i, true), cfg.eval_frames, cfg.eval_segments));
  return eps;
}

std::vector<Episode> drift_episodes(const RunConfig& cfg, const WorldSpec& spec) {
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < cfg.drift_episodes; ++i)
    eps.push_back(episode_for_seed(spec, split_seed(0, i, true), cfg.eval_frames, 1));
  return eps;
}

Tensor conditioning_frame(const Episode& ep, const ModelConfig& mc) {
  const auto d = ep.frames.cols();
  return Tensor({mc.patches, mc.channels}, std::vector<double>(ep.frames.data(), ep.frames.data() + d));
}

EvalMetrics evaluate(const RunConfig& cfg, const WorldSpec& spec, const Model& model, const SamplerConfig& sampler,
                     const Embedder& embed) {
  EvalMetrics m;
  const auto adh = adherence_episodes(cfg, spec);
  const auto dri = drift_episodes(cfg, spec);
  std::vector<AdherenceResult> adh_results(adh.size());
  m.drift_runs.resize(dri.size());
  m.raw_ratio_runs.resize(dri.size());
  std::vector<double> smooth(dri.size());
  const auto raw = raw_state_embedder();
  auto run = [&](const Episode& ep, std::size_t i) {
    auto sc = sampler;
    sc.total_frames = ep.num_frames();
    sc.seed = splitmix64(sampler.seed + i);
    return stream(model, sc, conditioning_frame(ep, model.config()), ep.schedule).video.reshaped(ep.frames.shape());
  };
  parallel_for(adh.size() + dri.size(), cfg.workers, [&](std::size_t k) {
    if (k < adh.size()) {
      adh_results[k] = segment_adherence(spec, run(adh[k], k), adh[k].schedule);
    } else {
      const auto i = k - adh.size();
      const auto video = run(dri[i], i);
      m.drift_runs[i] = drift_report(video, embed);
      m.raw_ratio_runs[i] = drift_report(video, raw).ratio;
      smooth[i] = smoothness(video, embed);
    }
  });
  std::size_t matched = 0;
  for (const auto& r : adh_results) {
    matched += r.matched;
    m.adherence_scored += r.scored;
    m.adherence_runs.push_back(r.fraction);
  }
  m.adherence = m.adherence_scored ? static_cast<double>(matched) / static_cast<double>(m.adherence_scored) : 0.0;
  const double n = static_cast<double>(dri.size());
  for (std::size_t i = 0; i < dri.size(); ++i) {
    m.drift_average += m.drift_runs[i].average / n;
    m.drift_max += m.drift_runs[i].max / n;
    m.drift_ratio += m.drift_runs[i].ratio / n;
    m.drift_acceleration += m.drift_runs[i].acceleration / n;
    m.raw_drift_ratio += m.raw_ratio_runs[i] / n;
    m.smoothness += smooth[i] / n;
  }
  return m;
}

std::vector<AblationRow> ablation_grid() {
  auto row = [](std::string label, Variant v, SampleMode mode) {
    AblationRow r;
    r.label = std::move(label);
    r.variant = v;
    r.mode = mode;
    return r;
  };
  return {row("base", {Stage::pca, true, false}, SampleMode::plain_ar),
          row("+PCA", {Stage::pca, false, false}, SampleMode::future_guided),
          row("+PCA+F-SF", {Stage::fsf, false, false}, SampleMode::future_guided),
          row("+TM", {Stage::pca, true, true}, SampleMode::plain_ar),
          row("+PCA+TM", {Stage::pca, false, true}, SampleMode::future_guided),
          row("all", {Stage::fsf, false, true}, SampleMode::future_guided)};
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, bool train_missing, const ProgressFn& progress) {
  cfg.validate();
  const auto spec = WorldSpec::generate(cfg.world);
  auto rows = ablation_grid();
  std::optional<Model> teacher =
      train_missing ? std::optional<Model>(ensure_variant(cfg, Variant{}, true, progress).model) : load_variant(cfg, {});
  const Embedder embed = teacher ? teacher_embedder(*teacher) : raw_state_embedder();
  for (auto& r : rows) {
    std::optional<Model> m =
        train_missing ? std::optional<Model>(ensure_variant(cfg, r.variant, true, progress).model) : load_variant(cfg, r.variant);
    if (!m) continue;
    auto sc = cfg.sampler;
    sc.mode = r.mode;
    sc.temporal_masking = r.variant.temporal_masking;
    r.metrics = evaluate(cfg, spec, *m, sc, embed);
    r.present = true;
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows, const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "row,variant,mode,present,adherence,drift_average,drift_max,drift_ratio,drift_acceleration,raw_drift_ratio,"
         "smoothness,config_hash\n";
  out.precision(8);
  for (const auto& r : rows) {
    out << r.label << ',' << r.variant.name() << ',' << mode_name(r.mode) << ',' << (r.present ? 1 : 0);
    if (r.present) {
      const auto& m = r.metrics;
      out << ',' << m.adherence << ',' << m.drift_average << ',' << m.drift_max << ',' << m.drift_ratio << ','
          << m.drift_acceleration << ',' << m.raw_drift_ratio << ',' << m.smoothness;
    } else {
      out << ",,,,,,,";
    }
    out << ',' << config_hash << '\n';
  }
}

std::vector<BenchRow> bench(const Model& model, const SamplerConfig& base, const Tensor& frame0,
                            const PromptSchedule& schedule, const std::vector<std::size_t>& frame_counts,
                            std::size_t repeats) {
  std::vector<BenchRow> rows;
  for (auto T : frame_counts) {
    PromptSchedule s = schedule;
    if (s.num_frames() < T) throw std::invalid_argument("bench: schedule shorter than " + std::to_string(T) + " frames");
    // Truncate the schedule to T frames.
    std::erase_if(s.segments, [&](const auto& seg) { return seg.frame_start >= T; });
    s.segments.back().frame_end = T;
    for (bool cached : {true, false}) {
      auto sc = base;
      sc.total_frames = T;
      sc.use_cache = cached;
      BenchRow row;
      row.frames = T;
      row.cached = cached;
      row.seconds = 1e300;
      for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        auto res = stream(model, sc, frame0, s);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (sec < row.seconds) {
          row.seconds = sec;
          row.chunks_per_second = static_cast<double>(res.stats.chunks + res.stats.consumed) / sec;
          row.first_chunk_seconds = res.stats.first_chunk_seconds;
        }
      }
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------- files

PromptSchedule read_schedule(const std::string& path) {
  const auto j = parse_json(read_text(path), path);
  PromptSchedule s;
  try {
    s.global_tokens = j.at("global").get<std::vector<int>>();
    for (const auto& seg : j.at("segments")) {
      s.segments.push_back({seg.at("start").get<std::size_t>(), seg.at("end").get<std::size_t>(),
                            seg.at("tokens").get<std::vector<int>>()});
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return s;
}

std::vector<PromptUpdate> read_updates(const std::string& path) {
  const auto j = parse_json(read_text(path), path);
  std::vector<PromptUpdate> out;
  try {
    for (const auto& u : j) {
      out.push_back({u.at("effective_from_frame").get<std::size_t>(), u.at("segment").get<std::size_t>(),
                     u.at("tokens").get<std::vector<int>>()});
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return out;
}

}  // namespace kfs

// kfstream command line: train, stream, ablate, bench, eval.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "kfstream/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kfs;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kNumerical = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : RunConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.out) cfg.out = *g.out;
  if (g.workers) cfg.workers = *g.workers;
  cfg.derive_seeds();
  cfg.validate();
  fs::create_directories(cfg.out);
  std::ofstream(fs::path(cfg.out) / "config.json") << cfg.to_json() << '\n';
  return cfg;
}

std::string run_id(const std::string& name, const RunConfig& cfg) { return name + "-" + cfg.hash().substr(0, 8); }

class MetricsCsv {
 public:
  explicit MetricsCsv(const fs::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out_.precision(10);
    out_ << "run_id,metric,value\n";
  }
  void row(const std::string& id, const std::string& metric, double v) { out_ << id << ',' << metric << ',' << v << '\n'; }

 private:
  std::ofstream out_;
};

void write_metrics(MetricsCsv& csv, const std::string& id, const EvalMetrics& m) {
  csv.row(id, "adherence", m.adherence);
  csv.row(id, "adherence_segments", static_cast<double>(m.adherence_scored));
  csv.row(id, "drift_average", m.drift_average);
  csv.row(id, "drift_max", m.drift_max);
  csv.row(id, "drift_ratio", m.drift_ratio);
  csv.row(id, "drift_acceleration", m.drift_acceleration);
  csv.row(id, "raw_drift_ratio", m.raw_drift_ratio);
  csv.row(id, "smoothness", m.smoothness);
}

Embedder embedder_for(const std::optional<Model>& teacher) {
  return teacher ? teacher_embedder(*teacher) : raw_state_embedder();
}

std::optional<Model> teacher_near(const std::string& checkpoint, const std::string& explicit_path) {
  fs::path p = explicit_path.empty() ? fs::path(checkpoint).parent_path() / "teacher.ckpt" : fs::path(explicit_path);
  if (!fs::exists(p)) {
    if (!explicit_path.empty()) throw std::invalid_argument("teacher checkpoint " + p.string() + " not found");
    std::cerr << "note: no teacher checkpoint next to " << checkpoint << ", drift uses raw states\n";
    return std::nullopt;
  }
  return Model::load_file(p.string());
}

Model load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("checkpoint " + path + " not found; train it with `kfstream train`");
  return Model::load_file(path);
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string stage = "teacher";
  std::string tm = "on";
  std::optional<std::size_t> iterations;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  auto cfg = resolve(g);
  Variant v = a.stage == "causal" ? Variant{Stage::pca, true, a.tm == "on"} : Variant{parse_stage(a.stage), false, a.tm == "on"};
  if (a.iterations) {
    cfg.teacher.iterations = cfg.pca.iterations = cfg.fsf.iterations = *a.iterations;
    cfg.validate();
  }
  const std::size_t total = cfg.stage_config(v.stage).iterations;
  auto out = train_variant(cfg, v, [&](std::size_t it, const std::map<std::string, double>& m) {
    std::cerr << v.name() << " " << it + 1 << "/" << total;
    for (const auto& [k, x] : m) std::cerr << " " << k << "=" << x;
    std::cerr << '\n';
  });
  for (const auto& w : out.log.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "trained " << v.name() << " -> " << out.path << " checksum " << std::hex << out.model.checksum()
            << std::dec << " config " << cfg.hash() << " (" << out.seconds << " s)";
  if (v.stage == Stage::teacher) std::cout << " validation_loss " << out.validation_loss;
  std::cout << '\n';
  return kOk;
}

// ---------------------------------------------------------------- stream

struct StreamArgs {
  std::string checkpoint;
  std::string teacher;
  std::string schedule;
  std::string updates;
  std::size_t episode = 0;
  std::optional<std::size_t> segments;
  std::optional<std::string> mode;
  std::optional<std::size_t> kf_period;
  std::optional<std::size_t> kf_horizon;
  std::optional<std::string> tm;
  bool sweep = false;
};

void write_events(const fs::path& path, const std::vector<StreamEvent>& events) {
  std::ofstream out(path);
  for (const auto& e : events) out << e.to_json() << '\n';
}

int cmd_stream(const Globals& g, const StreamArgs& a) {
  auto cfg = resolve(g);
  const auto model = load_checkpoint(a.checkpoint);
  const auto teacher = teacher_near(a.checkpoint, a.teacher);
  const auto embed = embedder_for(teacher);
  const auto spec = WorldSpec::generate(cfg.world);
  const auto ep = episode_for_seed(spec, split_seed(0, a.episode, true), cfg.eval_frames,
                                   a.segments.value_or(cfg.eval_segments));
  PromptSchedule schedule = a.schedule.empty() ? ep.schedule : read_schedule(a.schedule);
  std::vector<PromptUpdate> updates = a.updates.empty() ? std::vector<PromptUpdate>{} : read_updates(a.updates);

  auto sc = cfg.sampler;
  if (a.mode) sc.mode = parse_mode(*a.mode);
  if (a.kf_period) sc.kf_period = *a.kf_period;
  if (a.kf_horizon) sc.kf_horizon = *a.kf_horizon;
  if (a.tm) sc.temporal_masking = *a.tm == "on";
  sc.total_frames = schedule.num_frames();
  sc.validate();
  const auto frame0 = conditioning_frame(ep, model.config());
  const fs::path out(cfg.out);
  const auto id = run_id("stream", cfg);

  Stream s(model, sc, frame0, schedule, updates);
  s.run();
  const auto video = s.video().reshaped({sc.total_frames, model.config().patches * model.config().channels});

  Episode result;
  result.frames = video;
  result.schedule = s.prompts().schedule();
  result.task = ep.task;
  result.seed = ep.seed;
  result.scene = ep.scene;
  for (const auto& seg : result.schedule.segments) {
    int step = -1;
    for (int t : seg.tokens)
      if (spec.step_of_token(t) >= 0) step = spec.step_of_token(t);
    for (auto f = seg.frame_start; f < seg.frame_end; ++f) result.labels.push_back(step);
    result.segment_steps.push_back(step);
  }
  write_episode((out / "video.episode").string(), spec, result);
  write_events(out / "events.jsonl", s.events());
  render_projection_png((out / "projection.png").string(), video, result.labels);

  MetricsCsv csv(out / "metrics.csv");
  const auto adh = segment_adherence(spec, video, result.schedule);
  csv.row(id, "adherence", adh.fraction);
  csv.row(id, "smoothness", smoothness(video, embed));
  if (video.rows() >= 30) {
    const auto d = drift_report(video, embed);
    csv.row(id, "drift_average", d.average);
    csv.row(id, "drift_max", d.max);
    csv.row(id, "drift_ratio", d.ratio);
    csv.row(id, "drift_acceleration", d.acceleration);
    std::ofstream curve(out / "drift_curve.csv");
    curve << "frame,distance\n";
    for (std::size_t i = 0; i < d.curve.size(); ++i) curve << i * 10 << ',' << d.curve[i] << '\n';
  }
  const auto& st = s.stats();
  csv.row(id, "keyframes", static_cast<double>(st.keyframes));
  csv.row(id, "repredicted", static_cast<double>(st.repredicted));
  csv.row(id, "first_chunk_seconds", st.first_chunk_seconds);
  std::size_t errors = 0;
  for (const auto& e : s.events()) errors += e.type == "error";
  csv.row(id, "error_events", static_cast<double>(errors));

  if (a.sweep) {
    std::ofstream sweep(out / "drift_sweep.csv");
    sweep << "run_id,horizon,frame,distance\n";
    struct Setting {
      const char* label;
      std::size_t period, horizon;
    };
    for (auto [label, period, horizon] : {Setting{"none", 0, 18}, Setting{"18", 6, 18}, Setting{"9", 3, 9}}) {
      auto c = sc;
      c.mode = SampleMode::future_guided;
      c.kf_period = period;
      c.kf_horizon = horizon;
      auto r = stream(model, c, frame0, schedule);
      const auto d = drift_report(r.video.reshaped(video.shape()), embed);
      for (std::size_t i = 0; i < d.curve.size(); ++i) sweep << id << ',' << label << ',' << i * 10 << ',' << d.curve[i] << '\n';
      csv.row(id, std::string("sweep_drift_average_") + label, d.average);
    }
  }
  std::cout << "streamed " << sc.total_frames << " frames (" << mode_name(sc.mode) << ") -> " << out.string()
            << "; events " << s.events().size() << ", errors " << errors << ", adherence " << adh.fraction << '\n';
  return kOk;
}

// ---------------------------------------------------------------- ablate / eval / bench

int cmd_ablate(const Globals& g, bool train_missing) {
  auto cfg = resolve(g);
  auto rows = run_ablation(cfg, train_missing, [](std::size_t it, const std::map<std::string, double>&) {
    if (it % 500 == 0) std::cerr << "." << std::flush;
  });
  const auto path = fs::path(cfg.out) / "ablation.csv";
  write_ablation_csv(path.string(), rows, cfg.hash());
  std::printf("%-10s %-10s %-14s %9s %9s %9s %9s\n", "row", "variant", "mode", "adherence", "drift_avg", "drift_rt",
              "smooth");
  for (const auto& r : rows) {
    if (!r.present) {
      std::printf("%-10s %-10s %-14s   (absent: %s missing)\n", r.label.c_str(), r.variant.name().c_str(),
                  mode_name(r.mode), checkpoint_path(cfg, r.variant).c_str());
      continue;
    }
    const auto& m = r.metrics;
    std::printf("%-10s %-10s %-14s %9.3f %9.4f %9.4f %9.4f\n", r.label.c_str(), r.variant.name().c_str(),
                mode_name(r.mode), m.adherence, m.drift_average, m.drift_ratio, m.smoothness);
  }
  std::cout << "wrote " << path.string() << '\n';
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& teacher_path,
             const std::optional<std::string>& mode, const std::optional<std::string>& tm) {
  auto cfg = resolve(g);
  const auto model = load_checkpoint(checkpoint);
  const auto teacher = teacher_near(checkpoint, teacher_path);
  auto sc = cfg.sampler;
  if (mode) sc.mode = parse_mode(*mode);
  if (tm) sc.temporal_masking = *tm == "on";
  const auto spec = WorldSpec::generate(cfg.world);
  const auto m = evaluate(cfg, spec, model, sc, embedder_for(teacher));
  MetricsCsv csv(fs::path(cfg.out) / "eval.csv");
  const auto id = run_id(fs::path(checkpoint).stem().string(), cfg);
  write_metrics(csv, id, m);
  std::cout << id << " adherence " << m.adherence << " drift_average " << m.drift_average << " drift_ratio "
            << m.drift_ratio << " smoothness " << m.smoothness << '\n';
  return kOk;
}

int cmd_bench(const Globals& g, const std::string& checkpoint, const std::vector<std::size_t>& frames,
              std::size_t repeats) {
  auto cfg = resolve(g);
  const auto model = load_checkpoint(checkpoint);
  const auto spec = WorldSpec::generate(cfg.world);
  const auto longest = *std::max_element(frames.begin(), frames.end());
  auto ep_cfg = cfg;
  ep_cfg.eval_frames = longest;
  const auto ep = episode_for_seed(spec, split_seed(0, 0, true), longest, cfg.eval_segments);
  const auto rows = bench(model, cfg.sampler, conditioning_frame(ep, model.config()), ep.schedule, frames, repeats);
  std::ofstream out(fs::path(cfg.out) / "bench.csv");
  out << "run_id,frames,path,seconds,chunks_per_second,first_chunk_seconds\n";
  const auto id = run_id("bench", cfg);
  for (const auto& r : rows) {
    out << id << ',' << r.frames << ',' << (r.cached ? "cached" : "dense") << ',' << r.seconds << ','
        << r.chunks_per_second << ',' << r.first_chunk_seconds << '\n';
    std::printf("T=%zu %-6s %.4f s  %.1f chunks/s  first chunk %.4f s\n", r.frames, r.cached ? "cached" : "dense",
                r.seconds, r.chunks_per_second, r.first_chunk_seconds);
  }
  for (std::size_t i = 0; i + 1 < rows.size(); i += 2)
    std::printf("T=%zu speedup %.2fx\n", rows[i].frames, rows[i + 1].seconds / rows[i].seconds);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kfstream: future-guided streaming generation on a procedural world"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "run seed (all randomness derives from it)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--workers", g.workers, "worker threads for episode-parallel evaluation")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train one stage and write its checkpoint");
  train->add_option("--stage", ta.stage, "teacher | pca | fsf | causal")
      ->check(CLI::IsMember({"teacher", "pca", "fsf", "causal"}));
  train->add_option("--tm", ta.tm, "temporal masking for student stages")->check(CLI::IsMember({"on", "off"}));
  train->add_option("--iterations", ta.iterations, "override the stage's iteration count")->check(CLI::PositiveNumber);

  StreamArgs sa;
  auto* st = app.add_subcommand("stream", "stream one episode and write video, events and metrics");
  st->add_option("--checkpoint", sa.checkpoint, "student checkpoint")->required();
  st->add_option("--teacher", sa.teacher, "teacher checkpoint for the drift embedding");
  st->add_option("--schedule", sa.schedule, "prompt schedule JSON")->check(CLI::ExistingFile);
  st->add_option("--updates", sa.updates, "prompt update JSON list")->check(CLI::ExistingFile);
  st->add_option("--episode", sa.episode, "validation episode index for the conditioning frame");
  st->add_option("--segments", sa.segments, "segments of the generated episode schedule");
  st->add_option("--mode", sa.mode, "plain_ar | future_guided")->check(CLI::IsMember({"plain_ar", "future_guided"}));
  st->add_option("--kf-period", sa.kf_period, "rollouts between keyframes (0 disables)");
  st->add_option("--kf-horizon", sa.kf_horizon, "keyframe distance from the cursor in frames");
  st->add_option("--tm", sa.tm, "temporal masking")->check(CLI::IsMember({"on", "off"}));
  st->add_flag("--sweep", sa.sweep, "also run keyframe horizons none/18/9 and write drift_sweep.csv");

  bool train_missing = false;
  auto* ab = app.add_subcommand("ablate", "evaluate the six-row ablation grid");
  ab->add_flag("--train-missing", train_missing, "train variants whose checkpoints are missing");

  std::string ev_ckpt, ev_teacher;
  std::optional<std::string> ev_mode, ev_tm;
  auto* ev = app.add_subcommand("eval", "adherence, drift and smoothness of one checkpoint");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint")->required();
  ev->add_option("--teacher", ev_teacher, "teacher checkpoint for the drift embedding");
  ev->add_option("--mode", ev_mode, "plain_ar | future_guided")->check(CLI::IsMember({"plain_ar", "future_guided"}));
  ev->add_option("--tm", ev_tm, "temporal masking")->check(CLI::IsMember({"on", "off"}));

  std::string bench_ckpt;
  std::vector<std::size_t> bench_frames{24, 48};
  std::size_t repeats = 3;
  auto* be = app.add_subcommand("bench", "cached vs dense streaming throughput");
  be->add_option("--checkpoint", bench_ckpt, "checkpoint")->required();
  be->add_option("--frames", bench_frames, "stream lengths")->delimiter(',');
  be->add_option("--repeats", repeats, "timing repeats (best is kept)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(g, ta);
    if (*st) return cmd_stream(g, sa);
    if (*ab) return cmd_ablate(g, train_missing);
    if (*ev) return cmd_eval(g, ev_ckpt, ev_teacher, ev_mode, ev_tm);
    if (*be) return cmd_bench(g, bench_ckpt, bench_frames, repeats);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "kfstream/random.hpp"
#include "kfstream/training.hpp"
#include "support.hpp"

using namespace kfs;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.layers = 1;
  c.mlp_ratio = 2;
  return c;
}

WorldDataset tiny_data(std::size_t episodes = 16) {
  WorldParams p;
  return WorldDataset(WorldSpec::generate(p), episodes, 48, 3);
}

TrainConfig tiny_train(Stage stage, std::size_t iterations) {
  TrainConfig c;
  c.stage = stage;
  c.iterations = iterations;
  c.batch_size = 2;
  c.window_frames = 18;
  c.log_every = 1;
  return c;
}

Model random_student(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Model::init(tiny_config(), rng, {.scale = 1.0, .zero_output = false});
}

double l2(const Tensor& t) { return l2_norm(t); }

}  // namespace

TEST_CASE("stage recipes and config validation") {
  auto t = TrainConfig::for_stage(Stage::teacher);
  CHECK(t.iterations == 8000);
  CHECK(t.learning_rate == 5e-3);
  CHECK(t.grad_clip == 5.0);
  auto p = TrainConfig::for_stage(Stage::pca);
  CHECK(p.iterations == 2000);
  CHECK(p.learning_rate == 3e-4);
  CHECK(p.p_block == 0.5);
  auto f = TrainConfig::for_stage(Stage::fsf);
  CHECK(f.iterations == 500);
  CHECK(f.learning_rate == 3e-5);
  CHECK(f.fm_target == FmTarget::ground_truth);
  for (auto s : {Stage::teacher, Stage::pca, Stage::fsf}) {
    CHECK_NOTHROW(TrainConfig::for_stage(s).validate());
    CHECK(parse_stage(stage_name(s)) == s);
  }
  CHECK_THROWS(parse_stage("student"));
  CHECK(parse_fm_target("teacher") == FmTarget::teacher);

  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS(bad([](TrainConfig& c) { c.iterations = 0; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.window_frames = 31; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.window_frames = 3; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.p_block = 1.5; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.lambda_cos = -1; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.capacity_future = 2; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.episode_frames = 24; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) {
                 c.stage = Stage::fsf;
                 c.window_frames = 9;
               }).validate());
}

TEST_CASE("AdamW first step moves each coordinate by the learning rate") {
  std::vector<Tensor> params{Tensor({2}, {1.0, -2.0}), Tensor({1}, {5.0})};
  std::vector<Tensor> grads{Tensor({2}, {0.3, -40.0}), Tensor{}};
  AdamW opt(0.01);
  opt.step(params, grads);
  // Bias-corrected m / sqrt(v) equals sign(g) on the first step.
  CHECK(params[0][0] == doctest::Approx(0.99).epsilon(1e-7));
  CHECK(params[0][1] == doctest::Approx(-1.99).epsilon(1e-7));
  CHECK(params[1][0] == 5.0);

  AdamW decay(0.1, 0.5);
  std::vector<Tensor> q{Tensor({1}, {2.0})};
  decay.step(q, {Tensor{}});
  CHECK(q[0][0] == doctest::Approx(2.0 * (1 - 0.05)));
  CHECK_THROWS_AS(decay.step(q, {}), DimensionError);
  CHECK_THROWS_AS(decay.step(q, {Tensor({2}, {1, 1})}), DimensionError);
}

TEST_CASE("gradient clipping and gathering") {
  std::vector<Tensor> g{Tensor({2}, {3.0, 0.0}), Tensor({1}, {4.0}), Tensor{}};
  CHECK(clip_gradients(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0);
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
  std::map<ParamId, Tensor> m{{3, Tensor({1}, {1.0})}, {5, Tensor({1}, {2.0})}, {9, Tensor({1}, {3.0})}};
  auto out = gather_grads(m, 3, 4);
  REQUIRE(out.size() == 4);
  CHECK(out[0][0] == 1.0);
  CHECK(out[1].size() == 0);
  CHECK(out[2][0] == 2.0);
}

TEST_CASE("schedule cropping and cross masks") {
  PromptSchedule s;
  s.global_tokens = {0};
  s.segments = {{0, 10, {16}}, {10, 20, {17, 18}}, {20, 30, {19}}};
  auto c = crop_schedule(s, 8, 14);
  REQUIRE(c.segments.size() == 3);
  CHECK(c.segments[0] == PromptSchedule::Segment{0, 2, {16}});
  CHECK(c.segments[1] == PromptSchedule::Segment{2, 12, {17, 18}});
  CHECK(c.segments[2] == PromptSchedule::Segment{12, 14, {19}});
  CHECK(crop_schedule(s, 12, 5).segments.size() == 1);
  CHECK_THROWS_AS(crop_schedule(s, 20, 11), std::out_of_range);

  std::vector<int> tokens;
  auto tm = schedule_cross_mask(c, 14, true, &tokens);
  CHECK(tokens == std::vector<int>{0, 16, 17, 18, 19});
  CHECK(tm.rows() == 14);
  CHECK(tm.cols() == 5);
  CHECK(tm(0, 0));
  CHECK(tm(0, 1));
  CHECK_FALSE(tm(0, 2));
  CHECK(tm(5, 2));
  CHECK(tm(5, 3));
  CHECK_FALSE(tm(5, 4));
  auto all = schedule_cross_mask(c, 14, false, nullptr);
  for (std::size_t r = 0; r < 14; ++r)
    for (std::size_t k = 0; k < 5; ++k) CHECK(all(r, k));
  CHECK_THROWS(schedule_cross_mask(c, 15, true, nullptr));
}

TEST_CASE("dataset windows come from the requested split") {
  WorldParams p;
  WorldDataset train(WorldSpec::generate(p), 20, 48, 100);
  WorldDataset val(WorldSpec::generate(p), 5, 48, 100, true);
  for (const auto& ep : train.episodes()) CHECK_FALSE(is_validation_seed(ep.seed));
  for (const auto& ep : val.episodes()) CHECK(is_validation_seed(ep.seed));
  std::mt19937_64 a(1), b(1);
  auto w1 = train.sample(a, 30), w2 = train.sample(b, 30);
  CHECK(w1.frames == w2.frames);
  CHECK(w1.schedule.num_frames() == 30);
  CHECK(w1.frames.rows() == 30);
  CHECK_THROWS(train.sample(a, 49));
}

TEST_CASE("PCA mask and self-rollout assertions") {
  std::vector<SpanSpec> spans{{3, 2}};
  CHECK_NOTHROW(assert_pca_mask(pca_mask(18, 3, spans), 3, spans));
  CHECK_THROWS_AS(assert_pca_mask(causal_chunk_mask(18, 3), 3, spans), std::logic_error);

  DualRegionKVCache cache(4, 1);
  CacheEntry e;
  e.position = 0;
  e.lineage = Lineage::conditioning;
  cache.append_past(e);
  e.position = 1;
  e.lineage = Lineage::generated;
  cache.append_past(e);
  e.position = 9;
  e.lineage = Lineage::keyframe;
  cache.set_future(e);
  CHECK_NOTHROW(assert_self_generated(cache));
  e.position = 2;
  e.lineage = Lineage::ground_truth;
  cache.append_past(e);
  CHECK_THROWS_AS(assert_self_generated(cache), std::logic_error);
}

TEST_CASE("teacher training is deterministic") {
  auto data = tiny_data();
  auto cfg = tiny_train(Stage::teacher, 20);
  cfg.learning_rate = 5e-3;
  TrainLog log;
  auto a = train_teacher(cfg, data, tiny_config(), &log);
  auto b = train_teacher(cfg, data, tiny_config());
  CHECK(a.checksum() == b.checksum());
  cfg.seed = 1;
  CHECK(train_teacher(cfg, data, tiny_config()).checksum() != a.checksum());

  std::vector<double> loss;
  for (const auto& r : log.rows)
    if (r.metric == "fm_loss") loss.push_back(r.value);
  REQUIRE(loss.size() == 20);
  for (double l : loss) CHECK(std::isfinite(l));

  const auto path = (std::filesystem::temp_directory_path() / "kfs_test_log.csv").string();
  log.write_csv(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,metric,value");
  std::filesystem::remove(path);

  WorldParams p;
  WorldDataset val(WorldSpec::generate(p), 4, 48, 3, true);
  const double v1 = teacher_validation_loss(a, val, 4, 18, 9);
  CHECK(std::isfinite(v1));
  CHECK(v1 == teacher_validation_loss(a, val, 4, 18, 9));
}

TEST_CASE("teacher fits a static world far better than an untrained model") {
  // Identity dynamics without noise: every window is a constant video equal to
  // the clean conditioning frame, so the target velocity is (x_t - x_0) / t.
  // Enough distinct scenes are needed for the model to copy rather than memorize.
  WorldParams p;
  p.rho_min = p.rho_max = 1.0;
  p.rotation = 0.0;
  p.noise_std = 0.0;
  WorldDataset data(WorldSpec::generate(p), 500, 48, 5);
  WorldDataset val(WorldSpec::generate(p), 8, 48, 5, true);
  auto mc = tiny_config();
  mc.width = 16;
  auto cfg = tiny_train(Stage::teacher, 1500);
  cfg.batch_size = 4;
  cfg.window_frames = 12;
  cfg.learning_rate = 3e-3;
  cfg.grad_clip = 5.0;
  cfg.teacher_mixed_fraction = 0.0;
  auto before = cfg;
  before.iterations = 1;
  before.learning_rate = 1e-12;
  const double untrained = teacher_validation_loss(train_teacher(before, data, mc), val, 64, 12, 2);
  const double trained = teacher_validation_loss(train_teacher(cfg, data, mc), val, 64, 12, 2);
  CHECK(trained < 0.6 * untrained);
}

TEST_CASE("PCA distillation runs deterministically, with or without the cosine term") {
  auto data = tiny_data();
  auto teacher = random_student(4);
  auto cfg = tiny_train(Stage::pca, 3);
  TrainLog log;
  auto a = pca_distill(teacher, cfg, data, &log);
  auto b = pca_distill(teacher, cfg, data);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != teacher.checksum());
  cfg.lambda_cos = 0.0;
  auto c = pca_distill(teacher, cfg, data);
  CHECK(c.checksum() != a.checksum());
  bool has_probe = false;
  for (const auto& r : log.rows) has_probe |= r.metric == "drift_probe";
  CHECK(has_probe);
}

TEST_CASE("self-forcing rollouts reach every student tensor and never see ground truth") {
  auto data = tiny_data();
  auto student = random_student(5);
  auto teacher = random_student(6);
  std::mt19937_64 drng(7);
  auto disc = Discriminator::init(teacher.config().width, 16, drng);
  auto cfg = tiny_train(Stage::fsf, 1);
  cfg.window_frames = 30;
  cfg.random_kf_timing = false;
  std::mt19937_64 rng(8);
  auto w = data.sample(rng, 30);
  auto ro = fsf_rollout(student, teacher, disc, cfg, w, rng);
  CHECK(std::isfinite(ro.total));
  CHECK(ro.total == doctest::Approx(cfg.lambda_fm * ro.fm + cfg.lambda_adv * ro.adv));
  REQUIRE(ro.grads.size() == student.num_tensors());
  for (std::size_t i = 0; i < ro.grads.size(); ++i) {
    INFO(student.name(i));
    REQUIRE(ro.grads[i].size() == student.param(i).size());
    CHECK(l2(ro.grads[i]) > 0.0);
  }
  for (auto l : ro.context_lineage) CHECK(l != Lineage::ground_truth);
  // Fixed timing: first keyframe at cursor 3 targeting chunk 7, the next one
  // emitted after it is consumed would overrun the 10-chunk window.
  CHECK(ro.kf_emitted_at == 3);
  CHECK(ro.keyframes == 1);
  CHECK(ro.fake_features.size() == ro.real_features.size());

  cfg.random_kf_timing = true;
  std::size_t total = 0, multi = 0;
  for (int i = 0; i < 20; ++i) {
    auto r = fsf_rollout(student, teacher, disc, cfg, data.sample(rng, 30), rng);
    total += r.keyframes;
    multi += r.keyframes > 1;
  }
  CHECK(total >= 20);
  CHECK(multi > 0);

  cfg.lambda_adv = 0.0;
  std::mt19937_64 r2(8);
  auto plain = fsf_rollout(student, teacher, disc, cfg, data.sample(r2, 30), r2);
  CHECK(plain.total == doctest::Approx(plain.fm));
}

TEST_CASE("self-forcing training is deterministic and checks the discriminator size") {
  auto data = tiny_data();
  auto student = random_student(5);
  auto teacher = random_student(6);
  std::mt19937_64 drng(7);
  auto disc = Discriminator::init(8, 16, drng);
  auto cfg = tiny_train(Stage::fsf, 2);
  cfg.window_frames = 12;
  auto a = fsf_train(student, teacher, disc, cfg, data);
  auto b = fsf_train(student, teacher, disc, cfg, data);
  CHECK(a.student.checksum() == b.student.checksum());
  CHECK(a.student.checksum() != student.checksum());
  CHECK_FALSE(a.disc.params[0] == disc.params[0]);
  std::mt19937_64 r(1);
  CHECK_THROWS_AS(fsf_train(student, teacher, Discriminator::init(5, 4, r), cfg, data), DimensionError);
}

TEST_CASE("teacher embedder and forecasting probe") {
  auto teacher = random_student(9);
  auto embed = teacher_embedder(teacher);
  std::mt19937_64 rng(2);
  auto f1 = kfs::testing::random_tensor(rng, {1, 16});
  auto f2 = kfs::testing::random_tensor(rng, {1, 16});
  auto e1 = embed(f1);
  CHECK(e1.size() == 8);
  CHECK(embed(f1) == e1);
  CHECK(cosine_distance(e1, embed(f2)) > 0.0);

  auto data = tiny_data(2);
  const auto& ep = data.episodes()[0];
  auto kf = forecast_chunk(teacher, ep.frames, ep.schedule, 9, 3, 3, 9, StepSchedule{}, true, 1);
  CHECK(kf.shape() == Shape{3, 16});
  CHECK(forecast_chunk(teacher, ep.frames, ep.schedule, 9, 3, 3, 9, StepSchedule{}, true, 1) == kf);
  CHECK_THROWS(forecast_chunk(teacher, ep.frames, ep.schedule, 42, 3, 3, 9, StepSchedule{}, true, 1));
}

TEST_CASE("collapse monitor trips once after a sustained run of confident steps") {
  CollapseMonitor m(0.99, 3);
  CHECK_FALSE(m.update(1.0));
  CHECK_FALSE(m.update(1.0));
  CHECK_FALSE(m.update(0.99));  // not strictly above the threshold: resets the run
  CHECK_FALSE(m.update(1.0));
  CHECK_FALSE(m.update(0.995));
  CHECK_FALSE(m.tripped());
  CHECK(m.update(1.0));
  CHECK(m.tripped());
  CHECK_FALSE(m.update(1.0));
  CollapseMonitor standard;
  std::size_t trips = 0;
  for (int i = 0; i < 250; ++i) trips += standard.update(i < 50 ? 0.5 : 1.0);
  CHECK(trips == 1);
}

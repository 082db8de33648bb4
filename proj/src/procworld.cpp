#include "kfstream/procworld.hpp"

#include <png.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "kfstream/random.hpp"

namespace kfs {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat to_eigen(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor from_eigen(const Mat& m) {
  auto t = Tensor::zeros({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(i, j) = m(i, j);
  return t;
}

Tensor vec_tensor(const Vec& v) {
  std::vector<double> d(v.data(), v.data() + v.size());
  return Tensor({static_cast<std::size_t>(v.size())}, std::move(d));
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

std::map<std::string, std::string> WorldParams::to_kv() const {
  auto num = [](double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  };
  return {{"world.state_dim", std::to_string(state_dim)},
          {"world.num_steps", std::to_string(num_steps)},
          {"world.num_tasks", std::to_string(num_tasks)},
          {"world.steps_per_task", std::to_string(steps_per_task)},
          {"world.noise_std", num(noise_std)},
          {"world.scene_std", num(scene_std)},
          {"world.goal_std", num(goal_std)},
          {"world.init_std", num(init_std)},
          {"world.rho_min", num(rho_min)},
          {"world.rho_max", num(rho_max)},
          {"world.rotation", num(rotation)},
          {"world.min_segment", std::to_string(min_segment)},
          {"world.seed", std::to_string(seed)},
          {"world.global_token_base", std::to_string(global_token_base)},
          {"world.local_token_base", std::to_string(local_token_base)}};
}

WorldParams WorldParams::from_kv(const std::map<std::string, std::string>& kv) {
  WorldParams p;
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(std::string("world.") + k);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("state_dim")) p.state_dim = std::stoull(*v);
  if (auto v = get("num_steps")) p.num_steps = std::stoull(*v);
  if (auto v = get("num_tasks")) p.num_tasks = std::stoull(*v);
  if (auto v = get("steps_per_task")) p.steps_per_task = std::stoull(*v);
  if (auto v = get("noise_std")) p.noise_std = std::stod(*v);
  if (auto v = get("scene_std")) p.scene_std = std::stod(*v);
  if (auto v = get("goal_std")) p.goal_std = std::stod(*v);
  if (auto v = get("init_std")) p.init_std = std::stod(*v);
  if (auto v = get("rho_min")) p.rho_min = std::stod(*v);
  if (auto v = get("rho_max")) p.rho_max = std::stod(*v);
  if (auto v = get("rotation")) p.rotation = std::stod(*v);
  if (auto v = get("min_segment")) p.min_segment = std::stoull(*v);
  if (auto v = get("seed")) p.seed = std::stoull(*v);
  if (auto v = get("global_token_base")) p.global_token_base = std::stoi(*v);
  if (auto v = get("local_token_base")) p.local_token_base = std::stoi(*v);
  return p;
}

WorldSpec WorldSpec::generate(const WorldParams& params) {
  if (params.num_steps == 0 || params.num_tasks == 0 || params.state_dim == 0) {
    throw std::invalid_argument("world: libraries must be nonempty");
  }
  if (params.steps_per_task == 0 || params.steps_per_task > params.num_steps) {
    throw std::invalid_argument("world: steps_per_task must be in [1, num_steps]");
  }
  if (!(params.rotation >= 0.0)) throw std::invalid_argument("world: rotation must be non-negative");
  if (!(params.rho_min > 0.0 && params.rho_min <= params.rho_max && params.rho_max <= 1.0)) {
    throw std::invalid_argument("world: contraction factors must satisfy 0 < rho_min <= rho_max <= 1");
  }
  WorldSpec spec;
  spec.params = params;
  auto rng = substream(params.seed, "world");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> rho(params.rho_min, params.rho_max);
  const auto d = static_cast<Eigen::Index>(params.state_dim);
  for (std::size_t k = 0; k < params.num_steps; ++k) {
    // Cayley transform of a random skew matrix: an exact rotation whose angles scale with `rotation`.
    Mat g(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) g(i, j) = normal(rng);
    const Mat skew = params.rotation / std::sqrt(2.0 * static_cast<double>(d)) * (g - g.transpose());
    const Mat id = Mat::Identity(d, d);
    Mat q = (id - 0.5 * skew).partialPivLu().solve(id + 0.5 * skew);
    StepDynamics s;
    s.rho = rho(rng);
    Mat A = s.rho * q;
    Vec goal(d);
    for (Eigen::Index i = 0; i < d; ++i) goal(i) = params.goal_std * normal(rng);
    Vec b = (Mat::Identity(d, d) - A) * goal;
    s.A = from_eigen(A);
    s.b = vec_tensor(b);
    s.goal = vec_tensor(goal);
    spec.steps.push_back(std::move(s));
  }
  std::vector<int> ids(params.num_steps);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t t = 0; t < params.num_tasks; ++t) {
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<int> allowed(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(params.steps_per_task));
    std::sort(allowed.begin(), allowed.end());
    spec.tasks.push_back(allowed);
  }
  return spec;
}

int WorldSpec::step_of_token(int token) const {
  const int k = token - params.local_token_base;
  return k >= 0 && static_cast<std::size_t>(k) < steps.size() ? k : -1;
}

double WorldSpec::spectral_radius(std::size_t step) const {
  Eigen::EigenSolver<Mat> es(to_eigen(steps.at(step).A));
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

Episode generate_episode(const WorldSpec& spec, std::mt19937_64& rng, std::size_t num_frames,
                         std::size_t num_segments) {
  const auto& p = spec.params;
  if (num_segments == 0) throw std::invalid_argument("generate_episode: need at least one segment");
  if (num_frames < num_segments) throw std::invalid_argument("generate_episode: more segments than frames");
  const auto min_len = std::min(p.min_segment, num_frames / num_segments);
  Episode ep;
  std::uniform_int_distribution<std::size_t> task_pick(0, spec.tasks.size() - 1);
  ep.task = task_pick(rng);
  const auto& allowed = spec.tasks[ep.task];

  // Segment lengths: min_len each plus a random split of the remainder.
  std::vector<std::size_t> lengths(num_segments, min_len);
  std::uniform_int_distribution<std::size_t> seg_pick(0, num_segments - 1);
  for (std::size_t extra = num_frames - min_len * num_segments; extra > 0; --extra) ++lengths[seg_pick(rng)];

  std::uniform_int_distribution<std::size_t> step_pick(0, allowed.size() - 1);
  int prev = -1;
  ep.schedule.global_tokens = {spec.global_token(ep.task)};
  std::size_t start = 0;
  for (std::size_t s = 0; s < num_segments; ++s) {
    int step = allowed[step_pick(rng)];
    while (allowed.size() > 1 && step == prev) step = allowed[step_pick(rng)];
    prev = step;
    ep.segment_steps.push_back(step);
    ep.schedule.segments.push_back({start, start + lengths[s], {spec.local_token(static_cast<std::size_t>(step))}});
    for (std::size_t f = 0; f < lengths[s]; ++f) ep.labels.push_back(step);
    start += lengths[s];
  }

  const auto d = p.state_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> scene(d), state(d);
  for (auto& v : scene) v = p.scene_std * normal(rng);
  for (auto& v : state) v = p.init_std * normal(rng);
  ep.scene = Tensor({d}, scene);
  auto frames = Tensor::zeros({num_frames, d});
  std::vector<double> next(d);
  for (std::size_t t = 0; t < num_frames; ++t) {
    if (t > 0) {
      const auto& st = spec.steps[static_cast<std::size_t>(ep.labels[t])];
      for (std::size_t i = 0; i < d; ++i) {
        double acc = st.b[i];
        for (std::size_t j = 0; j < d; ++j) acc += st.A.at(i, j) * state[j];
        next[i] = acc + (p.noise_std > 0.0 ? p.noise_std * normal(rng) : 0.0);
      }
      state = next;
    }
    for (std::size_t i = 0; i < d; ++i) frames.at(t, i) = state[i] + scene[i];
  }
  ep.frames = std::move(frames);
  return ep;
}

Episode episode_for_seed(const WorldSpec& spec, std::uint64_t seed, std::size_t num_frames, std::size_t num_segments) {
  auto rng = substream(spec.params.seed, "episode", seed);
  auto ep = generate_episode(spec, rng, num_frames, num_segments);
  ep.seed = seed;
  return ep;
}

bool is_validation_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x5eedULL) % 10 == 0; }

std::uint64_t split_seed(std::uint64_t base, std::size_t n, bool validation) {
  std::size_t found = 0;
  for (std::uint64_t s = base;; ++s) {
    if (is_validation_seed(s) != validation) continue;
    if (found++ == n) return s;
  }
}

void write_episode(const std::string& path, const WorldSpec& spec, const Episode& ep) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "kfstream_episode 1\n";
  for (const auto& [k, v] : spec.params.to_kv()) out << k << '=' << v << '\n';
  out << "episode.seed=" << ep.seed << '\n';
  out << "episode.task=" << ep.task << '\n';
  out << "episode.global=" << join(ep.schedule.global_tokens) << '\n';
  for (std::size_t s = 0; s < ep.schedule.segments.size(); ++s) {
    const auto& seg = ep.schedule.segments[s];
    out << "episode.segment" << s << '=' << seg.frame_start << ',' << seg.frame_end << ':' << join(seg.tokens) << ':'
        << ep.segment_steps.at(s) << '\n';
  }
  out << "end_header\n";
  write_tensor(out, ep.frames);
  write_tensor(out, ep.scene);
  if (!out) throw std::runtime_error("failed to write episode " + path);
}

Episode read_episode(const std::string& path, WorldParams* params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open episode " + path);
  std::string line;
  if (!std::getline(in, line) || line != "kfstream_episode 1") throw std::runtime_error(path + ": not an episode file");
  std::map<std::string, std::string> kv;
  std::vector<std::string> segs;
  while (std::getline(in, line) && line != "end_header") {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(path + ": malformed header line");
    auto key = line.substr(0, eq);
    if (key.rfind("episode.segment", 0) == 0) {
      segs.push_back(line.substr(eq + 1));
    } else {
      kv[key] = line.substr(eq + 1);
    }
  }
  Episode ep;
  ep.seed = std::stoull(kv.at("episode.seed"));
  ep.task = std::stoull(kv.at("episode.task"));
  ep.schedule.global_tokens = split_ints(kv.at("episode.global"));
  for (const auto& s : segs) {
    auto c1 = s.find(':');
    auto c2 = s.find(':', c1 + 1);
    auto range = split_ints(s.substr(0, c1));
    PromptSchedule::Segment seg;
    seg.frame_start = static_cast<std::size_t>(range.at(0));
    seg.frame_end = static_cast<std::size_t>(range.at(1));
    seg.tokens = split_ints(s.substr(c1 + 1, c2 - c1 - 1));
    const int step = std::stoi(s.substr(c2 + 1));
    ep.segment_steps.push_back(step);
    for (auto f = seg.frame_start; f < seg.frame_end; ++f) ep.labels.push_back(step);
    ep.schedule.segments.push_back(std::move(seg));
  }
  ep.frames = read_tensor(in);
  ep.scene = read_tensor(in);
  if (params) *params = WorldParams::from_kv(kv);
  return ep;
}

Embedder raw_state_embedder() {
  return [](const Tensor& frame) { return std::vector<double>(frame.values().begin(), frame.values().end()); };
}

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_distance: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_distance: degenerate (zero) embedding");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> polyfit(const std::vector<double>& x, const std::vector<double>& y, std::size_t degree) {
  if (x.size() != y.size() || x.size() < degree + 1) throw std::invalid_argument("polyfit: not enough samples");
  Mat V(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(degree + 1));
  Vec Y(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = 1.0;
    for (std::size_t k = 0; k <= degree; ++k, p *= x[i]) V(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = p;
    Y(static_cast<Eigen::Index>(i)) = y[i];
  }
  Vec c = V.colPivHouseholderQr().solve(Y);
  return {c.data(), c.data() + c.size()};
}

namespace {

std::vector<double> frame_embedding(const Tensor& video, std::size_t t, const Embedder& embed) {
  const auto d = video.cols();
  Tensor row({1, d}, std::vector<double>(video.data() + t * d, video.data() + (t + 1) * d));
  return embed(row);
}

}  // namespace

DriftReport drift_report(const Tensor& video, const Embedder& embed, std::size_t every) {
  if (video.rank() != 2 || video.rows() < 30) throw std::invalid_argument("drift_report: need at least 30 frames");
  if (every == 0) throw std::invalid_argument("drift_report: sampling interval must be positive");
  const auto ref = frame_embedding(video, 0, embed);
  DriftReport r;
  std::vector<double> m;
  for (std::size_t t = 0, i = 0; t < video.rows(); t += every, ++i) {
    r.curve.push_back(cosine_distance(frame_embedding(video, t, embed), ref));
    m.push_back(static_cast<double>(i));
  }
  r.average = std::accumulate(r.curve.begin(), r.curve.end(), 0.0) / static_cast<double>(r.curve.size());
  r.max = *std::max_element(r.curve.begin(), r.curve.end());
  r.ratio = polyfit(m, r.curve, 1)[1];
  r.acceleration = polyfit(m, r.curve, 2)[2];
  return r;
}

StepFit fit_step(const WorldSpec& spec, const Tensor& video, std::size_t begin, std::size_t end) {
  StepFit fit;
  const auto first = std::max<std::size_t>(begin, 1);
  if (end > video.rows() || end < first + 2) return fit;
  const auto d = static_cast<Eigen::Index>(video.cols());
  const auto n = static_cast<Eigen::Index>(end - first);
  Mat prev(d, n), cur(d, n);
  for (Eigen::Index c = 0; c < n; ++c)
    for (Eigen::Index i = 0; i < d; ++i) {
      prev(i, c) = video.at(first + static_cast<std::size_t>(c) - 1, static_cast<std::size_t>(i));
      cur(i, c) = video.at(first + static_cast<std::size_t>(c), static_cast<std::size_t>(i));
    }
  for (const auto& st : spec.steps) {
    Mat y = cur - to_eigen(st.A) * prev;
    Vec mean = y.rowwise().mean();
    fit.residuals.push_back((y.colwise() - mean).squaredNorm());
  }
  std::vector<std::size_t> order(fit.residuals.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return fit.residuals[a] < fit.residuals[b]; });
  const double best = fit.residuals[order[0]];
  const double second = order.size() > 1 ? fit.residuals[order[1]] : INFINITY;
  if (second - best > 1e-12 * std::max(1.0, second)) fit.best_step = static_cast<int>(order[0]);
  return fit;
}

AdherenceResult segment_adherence(const WorldSpec& spec, const Tensor& video, const PromptSchedule& schedule) {
  if (video.rows() < schedule.num_frames()) throw std::invalid_argument("segment_adherence: video shorter than schedule");
  AdherenceResult r;
  for (std::size_t s = 0; s < schedule.segments.size(); ++s) {
    const auto& seg = schedule.segments[s];
    int prompted = -1;
    for (int t : seg.tokens)
      if (spec.step_of_token(t) >= 0) prompted = spec.step_of_token(t);
    auto fit = fit_step(spec, video, seg.frame_start, seg.frame_end);
    if (fit.residuals.empty() || prompted < 0) {
      r.skipped.push_back(s);
      continue;
    }
    ++r.scored;
    if (fit.best_step == prompted) ++r.matched;
  }
  r.fraction = r.scored ? static_cast<double>(r.matched) / static_cast<double>(r.scored) : 0.0;
  return r;
}

double smoothness(const Tensor& video, const Embedder& embed) {
  if (video.rank() != 2 || video.rows() < 2) throw std::invalid_argument("smoothness: need at least 2 frames");
  double total = 0.0;
  auto prev = frame_embedding(video, 0, embed);
  for (std::size_t t = 1; t < video.rows(); ++t) {
    auto cur = frame_embedding(video, t, embed);
    total += 1.0 - cosine_distance(prev, cur);
    prev = std::move(cur);
  }
  return total / static_cast<double>(video.rows() - 1);
}

void render_projection_png(const std::string& path, const Tensor& video, const std::vector<int>& labels,
                           std::size_t size) {
  if (video.rank() != 2 || video.rows() < 2) throw std::invalid_argument("render: need at least 2 frames");
  Mat X = to_eigen(video);
  Mat centered = X.rowwise() - X.colwise().mean();
  Eigen::JacobiSVD<Mat> svd(centered, Eigen::ComputeThinV);
  Mat V = svd.matrixV();
  Mat proj = centered * V.leftCols(std::min<Eigen::Index>(2, V.cols()));
  if (proj.cols() < 2) proj.conservativeResize(Eigen::NoChange, 2), proj.col(1).setZero();
  const double lo0 = proj.col(0).minCoeff(), hi0 = proj.col(0).maxCoeff();
  const double lo1 = proj.col(1).minCoeff(), hi1 = proj.col(1).maxCoeff();
  auto px = [&](double v, double lo, double hi) {
    const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    return static_cast<long>(8 + (v - lo) / span * static_cast<double>(size - 17));
  };
  std::vector<unsigned char> img(size * size * 3, 255);
  static const unsigned char palette[8][3] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                              {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
  auto plot = [&](long x, long y, const unsigned char* c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(size) || y >= static_cast<long>(size)) return;
    auto* p = &img[(static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };
  for (Eigen::Index t = 0; t < proj.rows(); ++t) {
    const auto* c = palette[labels.empty() ? 0 : static_cast<std::size_t>(labels[static_cast<std::size_t>(t)]) % 8];
    const long x = px(proj(t, 0), lo0, hi0), y = px(proj(t, 1), lo1, hi1);
    if (t > 0) {
      const long x0 = px(proj(t - 1, 0), lo0, hi0), y0 = px(proj(t - 1, 1), lo1, hi1);
      const long steps = std::max({std::labs(x - x0), std::labs(y - y0), 1L});
      for (long s = 0; s <= steps; ++s) {
        static const unsigned char grey[3] = {190, 190, 190};
        plot(x0 + (x - x0) * s / steps, y0 + (y - y0) * s / steps, grey);
      }
    }
    for (long dy = -2; dy <= 2; ++dy)
      for (long dx = -2; dx <= 2; ++dx) plot(x + dx, y + dy, c);
  }

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(size), static_cast<png_uint_32>(size), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < size; ++y) png_write_row(png, &img[(size - 1 - y) * size * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace kfs

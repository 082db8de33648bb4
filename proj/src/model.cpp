#include "kfstream/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kfstream/random.hpp"

namespace kfs {

namespace {

std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key, std::size_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace

void ModelConfig::validate() const {
  if (width == 0 || layers == 0 || heads == 0 || patches == 0 || vocab == 0 || channels == 0 || mlp_ratio == 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (width % heads != 0) throw std::invalid_argument("model config: heads must divide width");
  if (head_dim() % 2 != 0) throw DimensionError("model config: head dim must be even for rotary encoding");
  if (width % 2 != 0) throw std::invalid_argument("model config: width must be even");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::ostringstream base;
  base.precision(17);
  base << rope_base;
  return {{"width", std::to_string(width)},
          {"layers", std::to_string(layers)},
          {"heads", std::to_string(heads)},
          {"patches", std::to_string(patches)},
          {"vocab", std::to_string(vocab)},
          {"channels", std::to_string(channels)},
          {"mlp_ratio", std::to_string(mlp_ratio)},
          {"rope_base", base.str()}};
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.width = parse_size(kv, "width", c.width);
  c.layers = parse_size(kv, "layers", c.layers);
  c.heads = parse_size(kv, "heads", c.heads);
  c.patches = parse_size(kv, "patches", c.patches);
  c.vocab = parse_size(kv, "vocab", c.vocab);
  c.channels = parse_size(kv, "channels", c.channels);
  c.mlp_ratio = parse_size(kv, "mlp_ratio", c.mlp_ratio);
  if (auto it = kv.find("rope_base"); it != kv.end()) c.rope_base = std::stod(it->second);
  c.validate();
  return c;
}

void PromptSchedule::validate(std::size_t vocab) const {
  std::size_t expect = 0;
  for (const auto& s : segments) {
    if (s.frame_start != expect || s.frame_end <= s.frame_start) {
      throw std::invalid_argument("prompt segments must be ordered, non-empty and contiguous from frame 0");
    }
    expect = s.frame_end;
    for (int t : s.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw std::invalid_argument("prompt token outside vocabulary");
  }
  for (int t : global_tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw std::invalid_argument("prompt token outside vocabulary");
}

Model Model::init(const ModelConfig& config, std::mt19937_64& rng, InitOptions opts) {
  config.validate();
  Model m;
  m.config_ = config;
  const auto w = config.width, c = config.channels, hidden = config.width * config.mlp_ratio;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto dense = [&](std::size_t fan_in, std::size_t fan_out, double gain) {
    std::vector<double> v(fan_in * fan_out);
    const double sd = opts.scale * gain / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = sd * normal(rng);
    return Tensor({fan_in, fan_out}, std::move(v));
  };
  auto add = [&](std::string name, Tensor t) {
    m.names_.push_back(std::move(name));
    m.params_.push_back(std::move(t));
  };
  add("in_w", dense(c, w, 1.0));
  add("in_b", Tensor::zeros({1, w}));
  add("patch", dense(1, config.patches * w, 0.5).reshaped({config.patches, w}));
  add("level_w", dense(w, w, 1.0));
  add("level_b", Tensor::zeros({1, w}));
  add("token", dense(1, config.vocab * w, 1.0).reshaped({config.vocab, w}));
  add("out_w", opts.zero_output ? Tensor::zeros({w, c}) : dense(w, c, 1.0));
  add("out_b", Tensor::zeros({1, c}));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    add(p + "wq", dense(w, w, 1.0));
    add(p + "wk", dense(w, w, 1.0));
    add(p + "wv", dense(w, w, 1.0));
    add(p + "wo", dense(w, w, 0.5));
    add(p + "cq", dense(w, w, 1.0));
    add(p + "ck", dense(w, w, 1.0));
    add(p + "cv", dense(w, w, 1.0));
    add(p + "co", dense(w, w, 0.5));
    add(p + "m1", dense(w, hidden, 1.0));
    add(p + "b1", Tensor::zeros({1, hidden}));
    add(p + "m2", dense(hidden, w, 0.5));
    add(p + "b2", Tensor::zeros({1, w}));
  }
  return m;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : params_) n += t.size();
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : params_) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double)), h);
  }
  return h;
}

void Model::save(std::ostream& out, const std::map<std::string, std::string>& extra) const {
  out << "kfstream_checkpoint 1\n";
  for (const auto& [k, v] : config_.to_kv()) out << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) {
    if (k.find('=') != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint header entries must not contain '=' or newlines");
    }
    out << "meta." << k << '=' << v << '\n';
  }
  out << "tensors=";
  for (std::size_t i = 0; i < names_.size(); ++i) out << (i ? "," : "") << names_[i];
  out << "\nend_header\n";
  for (const auto& t : params_) write_tensor(out, t);
  if (!out) throw std::runtime_error("failed to write checkpoint");
}

Model Model::load(std::istream& in, std::map<std::string, std::string>* extra) {
  std::string line;
  if (!std::getline(in, line) || line != "kfstream_checkpoint 1") throw std::runtime_error("not a kfstream checkpoint");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line) && line != "end_header") {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (line != "end_header") throw std::runtime_error("checkpoint header not terminated");
  Model m;
  m.config_ = ModelConfig::from_kv(kv);
  std::mt19937_64 rng(0);
  auto reference = init(m.config_, rng);
  std::stringstream names(kv["tensors"]);
  for (std::string n; std::getline(names, n, ',');) m.names_.push_back(n);
  if (m.names_ != reference.names_) throw std::runtime_error("checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < m.names_.size(); ++i) {
    auto t = read_tensor(in);
    if (t.shape() != reference.params_[i].shape()) {
      throw std::runtime_error("checkpoint tensor " + m.names_[i] + " has shape " + shape_string(t.shape()));
    }
    m.params_.push_back(std::move(t));
  }
  if (extra) {
    extra->clear();
    for (const auto& [k, v] : kv)
      if (k.rfind("meta.", 0) == 0) (*extra)[k.substr(5)] = v;
  }
  return m;
}

void Model::save_file(const std::string& path, const std::map<std::string, std::string>& extra) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save(out, extra);
}

Model Model::load_file(const std::string& path, std::map<std::string, std::string>* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return load(in, extra);
}

Bound bind(Graph& g, const Model& m, bool trainable, ParamId id_offset) {
  Bound b;
  b.config = &m.config();
  b.p.reserve(m.num_tensors());
  for (std::size_t i = 0; i < m.num_tensors(); ++i) {
    b.p.push_back(trainable ? g.parameter(id_offset + i, m.param(i)) : g.constant_ref(m.param(i)));
  }
  return b;
}

std::pair<Tensor, Tensor> rope_tables(const std::vector<std::size_t>& row_positions, std::size_t width,
                                      std::size_t heads, double base) {
  const auto dh = width / heads;
  const auto half = dh / 2;
  const auto rows = row_positions.size();
  auto c = Tensor::zeros({rows, width / 2});
  auto s = Tensor::zeros({rows, width / 2});
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(row_positions[r]);
    for (std::size_t p = 0; p < width / 2; ++p) {
      const auto i = p % half;
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      c.at(r, p) = std::cos(pos * theta);
      s.at(r, p) = std::sin(pos * theta);
    }
  }
  return {c, s};
}

Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions, double base) {
  if (x.rank() != 2) throw DimensionError("rope_apply: expected a matrix");
  if (x.cols() % 2 != 0) throw DimensionError("rope_apply: odd head dimension " + std::to_string(x.cols()));
  if (positions.size() != x.rows()) throw DimensionError("rope_apply: one position per row required");
  auto [c, s] = rope_tables(positions, x.cols(), 1, base);
  Graph g(false);
  return rotate_pairs(g.constant(x), c, s).value();
}

AttentionMask bidirectional_mask(std::size_t frames, std::size_t patches) {
  return full_mask(frames * patches, frames * patches);
}

std::vector<double> level_features(double t, std::size_t width) {
  const auto half = width / 2;
  std::vector<double> f(width);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    f[2 * i] = std::sin(1000.0 * t * freq);
    f[2 * i + 1] = std::cos(1000.0 * t * freq);
  }
  return f;
}

namespace {

Var attend(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads) {
  const auto w = q.cols();
  const auto dh = w / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    auto p = softmax_masked(scale(matmul_transposed(qh, kh), inv), mask);
    outs.push_back(matmul(p, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

}  // namespace

ForwardResult forward(const Bound& m, Var x, const ForwardSpec& spec) {
  const auto& cfg = *m.config;
  auto& g = x.graph();
  const auto T = spec.positions.size();
  const auto P = cfg.patches;
  const auto W = cfg.width;
  const auto n_ctx = spec.context ? spec.context->frames() : 0;

  if (T == 0) throw DimensionError("forward: no frames");
  if (spec.levels.size() != T) throw DimensionError("forward: one noise level per frame required");
  if (x.value().shape() != Shape{T * P, cfg.channels}) {
    throw DimensionError("forward: input must be " + shape_string({T * P, cfg.channels}) + ", got " +
                         shape_string(x.value().shape()));
  }
  if (spec.self_mask.rows() != T || spec.self_mask.cols() != n_ctx + T) {
    throw MaskError("forward: self mask is " + std::to_string(spec.self_mask.rows()) + "x" +
                    std::to_string(spec.self_mask.cols()) + ", expected " + std::to_string(T) + "x" +
                    std::to_string(n_ctx + T));
  }
  if (!spec.tokens.empty() && (spec.cross_mask.rows() != T || spec.cross_mask.cols() != spec.tokens.size())) {
    throw MaskError("forward: cross mask shape does not match frames x tokens");
  }
  if (spec.context) {
    if (spec.context->keys.size() != cfg.layers || spec.context->values.size() != cfg.layers) {
      throw DimensionError("forward: context must hold one key/value set per layer");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      if (spec.context->keys[l].shape() != Shape{n_ctx * P, W} || spec.context->values[l].shape() != Shape{n_ctx * P, W}) {
        throw DimensionError("forward: context tensors have the wrong shape");
      }
    }
  }
  for (double t : spec.levels)
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("forward: noise level outside [0,1]");

  std::vector<std::size_t> row_pos(T * P);
  for (std::size_t f = 0; f < T; ++f)
    for (std::size_t p = 0; p < P; ++p) row_pos[f * P + p] = spec.positions[f];
  auto [rc, rs] = rope_tables(row_pos, W, cfg.heads, cfg.rope_base);

  const auto self_mask = expand(spec.self_mask, P, P);
  const bool has_text = !spec.tokens.empty();
  AttentionMask cross_mask;
  if (has_text) cross_mask = expand(spec.cross_mask, P, 1);

  // Embedding: input projection, patch embedding, level embedding.
  std::vector<double> lf(T * P * W);
  for (std::size_t f = 0; f < T; ++f) {
    auto feat = level_features(spec.levels[f], W);
    for (std::size_t p = 0; p < P; ++p) std::copy(feat.begin(), feat.end(), lf.begin() + (f * P + p) * W);
  }
  auto level = add_row(matmul(g.constant(Tensor({T * P, W}, std::move(lf))), m.p[Model::kLevelW]), m.p[Model::kLevelB]);
  std::vector<int> patch_ids(T * P);
  for (std::size_t r = 0; r < T * P; ++r) patch_ids[r] = static_cast<int>(r % P);
  auto h = add_row(matmul(x, m.p[Model::kInW]), m.p[Model::kInB]);
  h = h + embedding_lookup(m.p[Model::kPatch], patch_ids) + level;

  Var text;
  if (has_text) {
    for (int t : spec.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) throw std::out_of_range("forward: token id outside vocabulary");
    text = embedding_lookup(m.p[Model::kToken], spec.tokens);
  }

  ForwardResult out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto P_ = [&](Model::Slot s) { return m.p[Model::layer_index(l, s)]; };
    auto a = layer_norm(h);
    auto q = rotate_pairs(matmul(a, P_(Model::kWq)), rc, rs);
    auto k = rotate_pairs(matmul(a, P_(Model::kWk)), rc, rs);
    auto v = matmul(a, P_(Model::kWv));
    if (spec.capture_kv) {
      out.keys.push_back(k.value());
      out.values.push_back(v.value());
    }
    Var keys = k, values = v;
    if (n_ctx > 0) {
      Var kp[] = {g.constant_ref(spec.context->keys[l]), k};
      Var vp[] = {g.constant_ref(spec.context->values[l]), v};
      keys = concat_rows(kp);
      values = concat_rows(vp);
    }
    h = h + matmul(attend(q, keys, values, self_mask, cfg.heads), P_(Model::kWo));

    if (has_text) {
      auto c = layer_norm(h);
      auto cq = matmul(c, P_(Model::kCq));
      auto ck = matmul(text, P_(Model::kCk));
      auto cv = matmul(text, P_(Model::kCv));
      h = h + matmul(attend(cq, ck, cv, cross_mask, cfg.heads), P_(Model::kCo));
    }

    auto mm = layer_norm(h);
    auto hidden = gelu(add_row(matmul(mm, P_(Model::kM1)), P_(Model::kB1)));
    h = h + add_row(matmul(hidden, P_(Model::kM2)), P_(Model::kB2));
  }
  auto final_norm = layer_norm(h);
  out.features = group_mean_rows(final_norm, P);
  out.velocity = add_row(matmul(final_norm, m.p[Model::kOutW]), m.p[Model::kOutB]);
  return out;
}

Inference infer(const Model& m, const Tensor& x, const ForwardSpec& spec) {
  Graph g(false);
  auto b = bind(g, m, false);
  auto r = forward(b, g.constant_ref(x), spec);
  return {r.velocity.value(), r.features.value(), std::move(r.keys), std::move(r.values)};
}

}  // namespace kfs

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "kfstream/masks.hpp"
#include "kfstream/tensor.hpp"

namespace kfs {

struct ModelConfig {
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t patches = 1;
  std::size_t vocab = 64;
  std::size_t channels = 16;
  std::size_t mlp_ratio = 4;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return width / heads; }
  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
  bool operator==(const ModelConfig&) const = default;
};

struct InitOptions {
  double scale = 1.0;
  // Zero output projection: the network then predicts v = 0 until trained.
  bool zero_output = true;
};

// Parameter storage for the toy transformer. Tensors are addressed by index;
// the index layout is fixed by the config.
class Model {
 public:
  Model() = default;
  static Model init(const ModelConfig& config, std::mt19937_64& rng, InitOptions opts = {});

  const ModelConfig& config() const { return config_; }
  std::size_t num_tensors() const { return params_.size(); }
  const Tensor& param(std::size_t i) const { return params_.at(i); }
  Tensor& param(std::size_t i) { return params_.at(i); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::size_t parameter_count() const;
  // Order-sensitive FNV-1a over the raw bytes of every parameter.
  std::uint64_t checksum() const;

  // Global tensors.
  enum Global : std::size_t { kInW, kInB, kPatch, kLevelW, kLevelB, kToken, kOutW, kOutB, kGlobalCount };
  // Per-layer tensors; index = kGlobalCount + layer * kLayerCount + slot.
  enum Slot : std::size_t { kWq, kWk, kWv, kWo, kCq, kCk, kCv, kCo, kM1, kB1, kM2, kB2, kLayerCount };
  static std::size_t layer_index(std::size_t layer, Slot s) { return kGlobalCount + layer * kLayerCount + s; }

  void save(std::ostream& out, const std::map<std::string, std::string>& extra = {}) const;
  static Model load(std::istream& in, std::map<std::string, std::string>* extra = nullptr);
  void save_file(const std::string& path, const std::map<std::string, std::string>& extra = {}) const;
  static Model load_file(const std::string& path, std::map<std::string, std::string>* extra = nullptr);

 private:
  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

// Task-level tokens plus per-segment step tokens with frame ranges.
struct PromptSchedule {
  struct Segment {
    std::size_t frame_start = 0;
    std::size_t frame_end = 0;
    std::vector<int> tokens;
    bool operator==(const Segment&) const = default;
  };
  std::vector<int> global_tokens;
  std::vector<Segment> segments;

  std::size_t num_frames() const { return segments.empty() ? 0 : segments.back().frame_end; }
  // Throws std::invalid_argument unless segments are ordered, contiguous from 0 and tokens < vocab.
  void validate(std::size_t vocab) const;
  bool operator==(const PromptSchedule&) const = default;
};

// Attention state for frames that are not recomputed: per layer, keys (already
// rotated at their absolute positions) and values, [n_frames * P x width].
struct KVContext {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::vector<std::size_t> positions;
  std::size_t frames() const { return positions.size(); }
};

struct ForwardSpec {
  std::vector<std::size_t> positions;  // absolute frame index of each local frame
  std::vector<double> levels;          // noise level per local frame
  AttentionMask self_mask;             // frames x (context frames + frames)
  std::vector<int> tokens;             // prompt token ids (may be empty)
  AttentionMask cross_mask;            // frames x tokens
  const KVContext* context = nullptr;
  bool capture_kv = false;
};

// Model parameters registered in a graph.
struct Bound {
  const ModelConfig* config = nullptr;
  std::vector<Var> p;
};

// trainable=false borrows the weights as constants (gradients still flow
// through activations).
Bound bind(Graph& g, const Model& m, bool trainable, ParamId id_offset = 0);

struct ForwardResult {
  Var velocity;  // [frames * P x channels]
  Var features;  // [frames x width], final normalized features averaged over patches
  std::vector<Tensor> keys;    // per layer, local rows only, post-rotation
  std::vector<Tensor> values;  // per layer
};

ForwardResult forward(const Bound& m, Var x, const ForwardSpec& spec);

// Inference without gradient recording.
struct Inference {
  Tensor velocity;
  Tensor features;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};
Inference infer(const Model& m, const Tensor& x, const ForwardSpec& spec);

// Rotary encoding of a single head's rows: row r rotated by positions[r].
Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions, double base = 10000.0);
// cos/sin tables [rows x width/2] for rotating every head of a [rows x width] matrix.
std::pair<Tensor, Tensor> rope_tables(const std::vector<std::size_t>& row_positions, std::size_t width,
                                      std::size_t heads, double base);

AttentionMask bidirectional_mask(std::size_t frames, std::size_t patches);

// Sinusoidal features of a noise level, length `width`.
std::vector<double> level_features(double t, std::size_t width);

}  // namespace kfs

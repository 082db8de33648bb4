#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "kfstream/masks.hpp"

namespace kfs {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major f64 tensor with value semantics.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  // Validates size and rejects non-finite entries.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  // No finiteness check; for op results that may legitimately carry NaN.
  static Tensor unchecked(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const;

  bool is_finite() const;
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

// Binary layout: little-endian u32 rank, u32 dims[rank], f64 data.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

using ParamId = std::size_t;

class Graph;

// Handle to a node recorded in a Graph.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, so input ids always precede the node that consumes them.
class Graph {
 public:
  using Grads = std::vector<Tensor>;
  using BackwardFn = std::function<void(const Tensor& grad_out, std::size_t self, Grads& grads)>;

  explicit Graph(bool record_gradients = true) : recording_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Borrowed constant; `value` must outlive the graph. Used for frozen weights.
  Var constant_ref(const Tensor& value);
  // Borrows `value`; it must outlive the graph.
  Var parameter(ParamId id, const Tensor& value);

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradients of a scalar loss for every registered parameter (summed over
  // duplicate registrations of the same ParamId).
  std::map<ParamId, Tensor> backward(Var loss);

  // Appends an op result. `fn` is kept only when recording and some input requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  static void accumulate(Grads& grads, std::size_t id, const Tensor& delta);

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    bool requires_grad = false;
    bool is_param = false;
    ParamId param = 0;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

// Primitive operations. All operands must belong to the same Graph.
Var matmul(Var a, Var b);
Var matmul_transposed(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast [1 x n] over rows of [m x n]
Var mul_row(Var a, Var row);
Var transpose(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var layer_norm(Var a, double eps = 1e-5);  // per row, no affine
Var gelu(Var a);                           // tanh approximation
Var embedding_lookup(Var table, std::span<const int> ids);
Var mse(Var a, Var b);                        // mean squared error, scalar
Var cosine_similarity(Var a, Var b);          // flattened, eps = 1e-8 in denominator
Var softmax_masked(Var logits, const AttentionMask& mask);
Var sum(Var a);
Var mean(Var a);
Var log_sigmoid(Var a);
// Rotates consecutive column pairs (2i, 2i+1) of row r by angle[r][i] given as cos/sin tables [rows x cols/2].
Var rotate_pairs(Var a, const Tensor& cos_table, const Tensor& sin_table);
// Row r of the result is the mean of rows [r*group, (r+1)*group).
Var group_mean_rows(Var a, std::size_t group);
// Value copy without gradient flow.
Var detach(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// Non-recording helpers on plain tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_masked(const Tensor& logits, const AttentionMask& mask);

}  // namespace kfs

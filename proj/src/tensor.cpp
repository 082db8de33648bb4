#include "kfstream/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace kfs {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
  if (!is_finite()) throw NumericalError("tensor literal contains NaN or Inf");
}

Tensor Tensor::unchecked(Shape shape, std::vector<double> data) {
  Tensor t;
  if (shape_size(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_size(shape);
  return unchecked(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  auto t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape_));
  return data_[0];
}

bool Tensor::is_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return unchecked(std::move(shape), data_);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated tensor header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated tensor data");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  auto rank = get_u32(in);
  if (rank > 8) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = get_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph_->value(id_); }

const Tensor& Graph::value(std::size_t id) const {
  const auto& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.owned;
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant_ref(const Tensor& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(ParamId id, const Tensor& value) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = recording_;
  n.is_param = true;
  n.param = id;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (recording_) {
    for (const auto& v : inputs) {
      if (v.graph_ != this) throw std::invalid_argument("operand belongs to a different graph");
      if (nodes_[v.id_].requires_grad) n.requires_grad = true;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::accumulate(Grads& grads, std::size_t id, const Tensor& delta) {
  auto& g = grads[id];
  if (g.size() == 0 && delta.size() != 0) {
    g = delta;
    return;
  }
  auto dst = g.values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::map<ParamId, Tensor> Graph::backward(Var loss) {
  if (!recording_) throw std::logic_error("backward on a non-recording graph");
  if (loss.graph_ != this) throw std::invalid_argument("loss belongs to a different graph");
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + shape_string(loss.value().shape()));
  }
  if (!nodes_[loss.id_].requires_grad) throw std::invalid_argument("loss is not reachable from any parameter");

  Grads grads(nodes_.size());
  for (auto& g : grads) g = Tensor::unchecked({0}, {});
  grads[loss.id_] = Tensor::unchecked(loss.value().shape(), {1.0});
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || grads[i].size() == 0) continue;
    n.backward(grads[i], i, grads);
  }

  std::map<ParamId, Tensor> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!n.is_param) continue;
    const auto& v = value(i);
    auto it = out.find(n.param);
    if (it == out.end()) it = out.emplace(n.param, Tensor::zeros(v.shape())).first;
    if (grads[i].size() != 0) {
      auto dst = it->second.values();
      auto src = grads[i].values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

Graph& graph_of(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("operands belong to different graphs");
  return a.graph();
}

std::size_t row_vector_length(const Tensor& row, const char* op) {
  if (row.rank() == 1) return row.dim(0);
  if (row.rank() == 2 && row.dim(0) == 1) return row.dim(1);
  throw DimensionError(std::string(op) + ": expected a row vector, got " + shape_string(row.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  auto c = Tensor::zeros({a.rows(), b.cols()});
  gemm_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data());
  return c;
}

Tensor softmax_masked(const Tensor& logits, const AttentionMask& mask) {
  require_matrix(logits, "softmax_masked");
  const auto q = logits.rows();
  const auto k = logits.cols();
  if (mask.rows() != q || mask.cols() != k) {
    throw DimensionError("softmax_masked: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " vs logits " + shape_string(logits.shape()));
  }
  auto out = Tensor::zeros({q, k});
  for (std::size_t i = 0; i < q; ++i) {
    const double* l = logits.data() + i * k;
    double* o = out.data() + i * k;
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j)) {
        m = std::max(m, l[j]);
        any = true;
      }
    }
    if (!any) throw MaskError("softmax_masked: row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j)) {
        o[j] = std::exp(l[j] - m);
        z += o[j];
      }
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < k; ++j) o[j] *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recorded ops

Var matmul(Var a, Var b) {
  auto& g = graph_of(a, b);
  auto c = matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(c), {a, b}, [&g, ia, ib](const Tensor& dc, std::size_t, Graph::Grads& grads) {
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    const auto m = av.rows(), k = av.cols(), n = bv.cols();
    if (g.requires_grad(ia)) {
      auto da = Tensor::zeros({m, k});
      gemm_nt(m, n, k, dc.data(), bv.data(), da.data());
      Graph::accumulate(grads, ia, da);
    }
    if (g.requires_grad(ib)) {
      auto db = Tensor::zeros({k, n});
      gemm_tn(k, m, n, av.data(), dc.data(), db.data());
      Graph::accumulate(grads, ib, db);
    }
  });
}

Var matmul_transposed(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul_transposed");
  require_matrix(bv, "matmul_transposed");
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_transposed: inner dimensions disagree " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
  }
  const auto m = av.rows(), k = av.cols(), n = bv.rows();
  auto c = Tensor::zeros({m, n});
  gemm_nt(m, k, n, av.data(), bv.data(), c.data());
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(c), {a, b}, [&g, ia, ib, m, k, n](const Tensor& dc, std::size_t, Graph::Grads& grads) {
    if (g.requires_grad(ia)) {
      auto da = Tensor::zeros({m, k});
      gemm_nn(m, n, k, dc.data(), g.value(ib).data(), da.data());
      Graph::accumulate(grads, ia, da);
    }
    if (g.requires_grad(ib)) {
      auto db = Tensor::zeros({n, k});
      gemm_tn(n, m, k, dc.data(), g.value(ia).data(), db.data());
      Graph::accumulate(grads, ib, db);
    }
  });
}


Var add(Var a, Var b) {
  auto& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  std::vector<double> out(a.value().size());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor::unchecked(a.value().shape(), std::move(out)), {a, b},
                  [&g, ia, ib](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    if (g.requires_grad(ia)) Graph::accumulate(grads, ia, d);
                    if (g.requires_grad(ib)) Graph::accumulate(grads, ib, d);
                  });
}

Var sub(Var a, Var b) {
  auto& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  std::vector<double> out(a.value().size());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor::unchecked(a.value().shape(), std::move(out)), {a, b},
                  [&g, ia, ib](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    if (g.requires_grad(ia)) Graph::accumulate(grads, ia, d);
                    if (g.requires_grad(ib)) {
                      auto nd = d;
                      for (auto& v : nd.values()) v = -v;
                      Graph::accumulate(grads, ib, nd);
                    }
                  });
}

Var mul(Var a, Var b) {
  auto& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  std::vector<double> out(a.value().size());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor::unchecked(a.value().shape(), std::move(out)), {a, b},
                  [&g, ia, ib](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    const auto n = d.size();
                    if (g.requires_grad(ia)) {
                      auto da = Tensor::zeros(d.shape());
                      for (std::size_t i = 0; i < n; ++i) da[i] = d[i] * g.value(ib)[i];
                      Graph::accumulate(grads, ia, da);
                    }
                    if (g.requires_grad(ib)) {
                      auto db = Tensor::zeros(d.shape());
                      for (std::size_t i = 0; i < n; ++i) db[i] = d[i] * g.value(ia)[i];
                      Graph::accumulate(grads, ib, db);
                    }
                  });
}

Var scale(Var a, double s) {
  auto& g = a.graph();
  auto out = a.value();
  for (auto& v : out.values()) v *= s;
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [ia, s](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto da = d;
    for (auto& v : da.values()) v *= s;
    Graph::accumulate(grads, ia, da);
  });
}

Var add_row(Var a, Var row) {
  auto& g = graph_of(a, row);
  const auto& av = a.value();
  require_matrix(av, "add_row");
  const auto n = row_vector_length(row.value(), "add_row");
  if (n != av.cols()) throw DimensionError("add_row: row length " + std::to_string(n) + " vs " + shape_string(av.shape()));
  auto out = av;
  const auto m = av.rows();
  const double* r = row.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += r[j];
  const auto ia = a.id(), ir = row.id();
  return g.record(std::move(out), {a, row}, [&g, ia, ir, m, n](const Tensor& d, std::size_t, Graph::Grads& grads) {
    if (g.requires_grad(ia)) Graph::accumulate(grads, ia, d);
    if (g.requires_grad(ir)) {
      auto dr = Tensor::zeros(g.value(ir).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dr[j] += d[i * n + j];
      Graph::accumulate(grads, ir, dr);
    }
  });
}

Var mul_row(Var a, Var row) {
  auto& g = graph_of(a, row);
  const auto& av = a.value();
  require_matrix(av, "mul_row");
  const auto n = row_vector_length(row.value(), "mul_row");
  if (n != av.cols()) throw DimensionError("mul_row: row length " + std::to_string(n) + " vs " + shape_string(av.shape()));
  auto out = av;
  const auto m = av.rows();
  const double* r = row.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= r[j];
  const auto ia = a.id(), ir = row.id();
  return g.record(std::move(out), {a, row}, [&g, ia, ir, m, n](const Tensor& d, std::size_t, Graph::Grads& grads) {
    const auto& rv = g.value(ir);
    const auto& x = g.value(ia);
    if (g.requires_grad(ia)) {
      auto da = d;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] *= rv[j];
      Graph::accumulate(grads, ia, da);
    }
    if (g.requires_grad(ir)) {
      auto dr = Tensor::zeros(rv.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dr[j] += d[i * n + j] * x[i * n + j];
      Graph::accumulate(grads, ir, dr);
    }
  });
}

Var transpose(Var a) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "transpose");
  const auto m = av.rows(), n = av.cols();
  auto out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [ia, m, n](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto da = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da.at(i, j) = d.at(j, i);
    Graph::accumulate(grads, ia, da);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  auto& g = parts.front().graph();
  const auto cols = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (&p.graph() != &g) throw std::invalid_argument("operands belong to different graphs");
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column mismatch");
    total += p.value().rows();
  }
  std::vector<double> out;
  out.reserve(total * cols);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, rows)
  for (const auto& p : parts) {
    out.insert(out.end(), p.value().values().begin(), p.value().values().end());
    spans.emplace_back(p.id(), p.value().rows());
  }
  return g.record(Tensor::unchecked({total, cols}, std::move(out)), parts,
                  [&g, spans, cols](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    std::size_t offset = 0;
                    for (const auto& [id, r] : spans) {
                      if (g.requires_grad(id)) {
                        std::vector<double> piece(d.data() + offset * cols, d.data() + (offset + r) * cols);
                        Graph::accumulate(grads, id, Tensor::unchecked({r, cols}, std::move(piece)));
                      }
                      offset += r;
                    }
                  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  auto& g = parts.front().graph();
  const auto rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, cols)
  for (const auto& p : parts) {
    if (&p.graph() != &g) throw std::invalid_argument("operands belong to different graphs");
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row mismatch");
    total += p.value().cols();
    spans.emplace_back(p.id(), p.value().cols());
  }
  auto out = Tensor::zeros({rows, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const auto c = v.cols();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(v.data() + i * c, c, out.data() + i * total + offset);
    offset += c;
  }
  return g.record(std::move(out), parts, [&g, spans, rows, total](const Tensor& d, std::size_t, Graph::Grads& grads) {
    std::size_t off = 0;
    for (const auto& [id, c] : spans) {
      if (g.requires_grad(id)) {
        auto piece = Tensor::zeros({rows, c});
        for (std::size_t i = 0; i < rows; ++i) std::copy_n(d.data() + i * total + off, c, piece.data() + i * c);
        Graph::accumulate(grads, id, piece);
      }
      off += c;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "slice_rows");
  if (begin > end || end > av.rows()) throw DimensionError("slice_rows: range out of bounds");
  const auto cols = av.cols();
  const auto total = av.rows();
  std::vector<double> out(av.data() + begin * cols, av.data() + end * cols);
  const auto ia = a.id();
  return g.record(Tensor::unchecked({end - begin, cols}, std::move(out)), {a},
                  [ia, begin, end, cols, total](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    auto da = Tensor::zeros({total, cols});
                    std::copy_n(d.data(), (end - begin) * cols, da.data() + begin * cols);
                    Graph::accumulate(grads, ia, da);
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "slice_cols");
  if (begin > end || end > av.cols()) throw DimensionError("slice_cols: range out of bounds");
  const auto rows = av.rows(), cols = av.cols(), w = end - begin;
  auto out = Tensor::zeros({rows, w});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(av.data() + i * cols + begin, w, out.data() + i * w);
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [ia, rows, cols, begin, w](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto da = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(d.data() + i * w, w, da.data() + i * cols + begin);
    Graph::accumulate(grads, ia, da);
  });
}

Var layer_norm(Var a, double eps) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "layer_norm");
  const auto m = av.rows(), n = av.cols();
  auto out = Tensor::zeros({m, n});
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (x[j] - mu) * inv_std[i];
  }
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [&g, ia, inv_std, m, n](const Tensor& d, std::size_t self, Graph::Grads& grads) {
    const auto& y = g.value(self);
    auto da = Tensor::zeros({m, n});
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
      const double* dy = d.data() + i * n;
      const double* yr = y.data() + i * n;
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mean_dy += dy[j];
        mean_dyy += dy[j] * yr[j];
      }
      mean_dy *= inv_n;
      mean_dyy *= inv_n;
      for (std::size_t j = 0; j < n; ++j) da.at(i, j) = inv_std[i] * (dy[j] - mean_dy - yr[j] * mean_dyy);
    }
    Graph::accumulate(grads, ia, da);
  });
}

Var gelu(Var a) {
  auto& g = a.graph();
  const auto& av = a.value();
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  auto out = av;
  for (auto& x : out.values()) x = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [&g, ia](const Tensor& d, std::size_t, Graph::Grads& grads) {
    const auto& xv = g.value(ia);
    auto da = d;
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double x = xv[i];
      const double t = std::tanh(k * (x + c * x * x * x));
      const double dt = (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      da[i] *= 0.5 * (1.0 + t) + 0.5 * x * dt;
    }
    Graph::accumulate(grads, ia, da);
  });
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  auto& g = table.graph();
  const auto& tv = table.value();
  require_matrix(tv, "embedding_lookup");
  const auto vocab = tv.rows(), dim = tv.cols();
  auto out = Tensor::zeros({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding_lookup: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * dim, dim, out.data() + i * dim);
  }
  const auto it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [it, idv, vocab, dim](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto dt = Tensor::zeros({vocab, dim});
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* row = dt.data() + static_cast<std::size_t>(idv[i]) * dim;
      for (std::size_t j = 0; j < dim; ++j) row[j] += d[i * dim + j];
    }
    Graph::accumulate(grads, it, dt);
  });
}

Var mse(Var a, Var b) {
  auto& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "mse");
  const auto n = a.value().size();
  if (n == 0) throw DimensionError("mse: empty operands");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = a.value()[i] - b.value()[i];
    s += diff * diff;
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor::unchecked({}, {s / static_cast<double>(n)}), {a, b},
                  [&g, ia, ib, n](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    const double k = 2.0 * d[0] / static_cast<double>(n);
                    auto da = Tensor::zeros(g.value(ia).shape());
                    for (std::size_t i = 0; i < n; ++i) da[i] = k * (g.value(ia)[i] - g.value(ib)[i]);
                    if (g.requires_grad(ia)) Graph::accumulate(grads, ia, da);
                    if (g.requires_grad(ib)) {
                      for (auto& v : da.values()) v = -v;
                      Graph::accumulate(grads, ib, da);
                    }
                  });
}

Var cosine_similarity(Var a, Var b) {
  constexpr double eps = 1e-8;
  auto& g = graph_of(a, b);
  if (a.value().size() != b.value().size()) throw DimensionError("cosine_similarity: size mismatch");
  const auto n = a.value().size();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.value()[i] * b.value()[i];
    na2 += a.value()[i] * a.value()[i];
    nb2 += b.value()[i] * b.value()[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double denom = na * nb + eps;
  const auto ia = a.id(), ib = b.id();
  return g.record(Tensor::unchecked({}, {dot / denom}), {a, b},
                  [&g, ia, ib, n, dot, na, nb, denom](const Tensor& d, std::size_t, Graph::Grads& grads) {
                    const auto& av = g.value(ia);
                    const auto& bv = g.value(ib);
                    auto grad_for = [&](const Tensor& self, const Tensor& other, double nself, double nother) {
                      auto out = Tensor::zeros(self.shape());
                      for (std::size_t i = 0; i < n; ++i) {
                        double v = other[i] / denom;
                        if (nself > 0.0) v -= dot * nother * self[i] / (nself * denom * denom);
                        out[i] = d[0] * v;
                      }
                      return out;
                    };
                    if (g.requires_grad(ia)) Graph::accumulate(grads, ia, grad_for(av, bv, na, nb));
                    if (g.requires_grad(ib)) Graph::accumulate(grads, ib, grad_for(bv, av, nb, na));
                  });
}

Var softmax_masked(Var logits, const AttentionMask& mask) {
  auto& g = logits.graph();
  auto out = softmax_masked(logits.value(), mask);
  const auto il = logits.id();
  return g.record(std::move(out), {logits}, [&g, il](const Tensor& d, std::size_t self, Graph::Grads& grads) {
    const auto& yv = g.value(self);
    const auto q = yv.rows(), k = yv.cols();
    auto dl = Tensor::zeros({q, k});
    for (std::size_t i = 0; i < q; ++i) {
      const double* yr = yv.data() + i * k;
      const double* dr = d.data() + i * k;
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += yr[j] * dr[j];
      for (std::size_t j = 0; j < k; ++j) dl.at(i, j) = yr[j] * (dr[j] - s);
    }
    Graph::accumulate(grads, il, dl);
  });
}

Var sum(Var a) {
  auto& g = a.graph();
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const auto ia = a.id();
  return g.record(Tensor::unchecked({}, {s}), {a}, [&g, ia](const Tensor& d, std::size_t, Graph::Grads& grads) {
    Graph::accumulate(grads, ia, Tensor::full(g.value(ia).shape(), d[0]));
  });
}

Var mean(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var log_sigmoid(Var a) {
  auto& g = a.graph();
  auto out = a.value();
  for (auto& x : out.values()) x = std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [&g, ia](const Tensor& d, std::size_t, Graph::Grads& grads) {
    const auto& xv = g.value(ia);
    auto da = d;
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= 1.0 / (1.0 + std::exp(xv[i]));
    Graph::accumulate(grads, ia, da);
  });
}

Var rotate_pairs(Var a, const Tensor& cos_table, const Tensor& sin_table) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "rotate_pairs");
  const auto m = av.rows(), n = av.cols();
  if (n % 2 != 0) throw DimensionError("rotate_pairs: odd column count");
  const auto h = n / 2;
  if (cos_table.shape() != Shape{m, h} || sin_table.shape() != Shape{m, h}) {
    throw DimensionError("rotate_pairs: angle tables must be " + shape_string({m, h}));
  }
  auto out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < h; ++p) {
      const double c = cos_table.at(i, p), s = sin_table.at(i, p);
      const double x0 = av.at(i, 2 * p), x1 = av.at(i, 2 * p + 1);
      out.at(i, 2 * p) = x0 * c - x1 * s;
      out.at(i, 2 * p + 1) = x0 * s + x1 * c;
    }
  }
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [ia, cos_table, sin_table, m, n, h](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto da = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < h; ++p) {
        const double c = cos_table.at(i, p), s = sin_table.at(i, p);
        const double d0 = d.at(i, 2 * p), d1 = d.at(i, 2 * p + 1);
        da.at(i, 2 * p) = d0 * c + d1 * s;
        da.at(i, 2 * p + 1) = -d0 * s + d1 * c;
      }
    }
    Graph::accumulate(grads, ia, da);
  });
}

Var group_mean_rows(Var a, std::size_t group) {
  auto& g = a.graph();
  const auto& av = a.value();
  require_matrix(av, "group_mean_rows");
  if (group == 0 || av.rows() % group != 0) throw DimensionError("group_mean_rows: rows not divisible by group");
  const auto groups = av.rows() / group, n = av.cols();
  if (group == 1) return a;
  auto out = Tensor::zeros({groups, n});
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out.at(r / group, j) += av.at(r, j) * inv;
  const auto ia = a.id();
  const auto rows = av.rows();
  return g.record(std::move(out), {a}, [ia, group, rows, n, inv](const Tensor& d, std::size_t, Graph::Grads& grads) {
    auto da = Tensor::zeros({rows, n});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) da.at(r, j) = d.at(r / group, j) * inv;
    Graph::accumulate(grads, ia, da);
  });
}

Var detach(Var a) { return a.graph().constant(a.value()); }

}  // namespace kfs

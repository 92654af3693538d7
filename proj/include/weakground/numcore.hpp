#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wg {

/// Raised when tensor shapes do not line up for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major tensor of doubles. Rank 1 tensors behave as a single row
/// when an operation needs a matrix view.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  bool all_finite() const;
  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using ParamId = std::size_t;

/// Named learnable tensors with matching gradient accumulators. Iteration
/// order is insertion order, which keeps serialization and checksums stable.
class ParamStore {
 public:
  ParamId add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  ParamId id(const std::string& name) const;
  const std::string& name(ParamId id) const { return names_.at(id); }
  std::size_t count() const { return values_.size(); }
  std::size_t scalar_count() const;

  Tensor& value(ParamId id) { return values_.at(id); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  Tensor& grad(ParamId id) { return grads_.at(id); }
  const Tensor& grad(ParamId id) const { return grads_.at(id); }
  Tensor& value(const std::string& n) { return values_.at(id(n)); }
  const Tensor& value(const std::string& n) const { return values_.at(id(n)); }

  void zero_grad();
  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::map<std::string, ParamId> index_;
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;
};

/// Records one forward pass. Nodes are appended in evaluation order, so a
/// reverse sweep over the node list is a valid topological order. A tape is
/// used for exactly one forward/backward and then discarded.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  Var param(ParamStore& store, ParamId id);
  Var param(ParamStore& store, const std::string& name) { return param(store, store.id(name)); }

  /// Reverse sweep from a scalar root. Parameter gradients are added to the
  /// store's accumulators, so repeated calls accumulate.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  /// Process-unique id, lets callers cache per-tape handles safely.
  std::uint64_t serial() const { return serial_; }

  // Op construction interface.
  using BackFn = std::function<void(Tape&, std::size_t self)>;
  Var record(Tensor value, std::vector<std::size_t> inputs, BackFn back);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer of a node, allocated on first touch.
  Tensor& grad(std::size_t id);
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackFn back;
    bool needs_grad = false;
    ParamStore* store = nullptr;
    ParamId param = 0;
  };
  std::vector<Node> nodes_;
  std::uint64_t serial_;
};

// Differentiable operations. Matrices are [rows x cols]; rank-1 inputs act
// as a single row.

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a [1 x c] (or [c]) row to every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var softmax_rows(Var a, double temperature = 1.0);
Var log_softmax_rows(Var a, double temperature = 1.0);
/// Per-row normalization to zero mean / unit variance, then gain and bias.
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
/// Mean of rows [begin, end) as a [1 x c] row.
Var mean_rows(Var a, std::size_t begin, std::size_t end);
Var sum(Var a);
Var mean(Var a);
/// Scalar entry a[r, c].
Var pick(Var a, std::size_t r, std::size_t c);
/// Column c as an [n x 1] matrix.
Var column(Var a, std::size_t c);
/// Pairwise cosine similarities between rows of a [n x D] and b [m x D].
Var cosine_matrix(Var a, Var b, double eps = 1e-12);
/// Row-wise max as [n x 1]; gradient goes to the lowest-index argmax.
Var row_max(Var a);
/// Row-wise sum of the top-k entries as [n x 1] (k clipped to cols).
Var row_topk_sum(Var a, std::size_t k);
/// Row-wise log-sum-exp as [n x 1].
Var row_logsumexp(Var a);
/// Multi-head scaled dot-product attention. q [n x D], k/v [m x D].
Var attention(Var q, Var k, Var v, std::size_t heads);
/// Block-diagonal attention: query rows [q_offsets[s], q_offsets[s+1]) see
/// only key rows [k_offsets[s], k_offsets[s+1]).
Var segment_attention(Var q, Var k, Var v, std::size_t heads, const std::vector<std::size_t>& q_offsets,
                      const std::vector<std::size_t>& k_offsets);

/// -log( exp(pos/t) / (exp(pos/t) + sum_i exp(neg_i/t)) ). An absent
/// negative set yields exactly 0.
Var info_nce(Var pos, const std::optional<Var>& negs, double temperature);
/// -log softmax(logits)[target] for a single row of logits.
Var cross_entropy(Var logits, std::size_t target);

// Value-level helpers (no tape).

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias);

enum class Activation { relu, tanh, none };

struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::none;
};

Tensor mlp_forward(const Tensor& x, const std::vector<DenseLayer>& layers);

inline constexpr double kCosineEps = 1e-12;

double cosine_sim(std::span<const double> a, std::span<const double> b, double eps = kCosineEps);
std::vector<double> softmax(std::span<const double> x, double temperature = 1.0);
double info_nce(double pos, std::span<const double> negs, double temperature);
double cross_entropy(std::span<const double> logits, std::size_t target);

// Gradient checking.

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  /// Per-parameter cap on checked entries (0 = all); entries are sampled
  /// with `seed` when the cap applies.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Entries skipped because a kink (relu at 0, argmax switch) lay within the
  /// finite-difference stencil.
  std::size_t skipped_kinks = 0;
};

using ScalarFn = std::function<Var(Tape&)>;
/// Runs after the analytic backward pass, before comparison. Tests use it to
/// corrupt a gradient on purpose.
using GradHook = std::function<void(ParamStore&)>;

GradCheckReport grad_check(const ScalarFn& f, ParamStore& store, const GradCheckOptions& opt = {},
                           const GradHook& after_backward = {});

}  // namespace wg

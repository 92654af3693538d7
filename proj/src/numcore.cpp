#include "weakground/numcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

namespace wg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ContractError("Tensor: zero-sized dimension in " + shape_str(shape_));
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw ContractError("Tensor: zero-sized dimension in " + shape_str(shape_));
  if (shape_product(shape_) != data_.size())
    throw DimensionError("Tensor: shape " + shape_str(shape_) + " holds " + std::to_string(shape_product(shape_)) +
                         " values, got " + std::to_string(data_.size()));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- ParamStore

ParamId ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
  const ParamId id = values_.size();
  grads_.emplace_back(init.shape(), 0.0);
  values_.push_back(std::move(init));
  names_.push_back(name);
  index_[name] = id;
  return id;
}

ParamId ParamStore::id(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& g : grads_) g.fill(0.0);
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    for (auto d : values_[i].shape()) mix(&d, sizeof d);
    mix(values_[i].data(), values_[i].size() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------- Tape

const Tensor& Var::value() const { return tape->value(id); }

double Var::item() const {
  const Tensor& t = value();
  if (t.size() != 1) throw ContractError("Var::item on non-scalar " + shape_str(t.shape()));
  return t[0];
}

Tape::Tape() {
  static std::atomic<std::uint64_t> next{1};
  serial_ = next++;
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackFn back) {
  Node n;
  n.value = std::move(value);
  for (auto i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParamStore& store, ParamId id) {
  Node n;
  n.value = store.value(id);
  n.needs_grad = true;
  n.store = &store;
  n.param = id;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  if (nodes_[root.id].value.size() != 1)
    throw ContractError("backward: root must be scalar, got " + shape_str(nodes_[root.id].value.shape()));
  if (!nodes_[root.id].needs_grad) return;
  for (auto& n : nodes_) n.grad = Tensor();
  grad(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.store) {
      Tensor& acc = n.store->grad(n.param);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad[k];
    } else if (n.back) {
      n.back(*this, i);
    }
  }
}

// ---------------------------------------------------------------- kernels

namespace {

// C[r][j] += sum_s A(r, s) * B[s][j] with A(r, s) = a[r * ar + s * as] and
// B rows contiguous. 4 x 8 register tiles; accumulation order over s is fixed.

typedef double v4d __attribute__((vector_size(32)));

typedef double v4du __attribute__((vector_size(32), aligned(8)));
#define WG_LOAD4(p) (*reinterpret_cast<const v4du*>(p))
#define WG_ADD4(p, v) (*reinterpret_cast<v4du*>(p) += (v))

__attribute__((always_inline)) inline void gemm_body(const double* a, std::size_t ar, std::size_t as, const double* b, double* c, std::size_t rows,
                 std::size_t inner, std::size_t p) {
  std::size_t r0 = 0;
  for (; r0 + 4 <= rows; r0 += 4) {
    const double* a0 = a + r0 * ar;
    const double* a1 = a0 + ar;
    const double* a2 = a1 + ar;
    const double* a3 = a2 + ar;
    std::size_t j0 = 0;
    for (; j0 + 8 <= p; j0 += 8) {
      v4d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t s = 0; s < inner; ++s) {
        const double* bs = b + s * p + j0;
        const v4d b0 = WG_LOAD4(bs), b1 = WG_LOAD4(bs + 4);
        const std::size_t o = s * as;
        c00 += a0[o] * b0;
        c01 += a0[o] * b1;
        c10 += a1[o] * b0;
        c11 += a1[o] * b1;
        c20 += a2[o] * b0;
        c21 += a2[o] * b1;
        c30 += a3[o] * b0;
        c31 += a3[o] * b1;
      }
      double* cr = c + r0 * p + j0;
      WG_ADD4(cr, c00);
      WG_ADD4(cr + 4, c01);
      WG_ADD4(cr + p, c10);
      WG_ADD4(cr + p + 4, c11);
      WG_ADD4(cr + 2 * p, c20);
      WG_ADD4(cr + 2 * p + 4, c21);
      WG_ADD4(cr + 3 * p, c30);
      WG_ADD4(cr + 3 * p + 4, c31);
    }
    for (; j0 < p; ++j0)
      for (std::size_t r = 0; r < 4; ++r) {
        double s0 = 0.0;
        for (std::size_t s = 0; s < inner; ++s) s0 += a[(r0 + r) * ar + s * as] * b[s * p + j0];
        c[(r0 + r) * p + j0] += s0;
      }
  }
  for (; r0 < rows; ++r0) {
    double* cr = c + r0 * p;
    std::size_t j0 = 0;
    for (; j0 + 8 <= p; j0 += 8) {
      v4d c0{}, c1{};
      for (std::size_t s = 0; s < inner; ++s) {
        const double av = a[r0 * ar + s * as];
        const double* bs = b + s * p + j0;
        c0 += av * WG_LOAD4(bs);
        c1 += av * WG_LOAD4(bs + 4);
      }
      WG_ADD4(cr + j0, c0);
      WG_ADD4(cr + j0 + 4, c1);
    }
    for (; j0 < p; ++j0) {
      double s0 = 0.0;
      for (std::size_t s = 0; s < inner; ++s) s0 += a[r0 * ar + s * as] * b[s * p + j0];
      cr[j0] += s0;
    }
  }
}

#if defined(__x86_64__) && defined(__GNUC__)
__attribute__((target("avx2,fma"))) void gemm_avx2(const double* a, std::size_t ar, std::size_t as, const double* b,
                                                   double* c, std::size_t rows, std::size_t inner, std::size_t p) {
  gemm_body(a, ar, as, b, c, rows, inner, p);
}
const bool kHasAvx2 = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#endif

void gemm_kernel(const double* a, std::size_t ar, std::size_t as, const double* b, double* c, std::size_t rows,
                 std::size_t inner, std::size_t p) {
#if defined(__x86_64__) && defined(__GNUC__)
  if (kHasAvx2) return gemm_avx2(a, ar, as, b, c, rows, inner, p);
#endif
  gemm_body(a, ar, as, b, c, rows, inner, p);
}

// c[n x p] += a[n x k] * b[k x p]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t p) {
  gemm_kernel(a, k, 1, b, c, n, k, p);
}

// c[n x p] += a[n x k] * b[p x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t p) {
  thread_local std::vector<double> bt;
  bt.resize(k * p);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t t = 0; t < k; ++t) bt[t * p + j] = b[j * k + t];
  gemm_kernel(a, k, 1, bt.data(), c, n, k, p);
}

// c[k x p] += a[n x k]^T * b[n x p]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t p) {
  gemm_kernel(a, 1, k, b, c, k, n, p);
}

Shape mat_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) dim_error(op, a.shape(), b.shape());
}

template <class F>
Var unary(Var a, F&& fwd, std::function<void(const Tensor& in, const Tensor& out, const Tensor& g, Tensor& gin)> bwd) {
  const Tensor& in = a.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, bwd](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    bwd(t.value(ia), t.value(self), t.grad_of(self), t.grad(ia));
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) dim_error("matmul", A.shape(), B.shape());
  const std::size_t n = A.rows(), k = A.cols(), p = B.cols();
  Tensor out(mat_shape(n, p), 0.0);
  gemm_nn(A.data(), B.data(), out.data(), n, k, p);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, n, k, p](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) gemm_nt(g.data(), t.value(ib).data(), t.grad(ia).data(), n, p, k);
    if (t.needs_grad(ib)) gemm_tn(t.value(ia).data(), g.data(), t.grad(ib).data(), n, k, p);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) dim_error("matmul_nt", A.shape(), B.shape());
  const std::size_t n = A.rows(), k = A.cols(), p = B.rows();
  Tensor out(mat_shape(n, p), 0.0);
  gemm_nt(A.data(), B.data(), out.data(), n, k, p);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, n, k, p](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) gemm_nn(g.data(), t.value(ib).data(), t.grad(ia).data(), n, p, k);
    if (t.needs_grad(ib)) gemm_tn(g.data(), t.value(ia).data(), t.grad(ib).data(), n, p, k);
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out(mat_shape(m, n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(j, i) = A.at(i, j);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same("add", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      Tensor& gi = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same("sub", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& B = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& A = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.size() != A.cols()) dim_error("add_row", A.shape(), R.shape());
  Tensor out = A;
  const std::size_t n = A.rows(), c = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += R[j];
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), {ia, ir}, [ia, ir, n, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ir)) {
      Tensor& gr = t.grad(ir);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
}

Var scale(Var a, double s) {
  return unary(
      a, [s](double x) { return x * s; },
      [s](const Tensor&, const Tensor&, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += s * g[i];
      });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, [s](double x) { return x + s; },
      [](const Tensor&, const Tensor&, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](const Tensor& in, const Tensor&, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (in[i] > 0.0) gi[i] += g[i];
      });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](const Tensor&, const Tensor& out, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * (1.0 - out[i] * out[i]);
      });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](const Tensor&, const Tensor& out, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * out[i];
      });
}

Var log(Var a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw ContractError("log: non-positive input");
  return unary(
      a, [](double x) { return std::log(x); },
      [](const Tensor& in, const Tensor&, const Tensor& g, Tensor& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / in[i];
      });
}

Var softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("softmax_rows: temperature must be > 0");
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = A.data() + i * c;
    double* y = out.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp((x[j] - mx) / temperature));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, n, c, temperature](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot) / temperature;
    }
  });
}

Var log_softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("log_softmax_rows: temperature must be > 0");
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = A.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp((x[j] - mx) / temperature);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (x[j] - mx) / temperature - lz;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, n, c, temperature](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += (g[i * c + j] - std::exp(y[i * c + j]) * gs) / temperature;
    }
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  if (gain.value().size() != c) dim_error("layer_norm_rows(gain)", A.shape(), gain.value().shape());
  if (bias.value().size() != c) dim_error("layer_norm_rows(bias)", A.shape(), bias.value().shape());
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor out(A.shape());
  auto xhat = std::make_shared<std::vector<double>>(A.size());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = A.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (x[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * G[j] + B[j];
    }
  }
  const std::size_t ia = a.id, ig = gain.id, ib = bias.id;
  return a.tape->record(std::move(out), {ia, ig, ib}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& Gv = t.value(ig);
    if (t.needs_grad(ig)) {
      Tensor& gg = t.grad(ig);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < n; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * Gv[j];
          s1 += dh;
          s2 += dh * (*xhat)[i * c + j];
        }
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * Gv[j];
          ga[i * c + j] += is * (dh - inv_c * s1 - (*xhat)[i * c + j] * inv_c * s2);
        }
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != n) dim_error("concat_cols", parts[0].value().shape(), p.value().shape());
    widths.push_back(p.value().cols());
    ids.push_back(p.id);
    total += p.value().cols();
  }
  Tensor out(mat_shape(n, total));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      std::memcpy(out.data() + i * total + off, P.data() + i * widths[k], widths[k] * sizeof(double));
    off += widths[k];
  }
  return parts[0].tape->record(std::move(out), ids, [ids, widths, n, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        Tensor& gp = t.grad(ids[k]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::vector<std::size_t> sizes, ids;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c) dim_error("concat_rows", parts[0].value().shape(), p.value().shape());
    sizes.push_back(p.value().size());
    ids.push_back(p.id);
    rows += p.value().rows();
  }
  Tensor out(mat_shape(rows, c));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.value().data(), p.value().size() * sizeof(double));
    off += p.value().size();
  }
  return parts[0].tape->record(std::move(out), ids, [ids, sizes](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        Tensor& gp = t.grad(ids[k]);
        for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[off + i];
      }
      off += sizes[k];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin >= end || end > A.rows())
    throw ContractError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") outside " + shape_str(A.shape()));
  const std::size_t c = A.cols();
  Tensor out(mat_shape(end - begin, c));
  std::memcpy(out.data(), A.data() + begin * c, out.size() * sizeof(double));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, begin, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin >= end || end > A.cols())
    throw ContractError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") outside " + shape_str(A.shape()));
  const std::size_t n = A.rows(), c = A.cols(), w = end - begin;
  Tensor out(mat_shape(n, w));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = A[i * c + begin + j];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, begin, n, c, w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  const Tensor& A = a.value();
  if (rows.empty()) throw ContractError("gather_rows: empty index list");
  const std::size_t c = A.cols();
  Tensor out(mat_shape(rows.size(), c));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= A.rows()) throw ContractError("gather_rows: row index out of range");
    std::memcpy(out.data() + k * c, A.data() + rows[k] * c, c * sizeof(double));
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, rows, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) ga[rows[k] * c + j] += g[k * c + j];
  });
}

Var mean_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin >= end || end > A.rows()) throw ContractError("mean_rows: empty or out-of-range span");
  const std::size_t c = A.cols();
  const double inv = 1.0 / static_cast<double>(end - begin);
  Tensor out(mat_shape(1, c), 0.0);
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
  if (end - begin > 1)
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, begin, end, c, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var pick(Var a, std::size_t r, std::size_t c) {
  const Tensor& A = a.value();
  if (r >= A.rows() || c >= A.cols()) throw ContractError("pick: index outside " + shape_str(A.shape()));
  const std::size_t idx = r * A.cols() + c;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(A[idx]), {ia},
                        [ia, idx](Tape& t, std::size_t self) { t.grad(ia)[idx] += t.grad_of(self)[0]; });
}

Var column(Var a, std::size_t c) {
  const Tensor& A = a.value();
  if (c >= A.cols()) throw ContractError("column: index outside " + shape_str(A.shape()));
  const std::size_t n = A.rows(), w = A.cols();
  Tensor out(mat_shape(n, 1));
  for (std::size_t i = 0; i < n; ++i) out[i] = A[i * w + c];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, n, w, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i * w + c] += g[i];
  });
}

Var cosine_matrix(Var a, Var b, double eps) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) dim_error("cosine_matrix", A.shape(), B.shape());
  const std::size_t n = A.rows(), m = B.rows(), d = A.cols();
  auto na = std::make_shared<std::vector<double>>(n);
  auto nb = std::make_shared<std::vector<double>>(m);
  auto raw = std::make_shared<std::vector<double>>(n * m);  // unclamped cosines
  auto norm = [d](const double* x) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
    return std::sqrt(s);
  };
  for (std::size_t i = 0; i < n; ++i) (*na)[i] = norm(A.data() + i * d);
  for (std::size_t j = 0; j < m; ++j) (*nb)[j] = norm(B.data() + j * d);
  Tensor out(mat_shape(n, m), 0.0);
  gemm_nt(A.data(), B.data(), out.data(), n, d, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double c = out[i * m + j] / (std::max((*na)[i], eps) * std::max((*nb)[j], eps));
      (*raw)[i * m + j] = c;
      out[i * m + j] = std::clamp(c, -1.0, 1.0);
    }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& Av = t.value(ia);
    const Tensor& Bv = t.value(ib);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double ai = std::max((*na)[i], eps);
        const bool clamped = (*na)[i] < eps;
        double self_coef = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          if (gij == 0.0) continue;
          const double coef = gij / (ai * std::max((*nb)[j], eps));
          const double* bj = Bv.data() + j * d;
          for (std::size_t k = 0; k < d; ++k) ga[i * d + k] += coef * bj[k];
          if (!clamped) self_coef += gij * (*raw)[i * m + j];
        }
        if (self_coef != 0.0) {
          const double s = self_coef / (ai * ai);
          for (std::size_t k = 0; k < d; ++k) ga[i * d + k] -= s * Av[i * d + k];
        }
      }
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t j = 0; j < m; ++j) {
        const double bj = std::max((*nb)[j], eps);
        const bool clamped = (*nb)[j] < eps;
        double self_coef = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double gij = g[i * m + j];
          if (gij == 0.0) continue;
          const double coef = gij / (bj * std::max((*na)[i], eps));
          const double* ai = Av.data() + i * d;
          for (std::size_t k = 0; k < d; ++k) gb[j * d + k] += coef * ai[k];
          if (!clamped) self_coef += gij * (*raw)[i * m + j];
        }
        if (self_coef != 0.0) {
          const double s = self_coef / (bj * bj);
          for (std::size_t k = 0; k < d; ++k) gb[j * d + k] -= s * Bv[j * d + k];
        }
      }
    }
  });
}

Var row_max(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  Tensor out(mat_shape(n, 1));
  std::vector<std::size_t> arg(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (A[i * c + j] > A[i * c + best]) best = j;
    arg[i] = best;
    out[i] = A[i * c + best];
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, arg, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < arg.size(); ++i) ga[i * c + arg[i]] += g[i];
  });
}

Var row_topk_sum(Var a, std::size_t k) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  k = std::min(k, c);
  Tensor out(mat_shape(n, 1), 0.0);
  std::vector<std::size_t> chosen;
  chosen.reserve(n * k);
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = A.data() + i * c;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t x, std::size_t y) { return row[x] > row[y]; });
    for (std::size_t r = 0; r < k; ++r) {
      out[i] += row[order[r]];
      chosen.push_back(i * c + order[r]);
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, chosen, k](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t q = 0; q < chosen.size(); ++q) ga[chosen[q]] += g[q / k];
  });
}

Var row_logsumexp(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), c = A.cols();
  Tensor out(mat_shape(n, 1));
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = A.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    out[i] = mx + std::log(z);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, n, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i] * std::exp(x[i * c + j] - y[i]);
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  return segment_attention(q, k, v, heads, {0, q.rows()}, {0, k.rows()});
}

Var segment_attention(Var q, Var k, Var v, std::size_t heads, const std::vector<std::size_t>& q_offsets,
                      const std::vector<std::size_t>& k_offsets) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t n = Q.rows(), m = K.rows(), d = Q.cols();
  if (K.cols() != d) dim_error("attention(q,k)", Q.shape(), K.shape());
  if (V.rows() != m || V.cols() != d) dim_error("attention(k,v)", K.shape(), V.shape());
  if (heads == 0 || d % heads != 0) throw ContractError("attention: width not divisible by head count");
  if (q_offsets.size() < 2 || q_offsets.size() != k_offsets.size() || q_offsets.front() != 0 ||
      k_offsets.front() != 0 || q_offsets.back() != n || k_offsets.back() != m)
    throw ContractError("attention: segment offsets do not cover the inputs");
  for (std::size_t s = 0; s + 1 < q_offsets.size(); ++s) {
    if (q_offsets[s] > q_offsets[s + 1] || k_offsets[s] > k_offsets[s + 1])
      throw ContractError("attention: segment offsets must be non-decreasing");
    if (q_offsets[s] < q_offsets[s + 1] && k_offsets[s] == k_offsets[s + 1])
      throw ContractError("attention: query segment has no keys");
  }
  const std::size_t segments = q_offsets.size() - 1;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs for query row i, head h start at base[i] + h * (segment key count)
  auto base = std::make_shared<std::vector<std::size_t>>(n);
  std::size_t total = 0;
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t len = k_offsets[s + 1] - k_offsets[s];
    for (std::size_t i = q_offsets[s]; i < q_offsets[s + 1]; ++i) {
      (*base)[i] = total;
      total += heads * len;
    }
  }
  auto probs = std::make_shared<std::vector<double>>(total);
  Tensor out(mat_shape(n, d), 0.0);
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t k0 = k_offsets[s], len = k_offsets[s + 1] - k0;
    for (std::size_t i = q_offsets[s]; i < q_offsets[s + 1]; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        double* p = probs->data() + (*base)[i] + h * len;
        const double* qi = Q.data() + i * d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = K.data() + (k0 + j) * d + off;
          double acc = 0.0;
          for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
          p[j] = acc * inv_sqrt;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) z += (p[j] = std::exp(p[j] - mx));
        double* oi = out.data() + i * d + off;
        for (std::size_t j = 0; j < len; ++j) {
          p[j] /= z;
          const double* vj = V.data() + (k0 + j) * d + off;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
        }
      }
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(std::move(out), {iq, ik, iv}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& Qv = t.value(iq);
    const Tensor& Kv = t.value(ik);
    const Tensor& Vv = t.value(iv);
    Tensor* gq = t.needs_grad(iq) ? &t.grad(iq) : nullptr;
    Tensor* gk = t.needs_grad(ik) ? &t.grad(ik) : nullptr;
    Tensor* gv = t.needs_grad(iv) ? &t.grad(iv) : nullptr;
    std::vector<double> ds;
    for (std::size_t s = 0; s < segments; ++s) {
      const std::size_t k0 = k_offsets[s], len = k_offsets[s + 1] - k0;
      ds.resize(len);
      for (std::size_t i = q_offsets[s]; i < q_offsets[s + 1]; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          const double* p = probs->data() + (*base)[i] + h * len;
          const double* gi = g.data() + i * d + off;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            const double* vj = Vv.data() + (k0 + j) * d + off;
            double dp = 0.0;
            for (std::size_t tt = 0; tt < dh; ++tt) dp += gi[tt] * vj[tt];
            ds[j] = dp;
            dot += dp * p[j];
            if (gv) {
              double* gvj = gv->data() + (k0 + j) * d + off;
              for (std::size_t tt = 0; tt < dh; ++tt) gvj[tt] += p[j] * gi[tt];
            }
          }
          for (std::size_t j = 0; j < len; ++j) ds[j] = p[j] * (ds[j] - dot) * inv_sqrt;
          const double* qi = Qv.data() + i * d + off;
          for (std::size_t j = 0; j < len; ++j) {
            if (ds[j] == 0.0) continue;
            const double* kj = Kv.data() + (k0 + j) * d + off;
            if (gq) {
              double* gqi = gq->data() + i * d + off;
              for (std::size_t tt = 0; tt < dh; ++tt) gqi[tt] += ds[j] * kj[tt];
            }
            if (gk) {
              double* gkj = gk->data() + (k0 + j) * d + off;
              for (std::size_t tt = 0; tt < dh; ++tt) gkj[tt] += ds[j] * qi[tt];
            }
          }
        }
      }
    }
  });
}

Var info_nce(Var pos, const std::optional<Var>& neg_set, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("info_nce: temperature must be > 0");
  const Tensor& P = pos.value();
  if (P.size() != 1) throw ContractError("info_nce: positive score must be scalar");
  if (!neg_set) return pos.tape->record(Tensor::scalar(0.0), {pos.id}, [](Tape&, std::size_t) {});
  const Var negs = *neg_set;
  const Tensor& N = negs.value();
  const std::size_t k = N.size();
  std::vector<double> logits(k + 1);
  logits[0] = P[0] / temperature;
  for (std::size_t i = 0; i < k; ++i) logits[i + 1] = N[i] / temperature;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double loss = mx + std::log(z) - logits[0];
  auto probs = std::make_shared<std::vector<double>>(k + 1);
  for (std::size_t i = 0; i <= k; ++i) (*probs)[i] = std::exp(logits[i] - mx) / z;
  const std::size_t ip = pos.id, in = negs.id;
  return pos.tape->record(Tensor::scalar(std::max(loss, 0.0)), {ip, in}, [=](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0] / temperature;
    if (t.needs_grad(ip)) t.grad(ip)[0] += g * ((*probs)[0] - 1.0);
    if (t.needs_grad(in)) {
      Tensor& gn = t.grad(in);
      for (std::size_t i = 0; i < k; ++i) gn[i] += g * (*probs)[i + 1];
    }
  });
}

Var cross_entropy(Var logits, std::size_t target) {
  const Tensor& L = logits.value();
  if (target >= L.size())
    throw ContractError("cross_entropy: target " + std::to_string(target) + " outside " +
                        std::to_string(L.size()) + " logits");
  const std::size_t c = L.size();
  const double mx = *std::max_element(L.values().begin(), L.values().end());
  double z = 0.0;
  for (double l : L.values()) z += std::exp(l - mx);
  const double loss = mx + std::log(z) - L[target];
  auto probs = std::make_shared<std::vector<double>>(c);
  for (std::size_t i = 0; i < c; ++i) (*probs)[i] = std::exp(L[i] - mx) / z;
  const std::size_t il = logits.id;
  return logits.tape->record(Tensor::scalar(std::max(loss, 0.0)), {il}, [=](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    Tensor& gl = t.grad(il);
    for (std::size_t i = 0; i < c; ++i) gl[i] += g * ((*probs)[i] - (i == target ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------- value helpers

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.cols() != w.rows()) dim_error("linear_forward(x,w)", x.shape(), w.shape());
  if (bias.size() != w.cols()) dim_error("linear_forward(w,bias)", w.shape(), bias.shape());
  Tape tape;
  Var out = add_row(matmul(tape.constant(x), tape.constant(w)), tape.constant(bias));
  return out.value();
}

Tensor mlp_forward(const Tensor& x, const std::vector<DenseLayer>& layers) {
  if (layers.empty()) throw ContractError("mlp_forward: empty layer list");
  Tensor h = x;
  for (const auto& layer : layers) {
    h = linear_forward(h, layer.weight, layer.bias);
    switch (layer.activation) {
      case Activation::relu:
        for (auto& v : h.values()) v = v > 0.0 ? v : 0.0;
        break;
      case Activation::tanh:
        for (auto& v : h.values()) v = std::tanh(v);
        break;
      case Activation::none:
        break;
    }
  }
  return h;
}

double cosine_sim(std::span<const double> a, std::span<const double> b, double eps) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim: length mismatch");
  if (a.empty()) throw ContractError("cosine_sim: empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double c = dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
  return std::clamp(c, -1.0, 1.0);
}

std::vector<double> softmax(std::span<const double> x, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("softmax: temperature must be > 0");
  if (x.empty()) throw ContractError("softmax: empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp((x[i] - mx) / temperature));
  for (auto& v : out) v /= z;
  return out;
}

double info_nce(double pos, std::span<const double> negs, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("info_nce: temperature must be > 0");
  if (negs.empty()) return 0.0;
  double mx = pos / temperature;
  for (double n : negs) mx = std::max(mx, n / temperature);
  double z = std::exp(pos / temperature - mx);
  for (double n : negs) z += std::exp(n / temperature - mx);
  return std::max(0.0, mx + std::log(z) - pos / temperature);
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw ContractError("cross_entropy: target index out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return std::max(0.0, mx + std::log(z) - logits[target]);
}

// ---------------------------------------------------------------- grad_check

GradCheckReport grad_check(const ScalarFn& f, ParamStore& store, const GradCheckOptions& opt,
                           const GradHook& after_backward) {
  GradCheckReport report;
  store.zero_grad();
  {
    Tape tape;
    Var root = f(tape);
    tape.backward(root);
  }
  if (after_backward) after_backward(store);

  auto eval = [&]() {
    Tape tape;
    return f(tape).item();
  };
  std::mt19937_64 rng(opt.seed);

  for (ParamId p = 0; p < store.count(); ++p) {
    Tensor& value = store.value(p);
    std::vector<std::size_t> entries(value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opt.max_entries_per_param > 0 && entries.size() > opt.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opt.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    for (std::size_t e : entries) {
      const double x0 = value[e];
      const double analytic = store.grad(p)[e];
      double h = opt.step;
      double numeric = 0.0;
      bool smooth = false;
      for (int attempt = 0; attempt < 3 && !smooth; ++attempt, h /= 10.0) {
        value[e] = x0 + h;
        const double fp = eval();
        value[e] = x0 - h;
        const double fm = eval();
        value[e] = x0;
        const double f0 = eval();
        numeric = (fp - fm) / (2.0 * h);
        // One-sided slopes disagree sharply when the stencil straddles a kink.
        const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
        const double spread = std::abs(fwd - bwd);
        smooth = spread <= opt.tolerance * std::max({std::abs(fwd), std::abs(bwd), 1.0}) * 10.0;
      }
      value[e] = x0;
      if (!smooth) {
        ++report.skipped_kinks;
        continue;
      }
      ++report.checked;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = store.name(p);
        report.worst_index = e;
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace wg

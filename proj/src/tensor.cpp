#include "cmam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace cmam {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  return shape[axis];
}

Tensor random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values) v = dist(rng);
  return t;
}

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Shape& Var::shape() const { return tape_->shape(id_); }
std::size_t Var::size() const { return tape_->value(id_).size(); }
std::size_t Var::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}
std::span<const double> Var::values() const { return tape_->value(id_); }

double Var::item() const {
  auto v = values();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return v[0];
}

Tensor Var::tensor() const {
  auto v = values();
  return Tensor(shape(), std::vector<double>(v.begin(), v.end()));
}

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw std::length_error("tape node limit reached");
  }
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.shape = std::move(value.shape);
  n.value = std::move(value.values);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.shape = std::move(value.shape);
  n.value = std::move(value.values);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(Shape shape, std::vector<double> value, std::span<const Var> parents,
                 BackwardFn backward) {
  if (shape_size(shape) != value.size()) {
    throw ShapeError("recorded value size " + std::to_string(value.size()) + " does not match shape " +
                     shape_str(shape));
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.parents.reserve(parents.size());
  for (const Var& p : parents) {
    if (&p.tape() != this) throw std::invalid_argument("operands recorded on different tapes");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::invalid_argument("loss recorded on a different tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(nodes_[loss.id()].shape));
  }
  for (Node& n : nodes_) n.grad.clear();
  visits_ = 0;
  nodes_[loss.id()].grad.assign(1, 1.0);
  for (std::int64_t id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.requires_grad) continue;
    ++visits_;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.shape, 0.0);
  return Tensor(n.shape, n.grad);
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

namespace {

// Four interleaved partial sums; fixed association keeps results reproducible.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double g, const double* x, double* y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += g * x[j];
}

}  // namespace

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* bp = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(c), {a, b}, [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
    auto dc = t.out_grad(self);
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      auto bv = t.value(ib);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          da[i * k + p] += dot(dc.data() + i * n, bv.data() + p * n, n);
        }
      }
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      auto av = t.value(ia);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dc[i * n + j];
        }
      }
    }
  });
}

Var matvec(Var w, Var x) {
  require_rank(w, 2, "matvec");
  const std::size_t m = w.dim(0), k = w.dim(1);
  if (x.size() != k) {
    throw ShapeError("matvec: " + shape_str(w.shape()) + " applied to " + shape_str(x.shape()));
  }
  auto wv = w.values();
  auto xv = x.values();
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = dot(wv.data() + i * k, xv.data(), k);
  }
  const auto iw = w.id(), ix = x.id();
  return w.tape().record({m}, std::move(y), {w, x}, [iw, ix, m, k](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(iw)) {
      auto dw = t.grad_buffer(iw);
      auto xv = t.value(ix);
      for (std::size_t i = 0; i < m; ++i) {
        if (dy[i] != 0.0) axpy(dy[i], xv.data(), dw.data() + i * k, k);
      }
    }
    if (t.requires_grad(ix)) {
      auto dx = t.grad_buffer(ix);
      auto wv = t.value(iw);
      for (std::size_t i = 0; i < m; ++i) {
        if (dy[i] != 0.0) axpy(dy[i], wv.data() + i * k, dx.data(), k);
      }
    }
  });
}

Var transpose(Var a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  const auto ia = a.id();
  return a.tape().record({c, r}, std::move(out), {a}, [ia, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) da[i * c + j] += dy[j * r + i];
  });
}

Var outer(Var a, Var b) {
  const std::size_t m = a.size(), n = b.size();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i] * bv[j];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(out), {a, b}, [ia, ib, m, n](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      auto bv = t.value(ib);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += dy[i * n + j] * bv[j];
        da[i] += acc;
      }
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      auto av = t.value(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j] * av[i];
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto d = t.grad_buffer(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ia)) {
      auto d = t.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dy[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ia)) {
      auto d = t.grad_buffer(ia);
      auto bv = t.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      auto av = t.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

Var affine(Var x, double scale, double shift) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(out), {x}, [ix, scale](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * dy[i];
  });
}

Var scale_by(Var x, Var s) {
  if (s.size() != 1) throw ShapeError("scale_by: scale must have one element, got " + shape_str(s.shape()));
  auto xv = x.values();
  const double sv = s.value(0);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * xv[i];
  const auto ix = x.id(), is = s.id();
  return x.tape().record(x.shape(), std::move(out), {x, s}, [ix, is](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ix)) {
      auto d = t.grad_buffer(ix);
      const double sv = t.value(is)[0];
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += sv * dy[i];
    }
    if (t.requires_grad(is)) {
      auto xv = t.value(ix);
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += dy[i] * xv[i];
      t.grad_buffer(is)[0] += acc;
    }
  });
}

Var scale_rows(Var x, Var s) {
  require_rank(x, 2, "scale_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (s.size() != r) {
    throw ShapeError("scale_rows: " + shape_str(x.shape()) + " with scales " + shape_str(s.shape()));
  }
  auto xv = x.values();
  auto sv = s.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = sv[i] * xv[i * c + j];
  const auto ix = x.id(), is = s.id();
  return x.tape().record(x.shape(), std::move(out), {x, s}, [ix, is, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ix)) {
      auto d = t.grad_buffer(ix);
      auto sv = t.value(is);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += sv[i] * dy[i * c + j];
    }
    if (t.requires_grad(is)) {
      auto d = t.grad_buffer(is);
      auto xv = t.value(ix);
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += dy[i * c + j] * xv[i * c + j];
        d[i] += acc;
      }
    }
  });
}

Var add_rows(Var x, Var b) {
  require_rank(x, 2, "add_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (b.size() != c) throw ShapeError("add_rows: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  auto xv = x.values();
  auto bv = b.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  const auto ix = x.id(), ib = b.id();
  return x.tape().record(x.shape(), std::move(out), {x, b}, [ix, ib, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    if (t.requires_grad(ix)) {
      auto d = t.grad_buffer(ix);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[j] += dy[i * c + j];
    }
  });
}

Var map_unary(Var x, Unary f) {
  auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xv[i];
    switch (f) {
      case Unary::Sigmoid: y[i] = stable_sigmoid(v); break;
      case Unary::Tanh: y[i] = std::tanh(v); break;
      case Unary::Softplus: y[i] = stable_softplus(v); break;
      case Unary::Oneplus: y[i] = 1.0 + stable_softplus(v); break;
      case Unary::Relu: y[i] = v > 0 ? v : 0.0; break;
      case Unary::Exp: y[i] = std::exp(v); break;
      case Unary::Log:
        if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
        y[i] = std::log(v);
        break;
    }
  }
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, f](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto yv = t.value(self);
    auto xv = t.value(ix);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) {
      double local = 0.0;
      switch (f) {
        case Unary::Sigmoid: local = yv[i] * (1.0 - yv[i]); break;
        case Unary::Tanh: local = 1.0 - yv[i] * yv[i]; break;
        case Unary::Softplus:
        case Unary::Oneplus: local = stable_sigmoid(xv[i]); break;
        case Unary::Relu: local = xv[i] > 0 ? 1.0 : 0.0; break;
        case Unary::Exp: local = yv[i]; break;
        case Unary::Log: local = 1.0 / xv[i]; break;
      }
      d[i] += local * dy[i];
    }
  });
}

namespace {

std::pair<std::size_t, std::size_t> rows_cols(const Var& x, const char* op) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(x.shape()));
}

}  // namespace

Var softmax_rows(Var x) {
  const auto [r, c] = rows_cols(x, "softmax_rows");
  auto xv = x.values();
  std::vector<double> y(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = xv.data() + i * c;
    double* yi = y.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yi[j] /= total;
  }
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto yv = t.value(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * yv[i * c + j];
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += yv[i * c + j] * (dy[i * c + j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const auto [r, c] = rows_cols(x, "log_softmax_rows");
  auto xv = x.values();
  std::vector<double> y(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = xv.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(xi[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xi[j] - lse;
  }
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto yv = t.value(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += dy[i * c + j];
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += dy[i * c + j] - std::exp(yv[i * c + j]) * total;
    }
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::size_t total_axis = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: part " + shape_str(s) + " incompatible with " + shape_str(first) +
                       " along axis " + std::to_string(axis));
    }
    extents.push_back(s[axis]);
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  std::vector<double> out(shape_size(out_shape));
  const std::size_t out_row = total_axis * inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    offset += chunk;
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(out_shape), std::move(out), parts,
      [ids, extents, outer, inner, out_row](Tape& t, std::uint32_t self) {
        auto dy = t.out_grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t chunk = extents[k] * inner;
          if (t.requires_grad(ids[k])) {
            auto d = t.grad_buffer(ids[k]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += dy[o * out_row + offset + i];
          }
          offset += chunk;
        }
      });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t n = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  std::vector<std::uint32_t> ids;
  for (const Var& r : rows) {
    if (r.rank() != 1 || r.size() != n) {
      throw ShapeError("stack_rows: row " + shape_str(r.shape()) + " differs from width " + std::to_string(n));
    }
    auto v = r.values();
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(r.id());
  }
  return rows[0].tape().record({rows.size(), n}, std::move(out), rows, [ids, n](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto d = t.grad_buffer(ids[k]);
      for (std::size_t j = 0; j < n; ++j) d[j] += dy[k * n + j];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t in_row = s[axis] * inner;
  const std::size_t chunk = (end - begin) * inner;
  const std::size_t offset = begin * inner;
  auto xv = x.values();
  std::vector<double> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + o * in_row + offset, chunk, out.data() + o * chunk);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const auto ix = x.id();
  return x.tape().record(std::move(out_shape), std::move(out), {x},
                         [ix, outer, chunk, in_row, offset](Tape& t, std::uint32_t self) {
                           auto dy = t.out_grad(self);
                           auto d = t.grad_buffer(ix);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < chunk; ++i) d[o * in_row + offset + i] += dy[o * chunk + i];
                         });
}

Var row(Var x, std::size_t i) {
  require_rank(x, 2, "row");
  return reshape(slice(x, 0, i, i + 1), {x.dim(1)});
}

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xv = x.values();
  const auto ix = x.id();
  return x.tape().record(std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                         [ix](Tape& t, std::uint32_t self) {
                           auto dy = t.out_grad(self);
                           auto d = t.grad_buffer(ix);
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
                         });
}

Var sum(Var x) {
  auto xv = x.values();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  const auto ix = x.id();
  return x.tape().record({1}, {total}, {x}, [ix](Tape& t, std::uint32_t self) {
    const double g = t.out_grad(self)[0];
    for (double& d : t.grad_buffer(ix)) d += g;
  });
}

Var sum_axis0(Var x) {
  require_rank(x, 2, "sum_axis0");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  const auto ix = x.id();
  return x.tape().record({c}, std::move(out), {x}, [ix, r, c](Tape& t, std::uint32_t self) {
    auto dy = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += dy[j];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double evaluate_value(const ScalarFn& f, std::span<const Tensor> point) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point) leaves.push_back(tape.constant(Tensor(t.shape, t.values)));
  return f(tape, leaves).item();
}

}  // namespace

GradcheckReport gradcheck(const ScalarFn& f, std::span<const Tensor> point, const GradcheckOptions& options) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : point) leaves.push_back(tape.variable(Tensor(t.shape, t.values)));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v));
  }

  GradcheckReport report;
  std::vector<Tensor> probe(point.begin(), point.end());
  std::mt19937_64 rng(options.seed);
  const double h = options.step;
  for (std::size_t ti = 0; ti < probe.size(); ++ti) {
    std::vector<std::size_t> coords(probe[ti].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && coords.size() > options.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      double& slot = probe[ti].values[idx];
      const double original = slot;
      const double a = analytic[ti].values[idx];
      auto central = [&](double step) {
        slot = original + step;
        const double plus = evaluate_value(f, probe);
        slot = original - step;
        const double minus = evaluate_value(f, probe);
        slot = original;
        return (plus - minus) / (2.0 * step);
      };
      auto rel = [a](double numeric) {
        return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      };
      double numeric = central(h);
      double err = rel(numeric);
      if (err > options.retry_above) {
        bool retried = false;
        for (double m : options.retry_multipliers) {
          const double n = central(h * m);
          retried = true;
          if (rel(n) < err) {
            err = rel(n);
            numeric = n;
          }
        }
        report.retried += retried;
      }
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_tensor = ti;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace cmam

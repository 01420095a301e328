#pragma once

// Dense 64-bit tensors and a dynamic reverse-mode differentiation tape.
//
// A Tape owns every value produced while evaluating one computation. Values are
// appended in creation order, so the node vector is already topologically
// sorted and backward() is a single reverse sweep. Tapes are rebuilt for every
// training example; parameters enter a tape as leaf copies, which keeps the
// owning Tensor untouched and lets separate tapes run on separate threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmam/errors.hpp"

namespace cmam {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Plain n-dimensional array in row-major order with an optional gradient.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty when absent

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);

  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const;
  bool has_grad() const { return !grad.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  bool operator==(const Tensor& other) const = default;
};

Tensor random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);
Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng);

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::span<const double> values() const;
  double value(std::size_t i) const { return values()[i]; }
  double item() const;
  Tensor tensor() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  /// Called once during backward with the tape and the node's own id. The
  /// node's output gradient is available via out_grad(self).
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);

  /// Appends an operation node. `backward` is dropped when no parent needs a gradient.
  Var record(Shape shape, std::vector<double> value, std::span<const Var> parents,
             BackwardFn backward);
  Var record(Shape shape, std::vector<double> value, std::initializer_list<Var> parents,
             BackwardFn backward) {
    return record(std::move(shape), std::move(value),
                  std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
  }

  /// Reverse sweep from a scalar loss. Clears gradients of any earlier sweep.
  void backward(Var loss);

  /// Gradient of the last backward() with respect to `v`; zeros when unreachable.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  // Access used by operation implementations.
  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::uint32_t id) const { return nodes_[id].value; }
  std::span<const double> out_grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Zero-initialised on first use.
  std::span<double> grad_buffer(std::uint32_t id);
  const std::vector<std::uint32_t>& parents(std::uint32_t id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

enum class Unary { Sigmoid, Tanh, Softplus, Oneplus, Relu, Exp, Log };

// Linear algebra.
Var matmul(Var a, Var b);             // [m×k]·[k×n]
Var matvec(Var w, Var x);             // [m×k]·[k]
Var transpose(Var a);                 // rank 2
Var outer(Var a, Var b);              // [m]⊗[n] -> [m×n]

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

Var affine(Var x, double scale, double shift);  // scale·x + shift
inline Var scale(Var x, double c) { return affine(x, c, 0.0); }
inline Var one_minus(Var x) { return affine(x, -1.0, 1.0); }
Var scale_by(Var x, Var s);     // s has one element
Var scale_rows(Var x, Var s);   // x [r×c], s [r]: row i multiplied by s[i]
Var add_rows(Var x, Var b);     // x [r×c], b [c] added to every row

Var map_unary(Var x, Unary f);
inline Var sigmoid(Var x) { return map_unary(x, Unary::Sigmoid); }
inline Var tanh(Var x) { return map_unary(x, Unary::Tanh); }
inline Var softplus(Var x) { return map_unary(x, Unary::Softplus); }
inline Var oneplus(Var x) { return map_unary(x, Unary::Oneplus); }
inline Var relu(Var x) { return map_unary(x, Unary::Relu); }
inline Var exp(Var x) { return map_unary(x, Unary::Exp); }
inline Var log(Var x) { return map_unary(x, Unary::Log); }

/// Rank 1 is treated as a single row.
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

// Structure.
Var concat(std::span<const Var> parts, std::size_t axis = 0);
inline Var concat(std::initializer_list<Var> parts, std::size_t axis = 0) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}
Var stack_rows(std::span<const Var> rows);  // k vectors of width n -> [k×n]
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var row(Var x, std::size_t i);  // rank 2 -> rank 1
Var reshape(Var x, Shape shape);

// Reductions.
Var sum(Var x);        // -> [1]
Var sum_axis0(Var x);  // [r×c] -> [c]

/// Scalar function of a list of leaves, evaluated by building a fresh tape.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradcheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Coordinates whose error exceeds retry_above are re-measured at step·m for
  /// each multiplier and keep the best agreement. A wrong derivative disagrees
  /// at every step; a kink inside the window or round-off on a tiny gradient does not.
  std::vector<double> retry_multipliers;
  double retry_above = 0.0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t retried = 0;  // coordinates re-measured at other steps
};

/// Central differences (f(p+h)−f(p−h))/2h against tape gradients, per coordinate.
/// Error per coordinate is |a−b| / max(|a|, |b|, 1e-8).
GradcheckReport gradcheck(const ScalarFn& f, std::span<const Tensor> point,
                          const GradcheckOptions& options = {});

}  // namespace cmam

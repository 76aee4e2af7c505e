#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "divsum/tensor.hpp"

namespace divsum {

/// Raised for shape/dimension contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or consumes non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Squared-norm threshold below which `project_out` leaves its input untouched.
inline constexpr double kProjectionEpsilon = 1e-12;

enum class Op : std::uint8_t {
  Constant,
  Param,
  StackRows,
  MatVec,
  TMatVec,
  MatMulNT,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Sigmoid,
  Dot,
  Concat,
  Softmax,
  ProjectOut,
  Row,
  GatherRows,
  AddRowwise,
  Outer,
  MeanRows,
  Sum,
  NllLogits,
};

const char* op_name(Op op);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr && id_ >= 0; }

  std::span<const double> value() const;
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  double scalar() const;
  std::vector<double> to_vector() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Append-only define-by-run tape. Nodes are evaluated eagerly on insertion;
/// `backward` walks them once in reverse insertion order.
///
/// Parameter leaves reference caller-owned Tensors and accumulate gradients
/// directly into their `grad()` buffers, so several graphs built against the
/// same parameters sum their contributions.
class Graph {
 public:
  struct Node {
    Op op = Op::Constant;
    int in[3] = {-1, -1, -1};
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    const Tensor* source = nullptr;
    Tensor* grad_sink = nullptr;
    bool needs_grad = false;
    double scalar = 0.0;
    std::size_t index = 0;
    std::vector<int> ids;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var param(Tensor& tensor);
  /// Leaf that reads `tensor` in place without tracking gradients.
  Var frozen(const Tensor& tensor);
  Var constant(const Tensor& tensor);
  Var constant(Shape shape, std::vector<double> values);
  Var vector(std::vector<double> values);
  Var zeros(std::size_t n);

  /// Reverse-mode sweep from a scalar node. Node gradients are reset first;
  /// parameter gradients accumulate.
  void backward(Var loss);

  std::span<const double> value(int id) const;
  const Shape& shape(int id) const;
  /// Gradient of the most recent backward pass (empty if none reached the node).
  std::span<const double> grad(int id) const;
  const Node& node(int id) const;
  std::size_t size() const { return count_; }

  /// Drops every node but keeps their buffers, so rebuilding a similar
  /// computation on the same graph does not allocate.
  void clear() { count_ = 0; }

  /// Appends a blank node (reusing storage left by clear()) and returns it.
  /// The reference is valid until the next append.
  Node& emplace(Op op);
  Var back() { return Var(this, static_cast<int>(count_) - 1); }
  /// Stacks equal-length vectors as the rows of a matrix.
  Var stack_rows(std::span<const Var> rows);

 private:
  std::vector<double>& grad_buffer(int id);
  void backward_node(int id);

  Node& at(int id);
  const Node& at(int id) const;

  std::vector<Node> nodes_;
  std::size_t count_ = 0;
};

// Differentiable operations. All operands must belong to the same graph.
Var matvec(Var m, Var v);
/// mᵀ v for m of shape [n×c] and v of length n.
Var tmatvec(Var m, Var v);
/// a·bᵀ for a [n×k] and b [m×k].
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var one_minus(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var dot(Var a, Var b);
Var concat(Var a, Var b);
/// Softmax over the first `valid` entries; trailing entries are exactly zero.
Var softmax(Var a, std::optional<std::size_t> valid = std::nullopt);
/// v − gate ⊙ ((vᵀu)/(uᵀu)) u. Returns v unchanged when uᵀu ≤ kProjectionEpsilon.
Var project_out(Var v, Var u, std::optional<Var> gate = std::nullopt);
Var row(Var m, std::size_t index);
Var gather_rows(Var m, std::span<const int> ids);
Var add_rowwise(Var m, Var v);
Var outer(Var a, Var b);
Var mean_rows(Var m, std::optional<std::size_t> valid = std::nullopt);
Var sum(Var a);
/// −log softmax(logits)[target].
Var nll_logits(Var logits, int target);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t param_index = 0;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
  /// Coordinates re-estimated by extrapolation after the plain difference disagreed.
  std::size_t coordinates_refined = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences over every
/// coordinate of `params`. The relative error per coordinate is
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// Near-zero gradients with large higher derivatives defeat any single step, so a
/// coordinate whose plain difference disagrees is re-estimated with Ridders'
/// extrapolation before its error is recorded. If that still disagrees, a few
/// larger starting steps are tried and the estimate with the smallest
/// extrapolation error is kept.
FiniteDiffReport finite_diff_check(const std::function<Var(Graph&)>& loss,
                                   std::span<Tensor* const> params, double step = 1e-5);

}  // namespace divsum

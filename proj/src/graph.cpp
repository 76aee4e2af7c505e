#include "divsum/graph.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>

namespace divsum {

namespace {

using Node = Graph::Node;

Graph& owner(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.graph();
}

Graph& owner(Var a, Var b) {
  Graph& g = owner(a);
  if (b.graph() != &g || !b.valid()) {
    throw std::invalid_argument("operands belong to different graphs");
  }
  return g;
}

void require_rank(Var a, std::size_t rank, const char* what) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     " operand, got " + shape_string(a.shape()));
  }
}

void require_same_shape(Var a, Var b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void link_inputs(Graph& g, Node& n, std::initializer_list<Var> inputs) {
  std::size_t slot = 0;
  for (Var v : inputs) {
    n.in[slot++] = v.id();
    n.needs_grad = n.needs_grad || g.node(v.id()).needs_grad;
  }
}

Node& make_node(Graph& g, Op op, const Shape& shape, std::initializer_list<Var> inputs) {
  // `shape` usually lives in another node, which emplace may move.
  std::size_t dims[2] = {0, 0};
  const std::size_t rank = shape.size();
  if (rank > 2) throw ShapeError("rank " + std::to_string(rank) + " operands are not supported");
  std::copy(shape.begin(), shape.end(), dims);
  Node& n = g.emplace(op);
  n.shape.assign(dims, dims + rank);
  n.value.assign(shape_size(n.shape), 0.0);
  link_inputs(g, n, inputs);
  return n;
}

Node& make_node(Graph& g, Op op, std::initializer_list<std::size_t> dims, std::initializer_list<Var> inputs) {
  Node& n = g.emplace(op);
  n.shape.assign(dims);
  n.value.assign(shape_size(n.shape), 0.0);
  link_inputs(g, n, inputs);
  return n;
}

double dot_span(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::StackRows: return "stack_rows";
    case Op::MatVec: return "matvec";
    case Op::TMatVec: return "tmatvec";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Dot: return "dot";
    case Op::Concat: return "concat";
    case Op::Softmax: return "softmax";
    case Op::ProjectOut: return "project_out";
    case Op::Row: return "row";
    case Op::GatherRows: return "gather_rows";
    case Op::AddRowwise: return "add_rowwise";
    case Op::Outer: return "outer";
    case Op::MeanRows: return "mean_rows";
    case Op::Sum: return "sum";
    case Op::NllLogits: return "nll_logits";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Var

std::span<const double> Var::value() const { return graph_->value(id_); }
const Shape& Var::shape() const { return graph_->shape(id_); }
std::size_t Var::size() const { return shape_size(shape()); }
std::size_t Var::rows() const { return shape().empty() ? 1 : shape()[0]; }
std::size_t Var::cols() const { return shape().size() < 2 ? 1 : shape()[1]; }

double Var::scalar() const {
  if (size() != 1) throw ShapeError("scalar() on shape " + shape_string(shape()));
  return value()[0];
}

std::vector<double> Var::to_vector() const {
  auto v = value();
  return {v.begin(), v.end()};
}

// ---------------------------------------------------------------------------
// Graph

Graph::Node& Graph::emplace(Op op) {
  if (count_ == nodes_.size()) nodes_.emplace_back();
  Node& n = nodes_[count_++];
  n.op = op;
  n.in[0] = n.in[1] = n.in[2] = -1;
  n.shape.clear();
  n.value.clear();
  n.grad.clear();
  n.source = nullptr;
  n.grad_sink = nullptr;
  n.needs_grad = false;
  n.scalar = 0.0;
  n.index = 0;
  n.ids.clear();
  return n;
}

Graph::Node& Graph::at(int id) {
  if (id < 0 || static_cast<std::size_t>(id) >= count_) {
    throw std::out_of_range("node id " + std::to_string(id) + " outside the graph");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

const Graph::Node& Graph::at(int id) const { return const_cast<Graph*>(this)->at(id); }

const Graph::Node& Graph::node(int id) const { return at(id); }

Var Graph::param(Tensor& tensor) {
  Node& n = emplace(Op::Param);
  n.shape = tensor.shape();
  n.source = &tensor;
  n.grad_sink = &tensor;
  n.needs_grad = true;
  return back();
}

Var Graph::frozen(const Tensor& tensor) {
  Node& n = emplace(Op::Param);
  n.shape = tensor.shape();
  n.source = &tensor;
  return back();
}

Var Graph::stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack_rows of no rows");
  const std::size_t cols = rows.front().size();
  for (Var r : rows) {
    if (r.graph() != this) throw std::invalid_argument("stack_rows: row from another graph");
    if (r.shape().size() != 1 || r.size() != cols) {
      throw ShapeError("stack_rows: row shape " + shape_string(r.shape()) + " vs [" +
                       std::to_string(cols) + "]");
    }
  }
  Node& n = emplace(Op::StackRows);
  n.shape.assign({rows.size(), cols});
  for (Var r : rows) {
    const auto v = value(r.id());
    n.value.insert(n.value.end(), v.begin(), v.end());
    n.ids.push_back(r.id());
    n.needs_grad = n.needs_grad || at(r.id()).needs_grad;
  }
  return back();
}

Var Graph::constant(const Tensor& tensor) {
  return constant(tensor.shape(), {tensor.values().begin(), tensor.values().end()});
}

Var Graph::constant(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("constant of shape " + shape_string(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  Node& n = emplace(Op::Constant);
  n.shape = std::move(shape);
  n.value = std::move(values);
  return back();
}

Var Graph::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return constant({n}, std::move(values));
}

Var Graph::zeros(std::size_t n) {
  Node& node = emplace(Op::Constant);
  node.shape.assign({n});
  node.value.assign(n, 0.0);
  return back();
}

std::span<const double> Graph::value(int id) const {
  const Node& n = at(id);
  if (n.source != nullptr) return n.source->values();
  return n.value;
}

const Shape& Graph::shape(int id) const { return at(id).shape; }

std::span<const double> Graph::grad(int id) const {
  return at(id).grad;
}

std::vector<double>& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(shape_size(n.shape), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this || !loss.valid()) throw std::invalid_argument("loss not in this graph");
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  for (std::size_t i = 0; i < count_; ++i) nodes_[i].grad.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.needs_grad && !n.grad.empty()) backward_node(id);
  }
}

void Graph::backward_node(int id) {
  // References into nodes_ stay valid: backward never appends.
  Node& n = nodes_[static_cast<std::size_t>(id)];
  const std::vector<double>& g = n.grad;
  auto wants = [&](int slot) {
    return n.in[slot] >= 0 && nodes_[static_cast<std::size_t>(n.in[slot])].needs_grad;
  };
  auto in_value = [&](int slot) { return value(n.in[slot]); };
  auto in_grad = [&](int slot) -> std::vector<double>& { return grad_buffer(n.in[slot]); };

  switch (n.op) {
    case Op::Constant:
      break;
    case Op::Param: {
      n.grad_sink->ensure_grad();
      auto pg = n.grad_sink->grad();
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      break;
    }
    case Op::StackRows: {
      const std::size_t cols = n.shape[1];
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        if (!nodes_[static_cast<std::size_t>(n.ids[r])].needs_grad) continue;
        auto& gr = grad_buffer(n.ids[r]);
        for (std::size_t j = 0; j < cols; ++j) gr[j] += g[r * cols + j];
      }
      break;
    }
    case Op::MatVec: {
      const auto m = in_value(0);
      const auto v = in_value(1);
      const std::size_t rows = n.shape[0];
      const std::size_t cols = v.size();
      if (wants(0)) {
        auto& gm = in_grad(0);
        for (std::size_t i = 0; i < rows; ++i) {
          if (g[i] == 0.0) continue;
          for (std::size_t j = 0; j < cols; ++j) gm[i * cols + j] += g[i] * v[j];
        }
      }
      if (wants(1)) {
        auto& gv = in_grad(1);
        for (std::size_t i = 0; i < rows; ++i) {
          if (g[i] == 0.0) continue;
          for (std::size_t j = 0; j < cols; ++j) gv[j] += g[i] * m[i * cols + j];
        }
      }
      break;
    }
    case Op::TMatVec: {
      const auto m = in_value(0);
      const auto v = in_value(1);
      const std::size_t rows = v.size();
      const std::size_t cols = n.shape[0];
      if (wants(0)) {
        auto& gm = in_grad(0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) gm[i * cols + j] += v[i] * g[j];
      }
      if (wants(1)) {
        auto& gv = in_grad(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) gv[i] += m[i * cols + j] * g[j];
      }
      break;
    }
    case Op::MatMulNT: {
      const auto a = in_value(0);
      const auto b = in_value(1);
      const std::size_t rows = n.shape[0];
      const std::size_t outs = n.shape[1];
      const std::size_t inner = shape(n.in[0])[1];
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < outs; ++j) {
            const double gij = g[i * outs + j];
            if (gij == 0.0) continue;
            for (std::size_t l = 0; l < inner; ++l) ga[i * inner + l] += gij * b[j * inner + l];
          }
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < outs; ++j) {
            const double gij = g[i * outs + j];
            if (gij == 0.0) continue;
            for (std::size_t l = 0; l < inner; ++l) gb[j * inner + l] += gij * a[i * inner + l];
          }
      }
      break;
    }
    case Op::Add:
    case Op::Sub: {
      const double sign = n.op == Op::Add ? 1.0 : -1.0;
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
      break;
    }
    case Op::Mul: {
      const auto a = in_value(0);
      const auto b = in_value(1);
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::Scale: {
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
      break;
    }
    case Op::AddScalar: {
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case Op::Tanh: {
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    }
    case Op::Sigmoid: {
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      break;
    }
    case Op::Dot: {
      const auto a = in_value(0);
      const auto b = in_value(1);
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0] * b[i];
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[0] * a[i];
      }
      break;
    }
    case Op::Concat: {
      const std::size_t split = shape_size(shape(n.in[0]));
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = split; i < g.size(); ++i) gb[i - split] += g[i];
      }
      break;
    }
    case Op::Softmax: {
      const std::size_t valid = n.index;
      double weighted = 0.0;
      for (std::size_t i = 0; i < valid; ++i) weighted += g[i] * n.value[i];
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < valid; ++i) ga[i] += n.value[i] * (g[i] - weighted);
      break;
    }
    case Op::ProjectOut: {
      if (n.scalar == 0.0) {
        if (wants(0)) {
          auto& gv = in_grad(0);
          for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
        break;
      }
      const auto v = in_value(0);
      const auto u = in_value(1);
      const bool gated = n.in[2] >= 0;
      const std::size_t len = v.size();
      std::vector<double> gate(len, 1.0);
      if (gated) {
        const auto gv = in_value(2);
        gate.assign(gv.begin(), gv.end());
      }
      const double uu = dot_span(u, u);
      const double coef = dot_span(v, u) / uu;
      double s = 0.0;  // Σ_j G_j g_j u_j
      for (std::size_t j = 0; j < len; ++j) s += g[j] * gate[j] * u[j];
      if (wants(0)) {
        auto& gv = in_grad(0);
        for (std::size_t k = 0; k < len; ++k) gv[k] += g[k] - s * u[k] / uu;
      }
      if (wants(1)) {
        auto& gu = in_grad(1);
        for (std::size_t k = 0; k < len; ++k) {
          gu[k] += -s * (v[k] - 2.0 * coef * u[k]) / uu - g[k] * gate[k] * coef;
        }
      }
      if (gated && wants(2)) {
        auto& gg = in_grad(2);
        for (std::size_t k = 0; k < len; ++k) gg[k] += -g[k] * coef * u[k];
      }
      break;
    }
    case Op::Row: {
      const std::size_t cols = g.size();
      auto& gm = in_grad(0);
      for (std::size_t j = 0; j < cols; ++j) gm[n.index * cols + j] += g[j];
      break;
    }
    case Op::GatherRows: {
      const std::size_t cols = n.shape[1];
      auto& gm = in_grad(0);
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        const std::size_t src = static_cast<std::size_t>(n.ids[r]);
        for (std::size_t j = 0; j < cols; ++j) gm[src * cols + j] += g[r * cols + j];
      }
      break;
    }
    case Op::AddRowwise: {
      const std::size_t rows = n.shape[0];
      const std::size_t cols = n.shape[1];
      if (wants(0)) {
        auto& gm = in_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (wants(1)) {
        auto& gv = in_grad(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) gv[j] += g[i * cols + j];
      }
      break;
    }
    case Op::Outer: {
      const auto a = in_value(0);
      const auto b = in_value(1);
      const std::size_t rows = a.size();
      const std::size_t cols = b.size();
      if (wants(0)) {
        auto& ga = in_grad(0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) ga[i] += g[i * cols + j] * b[j];
      }
      if (wants(1)) {
        auto& gb = in_grad(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j] * a[i];
      }
      break;
    }
    case Op::MeanRows: {
      const std::size_t valid = n.index;
      const std::size_t cols = g.size();
      auto& gm = in_grad(0);
      for (std::size_t i = 0; i < valid; ++i)
        for (std::size_t j = 0; j < cols; ++j) gm[i * cols + j] += g[j] / static_cast<double>(valid);
      break;
    }
    case Op::Sum: {
      auto& ga = in_grad(0);
      for (double& x : ga) x += g[0];
      break;
    }
    case Op::NllLogits: {
      const auto x = in_value(0);
      const double mx = *std::max_element(x.begin(), x.end());
      double z = 0.0;
      for (double xi : x) z += std::exp(xi - mx);
      auto& ga = in_grad(0);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[0] * std::exp(x[i] - mx) / z;
      ga[n.index] -= g[0];
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

Var matvec(Var m, Var v) {
  Graph& g = owner(m, v);
  require_rank(m, 2, "matvec");
  require_rank(v, 1, "matvec");
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  if (cols != v.size()) {
    throw ShapeError("matvec: matrix " + shape_string(m.shape()) + " vs vector " +
                     shape_string(v.shape()));
  }
  Node& n = make_node(g, Op::MatVec, {rows}, {m, v});
  const auto mv = m.value();
  const auto vv = v.value();
  for (std::size_t i = 0; i < rows; ++i) n.value[i] = dot_span(mv.subspan(i * cols, cols), vv);
  return g.back();
}

Var tmatvec(Var m, Var v) {
  Graph& g = owner(m, v);
  require_rank(m, 2, "tmatvec");
  require_rank(v, 1, "tmatvec");
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  if (rows != v.size()) {
    throw ShapeError("tmatvec: matrix " + shape_string(m.shape()) + " vs vector " +
                     shape_string(v.shape()));
  }
  Node& n = make_node(g, Op::TMatVec, {cols}, {m, v});
  const auto mv = m.value();
  const auto vv = v.value();
  for (std::size_t i = 0; i < rows; ++i) {
    if (vv[i] == 0.0) continue;
    for (std::size_t j = 0; j < cols; ++j) n.value[j] += mv[i * cols + j] * vv[i];
  }
  return g.back();
}

Var matmul_nt(Var a, Var b) {
  Graph& g = owner(a, b);
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t rows = a.shape()[0];
  const std::size_t inner = a.shape()[1];
  const std::size_t outs = b.shape()[0];
  if (b.shape()[1] != inner) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Node& n = make_node(g, Op::MatMulNT, {rows, outs}, {a, b});
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < outs; ++j)
      n.value[i * outs + j] = dot_span(av.subspan(i * inner, inner), bv.subspan(j * inner, inner));
  return g.back();
}

namespace {

template <typename F>
Var elementwise_binary(Var a, Var b, Op op, const char* what, F f) {
  Graph& g = owner(a, b);
  require_same_shape(a, b, what);
  Node& n = make_node(g, op, a.shape(), {a, b});
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = f(av[i], bv[i]);
  return g.back();
}

template <typename F>
Var elementwise_unary(Var a, Op op, F f) {
  Graph& g = owner(a);
  Node& n = make_node(g, op, a.shape(), {a});
  const auto av = a.value();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = f(av[i]);
  return g.back();
}

}  // namespace

Var add(Var a, Var b) {
  return elementwise_binary(a, b, Op::Add, "add", [](double x, double y) { return x + y; });
}

Var sub(Var a, Var b) {
  return elementwise_binary(a, b, Op::Sub, "sub", [](double x, double y) { return x - y; });
}

Var mul(Var a, Var b) {
  return elementwise_binary(a, b, Op::Mul, "mul", [](double x, double y) { return x * y; });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }

Var scale(Var a, double factor) {
  Graph& g = owner(a);
  Node& n = make_node(g, Op::Scale, a.shape(), {a});
  n.scalar = factor;
  const auto av = a.value();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = factor * av[i];
  return g.back();
}

Var add_scalar(Var a, double offset) {
  return elementwise_unary(a, Op::AddScalar, [offset](double x) { return x + offset; });
}

Var one_minus(Var a) { return add_scalar(scale(a, -1.0), 1.0); }

Var tanh(Var a) {
  return elementwise_unary(a, Op::Tanh, [](double x) { return std::tanh(x); });
}

Var sigmoid(Var a) {
  return elementwise_unary(a, Op::Sigmoid, [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Var dot(Var a, Var b) {
  Graph& g = owner(a, b);
  require_rank(a, 1, "dot");
  require_same_shape(a, b, "dot");
  Node& n = make_node(g, Op::Dot, {}, {a, b});
  n.value[0] = dot_span(a.value(), b.value());
  return g.back();
}

Var concat(Var a, Var b) {
  Graph& g = owner(a, b);
  require_rank(a, 1, "concat");
  require_rank(b, 1, "concat");
  Node& n = make_node(g, Op::Concat, {a.size() + b.size()}, {a, b});
  const auto av = a.value();
  const auto bv = b.value();
  std::copy(av.begin(), av.end(), n.value.begin());
  std::copy(bv.begin(), bv.end(), n.value.begin() + static_cast<std::ptrdiff_t>(av.size()));
  return g.back();
}

Var softmax(Var a, std::optional<std::size_t> valid) {
  Graph& g = owner(a);
  require_rank(a, 1, "softmax");
  const std::size_t len = a.size();
  const std::size_t active = valid.value_or(len);
  if (len == 0) throw ShapeError("softmax of an empty vector");
  if (active == 0 || active > len) {
    throw ShapeError("softmax: valid length " + std::to_string(active) + " outside [1, " +
                     std::to_string(len) + "]");
  }
  Node& n = make_node(g, Op::Softmax, a.shape(), {a});
  n.index = active;
  const auto av = a.value();
  const double mx = *std::max_element(av.begin(), av.begin() + static_cast<std::ptrdiff_t>(active));
  double z = 0.0;
  for (std::size_t i = 0; i < active; ++i) {
    n.value[i] = std::exp(av[i] - mx);
    z += n.value[i];
  }
  for (std::size_t i = 0; i < active; ++i) n.value[i] /= z;
  return g.back();
}

Var project_out(Var v, Var u, std::optional<Var> gate) {
  Graph& g = owner(v, u);
  require_rank(v, 1, "project_out");
  require_same_shape(v, u, "project_out");
  if (gate) {
    owner(v, *gate);
    require_same_shape(v, *gate, "project_out gate");
  }
  Node& n = gate ? make_node(g, Op::ProjectOut, v.shape(), {v, u, *gate})
                 : make_node(g, Op::ProjectOut, v.shape(), {v, u});
  const auto vv = v.value();
  const auto uv = u.value();
  const double uu = dot_span(uv, uv);
  if (uu <= kProjectionEpsilon) {
    std::copy(vv.begin(), vv.end(), n.value.begin());
    n.scalar = 0.0;
  } else {
    const double coef = dot_span(vv, uv) / uu;
    const auto gv = gate ? gate->value() : std::span<const double>();
    for (std::size_t i = 0; i < vv.size(); ++i) {
      const double gi = gate ? gv[i] : 1.0;
      n.value[i] = vv[i] - gi * coef * uv[i];
    }
    n.scalar = 1.0;
  }
  return g.back();
}

Var row(Var m, std::size_t index) {
  Graph& g = owner(m);
  require_rank(m, 2, "row");
  if (index >= m.shape()[0]) {
    throw ShapeError("row " + std::to_string(index) + " out of range for " +
                     shape_string(m.shape()));
  }
  const std::size_t cols = m.shape()[1];
  Node& n = make_node(g, Op::Row, {cols}, {m});
  n.index = index;
  const auto mv = m.value().subspan(index * cols, cols);
  std::copy(mv.begin(), mv.end(), n.value.begin());
  return g.back();
}

Var gather_rows(Var m, std::span<const int> ids) {
  Graph& g = owner(m);
  require_rank(m, 2, "gather_rows");
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw ShapeError("gather_rows: id " + std::to_string(id) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
  }
  Node& n = make_node(g, Op::GatherRows, {ids.size(), cols}, {m});
  const auto mv = m.value();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto src = mv.subspan(static_cast<std::size_t>(ids[r]) * cols, cols);
    std::copy(src.begin(), src.end(), n.value.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  n.ids.assign(ids.begin(), ids.end());
  return g.back();
}

Var add_rowwise(Var m, Var v) {
  Graph& g = owner(m, v);
  require_rank(m, 2, "add_rowwise");
  require_rank(v, 1, "add_rowwise");
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  if (v.size() != cols) {
    throw ShapeError("add_rowwise: " + shape_string(m.shape()) + " vs " + shape_string(v.shape()));
  }
  Node& n = make_node(g, Op::AddRowwise, m.shape(), {m, v});
  const auto mv = m.value();
  const auto vv = v.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) n.value[i * cols + j] = mv[i * cols + j] + vv[j];
  return g.back();
}

Var outer(Var a, Var b) {
  Graph& g = owner(a, b);
  require_rank(a, 1, "outer");
  require_rank(b, 1, "outer");
  const std::size_t rows = a.size();
  const std::size_t cols = b.size();
  Node& n = make_node(g, Op::Outer, {rows, cols}, {a, b});
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) n.value[i * cols + j] = av[i] * bv[j];
  return g.back();
}

Var mean_rows(Var m, std::optional<std::size_t> valid) {
  Graph& g = owner(m);
  require_rank(m, 2, "mean_rows");
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  const std::size_t active = valid.value_or(rows);
  if (active == 0 || active > rows) throw ShapeError("mean_rows: no valid rows");
  Node& n = make_node(g, Op::MeanRows, {cols}, {m});
  n.index = active;
  const auto mv = m.value();
  for (std::size_t i = 0; i < active; ++i)
    for (std::size_t j = 0; j < cols; ++j) n.value[j] += mv[i * cols + j];
  for (double& x : n.value) x /= static_cast<double>(active);
  return g.back();
}

Var sum(Var a) {
  Graph& g = owner(a);
  Node& n = make_node(g, Op::Sum, {}, {a});
  const auto av = a.value();
  n.value[0] = std::accumulate(av.begin(), av.end(), 0.0);
  return g.back();
}

Var nll_logits(Var logits, int target) {
  Graph& g = owner(logits);
  require_rank(logits, 1, "nll_logits");
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw ShapeError("nll_logits: target " + std::to_string(target) + " outside " +
                     shape_string(logits.shape()));
  }
  Node& n = make_node(g, Op::NllLogits, {}, {logits});
  n.index = static_cast<std::size_t>(target);
  const auto x = logits.value();
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double xi : x) z += std::exp(xi - mx);
  n.value[0] = mx + std::log(z) - x[n.index];
  return g.back();
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kRefineThreshold = 1e-5;
constexpr double kRefineSteps[] = {1e-2, 3e-2, 1e-1, 3e-1};

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct Extrapolated {
  double value;
  double error;
};

// Polynomial extrapolation of central differences toward h → 0 (Ridders' method),
// with its own error estimate.
template <typename Central>
Extrapolated ridders(const Central& central, double first_step) {
  constexpr int kTable = 10;
  constexpr double kShrink = 1.4;
  constexpr double kShrink2 = kShrink * kShrink;
  double a[kTable][kTable];
  double h = first_step;
  a[0][0] = central(h);
  Extrapolated best{a[0][0], std::numeric_limits<double>::max()};
  for (int i = 1; i < kTable; ++i) {
    h /= kShrink;
    a[0][i] = central(h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= best.error) best = {a[j][i], e};
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * best.error) break;
  }
  return best;
}

}  // namespace

FiniteDiffReport finite_diff_check(const std::function<Var(Graph&)>& loss,
                                   std::span<Tensor* const> params, double step) {
  for (Tensor* p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  {
    Graph g;
    Var l = loss(g);
    if (!std::isfinite(l.scalar())) throw NumericError("loss is not finite at the base point");
    g.backward(l);
  }

  Graph scratch;
  auto evaluate = [&](std::size_t pi, std::size_t ci) {
    scratch.clear();
    const double value = loss(scratch).scalar();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss when perturbing parameter " + std::to_string(pi) +
                         " coordinate " + std::to_string(ci));
    }
    return value;
  };

  FiniteDiffReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t ci = 0; ci < p.size(); ++ci) {
      const double original = p[ci];
      auto central = [&](double h) {
        const double above = original + h;
        const double below = original - h;
        p[ci] = above;
        const double up = evaluate(pi, ci);
        p[ci] = below;
        const double down = evaluate(pi, ci);
        p[ci] = original;
        return (up - down) / (above - below);
      };
      const double analytic = p.grad()[ci];
      double numeric = central(step);
      double rel = relative_error(analytic, numeric);
      if (rel >= kRefineThreshold) {
        Extrapolated best = ridders(central, kRefineSteps[0]);
        // Small starting steps are noise-limited near 1e-12; larger ones often
        // extrapolate far more accurately. Only the extrapolation's own error
        // estimate picks among them.
        if (relative_error(analytic, best.value) >= kRefineThreshold) {
          for (std::size_t k = 1; k < std::size(kRefineSteps); ++k) {
            const Extrapolated candidate = ridders(central, kRefineSteps[k]);
            if (candidate.error < best.error) best = candidate;
          }
        }
        numeric = best.value;
        rel = relative_error(analytic, numeric);
        ++report.coordinates_refined;
      }
      ++report.coordinates_checked;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.param_index = pi;
        report.coordinate = ci;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace divsum

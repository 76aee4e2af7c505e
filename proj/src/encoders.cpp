#include "divsum/encoders.hpp"

#include <stdexcept>

namespace divsum {

GruParams GruParams::create(std::size_t input_size, std::size_t hidden_size, Rng& rng) {
  if (input_size == 0 || hidden_size == 0) throw std::invalid_argument("GRU sizes must be positive");
  GruParams p;
  p.w_z = scaled_uniform({hidden_size, input_size}, hidden_size, rng);
  p.w_r = scaled_uniform({hidden_size, input_size}, hidden_size, rng);
  p.w_h = scaled_uniform({hidden_size, input_size}, hidden_size, rng);
  p.u_z = scaled_uniform({hidden_size, hidden_size}, hidden_size, rng);
  p.u_r = scaled_uniform({hidden_size, hidden_size}, hidden_size, rng);
  p.u_h = scaled_uniform({hidden_size, hidden_size}, hidden_size, rng);
  p.b_z = Tensor({hidden_size});
  p.b_r = Tensor({hidden_size});
  p.b_h = Tensor({hidden_size});
  return p;
}

namespace {

template <typename Self, typename F>
void visit_gru(Self& p, std::string_view prefix, const F& f) {
  f(param_name(prefix, "W_z"), p.w_z);
  f(param_name(prefix, "W_r"), p.w_r);
  f(param_name(prefix, "W_h"), p.w_h);
  f(param_name(prefix, "U_z"), p.u_z);
  f(param_name(prefix, "U_r"), p.u_r);
  f(param_name(prefix, "U_h"), p.u_h);
  f(param_name(prefix, "b_z"), p.b_z);
  f(param_name(prefix, "b_r"), p.b_r);
  f(param_name(prefix, "b_h"), p.b_h);
}

}  // namespace

void GruParams::visit(std::string_view prefix, const ParamVisitor& f) { visit_gru(*this, prefix, f); }

void GruParams::visit(std::string_view prefix, const ConstParamVisitor& f) const {
  visit_gru(*this, prefix, f);
}

GruVars GruVars::bind(const Binder& bind, const GruParams& p) {
  return {bind(p.w_z), bind(p.w_r), bind(p.w_h), bind(p.u_z), bind(p.u_r),
          bind(p.u_h), bind(p.b_z), bind(p.b_r), bind(p.b_h)};
}

namespace {

// Shared by the single-step and sequence paths; the input projections are
// passed in so `encode` can compute them for all positions at once.
Var gru_update(const GruVars& p, Var h_prev, Var xz, Var xr, Var xh) {
  Var z = sigmoid(xz + matvec(p.u_z, h_prev) + p.b_z);
  Var r = sigmoid(xr + matvec(p.u_r, h_prev) + p.b_r);
  Var candidate = tanh(xh + matvec(p.u_h, mul(r, h_prev)) + p.b_h);
  return mul(one_minus(z), h_prev) + mul(z, candidate);
}

}  // namespace

Var gru_step(const GruVars& p, Var h_prev, Var x) {
  return gru_update(p, h_prev, matvec(p.w_z, x), matvec(p.w_r, x), matvec(p.w_h, x));
}

EncoderOutput encode(const GruVars& p, Var inputs) {
  if (inputs.shape().size() != 2 || inputs.rows() == 0) {
    throw std::invalid_argument("encode requires at least one input row, got " +
                                shape_string(inputs.shape()));
  }
  Graph& g = *inputs.graph();
  const std::size_t len = inputs.rows();
  Var xz = matmul_nt(inputs, p.w_z);
  Var xr = matmul_nt(inputs, p.w_r);
  Var xh = matmul_nt(inputs, p.w_h);

  EncoderOutput out;
  Var h = g.zeros(p.u_z.rows());
  for (std::size_t i = 0; i < len; ++i) {
    h = gru_update(p, h, row(xz, i), row(xr, i), row(xh, i));
    out.states.push_back(h);
  }
  out.matrix = g.stack_rows(out.states);
  out.final = h;
  return out;
}

}  // namespace divsum

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "divsum/graph.hpp"
#include "divsum/params.hpp"

namespace divsum {

/// Gated recurrent unit weights: W_* act on the input, U_* on the previous state.
struct GruParams {
  Tensor w_z, w_r, w_h;
  Tensor u_z, u_r, u_h;
  Tensor b_z, b_r, b_h;

  /// Matrices uniform(±1/√hidden), biases zero.
  static GruParams create(std::size_t input_size, std::size_t hidden_size, Rng& rng);

  std::size_t input_size() const { return w_z.cols(); }
  std::size_t hidden_size() const { return w_z.rows(); }

  void visit(std::string_view prefix, const ParamVisitor& f);
  void visit(std::string_view prefix, const ConstParamVisitor& f) const;
};

struct GruVars {
  Var w_z, w_r, w_h;
  Var u_z, u_r, u_h;
  Var b_z, b_r, b_h;

  static GruVars bind(const Binder& bind, const GruParams& p);
};

/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ ĥ.
Var gru_step(const GruVars& p, Var h_prev, Var x);

struct EncoderOutput {
  std::vector<Var> states;
  /// states stacked as rows, [L × hidden].
  Var matrix;
  Var final;
};

/// Left-to-right GRU over the rows of `inputs` ([L × d]) starting from h₀ = 0.
EncoderOutput encode(const GruVars& p, Var inputs);

}  // namespace divsum

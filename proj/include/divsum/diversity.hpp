#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "divsum/attention.hpp"
#include "divsum/graph.hpp"
#include "divsum/params.hpp"

namespace divsum {

enum class DiversityMode { None, D1, SD1, D2, SD2, B1, M1, M2 };

std::string_view to_string(DiversityMode mode);
/// Accepts the upper-case mode names ("NONE", "D1", ..., "M2"), case-insensitively.
DiversityMode parse_diversity_mode(std::string_view name);

struct DiversityOptions {
  /// Squash the SD1 gate through a sigmoid instead of using the affine gate as is.
  bool sd1_sigmoid_gate = false;
  /// Carry the raw LSTM cell (instead of the diversified cell) into the next step.
  bool store_raw_cell = false;
};

/// LSTM over the sequence of document contexts (D2, SD2, B1).
struct LstmParams {
  Tensor w_i, w_f, w_o, w_c;
  Tensor u_i, u_f, u_o, u_c;
  Tensor b_i, b_f, b_o, b_c;

  static LstmParams create(std::size_t input_size, std::size_t hidden_size, Rng& rng);
  void visit(std::string_view prefix, const ParamVisitor& f);
  void visit(std::string_view prefix, const ConstParamVisitor& f) const;
};

/// Parameters of one diversity mechanism. Only the tensors the mode uses are allocated.
struct DiversityParams {
  DiversityMode mode = DiversityMode::None;

  // SD1: γ = W_g d_{t−1} + b_g. SD2: g = σ(W_g d_t + U_g h_{t−1} + b_g).
  Tensor w_g, u_g, b_g;
  LstmParams lstm;
  // M1 and M2: diagonals of W_c and U_c.
  Tensor w_c, u_c;
  // M2 attention: W_a (l1×l1), U_a (l1×l4), b_a and v_a (l1).
  Tensor w_a, u_a, b_a, v_a;

  /// `decoder_hidden` is l1 and `context_size` is l4 (the cell size equals l4).
  static DiversityParams create(DiversityMode mode, std::size_t decoder_hidden,
                                std::size_t context_size, Rng& rng);
  void visit(std::string_view prefix, const ParamVisitor& f);
  void visit(std::string_view prefix, const ConstParamVisitor& f) const;
};

struct LstmVars {
  Var w_i, w_f, w_o, w_c;
  Var u_i, u_f, u_o, u_c;
  Var b_i, b_f, b_o, b_c;
};

struct DiversityVars {
  DiversityMode mode = DiversityMode::None;
  Var w_g, u_g, b_g;
  LstmVars lstm;
  Var w_c, u_c;
  Var w_a, u_a, b_a, v_a;

  static DiversityVars bind(const Binder& bind, const DiversityParams& p);
};

/// Per-sequence history. Every field starts at zero.
struct DiversityState {
  Var prev_context;   // d′_{t−1}
  Var prev_raw;       // d_{t−1}, for the SD1 gate
  Var cell;           // c_{t−1}
  Var hidden;         // h_{t−1}
  Var context_sum;    // Σ_{j<t} d′_j
  Var attention_sum;  // Σ_{j<t} α′_j, one entry per document position
  std::size_t step = 0;
};

/// Zero history for a document of `doc_length` positions.
DiversityState initial_state(Graph& g, std::size_t context_size, std::size_t doc_length);

struct DiversityStep {
  Var context;  // d′_t
  DiversityState state;
  /// LSTM modes: c_t before and after the projection.
  Var raw_cell;
  Var diverse_cell;
  /// M2: the diversified attention weights α′_t.
  Var weights;
};

DiversityStep d1_step(Var d, const DiversityState& state);
DiversityStep sd1_step(const DiversityVars& p, Var d, const DiversityState& state,
                       const DiversityOptions& options = {});
DiversityStep d2_cell_step(const DiversityVars& p, Var d, const DiversityState& state,
                           const DiversityOptions& options = {});
DiversityStep sd2_cell_step(const DiversityVars& p, Var d, const DiversityState& state,
                            const DiversityOptions& options = {});
DiversityStep b1_cell_step(const DiversityVars& p, Var d, const DiversityState& state);
DiversityStep m1_step(const DiversityVars& p, Var d, const DiversityState& state);

/// Keys for M2 attention: document states projected through U_a.
AttentionKeys m2_keys(const DiversityVars& p, Var doc_states, std::size_t valid);
/// a_i = v_aᵀ tanh(W_a s_t + U_a h_i − (Σ_{j<t} α′_{j,i}) b_a), α′ = softmax(a); the
/// context pooled with α′ then goes through the M1 transform.
DiversityStep m2_attention(const DiversityVars& p, Var decoder_state, const AttentionKeys& keys,
                           const DiversityState& state);

/// Dispatches every mode except M2, which needs the decoder state (see m2_attention).
/// NONE passes d through.
DiversityStep diversify(const DiversityVars& p, Var d, const DiversityState& state,
                        const DiversityOptions& options = {});

}  // namespace divsum

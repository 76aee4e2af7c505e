#pragma once

#include <cstddef>
#include <optional>
#include <string_view>

#include "divsum/graph.hpp"
#include "divsum/params.hpp"

namespace divsum {

/// Query attention: a_i = v_qᵀ tanh(W_q s_t + U_q h_i^q).
struct QueryAttentionParams {
  Tensor w_q;  // l2 × l1
  Tensor u_q;  // l2 × l2
  Tensor v_q;  // l2

  static QueryAttentionParams create(std::size_t decoder_hidden, std::size_t query_hidden, Rng& rng);
  void visit(std::string_view prefix, const ParamVisitor& f);
  void visit(std::string_view prefix, const ConstParamVisitor& f) const;
};

/// Document attention conditioned on the query context:
/// a_i = v_dᵀ tanh(W_d s_t + U_d h_i^d + Z q_t).
struct DocumentAttentionParams {
  Tensor w_d;  // l4 × l1
  Tensor u_d;  // l4 × l4
  Tensor z;    // l4 × l2
  Tensor v_d;  // l4

  static DocumentAttentionParams create(std::size_t decoder_hidden, std::size_t query_hidden,
                                        std::size_t doc_hidden, Rng& rng);
  void visit(std::string_view prefix, const ParamVisitor& f);
  void visit(std::string_view prefix, const ConstParamVisitor& f) const;
};

struct QueryAttentionVars {
  Var w_q, u_q, v_q;
  static QueryAttentionVars bind(const Binder& bind, const QueryAttentionParams& p);
};

struct DocumentAttentionVars {
  Var w_d, u_d, z, v_d;
  static DocumentAttentionVars bind(const Binder& bind, const DocumentAttentionParams& p);
};

/// Encoder states together with their step-independent key projection
/// (row i holds U h_i). Rows at or beyond `valid` are padding.
struct AttentionKeys {
  Var states;
  Var projected;
  std::size_t valid = 0;
};

AttentionKeys make_keys(Var states, Var key_matrix, std::optional<std::size_t> valid = std::nullopt);

struct AttentionResult {
  Var energies;
  /// Softmax over valid positions; padded positions are exactly zero.
  Var weights;
  /// Σ_i weights_i · states_i
  Var context;
};

/// v ᵀ tanh(projected_i + offset) for every position, normalized and pooled.
AttentionResult attend(const AttentionKeys& keys, Var offset, Var v);

AttentionResult query_attention(const QueryAttentionVars& p, Var decoder_state,
                                const AttentionKeys& query_keys);

/// Without a query context the Z term is dropped (plain document attention).
AttentionResult document_attention(const DocumentAttentionVars& p, Var decoder_state,
                                   const AttentionKeys& doc_keys, std::optional<Var> query_context);

}  // namespace divsum

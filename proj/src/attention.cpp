#include "divsum/attention.hpp"

#include <stdexcept>

namespace divsum {

QueryAttentionParams QueryAttentionParams::create(std::size_t decoder_hidden,
                                                  std::size_t query_hidden, Rng& rng) {
  QueryAttentionParams p;
  p.w_q = scaled_uniform({query_hidden, decoder_hidden}, decoder_hidden, rng);
  p.u_q = scaled_uniform({query_hidden, query_hidden}, query_hidden, rng);
  p.v_q = scaled_uniform({query_hidden}, query_hidden, rng);
  return p;
}

void QueryAttentionParams::visit(std::string_view prefix, const ParamVisitor& f) {
  f(param_name(prefix, "W_q"), w_q);
  f(param_name(prefix, "U_q"), u_q);
  f(param_name(prefix, "v_q"), v_q);
}

void QueryAttentionParams::visit(std::string_view prefix, const ConstParamVisitor& f) const {
  f(param_name(prefix, "W_q"), w_q);
  f(param_name(prefix, "U_q"), u_q);
  f(param_name(prefix, "v_q"), v_q);
}

DocumentAttentionParams DocumentAttentionParams::create(std::size_t decoder_hidden,
                                                        std::size_t query_hidden,
                                                        std::size_t doc_hidden, Rng& rng) {
  DocumentAttentionParams p;
  p.w_d = scaled_uniform({doc_hidden, decoder_hidden}, decoder_hidden, rng);
  p.u_d = scaled_uniform({doc_hidden, doc_hidden}, doc_hidden, rng);
  p.z = scaled_uniform({doc_hidden, query_hidden}, query_hidden, rng);
  p.v_d = scaled_uniform({doc_hidden}, doc_hidden, rng);
  return p;
}

void DocumentAttentionParams::visit(std::string_view prefix, const ParamVisitor& f) {
  f(param_name(prefix, "W_d"), w_d);
  f(param_name(prefix, "U_d"), u_d);
  f(param_name(prefix, "Z"), z);
  f(param_name(prefix, "v_d"), v_d);
}

void DocumentAttentionParams::visit(std::string_view prefix, const ConstParamVisitor& f) const {
  f(param_name(prefix, "W_d"), w_d);
  f(param_name(prefix, "U_d"), u_d);
  f(param_name(prefix, "Z"), z);
  f(param_name(prefix, "v_d"), v_d);
}

QueryAttentionVars QueryAttentionVars::bind(const Binder& bind, const QueryAttentionParams& p) {
  return {bind(p.w_q), bind(p.u_q), bind(p.v_q)};
}

DocumentAttentionVars DocumentAttentionVars::bind(const Binder& bind,
                                                  const DocumentAttentionParams& p) {
  return {bind(p.w_d), bind(p.u_d), bind(p.z), bind(p.v_d)};
}

AttentionKeys make_keys(Var states, Var key_matrix, std::optional<std::size_t> valid) {
  if (states.shape().size() != 2 || states.rows() == 0) {
    throw std::invalid_argument("attention over an empty set of encoder states");
  }
  AttentionKeys keys;
  keys.states = states;
  keys.projected = matmul_nt(states, key_matrix);
  keys.valid = valid.value_or(states.rows());
  if (keys.valid == 0 || keys.valid > states.rows()) {
    throw std::invalid_argument("attention valid length " + std::to_string(keys.valid) +
                                " outside [1, " + std::to_string(states.rows()) + "]");
  }
  return keys;
}

AttentionResult attend(const AttentionKeys& keys, Var offset, Var v) {
  AttentionResult r;
  r.energies = matvec(tanh(add_rowwise(keys.projected, offset)), v);
  r.weights = softmax(r.energies, keys.valid);
  r.context = tmatvec(keys.states, r.weights);
  return r;
}

AttentionResult query_attention(const QueryAttentionVars& p, Var decoder_state,
                                const AttentionKeys& query_keys) {
  return attend(query_keys, matvec(p.w_q, decoder_state), p.v_q);
}

AttentionResult document_attention(const DocumentAttentionVars& p, Var decoder_state,
                                   const AttentionKeys& doc_keys, std::optional<Var> query_context) {
  Var offset = matvec(p.w_d, decoder_state);
  if (query_context) offset = offset + matvec(p.z, *query_context);
  return attend(doc_keys, offset, p.v_d);
}

}  // namespace divsum

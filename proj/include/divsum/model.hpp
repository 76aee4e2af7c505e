#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "divsum/attention.hpp"
#include "divsum/corpus.hpp"
#include "divsum/diversity.hpp"
#include "divsum/embeddings.hpp"
#include "divsum/encoders.hpp"

namespace divsum {

/// How the query reaches the document attention.
enum class QueryMode {
  Attention,  // per-step query attention
  Mean,       // static mean of the query encoder states
  None,       // no query encoder at all
};

std::string_view to_string(QueryMode mode);
QueryMode parse_query_mode(std::string_view name);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 100;
  std::size_t decoder_hidden = 200;  // l1
  std::size_t query_hidden = 200;    // l2
  std::size_t doc_hidden = 200;      // l4 (the diversity cell shares this size)
  DiversityMode diversity = DiversityMode::None;
  QueryMode query = QueryMode::Attention;
  DiversityOptions options;
  bool train_embeddings = true;
  std::size_t max_decode_len = 30;

  /// Throws std::invalid_argument on zero sizes.
  void validate() const;
  /// Row name used in result tables: "Vanilla e-a-d", "Query_enc", "Query_att" or the mode name.
  std::string label() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const;
};

struct ModelParams {
  EmbeddingTable embeddings;
  GruParams query_encoder;
  GruParams doc_encoder;
  QueryAttentionParams query_attention;
  DocumentAttentionParams doc_attention;
  GruParams decoder;
  Tensor s_init;  // l1 × l4
  Tensor w_o;     // N × l1
  Tensor w_dec;   // l1 × l1
  Tensor v_dec;   // l1 × l4
  DiversityParams diversity;
};

class Model {
 public:
  /// Random initialization drawn from `seed`.
  Model(ModelConfig config, std::uint64_t seed);
  /// Random initialization with a given embedding table (e.g. pretrained vectors).
  Model(ModelConfig config, EmbeddingTable embeddings, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// Every parameter tensor the configuration uses, in a fixed order.
  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
  /// Same as visit, minus the embedding table when it is frozen.
  void visit_trainable(const ParamVisitor& f);

  std::vector<Tensor*> trainable_tensors();
  std::size_t parameter_count() const;

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, const F& f);

  ModelConfig config_;
  ModelParams params_;
};

struct ModelVars {
  Var embeddings;
  GruVars query_encoder, doc_encoder, decoder;
  QueryAttentionVars query_attention;
  DocumentAttentionVars doc_attention;
  Var s_init, w_o, w_dec, v_dec;
  DiversityVars diversity;
};

/// s₀ = tanh(S_init · h_final).
Var init_state(Var s_init, Var doc_final);
/// GRU step over [e(y_{t−1}), d′_{t−1}].
Var decoder_step(const GruVars& gru, Var s_prev, Var prev_embedding, Var prev_context);
/// W_o (W_dec s_t + V_dec d′_t); softmax of this is y_t.
Var output_logits(Var w_o, Var w_dec, Var v_dec, Var s_t, Var context);
Var output_distribution(Var w_o, Var w_dec, Var v_dec, Var s_t, Var context);

struct StepOutput {
  Var state;          // s_t
  Var query_weights;  // invalid unless the query is attended
  Var doc_weights;
  Var raw_context;    // d_t (M2: the context pooled with α′)
  Var context;        // d′_t
  Var logits;
};

/// One encode-attend-decode pass over a graph. Construction encodes the inputs;
/// each `step` consumes the previous output token.
class Decoding {
 public:
  /// With `track_grads` the parameters accumulate gradients, so `model` must be a
  /// mutable object (see the Model& overloads of sequence_loss).
  Decoding(const Model& model, Graph& graph, bool track_grads, std::span<const int> query_ids,
           std::span<const int> doc_ids);

  StepOutput step(int prev_token);
  const ModelVars& vars() const { return vars_; }

 private:
  const Model* model_;
  Graph* graph_;
  ModelVars vars_;
  AttentionKeys query_keys_;
  AttentionKeys doc_keys_;
  AttentionKeys m2_keys_;
  std::optional<Var> query_mean_;
  Var state_;
  Var prev_context_;
  DiversityState diversity_state_;
};

struct LossOptions {
  /// Probability of feeding the previous argmax instead of the gold token.
  double sampling_probability = 0.0;
  Rng* rng = nullptr;
};

/// Teacher-forced −(1/m) Σ_t log y_t[y*_t] over the non-PAD summary tokens.
Var sequence_loss(Model& model, Graph& graph, const Triple& triple, const LossOptions& options = {});
/// Forward-only value of the same loss.
double sequence_loss_value(const Model& model, const Triple& triple);

struct DecodeTrace {
  std::vector<int> tokens;
  std::vector<std::vector<double>> distributions;
  std::vector<std::vector<double>> raw_contexts;
  std::vector<std::vector<double>> contexts;
  std::vector<std::vector<double>> query_weights;
  std::vector<std::vector<double>> doc_weights;
};

/// Feeds the argmax (lowest id on ties) of each step into the next, stopping after
/// EOS or `max_len` tokens. A max_len of 0 uses the configured limit.
DecodeTrace greedy_decode(const Model& model, std::span<const int> query_ids,
                          std::span<const int> doc_ids, std::size_t max_len = 0);

/// Index of the largest entry, lowest index on ties.
int argmax(std::span<const double> values);

struct GradCheckSetup {
  DiversityMode mode = DiversityMode::None;
  QueryMode query = QueryMode::Attention;
  DiversityOptions options;
  /// Embedding and every hidden size.
  std::size_t dims = 8;
  std::size_t vocab_size = 12;
  /// Upper bound on query, document and summary length (EOS included).
  std::size_t max_len = 5;
  std::uint64_t seed = 0;
};

struct ModelGradCheck {
  ModelConfig config;
  Triple triple;
  FiniteDiffReport report;
};

/// Full-model finite-difference check of sequence_loss on a random triple.
/// Every parameter is drawn uniform(−1, 1) so the point is generic: at the
/// default initialization D1-style contexts sit on the projection guard.
ModelGradCheck model_gradient_check(const GradCheckSetup& setup);

}  // namespace divsum

#include "divsum/model.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

namespace divsum {

namespace {

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

void require_nonempty(std::span<const int> ids, const char* what) {
  if (ids.empty()) throw std::invalid_argument(std::string("empty ") + what);
}

EmbeddingTable seeded_embeddings(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  return random_embeddings(config.vocab_size, config.embed_dim, rng);
}

}  // namespace

std::string_view to_string(QueryMode mode) {
  switch (mode) {
    case QueryMode::Attention: return "attention";
    case QueryMode::Mean: return "mean";
    case QueryMode::None: return "none";
  }
  return "?";
}

QueryMode parse_query_mode(std::string_view name) {
  const std::string u = upper(name);
  if (u == "ATTENTION") return QueryMode::Attention;
  if (u == "MEAN") return QueryMode::Mean;
  if (u == "NONE") return QueryMode::None;
  throw std::invalid_argument("unknown query mode '" + std::string(name) + "' (expected attention, mean or none)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(embed_dim, "embed_dim");
  positive(decoder_hidden, "decoder_hidden");
  positive(query_hidden, "query_hidden");
  positive(doc_hidden, "doc_hidden");
  positive(max_decode_len, "max_decode_len");
  if (vocab_size <= static_cast<std::size_t>(kEosId)) {
    throw std::invalid_argument("vocab_size must include the special tokens");
  }
}

std::string ModelConfig::label() const {
  if (diversity == DiversityMode::None) {
    switch (query) {
      case QueryMode::None: return "Vanilla e-a-d";
      case QueryMode::Mean: return "Query_enc";
      case QueryMode::Attention: return "Query_att";
    }
  }
  std::string name(to_string(diversity));
  if (query != QueryMode::Attention) name += "/query-" + std::string(to_string(query));
  return name;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"embed_dim", embed_dim},
          {"decoder_hidden", decoder_hidden},
          {"query_hidden", query_hidden},
          {"doc_hidden", doc_hidden},
          {"diversity", std::string(to_string(diversity))},
          {"query", std::string(to_string(query))},
          {"sd1_sigmoid_gate", options.sd1_sigmoid_gate},
          {"store_raw_cell", options.store_raw_cell},
          {"train_embeddings", train_embeddings},
          {"max_decode_len", max_decode_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
  c.query_hidden = j.at("query_hidden").get<std::size_t>();
  c.doc_hidden = j.at("doc_hidden").get<std::size_t>();
  c.diversity = parse_diversity_mode(j.at("diversity").get<std::string>());
  c.query = parse_query_mode(j.at("query").get<std::string>());
  c.options.sd1_sigmoid_gate = j.value("sd1_sigmoid_gate", false);
  c.options.store_raw_cell = j.value("store_raw_cell", false);
  c.train_embeddings = j.value("train_embeddings", true);
  c.max_decode_len = j.value("max_decode_len", std::size_t{30});
  c.validate();
  return c;
}

bool ModelConfig::operator==(const ModelConfig& o) const { return to_json() == o.to_json(); }

Model::Model(ModelConfig config, std::uint64_t seed)
    : Model(config, seeded_embeddings(config, seed), Rng(seed).next()) {}

Model::Model(ModelConfig config, EmbeddingTable embeddings, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  if (embeddings.vocab_size() != config_.vocab_size || embeddings.dim() != config_.embed_dim) {
    throw std::invalid_argument("embedding table " + shape_string(embeddings.weights.shape()) +
                                " does not match vocab_size x embed_dim");
  }
  const std::size_t l1 = config_.decoder_hidden;
  const std::size_t l2 = config_.query_hidden;
  const std::size_t l4 = config_.doc_hidden;
  Rng rng(seed);
  embeddings.trainable = config_.train_embeddings;
  params_.embeddings = std::move(embeddings);
  if (config_.query != QueryMode::None) {
    params_.query_encoder = GruParams::create(config_.embed_dim, l2, rng);
  }
  if (config_.query == QueryMode::Attention) {
    params_.query_attention = QueryAttentionParams::create(l1, l2, rng);
  }
  params_.doc_encoder = GruParams::create(config_.embed_dim, l4, rng);
  params_.doc_attention = DocumentAttentionParams::create(l1, l2, l4, rng);
  if (config_.query == QueryMode::None) params_.doc_attention.z = Tensor();
  params_.decoder = GruParams::create(config_.embed_dim + l4, l1, rng);
  params_.s_init = scaled_uniform({l1, l4}, l4, rng);
  params_.w_o = scaled_uniform({config_.vocab_size, l1}, l1, rng);
  params_.w_dec = scaled_uniform({l1, l1}, l1, rng);
  params_.v_dec = scaled_uniform({l1, l4}, l4, rng);
  params_.diversity = DiversityParams::create(config_.diversity, l1, l4, rng);
}

template <typename Self, typename F>
void Model::visit_all(Self& self, const F& f) {
  auto& p = self.params_;
  const auto& c = self.config_;
  f("embedding.E", p.embeddings.weights);
  if (c.query != QueryMode::None) p.query_encoder.visit("query_encoder", f);
  p.doc_encoder.visit("document_encoder", f);
  if (c.query == QueryMode::Attention) p.query_attention.visit("query_attention", f);
  if (c.diversity != DiversityMode::M2) {
    f("document_attention.W_d", p.doc_attention.w_d);
    f("document_attention.U_d", p.doc_attention.u_d);
    if (c.query != QueryMode::None) f("document_attention.Z", p.doc_attention.z);
    f("document_attention.v_d", p.doc_attention.v_d);
  }
  p.decoder.visit("decoder.gru", f);
  f("decoder.S_init", p.s_init);
  f("decoder.W_o", p.w_o);
  f("decoder.W_dec", p.w_dec);
  f("decoder.V_dec", p.v_dec);
  p.diversity.visit("diversity", f);
}

void Model::visit(const ParamVisitor& f) { visit_all(*this, f); }
void Model::visit(const ConstParamVisitor& f) const { visit_all(*this, f); }

void Model::visit_trainable(const ParamVisitor& f) {
  visit_all(*this, [&](const std::string& name, Tensor& t) {
    if (&t == &params_.embeddings.weights && !config_.train_embeddings) return;
    f(name, t);
  });
}

std::vector<Tensor*> Model::trainable_tensors() {
  std::vector<Tensor*> out;
  visit_trainable([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

Var init_state(Var s_init, Var doc_final) { return tanh(matvec(s_init, doc_final)); }

Var decoder_step(const GruVars& gru, Var s_prev, Var prev_embedding, Var prev_context) {
  return gru_step(gru, s_prev, concat(prev_embedding, prev_context));
}

Var output_logits(Var w_o, Var w_dec, Var v_dec, Var s_t, Var context) {
  return matvec(w_o, matvec(w_dec, s_t) + matvec(v_dec, context));
}

Var output_distribution(Var w_o, Var w_dec, Var v_dec, Var s_t, Var context) {
  return softmax(output_logits(w_o, w_dec, v_dec, s_t, context));
}

Decoding::Decoding(const Model& model, Graph& graph, bool track_grads, std::span<const int> query_ids,
                   std::span<const int> doc_ids)
    : model_(&model), graph_(&graph) {
  const ModelConfig& c = model.config();
  const ModelParams& p = model.params();
  require_nonempty(doc_ids, "document");
  if (c.query != QueryMode::None) require_nonempty(query_ids, "query");

  Binder bind(graph, track_grads);
  Binder embed_bind(graph, track_grads && c.train_embeddings);
  vars_.embeddings = embed_bind(p.embeddings.weights);
  vars_.doc_encoder = GruVars::bind(bind, p.doc_encoder);
  vars_.decoder = GruVars::bind(bind, p.decoder);
  vars_.s_init = bind(p.s_init);
  vars_.w_o = bind(p.w_o);
  vars_.w_dec = bind(p.w_dec);
  vars_.v_dec = bind(p.v_dec);
  vars_.diversity = DiversityVars::bind(bind, p.diversity);

  auto doc = encode(vars_.doc_encoder, embed(vars_.embeddings, doc_ids));
  if (c.diversity == DiversityMode::M2) {
    m2_keys_ = m2_keys(vars_.diversity, doc.matrix, doc_ids.size());
  } else {
    const auto& a = p.doc_attention;
    vars_.doc_attention = {bind(a.w_d), bind(a.u_d), a.z.size() ? bind(a.z) : Var(), bind(a.v_d)};
    doc_keys_ = make_keys(doc.matrix, vars_.doc_attention.u_d);
  }

  if (c.query != QueryMode::None) {
    vars_.query_encoder = GruVars::bind(bind, p.query_encoder);
    auto query = encode(vars_.query_encoder, embed(vars_.embeddings, query_ids));
    if (c.query == QueryMode::Attention) {
      vars_.query_attention = QueryAttentionVars::bind(bind, p.query_attention);
      query_keys_ = make_keys(query.matrix, vars_.query_attention.u_q);
    } else {
      query_mean_ = mean_rows(query.matrix);
    }
  }

  state_ = init_state(vars_.s_init, doc.final);
  prev_context_ = graph.zeros(c.doc_hidden);
  diversity_state_ = initial_state(graph, c.doc_hidden, doc_ids.size());
}

StepOutput Decoding::step(int prev_token) {
  const ModelConfig& c = model_->config();
  if (prev_token < 0 || static_cast<std::size_t>(prev_token) >= c.vocab_size) {
    throw std::out_of_range("token id " + std::to_string(prev_token) + " outside the vocabulary");
  }
  StepOutput out;
  const int prev[] = {prev_token};
  Var e = row(embed(vars_.embeddings, prev), 0);
  out.state = decoder_step(vars_.decoder, state_, e, prev_context_);

  std::optional<Var> q;
  if (c.query == QueryMode::Attention) {
    auto qa = query_attention(vars_.query_attention, out.state, query_keys_);
    out.query_weights = qa.weights;
    q = qa.context;
  } else if (c.query == QueryMode::Mean) {
    q = query_mean_;
  }

  DiversityStep div;
  if (c.diversity == DiversityMode::M2) {
    div = m2_attention(vars_.diversity, out.state, m2_keys_, diversity_state_);
    out.doc_weights = div.weights;
    out.raw_context = tmatvec(m2_keys_.states, div.weights);
  } else {
    auto da = document_attention(vars_.doc_attention, out.state, doc_keys_, q);
    out.doc_weights = da.weights;
    out.raw_context = da.context;
    div = diversify(vars_.diversity, da.context, diversity_state_, c.options);
  }
  out.context = div.context;
  out.logits = output_logits(vars_.w_o, vars_.w_dec, vars_.v_dec, out.state, out.context);

  state_ = out.state;
  prev_context_ = out.context;
  diversity_state_ = div.state;
  return out;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

namespace {

Var build_loss(const Model& model, Graph& graph, bool track, const Triple& triple, const LossOptions& options) {
  std::size_t targets = 0;
  for (int id : triple.summary_ids) targets += id != kPadId;
  if (targets == 0) throw std::invalid_argument("summary has no target tokens");

  Decoding run(model, graph, track, triple.query_ids, triple.doc_ids);
  int prev = kSosId;
  Var total;
  for (int gold : triple.summary_ids) {
    auto step = run.step(prev);
    if (gold != kPadId) {
      Var nll = nll_logits(step.logits, gold);
      total = total.valid() ? total + nll : nll;
    }
    prev = gold;
    if (options.sampling_probability > 0.0 && options.rng &&
        options.rng->unit() < options.sampling_probability) {
      prev = argmax(step.logits.value());
    }
  }
  return scale(total, 1.0 / static_cast<double>(targets));
}

}  // namespace

Var sequence_loss(Model& model, Graph& graph, const Triple& triple, const LossOptions& options) {
  return build_loss(model, graph, true, triple, options);
}

double sequence_loss_value(const Model& model, const Triple& triple) {
  Graph graph;
  return build_loss(model, graph, false, triple, {}).scalar();
}

DecodeTrace greedy_decode(const Model& model, std::span<const int> query_ids, std::span<const int> doc_ids,
                          std::size_t max_len) {
  if (max_len == 0) max_len = model.config().max_decode_len;
  Graph graph;
  Decoding run(model, graph, false, query_ids, doc_ids);
  DecodeTrace trace;
  int prev = kSosId;
  while (trace.tokens.size() < max_len) {
    auto step = run.step(prev);
    Var y = softmax(step.logits);
    const int next = argmax(step.logits.value());
    trace.tokens.push_back(next);
    trace.distributions.push_back(y.to_vector());
    trace.raw_contexts.push_back(step.raw_context.to_vector());
    trace.contexts.push_back(step.context.to_vector());
    trace.query_weights.push_back(step.query_weights.valid() ? step.query_weights.to_vector()
                                                             : std::vector<double>{});
    trace.doc_weights.push_back(step.doc_weights.to_vector());
    if (next == kEosId) break;
    prev = next;
  }
  return trace;
}

ModelGradCheck model_gradient_check(const GradCheckSetup& setup) {
  if (setup.vocab_size <= static_cast<std::size_t>(kNumSpecialTokens) || setup.max_len < 2) {
    throw std::invalid_argument("gradient check needs a vocabulary beyond the specials and max_len >= 2");
  }
  ModelGradCheck out;
  ModelConfig& c = out.config;
  c.vocab_size = setup.vocab_size;
  c.embed_dim = c.decoder_hidden = c.query_hidden = c.doc_hidden = setup.dims;
  c.diversity = setup.mode;
  c.query = setup.query;
  c.options = setup.options;
  c.max_decode_len = setup.max_len;

  Rng rng(setup.seed);
  auto word = [&] { return static_cast<int>(kNumSpecialTokens + rng.below(setup.vocab_size - kNumSpecialTokens)); };
  auto sequence = [&](std::size_t max_len) {
    std::vector<int> ids(1 + rng.below(max_len));
    for (int& id : ids) id = word();
    return ids;
  };
  out.triple.query_ids = sequence(setup.max_len);
  out.triple.doc_ids = sequence(setup.max_len);
  out.triple.summary_ids = sequence(setup.max_len - 1);
  out.triple.summary_ids.push_back(kEosId);

  Model model(c, rng.next());
  model.visit([&](const std::string&, Tensor& t) {
    for (double& x : t.values()) x = rng.uniform(-1.0, 1.0);
  });
  auto params = model.trainable_tensors();
  out.report = finite_diff_check([&](Graph& g) { return sequence_loss(model, g, out.triple); }, params);
  return out;
}

}  // namespace divsum

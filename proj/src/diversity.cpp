#include "divsum/diversity.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace divsum {

namespace {

constexpr DiversityMode kAllModes[] = {DiversityMode::None, DiversityMode::D1, DiversityMode::SD1,
                                       DiversityMode::D2,   DiversityMode::SD2, DiversityMode::B1,
                                       DiversityMode::M1,   DiversityMode::M2};

bool uses_lstm(DiversityMode m) {
  return m == DiversityMode::D2 || m == DiversityMode::SD2 || m == DiversityMode::B1;
}

bool uses_history_sum(DiversityMode m) { return m == DiversityMode::M1 || m == DiversityMode::M2; }

template <typename Self, typename F>
void visit_lstm(Self& p, std::string_view prefix, const F& f) {
  f(param_name(prefix, "W_i"), p.w_i);
  f(param_name(prefix, "W_f"), p.w_f);
  f(param_name(prefix, "W_o"), p.w_o);
  f(param_name(prefix, "W_c"), p.w_c);
  f(param_name(prefix, "U_i"), p.u_i);
  f(param_name(prefix, "U_f"), p.u_f);
  f(param_name(prefix, "U_o"), p.u_o);
  f(param_name(prefix, "U_c"), p.u_c);
  f(param_name(prefix, "b_i"), p.b_i);
  f(param_name(prefix, "b_f"), p.b_f);
  f(param_name(prefix, "b_o"), p.b_o);
  f(param_name(prefix, "b_c"), p.b_c);
}

template <typename Self, typename F>
void visit_diversity(Self& p, std::string_view prefix, const F& f) {
  switch (p.mode) {
    case DiversityMode::None:
    case DiversityMode::D1:
      break;
    case DiversityMode::SD1:
      f(param_name(prefix, "W_g"), p.w_g);
      f(param_name(prefix, "b_g"), p.b_g);
      break;
    case DiversityMode::SD2:
      f(param_name(prefix, "W_g"), p.w_g);
      f(param_name(prefix, "U_g"), p.u_g);
      f(param_name(prefix, "b_g"), p.b_g);
      [[fallthrough]];
    case DiversityMode::D2:
    case DiversityMode::B1:
      visit_lstm(p.lstm, param_name(prefix, "lstm"), f);
      break;
    case DiversityMode::M2:
      f(param_name(prefix, "W_a"), p.w_a);
      f(param_name(prefix, "U_a"), p.u_a);
      f(param_name(prefix, "b_a"), p.b_a);
      f(param_name(prefix, "v_a"), p.v_a);
      [[fallthrough]];
    case DiversityMode::M1:
      f(param_name(prefix, "W_c"), p.w_c);
      f(param_name(prefix, "U_c"), p.u_c);
      break;
  }
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

void require_mode(const DiversityVars& p, std::initializer_list<DiversityMode> allowed, const char* op) {
  if (std::find(allowed.begin(), allowed.end(), p.mode) == allowed.end()) {
    throw std::invalid_argument(std::string(op) + " called with parameters for mode " +
                                std::string(to_string(p.mode)));
  }
}

struct CellResult {
  Var raw;
  Var output_gate;
};

CellResult lstm_cell(const LstmVars& p, Var d, const DiversityState& s) {
  Var i = sigmoid(matvec(p.w_i, d) + matvec(p.u_i, s.hidden) + p.b_i);
  Var f = sigmoid(matvec(p.w_f, d) + matvec(p.u_f, s.hidden) + p.b_f);
  Var o = sigmoid(matvec(p.w_o, d) + matvec(p.u_o, s.hidden) + p.b_o);
  Var candidate = tanh(matvec(p.w_c, d) + matvec(p.u_c, s.hidden) + p.b_c);
  return {mul(i, candidate) + mul(f, s.cell), o};
}

DiversityStep finish_cell(const CellResult& cell, Var diverse, Var d, const DiversityState& s,
                          const DiversityOptions& options) {
  DiversityStep out;
  Var h = mul(cell.output_gate, tanh(diverse));
  out.context = h;
  out.raw_cell = cell.raw;
  out.diverse_cell = diverse;
  out.state = s;
  out.state.cell = options.store_raw_cell ? cell.raw : diverse;
  out.state.hidden = h;
  out.state.prev_context = h;
  out.state.prev_raw = d;
  ++out.state.step;
  return out;
}

DiversityStep simple_step(Var d, Var context, const DiversityState& s) {
  DiversityStep out;
  out.context = context;
  out.state = s;
  out.state.prev_context = context;
  out.state.prev_raw = d;
  ++out.state.step;
  return out;
}

Var m1_transform(const DiversityVars& p, Var d, const DiversityState& s) {
  return tanh(mul(p.w_c, d) - mul(p.u_c, s.context_sum));
}

}  // namespace

std::string_view to_string(DiversityMode mode) {
  switch (mode) {
    case DiversityMode::None: return "NONE";
    case DiversityMode::D1: return "D1";
    case DiversityMode::SD1: return "SD1";
    case DiversityMode::D2: return "D2";
    case DiversityMode::SD2: return "SD2";
    case DiversityMode::B1: return "B1";
    case DiversityMode::M1: return "M1";
    case DiversityMode::M2: return "M2";
  }
  return "?";
}

DiversityMode parse_diversity_mode(std::string_view name) {
  std::string upper(name);
  for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  std::string valid;
  for (DiversityMode m : kAllModes) {
    if (upper == to_string(m)) return m;
    if (!valid.empty()) valid += ", ";
    valid += to_string(m);
  }
  throw std::invalid_argument("unknown diversity mode '" + std::string(name) + "' (expected one of " +
                              valid + ")");
}

LstmParams LstmParams::create(std::size_t input_size, std::size_t hidden_size, Rng& rng) {
  LstmParams p;
  for (Tensor* w : {&p.w_i, &p.w_f, &p.w_o, &p.w_c}) *w = scaled_uniform({hidden_size, input_size}, hidden_size, rng);
  for (Tensor* u : {&p.u_i, &p.u_f, &p.u_o, &p.u_c}) *u = scaled_uniform({hidden_size, hidden_size}, hidden_size, rng);
  for (Tensor* b : {&p.b_i, &p.b_f, &p.b_o, &p.b_c}) *b = Tensor({hidden_size});
  return p;
}

void LstmParams::visit(std::string_view prefix, const ParamVisitor& f) { visit_lstm(*this, prefix, f); }
void LstmParams::visit(std::string_view prefix, const ConstParamVisitor& f) const { visit_lstm(*this, prefix, f); }

DiversityParams DiversityParams::create(DiversityMode mode, std::size_t decoder_hidden,
                                        std::size_t context_size, Rng& rng) {
  const std::size_t l1 = decoder_hidden;
  const std::size_t l4 = context_size;
  DiversityParams p;
  p.mode = mode;
  switch (mode) {
    case DiversityMode::None:
    case DiversityMode::D1:
      break;
    case DiversityMode::SD1:
      // Starts as D1 (γ = 1) and learns to relax it.
      p.w_g = Tensor({l4, l4});
      p.b_g = filled({l4}, 1.0);
      break;
    case DiversityMode::SD2:
      p.w_g = scaled_uniform({l4, l4}, l4, rng);
      p.u_g = scaled_uniform({l4, l4}, l4, rng);
      p.b_g = Tensor({l4});
      [[fallthrough]];
    case DiversityMode::D2:
    case DiversityMode::B1:
      p.lstm = LstmParams::create(l4, l4, rng);
      break;
    case DiversityMode::M2:
      p.w_a = scaled_uniform({l1, l1}, l1, rng);
      p.u_a = scaled_uniform({l1, l4}, l1, rng);
      p.b_a = scaled_uniform({l1}, l1, rng);
      p.v_a = scaled_uniform({l1}, l1, rng);
      [[fallthrough]];
    case DiversityMode::M1:
      p.w_c = filled({l4}, 1.0);
      p.u_c = scaled_uniform({l4}, l4, rng);
      break;
  }
  return p;
}

void DiversityParams::visit(std::string_view prefix, const ParamVisitor& f) { visit_diversity(*this, prefix, f); }
void DiversityParams::visit(std::string_view prefix, const ConstParamVisitor& f) const {
  visit_diversity(*this, prefix, f);
}

DiversityVars DiversityVars::bind(const Binder& bind, const DiversityParams& p) {
  DiversityVars v;
  v.mode = p.mode;
  auto maybe = [&](const Tensor& t) { return t.size() == 0 ? Var() : bind(t); };
  v.w_g = maybe(p.w_g);
  v.u_g = maybe(p.u_g);
  v.b_g = maybe(p.b_g);
  if (uses_lstm(p.mode)) {
    const LstmParams& l = p.lstm;
    v.lstm = {bind(l.w_i), bind(l.w_f), bind(l.w_o), bind(l.w_c), bind(l.u_i), bind(l.u_f),
              bind(l.u_o), bind(l.u_c), bind(l.b_i), bind(l.b_f), bind(l.b_o), bind(l.b_c)};
  }
  if (uses_history_sum(p.mode)) {
    v.w_c = bind(p.w_c);
    v.u_c = bind(p.u_c);
  }
  if (p.mode == DiversityMode::M2) {
    v.w_a = bind(p.w_a);
    v.u_a = bind(p.u_a);
    v.b_a = bind(p.b_a);
    v.v_a = bind(p.v_a);
  }
  return v;
}

DiversityState initial_state(Graph& g, std::size_t context_size, std::size_t doc_length) {
  DiversityState s;
  s.prev_context = g.zeros(context_size);
  s.prev_raw = g.zeros(context_size);
  s.cell = g.zeros(context_size);
  s.hidden = g.zeros(context_size);
  s.context_sum = g.zeros(context_size);
  s.attention_sum = g.zeros(doc_length);
  return s;
}

DiversityStep d1_step(Var d, const DiversityState& state) {
  return simple_step(d, project_out(d, state.prev_context), state);
}

DiversityStep sd1_step(const DiversityVars& p, Var d, const DiversityState& state,
                       const DiversityOptions& options) {
  require_mode(p, {DiversityMode::SD1}, "sd1_step");
  Var gate = matvec(p.w_g, state.prev_raw) + p.b_g;
  if (options.sd1_sigmoid_gate) gate = sigmoid(gate);
  return simple_step(d, project_out(d, state.prev_context, gate), state);
}

DiversityStep d2_cell_step(const DiversityVars& p, Var d, const DiversityState& state,
                           const DiversityOptions& options) {
  require_mode(p, {DiversityMode::D2}, "d2_cell_step");
  auto cell = lstm_cell(p.lstm, d, state);
  return finish_cell(cell, project_out(cell.raw, state.cell), d, state, options);
}

DiversityStep sd2_cell_step(const DiversityVars& p, Var d, const DiversityState& state,
                            const DiversityOptions& options) {
  require_mode(p, {DiversityMode::SD2}, "sd2_cell_step");
  auto cell = lstm_cell(p.lstm, d, state);
  Var gate = sigmoid(matvec(p.w_g, d) + matvec(p.u_g, state.hidden) + p.b_g);
  return finish_cell(cell, project_out(cell.raw, state.cell, gate), d, state, options);
}

DiversityStep b1_cell_step(const DiversityVars& p, Var d, const DiversityState& state) {
  require_mode(p, {DiversityMode::B1}, "b1_cell_step");
  auto cell = lstm_cell(p.lstm, d, state);
  return finish_cell(cell, cell.raw, d, state, {});
}

DiversityStep m1_step(const DiversityVars& p, Var d, const DiversityState& state) {
  require_mode(p, {DiversityMode::M1, DiversityMode::M2}, "m1_step");
  DiversityStep out = simple_step(d, m1_transform(p, d, state), state);
  out.state.context_sum = state.context_sum + out.context;
  return out;
}

AttentionKeys m2_keys(const DiversityVars& p, Var doc_states, std::size_t valid) {
  require_mode(p, {DiversityMode::M2}, "m2_keys");
  return make_keys(doc_states, p.u_a, valid);
}

DiversityStep m2_attention(const DiversityVars& p, Var decoder_state, const AttentionKeys& keys,
                           const DiversityState& state) {
  require_mode(p, {DiversityMode::M2}, "m2_attention");
  if (state.attention_sum.size() != keys.states.rows()) {
    throw ShapeError("attention history has " + std::to_string(state.attention_sum.size()) +
                     " positions but the document has " + std::to_string(keys.states.rows()));
  }
  Var hidden = add_rowwise(keys.projected, matvec(p.w_a, decoder_state)) - outer(state.attention_sum, p.b_a);
  Var energies = matvec(tanh(hidden), p.v_a);
  Var weights = softmax(energies, keys.valid);
  Var d = tmatvec(keys.states, weights);
  DiversityStep out = m1_step(p, d, state);
  out.weights = weights;
  out.state.attention_sum = state.attention_sum + weights;
  return out;
}

DiversityStep diversify(const DiversityVars& p, Var d, const DiversityState& state,
                        const DiversityOptions& options) {
  switch (p.mode) {
    case DiversityMode::None: return simple_step(d, d, state);
    case DiversityMode::D1: return d1_step(d, state);
    case DiversityMode::SD1: return sd1_step(p, d, state, options);
    case DiversityMode::D2: return d2_cell_step(p, d, state, options);
    case DiversityMode::SD2: return sd2_cell_step(p, d, state, options);
    case DiversityMode::B1: return b1_cell_step(p, d, state);
    case DiversityMode::M1: return m1_step(p, d, state);
    case DiversityMode::M2: break;
  }
  throw std::invalid_argument("M2 diversity needs the decoder state; use m2_attention");
}

}  // namespace divsum

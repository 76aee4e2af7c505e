#include <cmath>
#include <numeric>

#include "doctest.h"
#include "divsum/diversity.hpp"

using namespace divsum;

namespace {

double inner(Var a, Var b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value()[i] * b.value()[i];
  return s;
}

double norm(Var a) { return std::sqrt(inner(a, a)); }

void fill(DiversityParams& p, double value) {
  p.visit("div", [&](const std::string&, Tensor& t) {
    for (double& x : t.values()) x = value;
  });
}

void randomize(DiversityParams& p, Rng& rng, double bound = 1.0) {
  p.visit("div", [&](const std::string&, Tensor& t) {
    for (double& x : t.values()) x = rng.uniform(-bound, bound);
  });
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1, 1);
  return v;
}

}  // namespace

TEST_CASE("mode names round trip") {
  for (auto name : {"NONE", "D1", "SD1", "D2", "SD2", "B1", "M1", "M2"}) {
    CHECK(to_string(parse_diversity_mode(name)) == name);
  }
  CHECK(parse_diversity_mode("sd2") == DiversityMode::SD2);
  CHECK_THROWS_AS(parse_diversity_mode("D3"), std::invalid_argument);
}

TEST_CASE("d1_step examples") {
  Graph g;
  auto s0 = initial_state(g, 2, 1);
  Var d1 = g.vector({0.3, -0.7});
  auto first = d1_step(d1, s0);
  CHECK(first.context.to_vector() == d1.to_vector());

  DiversityState s = s0;
  s.prev_context = g.vector({1, 0});
  auto second = d1_step(g.vector({1, 1}), s);
  CHECK(second.context.to_vector() == std::vector<double>{0, 1});
}

TEST_CASE("sd1_step examples") {
  Rng rng(1);
  auto p = DiversityParams::create(DiversityMode::SD1, 3, 2, rng);
  Graph g;
  auto s = initial_state(g, 2, 1);
  s.prev_context = g.vector({1, 0});
  s.prev_raw = g.vector({1, 0});
  Var d = g.vector({1, 1});

  // Initialization W_g = 0, b_g = 1 is exactly D1.
  auto v = DiversityVars::bind(Binder(g, false), p);
  CHECK(sd1_step(v, d, s).context.to_vector() == d1_step(d, s).context.to_vector());

  fill(p, 0.0);
  CHECK(sd1_step(v, d, s).context.to_vector() == d.to_vector());

  for (double& x : p.b_g.values()) x = 0.5;
  CHECK(sd1_step(v, d, s).context.to_vector() == std::vector<double>{0.5, 1});

  DiversityOptions sigmoid_gate;
  sigmoid_gate.sd1_sigmoid_gate = true;
  for (double& x : p.b_g.values()) x = 0.0;
  CHECK(sd1_step(v, d, s, sigmoid_gate).context.to_vector() == std::vector<double>{0.5, 1});
}

TEST_CASE("d2_cell_step examples") {
  Rng rng(2);
  auto p = DiversityParams::create(DiversityMode::D2, 3, 2, rng);
  fill(p, 0.0);
  Graph g;
  auto v = DiversityVars::bind(Binder(g, false), p);
  auto s = initial_state(g, 2, 1);
  s.cell = g.vector({0.6, -0.2});
  auto step = d2_cell_step(v, g.vector({1, 2}), s);
  CHECK(step.raw_cell.value()[0] == doctest::Approx(0.3));
  for (double x : step.diverse_cell.value()) CHECK(std::abs(x) < 1e-15);
  for (double x : step.context.value()) CHECK(std::abs(x) < 1e-15);

  randomize(p, rng);
  auto first = d2_cell_step(v, g.vector({1, 2}), initial_state(g, 2, 1));
  CHECK(first.diverse_cell.to_vector() == first.raw_cell.to_vector());
}

TEST_CASE("b1_cell_step examples") {
  Rng rng(3);
  auto p = DiversityParams::create(DiversityMode::B1, 3, 2, rng);
  fill(p, 0.0);
  Graph g;
  auto v = DiversityVars::bind(Binder(g, false), p);
  auto s = initial_state(g, 2, 1);
  s.cell = g.vector({0.6, -0.2});
  auto step = b1_cell_step(v, g.vector({1, 2}), s);
  CHECK(step.context.value()[0] == doctest::Approx(0.5 * std::tanh(0.3)));
  CHECK(step.context.value()[1] == doctest::Approx(0.5 * std::tanh(-0.1)));

  // At t = 1 B1 and D2 agree when they share LSTM weights.
  randomize(p, rng);
  auto d2 = DiversityParams::create(DiversityMode::D2, 3, 2, rng);
  d2.lstm = p.lstm;
  auto dv = DiversityVars::bind(Binder(g, false), d2);
  Var d = g.vector({0.4, -0.9});
  auto s0 = initial_state(g, 2, 1);
  CHECK(b1_cell_step(v, d, s0).context.to_vector() == d2_cell_step(dv, d, s0).context.to_vector());
  CHECK_THROWS_AS(b1_cell_step(dv, d, s0), std::invalid_argument);
}

TEST_CASE("sd2 gate limits reduce to D2 and B1") {
  Rng rng(4);
  auto sd2 = DiversityParams::create(DiversityMode::SD2, 3, 3, rng);
  randomize(sd2, rng);
  auto d2 = DiversityParams::create(DiversityMode::D2, 3, 3, rng);
  auto b1 = DiversityParams::create(DiversityMode::B1, 3, 3, rng);
  d2.lstm = sd2.lstm;
  b1.lstm = sd2.lstm;
  for (double& x : sd2.w_g.values()) x = 0.0;
  for (double& x : sd2.u_g.values()) x = 0.0;

  for (double bias : {60.0, -60.0}) {
    for (double& x : sd2.b_g.values()) x = bias;
    Graph g;
    Binder bind(g, false);
    auto sv = DiversityVars::bind(bind, sd2);
    auto other = DiversityVars::bind(bind, bias > 0 ? d2 : b1);
    auto s_soft = initial_state(g, 3, 1);
    auto s_hard = s_soft;
    for (int t = 0; t < 6; ++t) {
      Var d = g.vector(random_vector(3, rng));
      auto a = sd2_cell_step(sv, d, s_soft);
      auto b = bias > 0 ? d2_cell_step(other, d, s_hard) : b1_cell_step(other, d, s_hard);
      for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(a.context.value()[i] - b.context.value()[i]) <= 1e-10);
      s_soft = a.state;
      s_hard = b.state;
    }
  }
}

TEST_CASE("m1_step examples") {
  Rng rng(5);
  auto p = DiversityParams::create(DiversityMode::M1, 3, 1, rng);
  p.w_c[0] = 1.0;
  p.u_c[0] = 1.0;
  Graph g;
  auto v = DiversityVars::bind(Binder(g, false), p);
  auto s = initial_state(g, 1, 1);
  auto first = m1_step(v, g.vector({0.5}), s);
  CHECK(first.context.value()[0] == doctest::Approx(std::tanh(0.5)));
  auto second = m1_step(v, g.vector({0.5}), first.state);
  CHECK(second.context.value()[0] == doctest::Approx(std::tanh(0.5 - std::tanh(0.5))));
  CHECK(second.context.value()[0] == doctest::Approx(0.0379).epsilon(1e-3));
  CHECK(second.state.context_sum.value()[0] == doctest::Approx(first.context.value()[0] + second.context.value()[0]));

  for (double& x : p.w_c.values()) x = 50.0;
  auto big = m1_step(v, g.vector({0.9}), s);
  CHECK(std::abs(big.context.value()[0]) <= 1.0);
}

TEST_CASE("m2_attention examples") {
  Rng rng(6);
  auto p = DiversityParams::create(DiversityMode::M2, 3, 2, rng);
  randomize(p, rng);
  Tensor h = uniform_tensor({5, 2}, 1.0, rng);
  Graph g;
  auto v = DiversityVars::bind(Binder(g, false), p);
  auto keys = m2_keys(v, g.constant(h), 4);
  auto state = initial_state(g, 2, 5);
  Var s = g.vector({0.1, 0.2, 0.3});

  // Empty history: plain attention with (W_a, U_a, v_a) followed by M1.
  auto plain = attend(keys, matvec(v.w_a, s), v.v_a);
  auto first = m2_attention(v, s, keys, state);
  auto m1 = m1_step(v, plain.context, state);
  for (std::size_t i = 0; i < 2; ++i) CHECK(first.context.value()[i] == doctest::Approx(m1.context.value()[i]).epsilon(1e-14));

  std::vector<double> running(5, 0.0);
  for (int t = 0; t < 7; ++t) {
    auto step = m2_attention(v, g.vector(random_vector(3, rng)), keys, state);
    const auto w = step.weights.to_vector();
    CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0));
    CHECK(w[4] == 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(w[i] >= 0.0);
      running[i] += w[i];
      CHECK(step.state.attention_sum.value()[i] == doctest::Approx(running[i]).epsilon(1e-15));
    }
    state = step.state;
  }
}

TEST_CASE("hard orthogonality on random D1 and D2 rollouts") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = DiversityParams::create(DiversityMode::D2, 3, 4, rng);
    randomize(p, rng, 2.0);
    Graph g;
    auto v = DiversityVars::bind(Binder(g, false), p);
    auto s1 = initial_state(g, 4, 1);
    auto s2 = s1;
    for (int t = 0; t < 8; ++t) {
      Var d = g.vector(random_vector(4, rng));
      auto a = d1_step(d, s1);
      if (t > 0) CHECK(std::abs(inner(a.context, s1.prev_context)) <= 1e-8 * norm(a.context) * norm(s1.prev_context));
      auto b = d2_cell_step(v, d, s2);
      if (t > 0) CHECK(std::abs(inner(b.diverse_cell, s2.cell)) <= 1e-8 * norm(b.diverse_cell) * norm(s2.cell));
      s1 = a.state;
      s2 = b.state;
    }
  }
}

TEST_CASE("gradients through diversified rollouts match finite differences") {
  Rng rng(8);
  for (DiversityMode mode : {DiversityMode::D1, DiversityMode::SD1, DiversityMode::D2, DiversityMode::SD2,
                             DiversityMode::B1, DiversityMode::M1, DiversityMode::M2}) {
    CAPTURE(to_string(mode));
    auto p = DiversityParams::create(mode, 3, 3, rng);
    randomize(p, rng);
    DiversityOptions options;
    options.sd1_sigmoid_gate = mode == DiversityMode::SD1;
    Tensor contexts = uniform_tensor({4, 3}, 1.0, rng);
    Tensor decoder = uniform_tensor({4, 3}, 1.0, rng);
    Tensor doc = uniform_tensor({5, 3}, 1.0, rng);
    std::vector<Tensor*> params = {&contexts, &decoder, &doc};
    p.visit("div", [&](const std::string&, Tensor& t) { params.push_back(&t); });
    auto report = finite_diff_check(
        [&](Graph& g) {
          auto v = DiversityVars::bind(Binder(g, true), p);
          Var c = g.param(contexts);
          Var dec = g.param(decoder);
          auto state = initial_state(g, 3, 5);
          auto keys = mode == DiversityMode::M2 ? m2_keys(v, g.param(doc), 5) : AttentionKeys{};
          Var loss;
          for (std::size_t t = 0; t < 4; ++t) {
            auto step = mode == DiversityMode::M2 ? m2_attention(v, row(dec, t), keys, state)
                                                  : diversify(v, row(c, t), state, options);
            Var term = dot(step.context, g.vector({1.0, -2.0, 0.5}));
            loss = loss.valid() ? loss + term : term;
            state = step.state;
          }
          return loss;
        },
        params);
    CHECK(report.max_rel_error < 1e-4);
  }
}

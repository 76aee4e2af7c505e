#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "divsum/parallel.hpp"
#include "divsum/trainer.hpp"

using namespace divsum;

namespace {

const std::filesystem::path kToy = std::filesystem::path(DIVSUM_TEST_DATA) / "toy20.jsonl";

ModelConfig tiny_model(std::size_t vocab_size, DiversityMode mode = DiversityMode::None) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = 6;
  c.decoder_hidden = 6;
  c.query_hidden = 5;
  c.doc_hidden = 6;
  c.diversity = mode;
  c.max_decode_len = 12;
  return c;
}

struct ToyCorpus {
  std::vector<RawTriple> raw;
  Vocabulary vocab;
  std::vector<Triple> triples;
};

ToyCorpus toy() {
  ToyCorpus t;
  t.raw = load_triples(kToy);
  t.vocab = build_vocab(t.raw, 1);
  std::vector<std::size_t> all(t.raw.size());
  std::iota(all.begin(), all.end(), 0);
  t.triples = encode_all(t.raw, all, t.vocab, {}).triples;
  return t;
}

TrainConfig tiny_train(std::size_t vocab_size) {
  TrainConfig c;
  c.model = tiny_model(vocab_size);
  c.adam.lr = 0.01;
  c.batch_size = 8;
  c.epochs = 3;
  c.patience = 3;
  return c;
}

std::string bytes_of(const Checkpoint& ckpt) {
  std::ostringstream out(std::ios::binary);
  ckpt.write(out);
  return out.str();
}

}  // namespace

TEST_CASE("adam_update examples") {
  Tensor a = Tensor::vector({0.3, -0.7});
  Tensor* params[] = {&a};
  auto state = AdamState::create(params);
  a.ensure_grad();
  CHECK(adam_update(params, state));
  CHECK(a.values()[0] == 0.3);
  CHECK(a.values()[1] == -0.7);

  // First step: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε) ≈ −0.0004·sign(g).
  Tensor w = Tensor::vector({1.0, 1.0});
  Tensor* wp[] = {&w};
  auto ws = AdamState::create(wp);
  w.ensure_grad();
  w.grad()[0] = 0.5;
  w.grad()[1] = -3.0;
  REQUIRE(adam_update(wp, ws));
  CHECK(std::abs((w.values()[0] - 1.0) + 0.0004) < 1e-10);
  CHECK(std::abs((w.values()[1] - 1.0) - 0.0004) < 1e-10);
  CHECK(ws.t == 1);

  // Second step against the textbook recurrence.
  const double g1 = 0.5, g2 = 0.2;
  w.grad()[0] = g2;
  const double before = w.values()[0];
  REQUIRE(adam_update(wp, ws));
  const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
  const double expected = before - 0.0004 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(w.values()[0] == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("identical gradients give identical updates and non-finite ones are skipped") {
  Tensor x = Tensor::vector({0.1, 0.1}), y = Tensor::vector({0.1, 0.1});
  Tensor* params[] = {&x, &y};
  auto state = AdamState::create(params);
  for (int step = 0; step < 5; ++step) {
    for (Tensor* p : params) {
      p->ensure_grad();
      p->grad()[0] = 0.3 * (step + 1);
      p->grad()[1] = -0.2;
    }
    REQUIRE(adam_update(params, state));
  }
  CHECK(std::vector<double>(x.values().begin(), x.values().end()) ==
        std::vector<double>(y.values().begin(), y.values().end()));

  const auto saved = std::vector<double>(x.values().begin(), x.values().end());
  x.grad()[1] = std::nan("");
  CHECK_FALSE(adam_update(params, state));
  CHECK(state.t == 5);
  CHECK(std::vector<double>(x.values().begin(), x.values().end()) == saved);
}

TEST_CASE("gradient clipping rescales without turning") {
  Tensor a = Tensor::vector({3.0, 4.0}), b = Tensor::vector({12.0});
  Tensor* params[] = {&a, &b};
  for (Tensor* p : params) p->ensure_grad();
  a.grad()[0] = 3;
  a.grad()[1] = 4;
  b.grad()[0] = 12;
  CHECK(clip_gradients(params, 5.0) == doctest::Approx(13.0));
  CHECK(global_grad_norm(params) == doctest::Approx(5.0));
  CHECK(a.grad()[0] / a.grad()[1] == doctest::Approx(0.75));
  CHECK(b.grad()[0] / a.grad()[0] == doctest::Approx(4.0));

  CHECK(clip_gradients(params, 10.0) == doctest::Approx(5.0));
  CHECK(global_grad_norm(params) == doctest::Approx(5.0));
}

TEST_CASE("loss falls monotonically over 50 Adam steps on one memorized triple") {
  const Triple triple{{4, 5, 6}, {7, 8, 9, 10, 11}, {9, 4, 11, kEosId}, {}};
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Model model(tiny_model(12), seed);
    auto params = model.trainable_tensors();
    auto state = AdamState::create(params);
    Graph graph;
    double prev = INFINITY;
    bool ok = true;
    for (int step = 0; step <= 50; ++step) {
      zero_gradients(params);
      graph.clear();
      Var loss = sequence_loss(model, graph, triple);
      ok = ok && loss.scalar() < prev;
      prev = loss.scalar();
      graph.backward(loss);
      clear_pad_gradient(model.params().embeddings.weights);
      clip_gradients(params, 5.0);
      adam_update(params, state);
    }
    monotone += ok ? 1 : 0;
  }
  CHECK(monotone >= 95);
}

TEST_CASE("make_batches partitions deterministically") {
  auto corpus = toy();
  Rng a(3), b(3);
  auto first = make_batches(corpus.triples, 6, a);
  auto second = make_batches(corpus.triples, 6, b);
  CHECK(first == second);
  REQUIRE(first.size() == 4);
  std::multiset<std::size_t> seen;
  for (const auto& batch : first) {
    CHECK(batch.size() <= 6);
    seen.insert(batch.begin(), batch.end());
  }
  CHECK(seen.size() == corpus.triples.size());
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == corpus.triples.size());
  CHECK_THROWS_AS(make_batches(corpus.triples, 0, a), std::invalid_argument);
}

TEST_CASE("train config JSON round trip and validation") {
  TrainConfig c = tiny_train(40);
  c.model.diversity = DiversityMode::SD2;
  c.sampling_probability = 0.25;
  c.seed = 77;
  auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("train_fold stops, repeats and records curves") {
  auto corpus = toy();
  std::span<const Triple> train(corpus.triples.data(), 16);
  std::span<const Triple> val(corpus.triples.data() + 16, 4);
  TrainConfig c = tiny_train(corpus.vocab.size());

  c.patience = 0;
  auto once = train_fold(c, corpus.vocab, train, val);
  CHECK(once.curve.size() == 1);
  CHECK(once.best_epoch == 1);

  c.patience = 10;
  auto r1 = train_fold(c, corpus.vocab, train, val);
  auto r2 = train_fold(c, corpus.vocab, train, val);
  REQUIRE(r1.curve.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r1.curve[i].epoch == i + 1);
    CHECK(r1.curve[i].train_loss == r2.curve[i].train_loss);
    CHECK(r1.curve[i].val_rouge_l == r2.curve[i].val_rouge_l);
  }
  CHECK(r1.curve[2].train_loss < r1.curve[0].train_loss);
  CHECK(bytes_of(Checkpoint(r1.best, corpus.vocab, 0)) == bytes_of(Checkpoint(r2.best, corpus.vocab, 0)));

  c.seed = 1;
  auto other = train_fold(c, corpus.vocab, train, val);
  CHECK(other.curve[0].train_loss != r1.curve[0].train_loss);

  const auto path = std::filesystem::temp_directory_path() / "divsum_curves.csv";
  write_curves_csv(path, r1.curve);
  auto curve = read_curves_csv(path);
  REQUIRE(curve.size() == 3);
  CHECK(curve[1].train_loss == r1.curve[1].train_loss);
  CHECK(curve[2].val_rouge_l == r1.curve[2].val_rouge_l);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(train_fold(c, corpus.vocab, train, {}), std::invalid_argument);
  TrainConfig wrong = c;
  wrong.model.vocab_size += 1;
  CHECK_THROWS_AS(train_fold(wrong, corpus.vocab, train, val), std::invalid_argument);
}

TEST_CASE("a non-finite loss aborts with its position") {
  auto corpus = toy();
  TrainConfig c = tiny_train(corpus.vocab.size());
  Rng rng(0);
  EmbeddingTable table = random_embeddings(corpus.vocab.size(), c.model.embed_dim, rng);
  for (double& x : table.weights.values()) x = std::nan("");
  try {
    train_fold(c, corpus.vocab, corpus.triples, corpus.triples, table);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.epoch == 1);
    CHECK(e.batch == 0);
    CHECK(std::string(e.what()).find("epoch 1, batch 0") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip reproduces decodes bit for bit") {
  auto corpus = toy();
  ModelConfig config = tiny_model(corpus.vocab.size(), DiversityMode::SD2);
  Checkpoint ckpt(Model(config, 5), corpus.vocab, 0.25, {{"fold", 3}});
  const auto path = std::filesystem::temp_directory_path() / "divsum_ckpt.bin";
  ckpt.save(path);
  auto loaded = Checkpoint::load(path);
  CHECK(loaded.model.config() == config);
  CHECK(loaded.vocab == corpus.vocab);
  CHECK(loaded.best_metric == 0.25);
  CHECK(loaded.metadata.at("fold") == 3);
  for (const auto& t : corpus.triples) {
    auto before = greedy_decode(ckpt.model, t.query_ids, t.doc_ids);
    auto after = greedy_decode(loaded.model, t.query_ids, t.doc_ids);
    CHECK(before.tokens == after.tokens);
    CHECK(before.distributions == after.distributions);
  }
  CHECK(bytes_of(loaded) == bytes_of(ckpt));

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  CHECK(bytes.substr(0, 8) == std::string("DIVSUM1\0", 8));

  auto read_bytes = [](std::string b) {
    std::istringstream s(b, std::ios::binary);
    return Checkpoint::read(s);
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(read_bytes(bad_magic), DataError);
  CHECK_THROWS_AS(read_bytes(bytes.substr(0, bytes.size() - 3)), DataError);
  CHECK_THROWS_AS(read_bytes(bytes + "junk"), DataError);
  std::filesystem::remove(path);

  auto small = Vocabulary::from_tokens({"<pad>", "<unk>", "<s>", "</s>"});
  CHECK_THROWS_AS(Checkpoint(Model(config, 1), small, 0.0), std::invalid_argument);
}

TEST_CASE("cross validation averages independent folds in fold order") {
  auto raw = load_triples(kToy);
  auto plan = make_folds(raw.size(), 2, 4);
  TrainConfig c = tiny_train(0);
  c.epochs = 2;
  CrossValidationOptions opts;
  opts.min_count = 1;
  opts.threads = 1;
  auto result = cross_validate(c, plan, raw, opts);
  REQUIRE(result.folds.size() == 2);
  CHECK(result.folds[0].ok);
  CHECK(result.folds[1].ok);
  CHECK_FALSE(result.aggregate.incomplete());
  CHECK(result.aggregate.label == "Query_att");
  const double mean_l = (result.folds[0].test.rouge_l + result.folds[1].test.rouge_l) / 2.0;
  const double mean_reps =
      (static_cast<double>(result.folds[0].test.repetitions) + static_cast<double>(result.folds[1].test.repetitions)) /
      2.0;
  CHECK(result.aggregate.rouge_l == doctest::Approx(mean_l).epsilon(1e-15));
  CHECK(result.aggregate.repetitions == doctest::Approx(mean_reps).epsilon(1e-15));
  for (const auto& f : result.folds) CHECK(f.test.instances == plan.folds[f.fold].test.size());

  opts.folds = {1, 0};
  opts.threads = 2;
  auto permuted = cross_validate(c, plan, raw, opts);
  CHECK(permuted.aggregate.rouge1 == result.aggregate.rouge1);
  CHECK(permuted.aggregate.rouge_l == result.aggregate.rouge_l);
  CHECK(permuted.aggregate.repetitions == result.aggregate.repetitions);
  CHECK(permuted.folds[0].fold == 0);

  opts.pretrained = "/nonexistent/vectors.txt";
  std::vector<std::string> log;
  opts.log = [&](const std::string& msg) { log.push_back(msg); };
  opts.threads = 1;
  auto broken = cross_validate(c, plan, raw, opts);
  CHECK(broken.aggregate.incomplete());
  CHECK_FALSE(broken.folds[0].ok);
  CHECK_FALSE(broken.folds[0].error.empty());
  CHECK(log.size() == 2);
}

TEST_CASE("worker thread count honours the environment") {
  setenv("DIVSUM_THREADS", "3", 1);
  CHECK(worker_threads() == 3);
  setenv("DIVSUM_THREADS", "zero", 1);
  CHECK(worker_threads() >= 1);
  unsetenv("DIVSUM_THREADS");
}

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "divsum/embeddings.hpp"

using namespace divsum;

namespace {

Vocabulary vocab_of(const std::string& text) {
  const RawTriple t{text, text, text};
  return build_vocab(std::span(&t, 1), 1);
}

PretrainedEmbeddings parse(const std::string& text, const Vocabulary& vocab, std::size_t dim) {
  std::istringstream in(text);
  return parse_pretrained(in, vocab, dim, 11, "vectors.txt");
}

}  // namespace

TEST_CASE("load_pretrained examples") {
  const auto vocab = vocab_of("a");
  auto loaded = parse("a 1.0 2.0\n", vocab, 2);
  const int a = vocab.id("a");
  CHECK(loaded.table.weights.at(a, 0) == 1.0);
  CHECK(loaded.table.weights.at(a, 1) == 2.0);
  CHECK(loaded.matched == 1);
  CHECK(loaded.coverage == doctest::Approx(1.0 / vocab.size()));

  auto empty = parse("", vocab, 2);
  CHECK(empty.matched == 0);
  CHECK(empty.coverage == 0.0);
  for (std::size_t r = 1; r < vocab.size(); ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(std::abs(empty.table.weights.at(r, c)) <= kEmbeddingInitBound);
    }

  try {
    parse("a 1.0 2.0\nb 1.0 2.0 3.0\n", vocab, 2);
    FAIL("dimension mismatch accepted");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("vectors.txt:2") != std::string::npos);
  }
}

TEST_CASE("pretrained vectors never overwrite special rows and PAD stays zero") {
  const auto vocab = vocab_of("a b");
  auto loaded = parse("<pad> 5 5\n<unk> 7 7\nb 0.5 -0.5\n", vocab, 2);
  CHECK(loaded.matched == 1);
  CHECK(loaded.table.weights.at(kPadId, 0) == 0.0);
  CHECK(loaded.table.weights.at(kPadId, 1) == 0.0);
  CHECK(loaded.table.weights.at(kUnkId, 0) != 7.0);

  const auto path = std::filesystem::temp_directory_path() / "divsum_vectors.txt";
  { std::ofstream(path) << "a 0.25 0.75\n"; }
  auto from_file = load_pretrained(path, vocab, 2, 11);
  CHECK(from_file.table.weights.at(vocab.id("a"), 1) == 0.75);
  std::filesystem::remove(path);
}

TEST_CASE("random init is seeded and bounded") {
  Rng r1(5), r2(5);
  auto a = random_embeddings(10, 4, r1);
  auto b = random_embeddings(10, 4, r2);
  CHECK(a.weights.values()[7] == b.weights.values()[7]);
  for (std::size_t c = 0; c < 4; ++c) CHECK(a.weights.at(kPadId, c) == 0.0);
}

TEST_CASE("embed examples") {
  Rng rng(1);
  auto table = random_embeddings(8, 3, rng);
  Graph g;
  Var e = g.param(table.weights);

  Var none = embed(e, std::span<const int>());
  CHECK(none.rows() == 0);
  CHECK(none.cols() == 3);

  const int twice[] = {5, 5};
  Var rows = embed(e, twice);
  CHECK(rows.rows() == 2);
  for (std::size_t c = 0; c < 3; ++c) CHECK(rows.value()[c] == rows.value()[3 + c]);

  const int bad[] = {8};
  CHECK_THROWS_AS(embed(e, bad), std::out_of_range);
}

TEST_CASE("embedding gradient concentrates on the looked-up row") {
  Rng rng(2);
  auto table = random_embeddings(6, 3, rng);
  const int ids[] = {4};
  Tensor* params[] = {&table.weights};
  auto report = finite_diff_check([&](Graph& g) { return sum(embed(g.param(table.weights), ids)); },
                                  params);
  CHECK(report.max_rel_error < 1e-6);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(table.weights.grad()[r * 3 + c] == (r == 4 ? 1.0 : 0.0));
    }
}

TEST_CASE("clear_pad_gradient zeroes only the PAD row") {
  Rng rng(3);
  auto table = random_embeddings(4, 2, rng);
  const int ids[] = {0, 2};
  Graph g;
  g.backward(sum(embed(g.param(table.weights), ids)));
  CHECK(table.weights.grad()[0] == 1.0);
  clear_pad_gradient(table.weights);
  CHECK(table.weights.grad()[0] == 0.0);
  CHECK(table.weights.grad()[1] == 0.0);
  CHECK(table.weights.grad()[4] == 1.0);
}

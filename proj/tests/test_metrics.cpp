#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>

#include "doctest.h"
#include "divsum/metrics.hpp"
#include "divsum/model.hpp"
#include "divsum/random.hpp"
#include "support/lcs_oracle.hpp"

using namespace divsum;

namespace {

using Tokens = std::vector<std::string>;

Tokens words(std::string_view text) { return tokenize(text); }

// Independent clipped-overlap count: linear scans over explicit n-gram lists.
std::size_t brute_overlap(const Tokens& cand, const Tokens& ref, std::size_t n) {
  auto grams = [n](const Tokens& t) {
    std::vector<Tokens> out;
    for (std::size_t i = 0; i + n <= t.size(); ++i) out.emplace_back(t.begin() + i, t.begin() + i + n);
    return out;
  };
  const auto c = grams(cand);
  const auto r = grams(ref);
  std::vector<Tokens> distinct;
  for (const auto& g : c) {
    if (std::find(distinct.begin(), distinct.end(), g) == distinct.end()) distinct.push_back(g);
  }
  std::size_t overlap = 0;
  for (const auto& g : distinct) {
    overlap += std::min(std::count(c.begin(), c.end(), g), std::count(r.begin(), r.end(), g));
  }
  return overlap;
}

Tokens random_tokens(Rng& rng, std::size_t max_len, std::size_t alphabet) {
  Tokens t(rng.below(max_len + 1));
  for (auto& tok : t) tok = std::string(1, static_cast<char>('a' + rng.below(alphabet)));
  return t;
}

}  // namespace

TEST_CASE("f1 combines precision and recall") {
  CHECK(f1_score(0.0, 0.0) == 0.0);
  CHECK(f1_score(1.0, 2.0 / 3.0) == doctest::Approx(0.8));
  CHECK(f1_score(0.5, 0.5) == doctest::Approx(0.5));
}

TEST_CASE("rouge_n examples") {
  const Tokens cat = words("the cat sat");
  auto same = rouge_n(cat, cat, 1);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.f1 == 1.0);

  auto partial = rouge_n(words("the cat"), cat, 1);
  CHECK(partial.precision == doctest::Approx(1.0));
  CHECK(partial.recall == doctest::Approx(2.0 / 3.0));
  CHECK(partial.f1 == doctest::Approx(0.8));

  auto disjoint = rouge_n(words("dogs bark"), cat, 1);
  CHECK(disjoint.f1 == 0.0);
  CHECK(rouge_n({}, cat, 1).f1 == 0.0);
  CHECK(rouge_n(cat, {}, 2).f1 == 0.0);
  CHECK(rouge_n(words("the"), words("the"), 2).f1 == 0.0);

  auto bigram = rouge_n(words("the cat sat on the mat"), words("the cat lay on the mat"), 2);
  CHECK(bigram.precision == doctest::Approx(0.6));
  CHECK(bigram.recall == doctest::Approx(0.6));

  auto clipped = rouge_n(words("the the the"), words("the cat"), 1);
  CHECK(clipped.precision == doctest::Approx(1.0 / 3.0));
  CHECK(clipped.recall == doctest::Approx(0.5));

  CHECK_THROWS_AS(rouge_n(cat, cat, 0), std::invalid_argument);
}

TEST_CASE("rouge_n overlap is clipped and matches a brute-force count") {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    const Tokens c = random_tokens(rng, 10, 3);
    const Tokens r = random_tokens(rng, 10, 3);
    for (std::size_t n : {1u, 2u, 3u}) {
      const auto score = rouge_n(c, r, n);
      const double c_total = c.size() >= n ? double(c.size() - n + 1) : 0.0;
      const double r_total = r.size() >= n ? double(r.size() - n + 1) : 0.0;
      const double overlap = double(brute_overlap(c, r, n));
      if (c_total == 0.0 || r_total == 0.0) {
        CHECK(score.f1 == 0.0);
        continue;
      }
      CHECK(overlap <= std::min(c_total, r_total));
      CHECK(score.precision == overlap / c_total);
      CHECK(score.recall == overlap / r_total);
    }
  }
}

TEST_CASE("rouge_l examples") {
  const Tokens abc = words("a b c");
  CHECK(rouge_l(abc, abc).f1 == 1.0);
  auto s = rouge_l(abc, words("a c"));
  CHECK(lcs_length(abc, words("a c")) == 2);
  CHECK(s.precision == doctest::Approx(2.0 / 3.0));
  CHECK(s.recall == doctest::Approx(1.0));
  CHECK(s.f1 == doctest::Approx(0.8));
  CHECK(rouge_l({}, abc).f1 == 0.0);
  CHECK(rouge_l(abc, {}).f1 == 0.0);
}

TEST_CASE("rouge_l agrees with exhaustive subsequence enumeration up to length 5") {
  testing::ExhaustiveLcs oracle(5, 3);
  std::vector<Tokens> toks(oracle.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) toks[i] = oracle.tokens(i);
  std::size_t mismatches = 0;
  for (std::size_t a = 0; a < oracle.size(); ++a) {
    for (std::size_t b = 0; b < oracle.size(); ++b) {
      const std::size_t expected = oracle.lcs(a, b);
      if (lcs_length(toks[a], toks[b]) != expected) ++mismatches;
      const auto score = rouge_l(toks[a], toks[b]);
      if (!toks[a].empty() && !toks[b].empty()) {
        if (score.precision != double(expected) / double(toks[a].size())) ++mismatches;
        if (score.recall != double(expected) / double(toks[b].size())) ++mismatches;
      } else if (score.f1 != 0.0) {
        ++mismatches;
      }
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("rouge_l is symmetric in its LCS and long inputs use the same answer") {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    // Lengths straddle the 64-token boundary between the two LCS paths.
    Tokens x = random_tokens(rng, 90, 4);
    Tokens y = random_tokens(rng, 90, 4);
    CHECK(lcs_length(x, y) == lcs_length(y, x));
    CHECK(rouge_l(x, y).recall == rouge_l(y, x).precision);
  }
}

TEST_CASE("long tokens sharing a prefix are distinct") {
  const Tokens a = {"internationalize", "organization", "x"};
  const Tokens b = {"internationalise", "organizations", "x"};
  CHECK(lcs_length(a, b) == 1);
  CHECK(lcs_length(a, a) == 3);
  CHECK(rouge_n(a, b, 1).precision == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("case differences vanish after tokenization") {
  const std::string ref = "Gay marriage is a fundamental equal right.";
  const std::string cand = "gay marriage is a appropriate right right";
  std::string upper = cand;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  CHECK(rouge_l(words(cand), words(ref)).f1 == rouge_l(words(upper), words(ref)).f1);
  CHECK(rouge_n(words(cand), words(ref), 2).f1 == rouge_n(words(upper), words(ref), 2).f1);
}

TEST_CASE("count_repetitions examples") {
  CHECK_FALSE(has_repetition(Tokens{"a", "b", "c"}));
  const std::vector<Tokens> predicted = {
      words("the large to euthanasia is a natural death life life use"),
      words("gay marriage is a appropriate right right"),
  };
  const std::vector<Tokens> truth = {
      words("The alternative to euthanasia is a natural death without life support."),
      words("Gay marriage is a fundamental equal right."),
  };
  CHECK(count_repetitions(predicted) == 2);
  CHECK(count_repetitions(truth) == 0);
  CHECK(count_repetitions(predicted, StopwordPolicy::ExcludeStopwords) == 2);

  const Tokens function_words = words("the cat and the dog");
  CHECK(has_repetition(function_words, StopwordPolicy::KeepAll));
  CHECK_FALSE(has_repetition(function_words, StopwordPolicy::ExcludeStopwords));
  CHECK(count_repetitions(std::vector<Tokens>{}) == 0);
}

TEST_CASE("evaluate with an echoing summarizer scores perfectly") {
  std::vector<Triple> triples(3);
  triples[0].reference = words("a b a");
  triples[1].reference = words("c d");
  triples[2].reference = words("e f g");
  auto report = evaluate([](const Triple& t) { return t.reference; }, triples);
  CHECK(report.instances == 3);
  CHECK(report.rouge1 == 1.0);
  CHECK(report.rouge_l == 1.0);
  // Bigram scores are 1 whenever the reference has a bigram at all.
  CHECK(report.rouge2 == 1.0);
  CHECK(report.repetitions == 1);
  CHECK(report.repetitions <= report.instances);

  auto single = evaluate([](const Triple&) { return words("a c"); }, std::span(triples.data(), 1));
  CHECK(single.rouge1 == single.per_instance[0].rouge1);
  CHECK(single.rouge_l == single.per_instance[0].rouge_l);
  CHECK(single.rouge1 == rouge_n(words("a c"), triples[0].reference, 1).f1);

  const std::size_t ids[] = {7, 9};
  CHECK_THROWS_AS(evaluate([](const Triple& t) { return t.reference; }, triples, StopwordPolicy::KeepAll, ids),
                  std::invalid_argument);
}

TEST_CASE("means recomputed from the per-instance dump agree") {
  Rng rng(21);
  std::vector<Triple> triples(40);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    triples[i].reference = random_tokens(rng, 8, 5);
    ids.push_back(100 + i);
  }
  Rng pred_rng(3);
  auto report = evaluate([&](const Triple&) { return random_tokens(pred_rng, 8, 5); }, triples,
                         StopwordPolicy::KeepAll, ids);

  std::stringstream csv;
  write_instance_csv(csv, report.per_instance);
  auto rows = read_instance_csv(csv);
  REQUIRE(rows.size() == triples.size());
  double r1 = 0, r2 = 0, rl = 0;
  std::size_t reps = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].id == 100 + i);
    CHECK(rows[i].prediction == report.per_instance[i].prediction);
    r1 += rows[i].rouge1;
    r2 += rows[i].rouge2;
    rl += rows[i].rouge_l;
    reps += rows[i].repeated ? 1 : 0;
  }
  CHECK(report.rouge1 == doctest::Approx(r1 / 40).epsilon(1e-12));
  CHECK(report.rouge2 == doctest::Approx(r2 / 40).epsilon(1e-12));
  CHECK(report.rouge_l == doctest::Approx(rl / 40).epsilon(1e-12));
  CHECK(report.repetitions == reps);

  auto back = MetricsReport::from_summary_json(report.summary_json());
  CHECK(back.rouge_l == report.rouge_l);
  CHECK(back.repetitions == report.repetitions);
}

TEST_CASE("instance CSV quotes predictions with commas and quotes") {
  InstanceResult row;
  row.id = 4;
  row.rouge1 = 0.25;
  row.repeated = true;
  row.prediction = {"yes", ",", "\"", "no"};
  std::stringstream csv;
  write_instance_csv(csv, std::span(&row, 1));
  CHECK(csv.str().find("\"yes , \"\" no\"") != std::string::npos);
  auto rows = read_instance_csv(csv);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].prediction == row.prediction);
  CHECK(rows[0].repeated);
  CHECK(rows[0].rouge1 == 0.25);

  std::stringstream bad("id,rouge1\n");
  CHECK_THROWS_AS(read_instance_csv(bad), DataError);
}

TEST_CASE("evaluate on a model checks the vocabulary and decodes within it") {
  ModelConfig c;
  c.vocab_size = 9;
  c.embed_dim = 4;
  c.decoder_hidden = 5;
  c.query_hidden = 3;
  c.doc_hidden = 4;
  c.max_decode_len = 6;
  Model model(c, 3);
  auto vocab = Vocabulary::from_tokens({"<pad>", "<unk>", "<s>", "</s>", "a", "b", "c", "d", "e"});
  std::vector<Triple> triples = {{{4, 5}, {6, 7, 8}, {4, kEosId}, {"a"}}, {{5}, {4, 4}, {6, kEosId}, {"c"}}};
  auto report = evaluate(model, vocab, triples);
  CHECK(report.instances == 2);
  for (const auto& row : report.per_instance) {
    CHECK(row.prediction.size() <= 6);
    for (const auto& tok : row.prediction) CHECK(vocab.contains(tok));
  }
  auto small = Vocabulary::from_tokens({"<pad>", "<unk>", "<s>", "</s>", "a"});
  CHECK_THROWS_AS(evaluate(model, small, triples), std::invalid_argument);
}

TEST_CASE("fold aggregation and table layouts") {
  std::vector<MetricsReport> folds(3);
  const double r1[] = {0.2, 0.4, 0.3};
  const std::size_t reps[] = {4, 5, 9};
  for (int i = 0; i < 3; ++i) {
    folds[i].rouge1 = r1[i];
    folds[i].rouge_l = r1[i] / 2;
    folds[i].repetitions = reps[i];
  }
  auto agg = aggregate_folds("SD2", folds, 3);
  CHECK(agg.rouge1 == doctest::Approx((0.2 + 0.4 + 0.3) / 3));
  CHECK(agg.repetitions == doctest::Approx(6.0));
  CHECK_FALSE(agg.incomplete());
  CHECK(aggregate_folds("D1", {folds[0]}, 10).incomplete());

  const FoldAggregate rows[] = {agg, aggregate_folds("D2/query-mean", folds, 3)};
  const std::string table = format_rouge_table(rows);
  std::size_t pos = 0;
  for (const auto& ref : reference_rouge_table()) {
    const auto at = table.find(std::string(ref.label), pos);
    REQUIRE(at != std::string::npos);
    pos = at;
  }
  CHECK(table.find("41.26/18.75/40.43") != std::string::npos);
  CHECK(table.find("13.73/2.06/12.84") != std::string::npos);
  CHECK(table.find("30.00") != std::string::npos);
  CHECK(table.find("D2/query-mean") != std::string::npos);
  CHECK(reference_rouge_table().size() == 10);

  const std::string reps_table = format_repetition_table(rows);
  CHECK(reps_table.find("498.00") != std::string::npos);
  CHECK(reps_table.find("179.00") != std::string::npos);
  CHECK(reps_table.find("6.00") != std::string::npos);
}

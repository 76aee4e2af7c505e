#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "divsum/corpus.hpp"

namespace divsum {

class Model;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Harmonic mean of precision and recall, 0 when both are 0.
double f1_score(double precision, double recall);

/// Clipped n-gram overlap. Empty candidate or reference (no n-grams) scores 0.
RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
                   std::size_t n);
/// Longest-common-subsequence precision, recall and F1.
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

enum class StopwordPolicy { KeepAll, ExcludeStopwords };

/// A small English function-word list used by StopwordPolicy::ExcludeStopwords.
bool is_stopword(std::string_view token);
/// True when some token (after filtering) occurs at least twice.
bool has_repetition(std::span<const std::string> summary, StopwordPolicy policy = StopwordPolicy::KeepAll);
std::size_t count_repetitions(std::span<const std::vector<std::string>> summaries,
                              StopwordPolicy policy = StopwordPolicy::KeepAll);

struct InstanceResult {
  std::size_t id = 0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  bool repeated = false;
  std::vector<std::string> prediction;
};

/// Mean ROUGE F1 values over instances plus the repetition count.
struct MetricsReport {
  std::size_t instances = 0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  std::size_t repetitions = 0;
  std::vector<InstanceResult> per_instance;

  nlohmann::json summary_json() const;
  static MetricsReport from_summary_json(const nlohmann::json& j);
};

/// Recomputes the means and the repetition count from `per_instance`.
MetricsReport aggregate(std::vector<InstanceResult> per_instance);

using Summarizer = std::function<std::vector<std::string>(const Triple&)>;

/// Scores `summarize(t)` against each triple's untruncated reference tokens.
/// `ids` (optional) labels the instances in the per-instance dump.
MetricsReport evaluate(const Summarizer& summarize, std::span<const Triple> triples,
                       StopwordPolicy policy = StopwordPolicy::KeepAll,
                       std::span<const std::size_t> ids = {});
/// Greedy-decodes every triple. Throws std::invalid_argument when the
/// vocabulary does not match the model.
MetricsReport evaluate(const Model& model, const Vocabulary& vocab, std::span<const Triple> triples,
                       StopwordPolicy policy = StopwordPolicy::KeepAll,
                       std::span<const std::size_t> ids = {});

/// `id,rouge1,rouge2,rougeL,repeated_flag,prediction` with RFC 4180 quoting.
void write_instance_csv(std::ostream& out, std::span<const InstanceResult> rows);
void write_instance_csv(const std::filesystem::path& path, std::span<const InstanceResult> rows);
std::vector<InstanceResult> read_instance_csv(std::istream& in);
std::vector<InstanceResult> read_instance_csv(const std::filesystem::path& path);

/// Per-fold results for one model configuration and their independent means.
struct FoldAggregate {
  std::string label;
  std::vector<MetricsReport> folds;
  /// Fold count the run was planned with; fewer reports mean it is incomplete.
  std::size_t expected_folds = 0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  double repetitions = 0.0;

  bool incomplete() const { return folds.size() < expected_folds; }
};

FoldAggregate aggregate_folds(std::string label, std::vector<MetricsReport> folds, std::size_t expected_folds);

struct ReferenceScores {
  std::string_view label;
  double rouge1;
  double rouge2;
  double rouge_l;
};

struct ReferenceRepetitions {
  std::string_view label;
  double sentences;
};

/// Published full-corpus ROUGE rows (percent), in table order.
std::span<const ReferenceScores> reference_rouge_table();
/// Published average repeated-word sentence counts per fold.
std::span<const ReferenceRepetitions> reference_repetition_table();

/// ROUGE F1 table (percent): every published row in order, followed by any
/// extra measured rows. Rows without a measurement print "-".
std::string format_rouge_table(std::span<const FoldAggregate> rows);
/// Average repeated-word sentences per fold next to the published counts.
std::string format_repetition_table(std::span<const FoldAggregate> rows);

}  // namespace divsum

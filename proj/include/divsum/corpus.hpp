#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace divsum {

/// Malformed dataset, vocabulary or fold files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RawTriple {
  std::string query;
  std::string document;
  std::string summary;
};

/// Reads UTF-8 JSONL with string fields `query`, `document` and `summary`.
/// Every malformed line is reported (with its line number) in one DataError.
std::vector<RawTriple> load_triples(const std::filesystem::path& path);
std::vector<RawTriple> parse_triples(std::istream& in, std::string_view source = "<stream>");

/// Lowercases ASCII letters, splits on whitespace and emits each ASCII
/// punctuation character as its own token. Non-ASCII bytes are word characters.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kSosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kNumSpecialTokens = 4;

class Vocabulary {
 public:
  Vocabulary();

  /// Ids are assigned by (frequency desc, token asc) after the four specials.
  static Vocabulary build(std::span<const std::vector<std::string>> token_lists, int min_count);
  /// Restores a vocabulary from its id-ordered token list (specials included).
  static Vocabulary from_tokens(std::vector<std::string> id_to_token);

  std::size_t size() const { return id_to_token_.size(); }
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  /// Maps ids back to tokens, stopping at EOS and skipping PAD/SOS.
  std::vector<std::string> decode(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  Vocabulary(std::vector<std::string> id_to_token, int);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Builds the vocabulary over all three fields of the given (training) triples.
Vocabulary build_vocab(std::span<const RawTriple> triples, int min_count);

struct TruncationLimits {
  std::size_t max_doc = 120;
  std::size_t max_query = 25;
  /// Includes the terminating EOS.
  std::size_t max_summary = 30;
};

struct Triple {
  std::vector<int> query_ids;
  std::vector<int> doc_ids;
  std::vector<int> summary_ids;
  /// Untruncated reference tokens, used for ROUGE.
  std::vector<std::string> reference;
};

/// Returns nullopt (and fills `warning`) when a field tokenizes to nothing.
std::optional<Triple> encode_triple(const RawTriple& raw, const Vocabulary& vocab,
                                    const TruncationLimits& limits, std::string* warning = nullptr);

struct EncodedCorpus {
  std::vector<Triple> triples;
  /// Index into the raw corpus for each encoded triple.
  std::vector<std::size_t> source_index;
  std::vector<std::string> warnings;
};

EncodedCorpus encode_all(std::span<const RawTriple> raw, std::span<const std::size_t> indices,
                         const Vocabulary& vocab, const TruncationLimits& limits);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::size_t k = 10;
  std::size_t count = 0;
  bool grouped = false;
  std::vector<Fold> folds;

  nlohmann::json to_json() const;
  static FoldPlan from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static FoldPlan load(const std::filesystem::path& path);
};

/// Seeded shuffle cut into k contiguous slices; fold i tests on slice i,
/// validates on slice (i+1) mod k and trains on the rest. With k = 2 the
/// non-test slice is split instead: its first fifth validates.
FoldPlan make_folds(std::size_t count, std::size_t k = 10, std::uint64_t seed = 0);

/// Same layout, but whole groups (e.g. all triples sharing a query) move together.
FoldPlan make_grouped_folds(std::span<const std::string> group_keys, std::size_t k = 10,
                            std::uint64_t seed = 0);

struct CorpusStats {
  std::size_t count = 0;
  double mean_doc_tokens = 0.0;
  double mean_summary_tokens = 0.0;
  double mean_query_tokens = 0.0;
};

CorpusStats corpus_stats(std::span<const RawTriple> triples);

/// Average lengths reported for the released debate corpus (document, summary, query).
inline constexpr double kReferenceDocTokens = 66.4;
inline constexpr double kReferenceSummaryTokens = 11.16;
inline constexpr double kReferenceQueryTokens = 9.97;
inline constexpr std::size_t kReferenceTripleCount = 12695;

struct SanityReport {
  CorpusStats stats;
  bool doc_ok = false;
  bool summary_ok = false;
  bool query_ok = false;
  bool all_ok() const { return doc_ok && summary_ok && query_ok; }
  std::string describe() const;
};

SanityReport sanity_check(const CorpusStats& stats, double tolerance = 0.15);

}  // namespace divsum

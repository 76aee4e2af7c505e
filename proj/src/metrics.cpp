#include "divsum/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "divsum/model.hpp"

namespace divsum {

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> tokens,
                                                             std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

RougeScore from_overlap(double overlap, double candidate_total, double reference_total) {
  if (candidate_total == 0.0 || reference_total == 0.0) return {};
  RougeScore s;
  s.precision = overlap / candidate_total;
  s.recall = overlap / reference_total;
  s.f1 = f1_score(s.precision, s.recall);
  return s;
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Splits one CSV record, honoring quotes (which may span lines).
bool read_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool quoted = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

std::string format_score(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
                   std::size_t n) {
  if (n == 0) throw std::invalid_argument("rouge_n requires n >= 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(count, it->second);
  }
  const double cand_total = candidate.size() >= n ? static_cast<double>(candidate.size() - n + 1) : 0.0;
  const double ref_total = reference.size() >= n ? static_cast<double>(reference.size() - n + 1) : 0.0;
  return from_overlap(static_cast<double>(overlap), cand_total, ref_total);
}

namespace {

// Length plus the first seven bytes. Equal keys identify equal tokens
// exactly when the token is at most seven bytes long.
constexpr std::size_t kKeyBytes = 7;

std::uint64_t token_key(std::string_view t) {
  std::uint64_t key = std::min<std::size_t>(t.size(), 255);
  const std::size_t n = std::min(t.size(), kKeyBytes);
  for (std::size_t k = 0; k < n; ++k) {
    key |= std::uint64_t{static_cast<unsigned char>(t[k])} << (8 * (k + 1));
  }
  return key;
}

}  // namespace

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (b.size() <= 64) {
    // Bit-parallel row update (Allison-Dix / Hyyro): bit j of ~v marks a
    // unit increase of the DP row at column j.
    const std::uint64_t full = b.size() == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << b.size()) - 1;
    std::uint64_t keys[64];
    for (std::size_t j = 0; j < b.size(); ++j) keys[j] = token_key(b[j]);
    std::uint64_t v = ~std::uint64_t{0};
    for (const auto& token : a) {
      const std::uint64_t key = token_key(token);
      const bool is_long = token.size() > kKeyBytes;
      std::uint64_t match = 0;
      for (std::size_t j = 0; j < b.size(); ++j) {
        bool eq = keys[j] == key;
        if (eq && is_long) eq = token == b[j];
        match |= static_cast<std::uint64_t>(eq) << j;
      }
      const std::uint64_t u = v & match;
      v = (v + u) | (v - u);
    }
    return static_cast<std::size_t>(std::popcount(~v & full));
  }
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    const std::string& token = a[i - 1];
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = token == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return from_overlap(static_cast<double>(lcs_length(candidate, reference)),
                      static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

bool is_stopword(std::string_view token) {
  static const std::unordered_set<std::string_view> words = {
      "a",     "an",    "and",   "are",  "as",    "at",   "be",    "been", "but",   "by",
      "can",   "could", "did",   "do",   "does",  "for",  "from",  "had",  "has",   "have",
      "he",    "her",   "his",   "i",    "if",    "in",   "into",  "is",   "it",    "its",
      "more",  "no",    "not",   "of",   "on",    "or",   "our",   "she",  "should", "so",
      "than",  "that",  "the",   "their", "them", "then", "there", "these", "they", "this",
      "those", "to",    "too",   "was",  "we",    "were", "what",  "when", "which", "who",
      "will",  "with",  "would", "you",  "your"};
  return words.count(token) > 0;
}

bool has_repetition(std::span<const std::string> summary, StopwordPolicy policy) {
  std::unordered_set<std::string_view> seen;
  for (const auto& token : summary) {
    if (policy == StopwordPolicy::ExcludeStopwords && is_stopword(token)) continue;
    if (!seen.insert(token).second) return true;
  }
  return false;
}

std::size_t count_repetitions(std::span<const std::vector<std::string>> summaries, StopwordPolicy policy) {
  return static_cast<std::size_t>(std::count_if(summaries.begin(), summaries.end(),
                                                [&](const auto& s) { return has_repetition(s, policy); }));
}

nlohmann::json MetricsReport::summary_json() const {
  return {{"instances", instances},
          {"rouge1_f1", rouge1},
          {"rouge2_f1", rouge2},
          {"rougeL_f1", rouge_l},
          {"repetitions", repetitions}};
}

MetricsReport MetricsReport::from_summary_json(const nlohmann::json& j) {
  MetricsReport r;
  r.instances = j.at("instances").get<std::size_t>();
  r.rouge1 = j.at("rouge1_f1").get<double>();
  r.rouge2 = j.at("rouge2_f1").get<double>();
  r.rouge_l = j.at("rougeL_f1").get<double>();
  r.repetitions = j.at("repetitions").get<std::size_t>();
  return r;
}

MetricsReport aggregate(std::vector<InstanceResult> per_instance) {
  MetricsReport r;
  r.instances = per_instance.size();
  for (const auto& row : per_instance) {
    r.rouge1 += row.rouge1;
    r.rouge2 += row.rouge2;
    r.rouge_l += row.rouge_l;
    r.repetitions += row.repeated ? 1 : 0;
  }
  if (r.instances > 0) {
    const double n = static_cast<double>(r.instances);
    r.rouge1 /= n;
    r.rouge2 /= n;
    r.rouge_l /= n;
  }
  r.per_instance = std::move(per_instance);
  return r;
}

MetricsReport evaluate(const Summarizer& summarize, std::span<const Triple> triples, StopwordPolicy policy,
                       std::span<const std::size_t> ids) {
  if (!ids.empty() && ids.size() != triples.size()) {
    throw std::invalid_argument("evaluate: ids and triples differ in length");
  }
  std::vector<InstanceResult> rows;
  rows.reserve(triples.size());
  for (std::size_t i = 0; i < triples.size(); ++i) {
    InstanceResult row;
    row.id = ids.empty() ? i : ids[i];
    row.prediction = summarize(triples[i]);
    const auto& ref = triples[i].reference;
    row.rouge1 = rouge_n(row.prediction, ref, 1).f1;
    row.rouge2 = rouge_n(row.prediction, ref, 2).f1;
    row.rouge_l = rouge_l(row.prediction, ref).f1;
    row.repeated = has_repetition(row.prediction, policy);
    rows.push_back(std::move(row));
  }
  return aggregate(std::move(rows));
}

MetricsReport evaluate(const Model& model, const Vocabulary& vocab, std::span<const Triple> triples,
                       StopwordPolicy policy, std::span<const std::size_t> ids) {
  if (vocab.size() != model.config().vocab_size) {
    throw std::invalid_argument("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model expects " +
                                std::to_string(model.config().vocab_size));
  }
  return evaluate(
      [&](const Triple& t) { return vocab.decode(greedy_decode(model, t.query_ids, t.doc_ids).tokens); }, triples,
      policy, ids);
}

void write_instance_csv(std::ostream& out, std::span<const InstanceResult> rows) {
  out << "id,rouge1,rouge2,rougeL,repeated_flag,prediction\n";
  for (const auto& r : rows) {
    out << r.id << ',' << format_score(r.rouge1) << ',' << format_score(r.rouge2) << ',' << format_score(r.rouge_l)
        << ',' << (r.repeated ? 1 : 0) << ',' << csv_quote(join_tokens(r.prediction)) << '\n';
  }
}

void write_instance_csv(const std::filesystem::path& path, std::span<const InstanceResult> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_instance_csv(out, rows);
}

std::vector<InstanceResult> read_instance_csv(std::istream& in) {
  std::vector<std::string> fields;
  if (!read_record(in, fields) || fields.size() != 6 || fields[0] != "id") {
    throw DataError("instance CSV: missing header");
  }
  std::vector<InstanceResult> rows;
  std::size_t line = 1;
  while (read_record(in, fields)) {
    ++line;
    if (fields.size() == 1 && fields[0].empty()) continue;
    if (fields.size() != 6) throw DataError("instance CSV line " + std::to_string(line) + ": expected 6 fields");
    try {
      InstanceResult r;
      r.id = std::stoull(fields[0]);
      r.rouge1 = std::stod(fields[1]);
      r.rouge2 = std::stod(fields[2]);
      r.rouge_l = std::stod(fields[3]);
      r.repeated = fields[4] == "1";
      r.prediction = tokenize(fields[5]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("instance CSV line " + std::to_string(line) + ": malformed number");
    }
  }
  return rows;
}

std::vector<InstanceResult> read_instance_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return read_instance_csv(in);
}

FoldAggregate aggregate_folds(std::string label, std::vector<MetricsReport> folds, std::size_t expected_folds) {
  FoldAggregate agg;
  agg.label = std::move(label);
  agg.expected_folds = expected_folds;
  for (const auto& f : folds) {
    agg.rouge1 += f.rouge1;
    agg.rouge2 += f.rouge2;
    agg.rouge_l += f.rouge_l;
    agg.repetitions += static_cast<double>(f.repetitions);
  }
  if (!folds.empty()) {
    const double n = static_cast<double>(folds.size());
    agg.rouge1 /= n;
    agg.rouge2 /= n;
    agg.rouge_l /= n;
    agg.repetitions /= n;
  }
  agg.folds = std::move(folds);
  return agg;
}

namespace {

constexpr ReferenceScores kRougeTable[] = {
    {"Vanilla e-a-d", 13.73, 2.06, 12.84}, {"Query_enc", 20.87, 3.39, 19.38}, {"Query_att", 29.28, 10.24, 28.21},
    {"B1", 23.18, 6.46, 22.03},            {"M1", 33.06, 13.35, 32.17},       {"M2", 18.42, 4.47, 17.45},
    {"D1", 33.85, 13.65, 32.99},           {"SD1", 31.36, 11.23, 30.5},       {"D2", 38.12, 16.76, 37.31},
    {"SD2", 41.26, 18.75, 40.43},
};

constexpr ReferenceRepetitions kRepetitionTable[] = {
    {"Query_att", 498}, {"SD1", 352}, {"SD2", 344}, {"D1", 191}, {"D2", 179},
};

const FoldAggregate* find_row(std::span<const FoldAggregate> rows, std::string_view label) {
  for (const auto& r : rows) {
    if (r.label == label) return &r;
  }
  return nullptr;
}

std::string percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v;
  return s.str();
}

std::string fixed2(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v;
  return s.str();
}

std::string fold_note(const FoldAggregate& r) {
  std::string note = std::to_string(r.folds.size()) + "/" + std::to_string(r.expected_folds);
  if (r.incomplete()) note += " INCOMPLETE";
  return note;
}

template <typename Reference>
std::vector<const FoldAggregate*> extras(std::span<const FoldAggregate> rows, std::span<const Reference> refs) {
  std::vector<const FoldAggregate*> out;
  for (const auto& r : rows) {
    bool published = false;
    for (const auto& ref : refs) published = published || ref.label == r.label;
    if (!published) out.push_back(&r);
  }
  return out;
}

}  // namespace

std::span<const ReferenceScores> reference_rouge_table() { return kRougeTable; }
std::span<const ReferenceRepetitions> reference_repetition_table() { return kRepetitionTable; }

std::string format_rouge_table(std::span<const FoldAggregate> rows) {
  std::ostringstream out;
  out << "ROUGE F1 (x100), mean over folds; reference = published full-corpus scores\n";
  out << std::left << std::setw(28) << "Model" << std::right << std::setw(9) << "ROUGE-1" << std::setw(9)
      << "ROUGE-2" << std::setw(9) << "ROUGE-L" << "   " << std::setw(22) << "reference (1/2/L)"
      << "  folds\n";
  auto line = [&](std::string_view label, const FoldAggregate* r, const ReferenceScores* ref) {
    out << std::left << std::setw(28) << label << std::right;
    out << std::setw(9) << (r ? percent(r->rouge1) : "-") << std::setw(9) << (r ? percent(r->rouge2) : "-")
        << std::setw(9) << (r ? percent(r->rouge_l) : "-") << "   ";
    out << std::setw(22)
        << (ref ? fixed2(ref->rouge1) + "/" + fixed2(ref->rouge2) + "/" + fixed2(ref->rouge_l) : std::string("-"));
    out << "  " << (r ? fold_note(*r) : "-") << '\n';
  };
  for (const auto& ref : kRougeTable) line(ref.label, find_row(rows, ref.label), &ref);
  for (const auto* r : extras(rows, std::span<const ReferenceScores>(kRougeTable))) line(r->label, r, nullptr);
  return out.str();
}

std::string format_repetition_table(std::span<const FoldAggregate> rows) {
  std::ostringstream out;
  out << "Average number of sentences with repeating words per fold\n";
  out << std::left << std::setw(28) << "Model" << std::right << std::setw(12) << "measured" << std::setw(12)
      << "reference" << "  folds\n";
  auto line = [&](std::string_view label, const FoldAggregate* r, const ReferenceRepetitions* ref) {
    out << std::left << std::setw(28) << label << std::right << std::setw(12)
        << (r ? fixed2(r->repetitions) : "-") << std::setw(12) << (ref ? fixed2(ref->sentences) : "-") << "  "
        << (r ? fold_note(*r) : "-") << '\n';
  };
  for (const auto& ref : kRepetitionTable) line(ref.label, find_row(rows, ref.label), &ref);
  for (const auto* r : extras(rows, std::span<const ReferenceRepetitions>(kRepetitionTable))) {
    line(r->label, r, nullptr);
  }
  return out.str();
}

}  // namespace divsum

#include "divsum/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "divsum/random.hpp"

namespace divsum {

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    unsigned char lo = 0x80;
    unsigned char hi = 0xBF;
    if (c < 0x80) {
      ++i;
      continue;
    } else if (c >= 0xC2 && c <= 0xDF) {
      extra = 1;
    } else if (c >= 0xE0 && c <= 0xEF) {
      extra = 2;
      if (c == 0xE0) lo = 0xA0;
      if (c == 0xED) hi = 0x9F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      extra = 3;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    const auto second = static_cast<unsigned char>(s[i + 1]);
    if (second < lo || second > hi) return false;
    for (std::size_t k = 2; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += extra + 1;
  }
  return true;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(first, last - first + 1);
}

constexpr std::size_t kMaxReportedErrors = 20;

}  // namespace

std::vector<RawTriple> parse_triples(std::istream& in, std::string_view source) {
  std::vector<RawTriple> out;
  std::vector<std::string> errors;
  std::size_t error_count = 0;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    ++error_count;
    if (errors.size() < kMaxReportedErrors) {
      errors.push_back(std::string(source) + ":" + std::to_string(line_no) + ": " + msg);
    }
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (!valid_utf8(line)) {
      fail("not valid UTF-8");
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON (") + e.what() + ")");
      continue;
    }
    if (!j.is_object()) {
      fail("expected a JSON object");
      continue;
    }
    RawTriple t;
    bool ok = true;
    for (auto [name, field] : {std::pair{"query", &t.query}, std::pair{"document", &t.document},
                               std::pair{"summary", &t.summary}}) {
      auto it = j.find(name);
      if (it == j.end()) {
        fail(std::string("missing field \"") + name + "\"");
        ok = false;
        break;
      }
      if (!it->is_string()) {
        fail(std::string("field \"") + name + "\" is not a string");
        ok = false;
        break;
      }
      *field = it->get<std::string>();
      if (trim(*field).empty()) {
        fail(std::string("field \"") + name + "\" is empty");
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(std::move(t));
  }

  if (error_count > 0) {
    std::ostringstream msg;
    msg << error_count << " malformed line(s) in " << source << ":";
    for (const auto& e : errors) msg << "\n  " << e;
    if (error_count > errors.size()) msg << "\n  ...";
    throw DataError(msg.str());
  }
  if (out.empty()) throw DataError(std::string(source) + ": no triples (empty file)");
  return out;
}

std::vector<RawTriple> load_triples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_triples(in, path.string());
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, ch);
    } else if (c < 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return tokens;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"<pad>", "<unk>", "<s>", "</s>"};
  return specials;
}
}  // namespace

Vocabulary::Vocabulary() : Vocabulary(from_tokens(special_tokens())) {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> id_to_token) {
  const auto& specials = special_tokens();
  if (id_to_token.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), id_to_token.begin())) {
    throw DataError("vocabulary must start with the special tokens <pad> <unk> <s> </s>");
  }
  Vocabulary v(std::move(id_to_token), 0);
  return v;
}

Vocabulary::Vocabulary(std::vector<std::string> id_to_token, int)
    : id_to_token_(std::move(id_to_token)) {
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
    if (!inserted) throw DataError("duplicate vocabulary token \"" + id_to_token_[i] + "\"");
  }
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> token_lists, int min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  if (token_lists.empty()) throw DataError("cannot build a vocabulary from an empty training set");
  std::map<std::string, std::size_t> counts;
  for (const auto& list : token_lists)
    for (const auto& tok : list) ++counts[tok];

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= static_cast<std::size_t>(min_count)) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = special_tokens();
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return from_tokens(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kSosId) continue;
    out.push_back(token(id));
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : id_to_token_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

Vocabulary build_vocab(std::span<const RawTriple> triples, int min_count) {
  if (triples.empty()) throw DataError("cannot build a vocabulary from an empty training set");
  std::vector<std::vector<std::string>> lists;
  lists.reserve(triples.size() * 3);
  for (const auto& t : triples) {
    lists.push_back(tokenize(t.query));
    lists.push_back(tokenize(t.document));
    lists.push_back(tokenize(t.summary));
  }
  return Vocabulary::build(lists, min_count);
}

// ---------------------------------------------------------------------------
// Encoding

std::optional<Triple> encode_triple(const RawTriple& raw, const Vocabulary& vocab,
                                    const TruncationLimits& limits, std::string* warning) {
  if (limits.max_doc == 0 || limits.max_query == 0 || limits.max_summary < 2) {
    throw std::invalid_argument("truncation limits must be positive (max_summary >= 2)");
  }
  auto query = tokenize(raw.query);
  auto doc = tokenize(raw.document);
  auto summary = tokenize(raw.summary);
  const char* empty_field = query.empty() ? "query" : doc.empty() ? "document" : summary.empty() ? "summary" : nullptr;
  if (empty_field != nullptr) {
    if (warning) *warning = std::string("skipping triple: empty ") + empty_field + " after tokenization";
    return std::nullopt;
  }
  Triple t;
  t.reference = summary;
  query.resize(std::min(query.size(), limits.max_query));
  doc.resize(std::min(doc.size(), limits.max_doc));
  summary.resize(std::min(summary.size(), limits.max_summary - 1));
  t.query_ids = vocab.encode(query);
  t.doc_ids = vocab.encode(doc);
  t.summary_ids = vocab.encode(summary);
  t.summary_ids.push_back(kEosId);
  return t;
}

EncodedCorpus encode_all(std::span<const RawTriple> raw, std::span<const std::size_t> indices,
                         const Vocabulary& vocab, const TruncationLimits& limits) {
  EncodedCorpus out;
  for (std::size_t idx : indices) {
    std::string warning;
    auto t = encode_triple(raw[idx], vocab, limits, &warning);
    if (t) {
      out.triples.push_back(std::move(*t));
      out.source_index.push_back(idx);
    } else {
      out.warnings.push_back("triple " + std::to_string(idx) + ": " + warning);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folds

namespace {

std::vector<std::vector<std::size_t>> cut_slices(const std::vector<std::size_t>& order, std::size_t k) {
  std::vector<std::vector<std::size_t>> slices(k);
  const std::size_t n = order.size();
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t begin = i * n / k;
    const std::size_t end = (i + 1) * n / k;
    slices[i].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return slices;
}

// Slices hold units (triple indices, or group numbers when `members` maps
// each group to its triples). With k = 2 there is no third slice to train on,
// so the first fifth of the non-test slice validates and the rest trains.
std::vector<Fold> folds_from_slices(const std::vector<std::vector<std::size_t>>& slices,
                                    const std::vector<std::vector<std::size_t>>* members = nullptr) {
  const std::size_t k = slices.size();
  auto append = [&](std::vector<std::size_t>& out, auto first, auto last) {
    for (auto it = first; it != last; ++it) {
      if (members) {
        out.insert(out.end(), (*members)[*it].begin(), (*members)[*it].end());
      } else {
        out.push_back(*it);
      }
    }
  };
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < k; ++i) {
    Fold& f = folds[i];
    const auto& test = slices[i];
    const auto& next = slices[(i + 1) % k];
    append(f.test, test.begin(), test.end());
    if (k == 2) {
      if (next.size() < 2) throw DataError("two folds need at least two units per slice");
      const std::size_t n_val = std::max<std::size_t>(1, next.size() / 5);
      append(f.validation, next.begin(), next.begin() + static_cast<std::ptrdiff_t>(n_val));
      append(f.train, next.begin() + static_cast<std::ptrdiff_t>(n_val), next.end());
    } else {
      append(f.validation, next.begin(), next.end());
      for (std::size_t j = 0; j < k; ++j) {
        if (j != i && j != (i + 1) % k) append(f.train, slices[j].begin(), slices[j].end());
      }
    }
    std::sort(f.train.begin(), f.train.end());
    std::sort(f.validation.begin(), f.validation.end());
    std::sort(f.test.begin(), f.test.end());
  }
  return folds;
}

}  // namespace

FoldPlan make_folds(std::size_t count, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k must be at least 2");
  if (count < k) {
    throw DataError("cannot make " + std::to_string(k) + " folds from " + std::to_string(count) +
                    " triples");
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  FoldPlan plan;
  plan.seed = seed;
  plan.k = k;
  plan.count = count;
  plan.folds = folds_from_slices(cut_slices(order, k));
  return plan;
}

FoldPlan make_grouped_folds(std::span<const std::string> group_keys, std::size_t k,
                            std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k must be at least 2");
  std::map<std::string, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < group_keys.size(); ++i) {
    auto [it, inserted] = group_of.emplace(group_keys[i], members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(i);
  }
  if (members.size() < k) {
    throw DataError("cannot make " + std::to_string(k) + " folds from " +
                    std::to_string(members.size()) + " groups");
  }
  std::vector<std::size_t> group_order(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) group_order[i] = i;
  Rng rng(seed);
  rng.shuffle(group_order);

  FoldPlan plan;
  plan.seed = seed;
  plan.k = k;
  plan.count = group_keys.size();
  plan.grouped = true;
  plan.folds = folds_from_slices(cut_slices(group_order, k), &members);
  return plan;
}

nlohmann::json FoldPlan::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["k"] = k;
  j["count"] = count;
  j["grouped"] = grouped;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    j["folds"].push_back({{"train", f.train}, {"validation", f.validation}, {"test", f.test}});
  }
  return j;
}

FoldPlan FoldPlan::from_json(const nlohmann::json& j) {
  try {
    FoldPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.k = j.at("k").get<std::size_t>();
    plan.count = j.value("count", std::size_t{0});
    plan.grouped = j.value("grouped", false);
    for (const auto& f : j.at("folds")) {
      plan.folds.push_back({f.at("train").get<std::vector<std::size_t>>(),
                            f.at("validation").get<std::vector<std::size_t>>(),
                            f.at("test").get<std::vector<std::size_t>>()});
    }
    if (plan.folds.size() != plan.k) throw DataError("fold count does not match k");
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed fold plan: ") + e.what());
  }
}

void FoldPlan::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

FoldPlan FoldPlan::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

CorpusStats corpus_stats(std::span<const RawTriple> triples) {
  CorpusStats s;
  s.count = triples.size();
  if (triples.empty()) return s;
  double doc = 0, summary = 0, query = 0;
  for (const auto& t : triples) {
    doc += static_cast<double>(tokenize(t.document).size());
    summary += static_cast<double>(tokenize(t.summary).size());
    query += static_cast<double>(tokenize(t.query).size());
  }
  const double n = static_cast<double>(triples.size());
  s.mean_doc_tokens = doc / n;
  s.mean_summary_tokens = summary / n;
  s.mean_query_tokens = query / n;
  return s;
}

SanityReport sanity_check(const CorpusStats& stats, double tolerance) {
  auto within = [tolerance](double value, double reference) {
    return std::abs(value - reference) <= tolerance * reference;
  };
  SanityReport r;
  r.stats = stats;
  r.doc_ok = within(stats.mean_doc_tokens, kReferenceDocTokens);
  r.summary_ok = within(stats.mean_summary_tokens, kReferenceSummaryTokens);
  r.query_ok = within(stats.mean_query_tokens, kReferenceQueryTokens);
  return r;
}

std::string SanityReport::describe() const {
  std::ostringstream out;
  out.precision(4);
  auto line = [&](const char* name, double value, double reference, bool ok) {
    out << "  " << name << ": mean " << value << " tokens (reference " << reference << ")"
        << (ok ? "" : "  <-- outside tolerance") << '\n';
  };
  out << "triples: " << stats.count << " (reference " << kReferenceTripleCount << ")\n";
  line("document", stats.mean_doc_tokens, kReferenceDocTokens, doc_ok);
  line("summary", stats.mean_summary_tokens, kReferenceSummaryTokens, summary_ok);
  line("query", stats.mean_query_tokens, kReferenceQueryTokens, query_ok);
  return out.str();
}

}  // namespace divsum

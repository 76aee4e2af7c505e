#include "divsum/embeddings.hpp"

#include <fstream>
#include <sstream>
#include <vector>

namespace divsum {

EmbeddingTable random_embeddings(std::size_t vocab_size, std::size_t dim, Rng& rng) {
  if (dim == 0) throw std::invalid_argument("embedding dimension must be positive");
  EmbeddingTable table;
  table.weights = Tensor({vocab_size, dim});
  for (double& x : table.weights.values()) x = rng.uniform(-kEmbeddingInitBound, kEmbeddingInitBound);
  for (std::size_t j = 0; j < dim && vocab_size > 0; ++j) table.weights.at(kPadId, j) = 0.0;
  return table;
}

PretrainedEmbeddings parse_pretrained(std::istream& in, const Vocabulary& vocab, std::size_t dim,
                                      std::uint64_t seed, std::string_view source) {
  Rng rng(seed);
  PretrainedEmbeddings out;
  out.table = random_embeddings(vocab.size(), dim, rng);
  std::vector<bool> seen(vocab.size(), false);

  std::string line;
  std::size_t line_no = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    values.clear();
    std::string field;
    while (fields >> field) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                        ": not a number: \"" + field + "\"");
      }
    }
    if (values.size() != dim) {
      throw DataError(std::string(source) + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(dim) + " values, found " + std::to_string(values.size()));
    }
    if (!vocab.contains(token)) continue;
    const int id = vocab.id(token);
    if (id < kNumSpecialTokens) continue;
    const auto row = static_cast<std::size_t>(id);
    for (std::size_t j = 0; j < dim; ++j) out.table.weights.at(row, j) = values[j];
    if (!seen[row]) {
      seen[row] = true;
      ++out.matched;
    }
  }
  out.coverage = vocab.size() == 0 ? 0.0
                                   : static_cast<double>(out.matched) / static_cast<double>(vocab.size());
  return out;
}

PretrainedEmbeddings load_pretrained(const std::filesystem::path& path, const Vocabulary& vocab,
                                     std::size_t dim, std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_pretrained(in, vocab, dim, seed, path.string());
}

Var embed(Var table, std::span<const int> ids) {
  const std::size_t rows = table.rows();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(rows));
    }
  }
  return gather_rows(table, ids);
}

void clear_pad_gradient(Tensor& weights) {
  if (!weights.has_grad() || weights.rows() == 0) return;
  auto g = weights.grad();
  for (std::size_t j = 0; j < weights.cols(); ++j) g[j] = 0.0;
}

}  // namespace divsum

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string_view>

#include "divsum/corpus.hpp"
#include "divsum/graph.hpp"
#include "divsum/random.hpp"
#include "divsum/tensor.hpp"

namespace divsum {

/// Word-embedding matrix shared by query and document words (row per id).
/// The PAD row is held at zero.
struct EmbeddingTable {
  Tensor weights;
  bool trainable = true;

  std::size_t vocab_size() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }
};

inline constexpr double kEmbeddingInitBound = 0.1;

EmbeddingTable random_embeddings(std::size_t vocab_size, std::size_t dim, Rng& rng);

struct PretrainedEmbeddings {
  EmbeddingTable table;
  std::size_t matched = 0;
  /// matched / vocabulary size; specials never match.
  double coverage = 0.0;
};

/// Reads GloVe text vectors (`token v1 ... vd`). Rows without a pretrained
/// vector are drawn uniform(−0.1, 0.1) under `seed`.
PretrainedEmbeddings load_pretrained(const std::filesystem::path& path, const Vocabulary& vocab,
                                     std::size_t dim, std::uint64_t seed);
PretrainedEmbeddings parse_pretrained(std::istream& in, const Vocabulary& vocab, std::size_t dim,
                                      std::uint64_t seed, std::string_view source = "<stream>");

/// Rows of `table` for `ids`, as a [len × d] matrix.
Var embed(Var table, std::span<const int> ids);

/// Zeroes the PAD row of the gradient so optimizer steps never move it.
void clear_pad_gradient(Tensor& weights);

}  // namespace divsum

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "divsum/corpus.hpp"
#include "divsum/metrics.hpp"
#include "divsum/model.hpp"

namespace divsum {

struct AdamOptions {
  double lr = 0.0004;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moments mirror the parameter tensors they were created for.
struct AdamState {
  AdamOptions options;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  static AdamState create(std::span<Tensor* const> params, const AdamOptions& options = {});
};

/// One bias-corrected Adam step from each tensor's grad(). Returns false and
/// leaves parameters and state untouched when any gradient is non-finite.
bool adam_update(std::span<Tensor* const> params, AdamState& state);

double global_grad_norm(std::span<Tensor* const> params);
/// Rescales every gradient by max_norm / norm when the global norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_gradients(std::span<Tensor* const> params, double max_norm);
void zero_gradients(std::span<Tensor* const> params);

/// Rounds every parameter to the nearest float32 so that a checkpoint
/// reload reproduces the in-memory model exactly.
void round_to_float32(Model& model);

struct TrainConfig {
  ModelConfig model;
  AdamOptions adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  /// Training stops once this many consecutive epochs fail to improve
  /// validation ROUGE-L; 0 stops after the first epoch.
  std::size_t patience = 5;
  double clip_norm = 5.0;
  double sampling_probability = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;
  /// Token-weighted teacher-forced NLL accumulated during the epoch.
  double train_loss = 0.0;
  double val_rouge_l = 0.0;
};

void write_curves_csv(std::ostream& out, std::span<const EpochRecord> curve);
void write_curves_csv(const std::filesystem::path& path, std::span<const EpochRecord> curve);
std::vector<EpochRecord> read_curves_csv(const std::filesystem::path& path);

/// Thrown when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch);
  std::size_t epoch;
  std::size_t batch;
};

struct TrainHooks {
  std::function<void(const std::string&)> log;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  /// Parameters from the epoch with the best validation ROUGE-L (ties go to
  /// the lower training loss).
  Model best;
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  double best_val_rouge_l = 0.0;
  std::size_t skipped_updates = 0;
};

/// Length-bucketed batches: a seeded shuffle, a stable sort by document and
/// summary length, contiguous cuts, then a seeded shuffle of batch order.
std::vector<std::vector<std::size_t>> make_batches(std::span<const Triple> triples, std::size_t batch_size,
                                                   Rng& rng);

/// Mini-batch teacher-forced training with validation-based model selection.
/// Each batch averages per-sequence losses. `embeddings` (for example
/// pretrained vectors) replaces the random embedding initialization.
TrainResult train_fold(const TrainConfig& config, const Vocabulary& vocab, std::span<const Triple> train,
                       std::span<const Triple> validation, std::optional<EmbeddingTable> embeddings = std::nullopt,
                       const TrainHooks& hooks = {});

/// Token-weighted mean NLL of `triples` under `model`.
double corpus_loss(const Model& model, std::span<const Triple> triples);

/// Binary file: "DIVSUM1\0", u64 LE header length, JSON header (model config,
/// vocabulary, best metric, metadata), then one record per tensor: u16 name
/// length, name, u8 rank, u64 LE dims, float32 LE values.
struct Checkpoint {
  Model model;
  Vocabulary vocab;
  double best_metric = 0.0;
  nlohmann::json metadata = nlohmann::json::object();

  /// Rounds the model to float32 so save/load is exact.
  Checkpoint(Model model, Vocabulary vocab, double best_metric, nlohmann::json metadata = nlohmann::json::object());

  void save(const std::filesystem::path& path) const;
  void write(std::ostream& out) const;
  static Checkpoint load(const std::filesystem::path& path);
  static Checkpoint read(std::istream& in);
};

/// Encoded splits of one fold with a vocabulary built from its training slice.
struct FoldData {
  Vocabulary vocab;
  EncodedCorpus train;
  EncodedCorpus validation;
  EncodedCorpus test;
};

FoldData prepare_fold(const FoldPlan& plan, std::size_t fold, std::span<const RawTriple> corpus, int min_count,
                      const TruncationLimits& limits);

struct CrossValidationOptions {
  int min_count = 2;
  TruncationLimits limits;
  /// GloVe text file; random embeddings when empty.
  std::filesystem::path pretrained;
  StopwordPolicy policy = StopwordPolicy::KeepAll;
  /// Folds to run; all folds when empty.
  std::vector<std::size_t> folds;
  /// 0 uses worker_threads().
  std::size_t threads = 0;
  std::function<void(const std::string&)> log;
};

struct FoldOutcome {
  std::size_t fold = 0;
  bool ok = false;
  std::string error;
  MetricsReport test;
  std::vector<EpochRecord> curve;
  double best_val_rouge_l = 0.0;
};

struct CrossValidationResult {
  FoldAggregate aggregate;
  /// In fold order, whatever order the folds ran in.
  std::vector<FoldOutcome> folds;
};

/// Trains and tests every requested fold independently (up to `threads` at
/// a time). A failed fold is recorded and leaves the aggregate incomplete.
CrossValidationResult cross_validate(const TrainConfig& config, const FoldPlan& plan,
                                     std::span<const RawTriple> corpus, const CrossValidationOptions& options = {});

}  // namespace divsum

#include "divsum/trainer.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "divsum/parallel.hpp"

namespace divsum {

AdamState AdamState::create(std::span<Tensor* const> params, const AdamOptions& options) {
  AdamState s;
  s.options = options;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->size(), 0.0);
    s.v.emplace_back(p->size(), 0.0);
  }
  return s;
}

bool adam_update(std::span<Tensor* const> params, AdamState& state) {
  if (params.size() != state.m.size()) throw std::invalid_argument("adam_update: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    if (p.size() != state.m[k].size()) throw std::invalid_argument("adam_update: parameter shape changed");
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  const AdamOptions& o = state.options;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    if (!p.has_grad()) continue;
    auto values = p.values();
    auto grad = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
      values[i] -= o.lr * (m[i] / correction1) / (std::sqrt(v[i] / correction2) + o.epsilon);
    }
  }
  return true;
}

double global_grad_norm(std::span<Tensor* const> params) {
  double sq = 0.0;
  for (const Tensor* p : params) {
    for (double g : p->grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(std::span<Tensor* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (Tensor* p : params) {
      for (double& g : p->grad()) g *= factor;
    }
  }
  return norm;
}

void zero_gradients(std::span<Tensor* const> params) {
  for (Tensor* p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
}

void round_to_float32(Model& model) {
  model.visit([](const std::string&, Tensor& t) {
    for (double& x : t.values()) x = static_cast<double>(static_cast<float>(x));
  });
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (epochs == 0) throw std::invalid_argument("epoch count must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (sampling_probability < 0.0 || sampling_probability > 1.0) {
    throw std::invalid_argument("sampling probability must lie in [0, 1]");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"epsilon", adam.epsilon}}},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patience", patience},
          {"clip_norm", clip_norm},
          {"sampling_probability", sampling_probability},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = ModelConfig::from_json(j.at("model"));
  const auto& a = j.at("adam");
  c.adam.lr = a.at("lr").get<double>();
  c.adam.beta1 = a.at("beta1").get<double>();
  c.adam.beta2 = a.at("beta2").get<double>();
  c.adam.epsilon = a.at("epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.sampling_probability = j.at("sampling_probability").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void write_curves_csv(std::ostream& out, std::span<const EpochRecord> curve) {
  out << "epoch,train_loss,val_rouge_l\n";
  out << std::setprecision(17);
  for (const auto& r : curve) out << r.epoch << ',' << r.train_loss << ',' << r.val_rouge_l << '\n';
}

void write_curves_csv(const std::filesystem::path& path, std::span<const EpochRecord> curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_curves_csv(out, curve);
}

std::vector<EpochRecord> read_curves_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_rouge_l") {
    throw DataError(path.string() + ": missing curve header");
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    char c1 = 0, c2 = 0;
    if (!(row >> r.epoch >> c1 >> r.train_loss >> c2 >> r.val_rouge_l) || c1 != ',' || c2 != ',') {
      throw DataError(path.string() + ": malformed curve row '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch_, std::size_t batch_)
    : std::runtime_error("training loss became non-finite at epoch " + std::to_string(epoch_) + ", batch " +
                         std::to_string(batch_)),
      epoch(epoch_),
      batch(batch_) {}

std::vector<std::vector<std::size_t>> make_batches(std::span<const Triple> triples, std::size_t batch_size,
                                                   Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(triples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = triples[a];
    const auto& y = triples[b];
    if (x.doc_ids.size() != y.doc_ids.size()) return x.doc_ids.size() < y.doc_ids.size();
    return x.summary_ids.size() < y.summary_ids.size();
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  rng.shuffle(batches);
  return batches;
}

namespace {

std::size_t target_tokens(const Triple& t) {
  return static_cast<std::size_t>(std::count_if(t.summary_ids.begin(), t.summary_ids.end(),
                                                [](int id) { return id != kPadId; }));
}

// Separate streams so that turning scheduled sampling on does not change
// the batch order.
constexpr std::uint64_t kShuffleStream = 0x53485546464c45ULL;
constexpr std::uint64_t kSamplingStream = 0x53414d504c45ULL;

}  // namespace

double corpus_loss(const Model& model, std::span<const Triple> triples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& t : triples) {
    const std::size_t m = target_tokens(t);
    total += sequence_loss_value(model, t) * static_cast<double>(m);
    tokens += m;
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

TrainResult train_fold(const TrainConfig& config, const Vocabulary& vocab, std::span<const Triple> train,
                       std::span<const Triple> validation, std::optional<EmbeddingTable> embeddings,
                       const TrainHooks& hooks) {
  config.validate();
  if (train.empty() || validation.empty()) throw std::invalid_argument("train_fold needs non-empty splits");
  if (vocab.size() != config.model.vocab_size) {
    throw std::invalid_argument("vocabulary size " + std::to_string(vocab.size()) + " differs from model vocab_size " +
                                std::to_string(config.model.vocab_size));
  }
  Model model = embeddings ? Model(config.model, std::move(*embeddings), config.seed) : Model(config.model, config.seed);
  std::vector<Tensor*> params = model.trainable_tensors();
  zero_gradients(params);
  AdamState adam = AdamState::create(params, config.adam);
  Rng shuffle_rng(config.seed ^ kShuffleStream);
  Rng sampling_rng(config.seed ^ kSamplingStream);
  LossOptions loss_options{config.sampling_probability, &sampling_rng};
  Tensor& embedding_weights = model.params().embeddings.weights;
  const bool embeddings_train = model.config().train_embeddings;

  std::optional<TrainResult> result;
  std::vector<EpochRecord> curve;
  std::size_t since_best = 0;
  std::size_t skipped = 0;
  Graph graph;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = make_batches(train, config.batch_size, shuffle_rng);
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      zero_gradients(params);
      const double weight = 1.0 / static_cast<double>(batches[b].size());
      for (std::size_t idx : batches[b]) {
        graph.clear();
        Var loss = sequence_loss(model, graph, train[idx], loss_options);
        const double value = loss.scalar();
        if (!std::isfinite(value)) throw TrainingDiverged(epoch, b);
        graph.backward(scale(loss, weight));
        const std::size_t m = target_tokens(train[idx]);
        loss_sum += value * static_cast<double>(m);
        tokens += m;
      }
      if (embeddings_train) clear_pad_gradient(embedding_weights);
      clip_gradients(params, config.clip_norm);
      if (!adam_update(params, adam)) {
        ++skipped;
        if (hooks.log) {
          hooks.log("skipped update: non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(b));
        }
      }
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = tokens == 0 ? 0.0 : loss_sum / static_cast<double>(tokens);
    record.val_rouge_l = evaluate(model, vocab, validation).rouge_l;
    curve.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);
    // A validation tie keeps the better-fitted parameters but does not
    // reset the patience counter.
    const bool improved = !result || record.val_rouge_l > result->best_val_rouge_l;
    const bool tie_with_lower_loss = result && record.val_rouge_l == result->best_val_rouge_l &&
                                     record.train_loss < curve[result->best_epoch - 1].train_loss;
    if (improved || tie_with_lower_loss) result.emplace(TrainResult{model, {}, epoch, record.val_rouge_l, 0});
    since_best = improved ? 0 : since_best + 1;
    if (since_best >= config.patience) break;
  }
  for (Tensor* p : result->best.trainable_tensors()) p->drop_grad();
  result->curve = std::move(curve);
  result->skipped_updates = skipped;
  return std::move(*result);
}

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'I', 'V', 'S', 'U', 'M', '1', '\0'};

void put_le(std::ostream& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((value >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t value = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw DataError("checkpoint: unexpected end of file");
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return value;
}

}  // namespace

Checkpoint::Checkpoint(Model model_, Vocabulary vocab_, double best_metric_, nlohmann::json metadata_)
    : model(std::move(model_)), vocab(std::move(vocab_)), best_metric(best_metric_), metadata(std::move(metadata_)) {
  if (vocab.size() != model.config().vocab_size) {
    throw std::invalid_argument("checkpoint: vocabulary does not match the model");
  }
  round_to_float32(model);
}

void Checkpoint::write(std::ostream& out) const {
  const nlohmann::json header = {{"format", "divsum-checkpoint"},
                                 {"config", model.config().to_json()},
                                 {"vocabulary", vocab.tokens()},
                                 {"best_metric", best_metric},
                                 {"metadata", metadata}};
  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  put_le(out, text.size(), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  model.visit([&](const std::string& name, const Tensor& t) {
    put_le(out, name.size(), 2);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le(out, t.rank(), 1);
    for (std::size_t d : t.shape()) put_le(out, d, 8);
    for (double x : t.values()) put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)), 4);
  });
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write(out);
}

Checkpoint Checkpoint::read(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError("checkpoint: bad magic bytes");
  const std::uint64_t header_len = get_le(in, 8);
  if (header_len > (std::uint64_t{1} << 32)) throw DataError("checkpoint: implausible header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  ModelConfig config = ModelConfig::from_json(header.at("config"));
  Vocabulary vocab = Vocabulary::from_tokens(header.at("vocabulary").get<std::vector<std::string>>());
  Model model(config, 0);
  std::map<std::string, Tensor*> by_name;
  model.visit([&](const std::string& name, Tensor& t) { by_name[name] = &t; });
  std::map<std::string, bool> seen;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::size_t name_len = get_le(in, 2);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    auto it = by_name.find(name);
    if (!in || it == by_name.end()) throw DataError("checkpoint: unexpected tensor '" + name + "'");
    if (seen[name]) throw DataError("checkpoint: duplicate tensor '" + name + "'");
    seen[name] = true;
    Tensor& t = *it->second;
    const std::size_t rank = get_le(in, 1);
    Shape shape;
    for (std::size_t r = 0; r < rank; ++r) shape.push_back(get_le(in, 8));
    if (shape != t.shape()) {
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                      shape_string(t.shape()));
    }
    for (double& x : t.values()) x = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(in, 4)));
  }
  if (seen.size() != by_name.size()) throw DataError("checkpoint: missing tensors");
  return Checkpoint(std::move(model), std::move(vocab), header.at("best_metric").get<double>(),
                    header.value("metadata", nlohmann::json::object()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return read(in);
}

FoldData prepare_fold(const FoldPlan& plan, std::size_t fold, std::span<const RawTriple> corpus, int min_count,
                      const TruncationLimits& limits) {
  if (fold >= plan.folds.size()) throw std::invalid_argument("fold index out of range");
  if (plan.count != corpus.size()) {
    throw DataError("fold plan covers " + std::to_string(plan.count) + " triples but the corpus has " +
                    std::to_string(corpus.size()));
  }
  const Fold& f = plan.folds[fold];
  std::vector<RawTriple> train_raw;
  train_raw.reserve(f.train.size());
  for (std::size_t i : f.train) train_raw.push_back(corpus[i]);
  FoldData data{build_vocab(train_raw, min_count), {}, {}, {}};
  data.train = encode_all(corpus, f.train, data.vocab, limits);
  data.validation = encode_all(corpus, f.validation, data.vocab, limits);
  data.test = encode_all(corpus, f.test, data.vocab, limits);
  return data;
}

CrossValidationResult cross_validate(const TrainConfig& config, const FoldPlan& plan,
                                     std::span<const RawTriple> corpus, const CrossValidationOptions& options) {
  std::vector<std::size_t> folds = options.folds;
  if (folds.empty()) {
    for (std::size_t i = 0; i < plan.folds.size(); ++i) folds.push_back(i);
  }
  std::vector<FoldOutcome> outcomes(folds.size());
  const std::size_t threads = options.threads == 0 ? worker_threads() : options.threads;
  parallel_for(folds.size(), threads, [&](std::size_t slot) {
    FoldOutcome& out = outcomes[slot];
    out.fold = folds[slot];
    try {
      FoldData data = prepare_fold(plan, out.fold, corpus, options.min_count, options.limits);
      TrainConfig fold_config = config;
      fold_config.model.vocab_size = data.vocab.size();
      std::optional<EmbeddingTable> table;
      if (!options.pretrained.empty()) {
        table = load_pretrained(options.pretrained, data.vocab, fold_config.model.embed_dim, config.seed).table;
      }
      TrainHooks hooks;
      if (options.log) {
        hooks.log = [&, fold = out.fold](const std::string& msg) {
          options.log("fold " + std::to_string(fold) + ": " + msg);
        };
      }
      auto trained =
          train_fold(fold_config, data.vocab, data.train.triples, data.validation.triples, std::move(table), hooks);
      Checkpoint ckpt(std::move(trained.best), data.vocab, trained.best_val_rouge_l);
      out.test = evaluate(ckpt.model, ckpt.vocab, data.test.triples, options.policy, data.test.source_index);
      out.curve = std::move(trained.curve);
      out.best_val_rouge_l = trained.best_val_rouge_l;
      out.ok = true;
    } catch (const std::exception& e) {
      out.error = e.what();
      if (options.log) options.log("fold " + std::to_string(out.fold) + " failed: " + out.error);
    }
  });
  std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });
  std::vector<MetricsReport> reports;
  for (const auto& o : outcomes) {
    if (o.ok) reports.push_back(o.test);
  }
  CrossValidationResult result;
  result.aggregate = aggregate_folds(config.model.label(), std::move(reports), folds.size());
  result.folds = std::move(outcomes);
  return result;
}

}  // namespace divsum

#include "divsum/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "divsum/corpus.hpp"
#include "divsum/embeddings.hpp"
#include "divsum/metrics.hpp"
#include "divsum/model.hpp"
#include "divsum/trainer.hpp"

namespace divsum {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kCorpusFile = "corpus.jsonl";
constexpr const char* kFoldsFile = "folds.json";
constexpr const char* kCheckpointFile = "checkpoint.bin";
constexpr const char* kCurvesFile = "curves.csv";
constexpr const char* kMetricsFile = "metrics.json";
constexpr const char* kInstancesFile = "instances.csv";

/// Bad flag values detected after parsing; reported like parse errors.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

fs::path vocab_path(const fs::path& work, std::size_t fold) {
  return work / "vocab" / ("fold" + std::to_string(fold) + ".txt");
}

std::string slug(std::string_view label) {
  std::string out;
  for (char c : label) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      out += static_cast<char>(std::tolower(u));
    } else if (!out.empty() && out.back() != '-') {
      out += '-';
    }
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

/// The one manifest of an output directory: written before work starts and
/// rewritten with the outcome.
class Manifest {
 public:
  Manifest(fs::path dir, std::string command, std::vector<std::string> argv, json config, std::uint64_t seed,
           json inputs, json outputs)
      : path_(std::move(dir) / kManifest) {
    body_ = {{"command", std::move(command)}, {"argv", std::move(argv)}, {"config", std::move(config)},
             {"seed", seed},                  {"inputs", std::move(inputs)}, {"outputs", std::move(outputs)},
             {"cwd", fs::current_path().string()}, {"started_at", utc_now()}, {"finished_at", nullptr},
             {"status", "running"}};
    write_json(path_, body_);
  }

  void finish(const json& results = json::object()) {
    body_["finished_at"] = utc_now();
    body_["status"] = "completed";
    if (!results.empty()) body_["results"] = results;
    write_json(path_, body_);
  }

  void fail(const std::string& message) {
    body_["finished_at"] = utc_now();
    body_["status"] = "failed";
    body_["error"] = message;
    write_json(path_, body_);
  }

 private:
  fs::path path_;
  json body_;
};

template <typename F>
int with_manifest(Manifest& manifest, F&& work) {
  try {
    manifest.finish(work());
    return 0;
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
}

TruncationLimits limits_from_json(const json& j) {
  TruncationLimits l;
  l.max_doc = j.at("max_doc").get<std::size_t>();
  l.max_query = j.at("max_query").get<std::size_t>();
  l.max_summary = j.at("max_summary").get<std::size_t>();
  return l;
}

json limits_to_json(const TruncationLimits& l) {
  return {{"max_doc", l.max_doc}, {"max_query", l.max_query}, {"max_summary", l.max_summary}};
}

std::vector<std::string> args_of(int argc, const char* const* argv) {
  return std::vector<std::string>(argv, argv + argc);
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareArgs {
  std::string data;
  std::string out;
  std::size_t folds = 10;
  std::uint64_t seed = 0;
  int min_count = 2;
  bool grouped = false;
  TruncationLimits limits;
};

int cmd_prepare(const PrepareArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.folds < 2) throw UsageError("--folds must be at least 2");
  if (a.min_count < 1) throw UsageError("--min-count must be at least 1");
  const fs::path dir(a.out);
  fs::create_directories(dir / "vocab");
  const json config = {{"folds", a.folds},
                       {"min_count", a.min_count},
                       {"grouped", a.grouped},
                       {"limits", limits_to_json(a.limits)}};
  Manifest manifest(dir, "prepare", argv, config, a.seed, {{"data", fs::absolute(a.data).string()}},
                    {{"corpus", kCorpusFile}, {"folds", kFoldsFile}, {"vocabularies", "vocab/"}});
  return with_manifest(manifest, [&] {
    auto raw = load_triples(a.data);
    fs::copy_file(a.data, dir / kCorpusFile, fs::copy_options::overwrite_existing);
    FoldPlan plan;
    if (a.grouped) {
      std::vector<std::string> keys;
      keys.reserve(raw.size());
      for (const auto& r : raw) keys.push_back(join_tokens(tokenize(r.query)));
      plan = make_grouped_folds(keys, a.folds, a.seed);
    } else {
      plan = make_folds(raw.size(), a.folds, a.seed);
    }
    plan.save(dir / kFoldsFile);
    json vocab_sizes = json::array();
    for (std::size_t i = 0; i < plan.folds.size(); ++i) {
      std::vector<RawTriple> train;
      for (std::size_t idx : plan.folds[i].train) train.push_back(raw[idx]);
      auto vocab = build_vocab(train, a.min_count);
      vocab.save(vocab_path(dir, i));
      vocab_sizes.push_back(vocab.size());
    }
    const auto sanity = sanity_check(corpus_stats(raw));
    out << "prepared " << raw.size() << " triples into " << plan.folds.size() << " folds (seed " << a.seed
        << ") in " << dir.string() << '\n'
        << sanity.describe() << '\n';
    return json{{"triples", raw.size()},
                {"vocabulary_sizes", vocab_sizes},
                {"mean_doc_tokens", sanity.stats.mean_doc_tokens},
                {"mean_summary_tokens", sanity.stats.mean_summary_tokens},
                {"mean_query_tokens", sanity.stats.mean_query_tokens}};
  });
}

/// Everything `prepare` wrote, reloaded.
struct WorkDir {
  fs::path dir;
  json manifest;
  std::vector<RawTriple> corpus;
  FoldPlan plan;
  TruncationLimits limits;

  static WorkDir open(const fs::path& dir) {
    WorkDir w;
    w.dir = dir;
    w.manifest = read_json(dir / kManifest);
    if (w.manifest.value("command", "") != "prepare") {
      throw DataError(dir.string() + " was not produced by prepare");
    }
    if (w.manifest.value("status", "") != "completed") throw DataError(dir.string() + ": prepare did not complete");
    w.corpus = load_triples(dir / kCorpusFile);
    w.plan = FoldPlan::load(dir / kFoldsFile);
    w.limits = limits_from_json(w.manifest.at("config").at("limits"));
    return w;
  }

  const Fold& fold(std::size_t i) const {
    if (i >= plan.folds.size()) {
      throw UsageError("fold " + std::to_string(i) + " does not exist (plan has " + std::to_string(plan.folds.size()) +
                       ")");
    }
    return plan.folds[i];
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string work;
  std::size_t fold = 0;
  std::string mode = "NONE";
  std::string query = "attention";
  std::size_t hidden = 200;
  std::size_t embed_dim = 100;
  std::size_t batch = 32;
  std::size_t epochs = 50;
  std::size_t patience = 5;
  double lr = 0.0004;
  double clip = 5.0;
  double sampling_prob = 0.0;
  std::uint64_t seed = 0;
  std::string embeddings;
  bool freeze_embeddings = false;
  bool sd1_sigmoid = false;
  bool store_raw_cell = false;
  std::size_t max_decode_len = 30;
  std::string out;
};

TrainConfig train_config_from(const TrainArgs& a) {
  TrainConfig c;
  try {
    c.model.diversity = parse_diversity_mode(a.mode);
    c.model.query = parse_query_mode(a.query);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  c.model.embed_dim = a.embed_dim;
  c.model.decoder_hidden = c.model.query_hidden = c.model.doc_hidden = a.hidden;
  c.model.options.sd1_sigmoid_gate = a.sd1_sigmoid;
  c.model.options.store_raw_cell = a.store_raw_cell;
  c.model.train_embeddings = !a.freeze_embeddings;
  c.model.max_decode_len = a.max_decode_len;
  c.adam.lr = a.lr;
  c.batch_size = a.batch;
  c.epochs = a.epochs;
  c.patience = a.patience;
  c.clip_norm = a.clip;
  c.sampling_probability = a.sampling_prob;
  c.seed = a.seed;
  return c;
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  TrainConfig config = train_config_from(a);
  const WorkDir work = WorkDir::open(a.work);
  const Fold& fold = work.fold(a.fold);
  const Vocabulary vocab = Vocabulary::load(vocab_path(work.dir, a.fold));
  config.model.vocab_size = vocab.size();
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const std::string label = config.model.label();
  const fs::path dir =
      a.out.empty() ? work.dir / "runs" / (slug(label) + "-fold" + std::to_string(a.fold)) : fs::path(a.out);
  fs::create_directories(dir);
  json inputs = {{"work", fs::absolute(work.dir).string()}};
  if (!a.embeddings.empty()) inputs["embeddings"] = fs::absolute(a.embeddings).string();
  json run_config = config.to_json();
  run_config["fold"] = a.fold;
  run_config["label"] = label;
  Manifest manifest(dir, "train", argv, run_config, a.seed, inputs,
                    {{"checkpoint", kCheckpointFile}, {"curves", kCurvesFile}});
  return with_manifest(manifest, [&] {
    const auto train = encode_all(work.corpus, fold.train, vocab, work.limits);
    const auto validation = encode_all(work.corpus, fold.validation, vocab, work.limits);
    std::optional<EmbeddingTable> table;
    if (!a.embeddings.empty()) {
      auto pre = load_pretrained(a.embeddings, vocab, config.model.embed_dim, config.seed);
      err << "pretrained coverage " << std::fixed << std::setprecision(3) << pre.coverage << " (" << pre.matched
          << " of " << vocab.size() << ")\n";
      table = std::move(pre.table);
    }
    TrainHooks hooks;
    hooks.log = [&](const std::string& msg) { err << msg << '\n'; };
    hooks.on_epoch = [&](const EpochRecord& r) {
      err << "epoch " << r.epoch << " train_loss " << std::setprecision(6) << r.train_loss << " val_rougeL "
          << r.val_rouge_l << '\n';
    };
    auto result = train_fold(config, vocab, train.triples, validation.triples, std::move(table), hooks);
    const json metadata = {{"fold", a.fold},
                           {"label", label},
                           {"folds", work.plan.folds.size()},
                           {"best_epoch", result.best_epoch},
                           {"limits", limits_to_json(work.limits)},
                           {"train", config.to_json()}};
    Checkpoint ckpt(std::move(result.best), vocab, result.best_val_rouge_l, metadata);
    ckpt.save(dir / kCheckpointFile);
    write_curves_csv(dir / kCurvesFile, result.curve);
    out << label << " fold " << a.fold << ": best validation ROUGE-L F1 " << std::setprecision(4)
        << result.best_val_rouge_l << " at epoch " << result.best_epoch << " of " << result.curve.size() << " -> "
        << (dir / kCheckpointFile).string() << '\n';
    return json{{"best_epoch", result.best_epoch},
                {"epochs_run", result.curve.size()},
                {"best_val_rouge_l", result.best_val_rouge_l},
                {"skipped_updates", result.skipped_updates},
                {"train_triples", train.triples.size()},
                {"skipped_train_triples", train.warnings.size()}};
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string run;
  std::string work;
  std::string split = "test";
  bool exclude_stopwords = false;
  std::string out;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.split != "test" && a.split != "validation") throw UsageError("--split must be test or validation");
  const fs::path run_dir(a.run);
  const json run_manifest = read_json(run_dir / kManifest);
  if (run_manifest.value("command", "") != "train") throw DataError(run_dir.string() + " was not produced by train");
  const fs::path work_dir =
      a.work.empty() ? fs::path(run_manifest.at("inputs").at("work").get<std::string>()) : fs::path(a.work);
  const Checkpoint ckpt = Checkpoint::load(run_dir / kCheckpointFile);
  const std::size_t fold_index = ckpt.metadata.at("fold").get<std::size_t>();
  const WorkDir work = WorkDir::open(work_dir);
  const Fold& fold = work.fold(fold_index);
  const auto& indices = a.split == "test" ? fold.test : fold.validation;
  const fs::path dir = a.out.empty() ? run_dir / ("eval-" + a.split) : fs::path(a.out);
  fs::create_directories(dir);
  const StopwordPolicy policy = a.exclude_stopwords ? StopwordPolicy::ExcludeStopwords : StopwordPolicy::KeepAll;
  const json config = {{"split", a.split},
                       {"repetition_policy", a.exclude_stopwords ? "exclude-stopwords" : "all-tokens"},
                       {"fold", fold_index},
                       {"label", ckpt.metadata.value("label", ckpt.model.config().label())}};
  Manifest manifest(dir, "eval", argv, config, 0,
                    {{"run", fs::absolute(run_dir).string()}, {"work", fs::absolute(work_dir).string()}},
                    {{"metrics", kMetricsFile}, {"instances", kInstancesFile}});
  return with_manifest(manifest, [&] {
    const auto encoded = encode_all(work.corpus, indices, ckpt.vocab, work.limits);
    const MetricsReport report = evaluate(ckpt.model, ckpt.vocab, encoded.triples, policy, encoded.source_index);
    write_instance_csv(dir / kInstancesFile, report.per_instance);
    json metrics = report.summary_json();
    metrics["label"] = config.at("label");
    metrics["fold"] = fold_index;
    metrics["folds"] = work.plan.folds.size();
    metrics["split"] = a.split;
    metrics["repetition_policy"] = config.at("repetition_policy");
    metrics["metric"] = "F1";
    write_json(dir / kMetricsFile, metrics);
    out << std::fixed << std::setprecision(4) << metrics.at("label").get<std::string>() << " fold " << fold_index
        << " " << a.split << " (" << report.instances << " instances): ROUGE-1 F1 " << report.rouge1
        << ", ROUGE-2 F1 " << report.rouge2 << ", ROUGE-L F1 " << report.rouge_l << ", repeated-word sentences "
        << report.repetitions << '\n';
    return metrics;
  });
}

// ---------------------------------------------------------------------------
// summarize

struct SummarizeArgs {
  std::string checkpoint;
  std::string query;
  std::string document;
  std::size_t max_len = 0;
  std::size_t top = 3;
};

std::string top_weights(std::span<const double> weights, std::span<const std::string> tokens, std::size_t k) {
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t x, std::size_t y) { return weights[x] > weights[y] || (weights[x] == weights[y] && x < y); });
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < k; ++i) {
    if (i) s << ' ';
    s << tokens[order[i]] << '@' << order[i] << '=' << weights[order[i]];
  }
  return s.str();
}

int cmd_summarize(const SummarizeArgs& a, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  TruncationLimits limits;
  if (ckpt.metadata.contains("limits")) limits = limits_from_json(ckpt.metadata.at("limits"));
  std::string warning;
  auto triple = encode_triple({a.query, a.document, "."}, ckpt.vocab, limits, &warning);
  if (!triple) throw UsageError("cannot summarize: " + warning);
  const auto trace = greedy_decode(ckpt.model, triple->query_ids, triple->doc_ids, a.max_len);
  out << "summary: " << join_tokens(ckpt.vocab.decode(trace.tokens)) << '\n';
  // Show the input words themselves, including those the vocabulary maps to UNK.
  auto doc_tokens = tokenize(a.document);
  auto query_tokens = tokenize(a.query);
  doc_tokens.resize(triple->doc_ids.size());
  query_tokens.resize(triple->query_ids.size());
  for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
    out << "step " << t + 1 << ' ' << ckpt.vocab.token(trace.tokens[t]) << " | document "
        << top_weights(trace.doc_weights[t], doc_tokens, a.top);
    if (!trace.query_weights[t].empty()) {
      out << " | query " << top_weights(trace.query_weights[t], query_tokens, a.top);
    }
    out << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::size_t dims = 5;
  std::string mode = "NONE";
  std::string query = "attention";
  std::size_t seeds = 100;
  std::size_t vocab = 12;
  std::size_t max_len = 5;
  bool sd1_sigmoid = false;
  bool store_raw_cell = false;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  GradCheckSetup setup;
  try {
    setup.mode = parse_diversity_mode(a.mode);
    setup.query = parse_query_mode(a.query);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.dims == 0 || a.seeds == 0) throw UsageError("--dims and --seeds must be positive");
  if (a.vocab <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw UsageError("--vocab must exceed the " + std::to_string(kNumSpecialTokens) + " special tokens");
  }
  if (a.max_len < 2) throw UsageError("--max-len must be at least 2");
  setup.options.sd1_sigmoid_gate = a.sd1_sigmoid;
  setup.options.store_raw_cell = a.store_raw_cell;
  setup.dims = a.dims;
  setup.vocab_size = a.vocab;
  setup.max_len = a.max_len;
  double worst = -1.0;
  std::optional<ModelGradCheck> worst_case;
  std::uint64_t worst_seed = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < a.seeds; ++seed) {
    setup.seed = seed;
    auto r = model_gradient_check(setup);
    checked += r.report.coordinates_checked;
    if (r.report.max_rel_error > worst) {
      worst = r.report.max_rel_error;
      worst_seed = seed;
      worst_case = std::move(r);
    }
  }
  std::string where;
  Model probe(worst_case->config, 0);
  std::size_t index = 0;
  probe.visit_trainable([&](const std::string& name, Tensor&) {
    if (index++ == worst_case->report.param_index) where = name;
  });
  const bool pass = worst < a.tolerance;
  out << "gradcheck " << worst_case->config.label() << " dims " << a.dims << " vocab " << a.vocab << " seeds "
      << a.seeds << " (" << checked << " coordinates)\n"
      << "max relative error " << std::scientific << std::setprecision(3) << worst << " at seed " << worst_seed
      << ", " << where << '[' << worst_case->report.coordinate << "] analytic " << worst_case->report.analytic
      << " numeric " << worst_case->report.numeric << '\n'
      << (pass ? "PASS" : "FAIL") << " (tolerance " << a.tolerance << ")\n";
  return pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string split = "test";
  std::string out;
};

int cmd_report(const ReportArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  std::map<std::string, std::map<std::size_t, MetricsReport>> by_label;
  std::map<std::string, std::size_t> expected;
  std::vector<std::string> sources;
  for (const auto& input : a.inputs) {
    if (!fs::exists(input)) throw DataError("no such input: " + input);
    std::vector<fs::path> files;
    if (fs::is_regular_file(input)) {
      files.emplace_back(input);
    } else {
      for (const auto& entry : fs::recursive_directory_iterator(input)) {
        if (entry.is_regular_file() && entry.path().filename() == kMetricsFile) files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const json m = read_json(file);
      if (m.value("split", "") != a.split) continue;
      const std::string label = m.at("label").get<std::string>();
      const std::size_t fold = m.at("fold").get<std::size_t>();
      if (!by_label[label].emplace(fold, MetricsReport::from_summary_json(m)).second) {
        throw DataError("duplicate results for " + label + " fold " + std::to_string(fold) + " (" + file.string() +
                        ")");
      }
      expected[label] = std::max(expected[label], m.at("folds").get<std::size_t>());
      sources.push_back(fs::absolute(file).string());
    }
  }
  if (by_label.empty()) throw DataError("no " + a.split + " metrics.json files found under the inputs");
  std::vector<FoldAggregate> rows;
  for (auto& [label, folds] : by_label) {
    std::vector<MetricsReport> reports;
    for (auto& [fold, report] : folds) reports.push_back(report);
    rows.push_back(aggregate_folds(label, std::move(reports), expected[label]));
  }
  const std::string text = format_rouge_table(rows) + '\n' + format_repetition_table(rows);
  out << text;
  if (a.out.empty()) return 0;
  const fs::path dir(a.out);
  fs::create_directories(dir);
  Manifest manifest(dir, "report", argv, {{"split", a.split}}, 0, {{"metrics", sources}},
                    {{"table", "report.txt"}, {"data", "report.json"}});
  return with_manifest(manifest, [&] {
    std::ofstream(dir / "report.txt") << text;
    json j = json::array();
    for (const auto& r : rows) {
      json folds = json::array();
      for (const auto& f : r.folds) folds.push_back(f.summary_json());
      j.push_back({{"label", r.label},
                   {"rouge1_f1", r.rouge1},
                   {"rouge2_f1", r.rouge2},
                   {"rougeL_f1", r.rouge_l},
                   {"mean_repetitions", r.repetitions},
                   {"folds", folds},
                   {"expected_folds", r.expected_folds},
                   {"incomplete", r.incomplete()}});
    }
    write_json(dir / "report.json", j);
    return json{{"rows", rows.size()}};
  });
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Query-based abstractive summarization with diversity attention", "divsum"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Copy a JSONL corpus into a work directory with folds and vocabularies");
  prepare->add_option("--data", prep.data, "Triples, one JSON object per line")->required()->check(CLI::ExistingFile);
  prepare->add_option("--out", prep.out, "Work directory to create")->required();
  prepare->add_option("--folds", prep.folds, "Number of cross-validation folds")->capture_default_str();
  prepare->add_option("--seed", prep.seed, "Shuffle seed")->capture_default_str();
  prepare->add_option("--min-count", prep.min_count, "Minimum training frequency for a vocabulary entry")
      ->capture_default_str();
  prepare->add_flag("--grouped", prep.grouped, "Keep triples that share a query inside one slice");
  prepare->add_option("--max-doc", prep.limits.max_doc, "Document truncation length")->capture_default_str();
  prepare->add_option("--max-query", prep.limits.max_query, "Query truncation length")->capture_default_str();
  prepare->add_option("--max-summary", prep.limits.max_summary, "Summary truncation length, EOS included")
      ->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train one fold and save its best checkpoint and learning curves");
  train->add_option("--work", tr.work, "Work directory from prepare")->required()->check(CLI::ExistingDirectory);
  train->add_option("--fold", tr.fold, "Fold index")->required();
  train->add_option("--mode", tr.mode, "Diversity mode: NONE, D1, SD1, D2, SD2, B1, M1, M2")->capture_default_str();
  train->add_option("--query", tr.query, "Query path: attention, mean or none")->capture_default_str();
  train->add_option("--hidden", tr.hidden, "Hidden size of every recurrent cell")->capture_default_str();
  train->add_option("--embed-dim", tr.embed_dim, "Word embedding size")->capture_default_str();
  train->add_option("--batch", tr.batch, "Mini-batch size")->capture_default_str();
  train->add_option("--epochs", tr.epochs, "Epoch cap")->capture_default_str();
  train->add_option("--patience", tr.patience, "Non-improving epochs before stopping")->capture_default_str();
  train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--clip", tr.clip, "Global gradient-norm clip")->capture_default_str();
  train->add_option("--sampling-prob", tr.sampling_prob, "Probability of feeding the previous argmax in training")
      ->capture_default_str();
  train->add_option("--seed", tr.seed, "Initialization and shuffle seed")->capture_default_str();
  train->add_option("--embeddings", tr.embeddings, "GloVe text vectors")->check(CLI::ExistingFile);
  train->add_flag("--freeze-embeddings", tr.freeze_embeddings, "Keep the embedding table fixed");
  train->add_flag("--sd1-sigmoid", tr.sd1_sigmoid, "Squash the SD1 gate with a sigmoid");
  train->add_flag("--store-raw-cell", tr.store_raw_cell, "D2/SD2 carry the raw cell to the next step");
  train->add_option("--max-decode-len", tr.max_decode_len, "Greedy decoding length cap")->capture_default_str();
  train->add_option("--out", tr.out, "Run directory (default <work>/runs/<model>-fold<k>)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Greedy-decode a split with a trained run and score it");
  eval->add_option("--run", ev.run, "Run directory from train")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--work", ev.work, "Work directory (default: the one recorded by train)");
  eval->add_option("--split", ev.split, "test or validation")->capture_default_str();
  eval->add_flag("--exclude-stopwords", ev.exclude_stopwords, "Ignore function words when counting repetitions");
  eval->add_option("--out", ev.out, "Output directory (default <run>/eval-<split>)");

  SummarizeArgs sm;
  auto* summarize = app.add_subcommand("summarize", "Summarize one query/document pair and print attention traces");
  summarize->add_option("--checkpoint", sm.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  summarize->add_option("--query", sm.query, "Query text")->required();
  summarize->add_option("--document", sm.document, "Document text")->required();
  summarize->add_option("--max-len", sm.max_len, "Length cap (default: the model's)");
  summarize->add_option("--top", sm.top, "Attention entries shown per step")->capture_default_str();

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model on random instances");
  gradcheck->add_option("--dims", gc.dims, "Embedding and hidden size")->capture_default_str();
  gradcheck->add_option("--mode", gc.mode, "Diversity mode")->capture_default_str();
  gradcheck->add_option("--query", gc.query, "Query path: attention, mean or none")->capture_default_str();
  gradcheck->add_option("--seeds", gc.seeds, "Number of random instances")->capture_default_str();
  gradcheck->add_option("--vocab", gc.vocab, "Vocabulary size")->capture_default_str();
  gradcheck->add_option("--max-len", gc.max_len, "Longest query, document and summary")->capture_default_str();
  gradcheck->add_flag("--sd1-sigmoid", gc.sd1_sigmoid, "Squash the SD1 gate with a sigmoid");
  gradcheck->add_flag("--store-raw-cell", gc.store_raw_cell, "D2/SD2 carry the raw cell to the next step");
  gradcheck->add_option("--tolerance", gc.tolerance, "Largest accepted relative error")->capture_default_str();

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Aggregate eval results into the ROUGE and repetition tables");
  report->add_option("--inputs", rp.inputs, "Directories (searched recursively) or metrics.json files")
      ->required()
      ->expected(1, -1);
  report->add_option("--split", rp.split, "Which split's metrics to aggregate")->capture_default_str();
  report->add_option("--out", rp.out, "Directory for report.txt, report.json and a manifest");

  auto usage_failure = [&](const std::string& message, const CLI::App* scope) {
    err << "error: " << message << "\n\n" << (scope ? scope->help() : app.help());
    return 2;
  };
  auto active = [&]() -> const CLI::App* {
    for (const auto* sub : app.get_subcommands()) return sub;
    return nullptr;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto* scope = active();
    out << (scope ? scope->help() : app.help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (argc > 1 && argv[1][0] != '-' && active() == nullptr) {
      return usage_failure(std::string("unknown subcommand '") + argv[1] + "'", nullptr);
    }
    return usage_failure(e.what(), active());
  }

  const auto args = args_of(argc, argv);
  const CLI::App* scope = active();
  try {
    if (*prepare) return cmd_prepare(prep, args, out);
    if (*train) return cmd_train(tr, args, out, err);
    if (*eval) return cmd_eval(ev, args, out);
    if (*summarize) return cmd_summarize(sm, out);
    if (*gradcheck) return cmd_gradcheck(gc, out);
    if (*report) return cmd_report(rp, args, out);
  } catch (const UsageError& e) {
    return usage_failure(e.what(), scope);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return usage_failure("no subcommand given", nullptr);
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace divsum

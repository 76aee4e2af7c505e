#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "divsum/cli.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kToy = std::string(DIVSUM_TEST_DATA) + "/toy20.jsonl";

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "divsum");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int status = divsum::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {status, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

nlohmann::json manifest_of(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "manifest.json")); }

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit with status 2 and print usage") {
  auto none = cli({});
  CHECK(none.status == 2);
  CHECK(none.err.find("Usage") != std::string::npos);

  auto unknown = cli({"frobnicate"});
  CHECK(unknown.status == 2);
  CHECK(unknown.err.find("unknown subcommand 'frobnicate'") != std::string::npos);
  CHECK(unknown.err.find("gradcheck") != std::string::npos);

  auto bad_flag = cli({"gradcheck", "--no-such-flag"});
  CHECK(bad_flag.status == 2);
  CHECK(bad_flag.err.find("--no-such-flag") != std::string::npos);

  auto bad_mode = cli({"gradcheck", "--mode", "D9"});
  CHECK(bad_mode.status == 2);
  CHECK(bad_mode.err.find("D9") != std::string::npos);

  auto help = cli({"--help"});
  CHECK(help.status == 0);
  CHECK(help.out.find("summarize") != std::string::npos);
}

TEST_CASE("gradcheck prints the worst error and fails above tolerance") {
  auto ok = cli({"gradcheck", "--dims", "3", "--mode", "D2", "--seeds", "2"});
  CHECK(ok.status == 0);
  CHECK(ok.out.find("max relative error") != std::string::npos);
  CHECK(ok.out.find("PASS") != std::string::npos);

  auto strict = cli({"gradcheck", "--dims", "3", "--mode", "SD1", "--seeds", "1", "--tolerance", "1e-300"});
  CHECK(strict.status == 1);
  CHECK(strict.out.find("FAIL") != std::string::npos);
}

TEST_CASE("prepare, train, eval, report and summarize work together") {
  const fs::path work = scratch("divsum_cli_work");
  auto prep = cli({"prepare", "--data", kToy, "--out", work.string(), "--folds", "2", "--seed", "7", "--min-count", "1"});
  REQUIRE(prep.status == 0);
  CHECK(fs::exists(work / "folds.json"));
  CHECK(fs::exists(work / "vocab" / "fold0.txt"));
  CHECK(fs::exists(work / "vocab" / "fold1.txt"));
  auto pm = manifest_of(work);
  CHECK(pm.at("status") == "completed");
  CHECK(pm.at("seed") == 7);

  const fs::path run = work / "runs" / "first";
  const std::vector<std::string> train_args = {"train",  "--work", work.string(), "--fold", "0", "--mode", "D2",
                                               "--hidden", "8",    "--embed-dim", "8", "--batch", "4", "--epochs",
                                               "2",      "--out",  run.string()};
  auto trained = cli(train_args);
  REQUIRE(trained.status == 0);
  CHECK(trained.err.find("epoch 2") != std::string::npos);
  CHECK(fs::exists(run / "checkpoint.bin"));
  CHECK(slurp(run / "curves.csv").rfind("epoch,train_loss,val_rouge_l\n1,", 0) == 0);
  auto tm = manifest_of(run);
  CHECK(tm.at("seed") == 0);
  CHECK(tm.at("config").at("model").at("diversity") == "D2");
  CHECK(tm.at("results").at("epochs_run") == 2);

  // Replaying the recorded arguments reproduces the checkpoint byte for byte.
  const std::string first = slurp(run / "checkpoint.bin");
  auto replay_args = tm.at("argv").get<std::vector<std::string>>();
  replay_args.erase(replay_args.begin());
  REQUIRE(cli(replay_args).status == 0);
  CHECK(slurp(run / "checkpoint.bin") == first);

  auto evaluated = cli({"eval", "--run", run.string()});
  REQUIRE(evaluated.status == 0);
  const auto metrics = nlohmann::json::parse(slurp(run / "eval-test" / "metrics.json"));
  CHECK(metrics.at("label") == "D2");
  CHECK(metrics.at("instances") == 10);
  CHECK(slurp(run / "eval-test" / "instances.csv").rfind("id,rouge1,rouge2,rougeL,repeated_flag,prediction\n", 0) ==
        0);
  CHECK(manifest_of(run / "eval-test").at("command") == "eval");

  const fs::path report_dir = work / "report";
  auto reported = cli({"report", "--inputs", work.string(), "--out", report_dir.string()});
  REQUIRE(reported.status == 0);
  CHECK(reported.out.find("SD2") != std::string::npos);
  CHECK(reported.out.find("1/2 INCOMPLETE") != std::string::npos);
  CHECK(fs::exists(report_dir / "report.txt"));
  CHECK(manifest_of(report_dir).at("command") == "report");

  auto summary = cli({"summarize", "--checkpoint", (run / "checkpoint.bin").string(), "--query",
                      "Should zoos be closed?", "--document", "Zoos breed endangered species.", "--max-len", "3"});
  REQUIRE(summary.status == 0);
  CHECK(summary.out.rfind("summary:", 0) == 0);
  CHECK(summary.out.find("step 1 ") != std::string::npos);
  CHECK(summary.out.find("document ") != std::string::npos);

  for (const auto& entry : fs::recursive_directory_iterator(work)) {
    if (!entry.is_directory()) continue;
    const bool has_outputs = fs::exists(entry.path() / "checkpoint.bin") || fs::exists(entry.path() / "metrics.json") ||
                             fs::exists(entry.path() / "report.txt");
    if (has_outputs) CHECK(fs::exists(entry.path() / "manifest.json"));
  }

  auto empty = cli({"report", "--inputs", (work / "vocab").string()});
  CHECK(empty.status == 1);
  auto missing = cli({"train", "--work", (work / "nope").string(), "--fold", "0"});
  CHECK(missing.status == 2);
  auto bad_fold = cli({"train", "--work", work.string(), "--fold", "5"});
  CHECK(bad_fold.status == 2);
  fs::remove_all(work);
}

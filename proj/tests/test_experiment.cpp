#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sys/wait.h>

#include "bil/datagen.hpp"
#include "bil/experiment.hpp"

namespace bil {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bil_experiment_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string field_of(const json& user) {
  try {
    (void)resolve_config(user);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

TEST(Config, DefaultsResolveWithDerivedVocabulary) {
  const json cfg = resolve_config(json::object());
  EXPECT_EQ(cfg["geometry"]["N"], 65);
  EXPECT_EQ(cfg["experiment"], "train");
  EXPECT_EQ(cfg["train"]["eta"], 0.2);
}

TEST(Config, UnknownKeysAndTypeMismatchesNameTheField) {
  EXPECT_EQ(field_of({{"geometry", {{"depth", 3}}}}), "geometry.depth");
  EXPECT_EQ(field_of({{"bogus", 1}}), "bogus");
  EXPECT_EQ(field_of({{"geometry", {{"d", "big"}}}}), "geometry.d");
  EXPECT_EQ(field_of({{"train", {{"eta", -1.0}}}}), "train.eta");
  EXPECT_EQ(field_of({{"train", {{"momentum", 1.0}}}}), "train.momentum");
  EXPECT_EQ(field_of({{"train", {{"mask", "some"}}}}), "train.mask");
  EXPECT_EQ(field_of({{"train", {{"freeze", {{"W_Q", 3}}}}}}), "train.freeze.W_Q");
  EXPECT_EQ(field_of({{"experiment", "nope"}}), "experiment");
  EXPECT_EQ(field_of({{"geometry", {{"N", 10}}}}), "geometry.N");
  EXPECT_EQ(field_of({{"markov", {{"source", "corpus"}}}}), "markov.corpus_path");
}

TEST(Config, OverridesParseJsonOrKeepStrings) {
  json doc = json::object();
  apply_override(doc, "train.eta", "0.5");
  apply_override(doc, "train.mask", "in_context_only");
  apply_override(doc, "geometry.use_ff", "false");
  EXPECT_EQ(doc["train"]["eta"], 0.5);
  EXPECT_EQ(doc["train"]["mask"], "in_context_only");
  EXPECT_EQ(doc["geometry"]["use_ff"], false);
  EXPECT_THROW(apply_override(doc, "train..eta", "1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "train.eta.x", "1"), ConfigError);
  EXPECT_NO_THROW(resolve_config(doc));
}

TEST(Config, SweepRequiresValues) {
  json user = {{"experiment", "sweep"}};
  EXPECT_EQ(field_of(user), "sweep.values");
  user["sweep"] = {{"values", {1, 2}}, {"axis", "n_batches"}, {"experiment", "train"}};
  EXPECT_EQ(field_of(user), "sweep.axis");
}

TEST(Experiment, DataStatsOnCorpus) {
  const fs::path dir = scratch("data_stats");
  std::ofstream(dir / "corpus.txt") << "ababab";
  const json cfg = resolve_config({{"experiment", "data_stats"},
                                   {"markov", {{"source", "corpus"}, {"corpus_path", (dir / "corpus.txt").string()}}}});
  EXPECT_EQ(cfg["geometry"]["N"], 2);
  const json s = run_experiment(cfg, dir / "out");
  EXPECT_EQ(s["N"], 2);
  EXPECT_NEAR(s["entropy_rate"].get<double>(), 0.0, 1e-12);
  const json markov = json::parse(slurp(dir / "out" / "markov.json"));
  EXPECT_EQ(markov_from_json(markov).pi_b(0, 1), 1.0);
  EXPECT_TRUE(fs::exists(dir / "out" / "resolved_config.json"));
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
}

TEST(Experiment, TrainRerunIsByteIdentical) {
  const fs::path dir = scratch("rerun");
  const json user = {{"experiment", "train"},
                     {"geometry", {{"d", 12}, {"T", 16}}},
                     {"markov", {{"N", 6}}},
                     {"triggers", {{"K", 1}}},
                     {"train", {{"iters", 3}, {"batch_size", 4}}}};
  run_experiment(resolve_config(user), dir / "a");
  const json echoed = json::parse(slurp(dir / "a" / "resolved_config.json"));
  EXPECT_FALSE(echoed.contains("output_dir"));
  run_experiment(resolve_config(echoed), dir / "b");
  for (const char* f : {"resolved_config.json", "report.json", "checkpoint.bin", "attention_layer1.pgm",
                        "attention_layer2.pgm"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  const json report = json::parse(slurp(dir / "a" / "report.json"));
  EXPECT_EQ(report["summary"]["iter"], 3);
}

TEST(Experiment, SmallSweepWritesSummary) {
  const fs::path dir = scratch("sweep");
  const json user = {{"experiment", "sweep"},
                     {"markov", {{"source", "uniform"}, {"N", 5}}},
                     {"triggers", {{"K", 1}}},
                     {"geometry", {{"T", 32}}},
                     {"theory", {{"kind", "r1"}, {"n_batches", 2}, {"batch_size", 4}}},
                     {"sweep", {{"experiment", "theory_onestep"}, {"axis", "d"}, {"values", {16, 32}}}}};
  const json s = run_experiment(resolve_config(user), dir);
  EXPECT_EQ(s["points"], 2);
  const std::string csv = slurp(dir / "summary.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "axis,value,kind,recall");
  EXPECT_TRUE(fs::exists(dir / "d_16" / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "d_32" / "resolved_config.json"));
}

TEST(Experiment, GradcheckSummary) {
  const json s = run_experiment(
      resolve_config({{"experiment", "gradcheck"}, {"gradcheck", {{"per_matrix", 5}}}}), scratch("gradcheck"));
  EXPECT_TRUE(s["all"]["passed"].get<bool>());
  EXPECT_EQ(s["all"]["checked"], 20);
}

int run_cli(const std::string& args, const fs::path& dir) {
  const std::string cmd = std::string(BIL_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodesAndErrorDocument) {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "ok.json") << R"({"experiment": "data_stats", "markov": {"N": 4}})";
  std::ofstream(dir / "bad.json") << R"({"geometry": {"depth": 2}})";
  std::ofstream(dir / "broken.json") << "{not json";

  EXPECT_EQ(run_cli("run --config " + (dir / "ok.json").string() + " --out " + (dir / "o").string(), dir), 0);
  const json summary = json::parse(slurp(dir / "stdout.txt"));
  EXPECT_EQ(summary["N"], 4);

  EXPECT_EQ(run_cli("run --config " + (dir / "bad.json").string(), dir), kExitConfig);
  const json err = json::parse(slurp(dir / "stderr.txt"));
  EXPECT_EQ(err["status"], "error");
  EXPECT_EQ(err["field"], "geometry.depth");

  EXPECT_EQ(run_cli("run --config " + (dir / "broken.json").string(), dir), kExitConfig);
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.json").string() + " --set markov.N=0", dir), kExitConfig);
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.json").string() + " --markov.N=7 --out " + (dir / "p").string(), dir),
            0);
  EXPECT_EQ(json::parse(slurp(dir / "stdout.txt"))["N"], 7);
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.json").string() + " --markov.N 9 --seed 3 --out " +
                        (dir / "q").string(),
                    dir),
            0);
  EXPECT_EQ(json::parse(slurp(dir / "q" / "resolved_config.json"))["seed"], 3);
  EXPECT_EQ(run_cli("defaults", dir), 0);
  EXPECT_EQ(json::parse(slurp(dir / "stdout.txt")), default_config());
  EXPECT_NE(run_cli("", dir), 0);
}

TEST(Cli, DivergenceExitsWithNumericalCode) {
  const fs::path dir = scratch("cli_nan");
  std::ofstream(dir / "diverge.json") << R"({"experiment": "train", "geometry": {"d": 8, "T": 8},
      "markov": {"N": 4}, "triggers": {"K": 1},
      "train": {"eta": 1e12, "momentum": 0.0, "iters": 50, "batch_size": 2}})";
  EXPECT_EQ(run_cli("run --config " + (dir / "diverge.json").string() + " --out " + (dir / "o").string(), dir),
            kExitNumerical);
  EXPECT_EQ(json::parse(slurp(dir / "stderr.txt"))["kind"], "numerical");
}

}  // namespace
}  // namespace bil

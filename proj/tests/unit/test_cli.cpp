#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gemnet/cli.hpp"
#include "gemnet/error.hpp"
#include "gemnet/ingest.hpp"
#include "gemnet/model.hpp"
#include "support/tempdir.hpp"

using namespace gemnet;
using gemnet::testing::read_file;
using gemnet::testing::TempDir;
using gemnet::testing::write_file;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

json small_run(const std::string& task, const std::string& output) {
  json model = {{"preset", "compact"}};
  if (task == "od") model["allowed_sources"] = {"uv", "xrf", "icpms"};
  return {{"task", task},
          {"generator", {{"spec", "easy"}, {"n", 40}}},
          {"model", model},
          {"train", {{"epochs", 2}, {"batch", 8}, {"folds", 2}, {"lr", 1e-3}}},
          {"output", output},
          {"seed", 5}};
}

}  // namespace

TEST_CASE("gen-data writes one record per evaluation") {
  TempDir dir("cli_gen");
  const auto path = (dir / "corpus.jsonl").string();
  const auto r = call({"gen-data", "--spec", "easy", "--n", "30", "--out", path, "--seed", "3"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote ") != std::string::npos);
  const auto records = load_corpus(path);
  CHECK(records.size() == count_lines(read_file(path)));
  std::set<std::string> stones;
  for (const auto& rec : records) stones.insert(rec.stone_id);
  CHECK(stones.size() == 30);

  const auto again = (dir / "again.jsonl").string();
  REQUIRE(call({"gen-data", "--spec", "easy", "--n", "30", "--out", again, "--seed", "3"}).code == 0);
  CHECK(read_file(path) == read_file(again));
}

TEST_CASE("argument and config errors exit with 1") {
  TempDir dir("cli_err");
  CHECK(call({}).code == 1);
  CHECK(call({"gen-data", "--spec", "easy", "--n", "3", "--bogus"}).code == 1);
  CHECK(call({"frobnicate"}).code == 1);

  const auto r = call({"gen-data", "--spec", (dir / "none.json").string(), "--n", "3", "--out",
                       (dir / "x.jsonl").string()});
  CHECK(r.code != 0);

  json cfg = small_run("td", (dir / "td").string());
  cfg["model"]["allowed_sources"] = {"uv", "ftir", "xrf"};
  write_file(dir / "td.json", cfg.dump());
  const auto gated = call({"train", "--config", (dir / "td.json").string()});
  CHECK(gated.code == 1);
  CHECK(gated.err.find("XRF is not a permitted input") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "td"));

  json both = small_run("od", (dir / "both").string());
  both["corpus"] = "c.jsonl";
  write_file(dir / "both.json", both.dump());
  CHECK(call({"train", "--config", (dir / "both.json").string()}).code == 1);

  write_file(dir / "broken.json", "{not json");
  CHECK(call({"train", "--config", (dir / "broken.json").string()}).code == 1);
  CHECK(call({"train", "--config", (dir / "absent.json").string()}).code == 1);

  const auto missing = call({"predict", "--checkpoint", (dir / "none.bin").string(), "--stone",
                             (dir / "s.jsonl").string(), "--mode", "mode2"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("calibration.json") != std::string::npos);
}

TEST_CASE("prep applies the per-source rules") {
  TempDir dir("cli_prep");
  std::vector<double> uv(kUvLength, 0.2);
  json xrf = json::object();
  for (auto name : xrf_manifest()) xrf[std::string(name)] = 5.0;
  xrf["Al2O3"] = 980000.0;
  std::string text;
  for (int i = 0; i < 4; ++i) {
    json j = {{"stone_id", "S" + std::to_string(3 - i)}, {"evaluation_time", 0},
              {"origin", "burma"}, {"uv", {uv}}, {"xrf", xrf}};
    if (i == 1) j["xrf"]["Fe2O3"] = 50000.0;       // XRF rejected, UV kept
    if (i == 2) j["uv"][0][5] = -1.0;              // UV rejected, XRF kept
    if (i == 3) {                                  // both rejected: dropped
      j["xrf"]["Cr2O3"] = 20000.0;
      j["uv"][0][0] = -0.5;
    }
    text += j.dump() + "\n";
  }
  write_file(dir / "raw.jsonl", text);
  const auto out = (dir / "prepared.jsonl").string();
  const auto r = call({"prep", "--in", (dir / "raw.jsonl").string(), "--out", out});
  REQUIRE(r.code == 0);
  CHECK(r.out == "records in=4 out=3 dropped=1 rejected uv=2 ftir=0 xrf=2\n");
  const auto records = load_corpus(out);
  REQUIRE(records.size() == 3);
  CHECK(records[0].stone_id == "S1");
  CHECK_FALSE(records[0].uv);
  CHECK(records[1].stone_id == "S2");
  CHECK_FALSE(records[1].xrf);
  CHECK(records[2].stone_id == "S3");
  CHECK((records[2].uv && records[2].xrf));
}

TEST_CASE("run config round trip and seeding") {
  TempDir dir("cli_cfg");
  const json j = small_run("od", "runs/a");
  const auto cfg = run_config_from_json(j.dump(), dir.path());
  CHECK(cfg.task == Task::OD);
  CHECK(cfg.generator_spec == std::optional<std::string>("easy"));
  CHECK(cfg.generator_n == 40);
  CHECK(cfg.train.epochs == 2);
  CHECK(cfg.model.hidden == ModelConfig::compact(Task::OD).hidden);
  CHECK_FALSE(cfg.model.allows(Source::FTIR));
  const auto back = run_config_from_json(run_config_to_json(cfg), dir.path());
  CHECK(run_config_to_json(back) == run_config_to_json(cfg));

  auto a = cfg, b = cfg;
  apply_seed(a);
  apply_seed(b);
  CHECK(a.model.seed == b.model.seed);
  CHECK(a.model.seed != a.train.seed);
  b.seed = 6;
  apply_seed(b);
  CHECK(a.model.seed != b.model.seed);

  json bad = j;
  bad["epochz"] = 3;
  CHECK_THROWS_AS(run_config_from_json(bad.dump(), dir.path()), Error);
  json corpus = j;
  corpus.erase("generator");
  corpus["corpus"] = "data/c.jsonl";
  CHECK(run_config_from_json(corpus.dump(), dir.path()).corpus == dir.path() / "data/c.jsonl");
}

TEST_CASE("relative outputs honour GEMNET_OUTPUT_ROOT") {
  TempDir dir("cli_root");
  const char* previous = std::getenv("GEMNET_OUTPUT_ROOT");
  const std::string saved = previous ? previous : "";
  setenv("GEMNET_OUTPUT_ROOT", dir.path().c_str(), 1);
  CHECK(output_path("a/b.jsonl") == dir.path() / "a/b.jsonl");
  CHECK(output_path("/abs/b.jsonl") == std::filesystem::path("/abs/b.jsonl"));
  REQUIRE(call({"gen-data", "--spec", "easy", "--n", "2", "--out", "sub/c.jsonl"}).code == 0);
  CHECK(std::filesystem::exists(dir / "sub/c.jsonl"));
  if (previous)
    setenv("GEMNET_OUTPUT_ROOT", saved.c_str(), 1);
  else
    unsetenv("GEMNET_OUTPUT_ROOT");
  CHECK(output_path("a/b.jsonl") == std::filesystem::path("a/b.jsonl"));
}

TEST_CASE("train, evaluate, calibrate, predict and consistency end to end") {
  TempDir dir("cli_e2e");
  const auto run_a = (dir / "a").string(), run_b = (dir / "b").string();
  write_file(dir / "run.json", small_run("od", run_a).dump());
  const auto trained = call({"train", "--config", (dir / "run.json").string()});
  REQUIRE_MESSAGE(trained.code == 0, trained.err);
  CHECK(trained.out.rfind("mode,coverage,accuracy,accepted,total,inconsistent_pairs\n", 0) == 0);
  CHECK(count_lines(trained.out) == 4);
  for (const char* f : {"run.json", "corpus.jsonl", "predictions.csv", "fold_0/checkpoint.bin",
                        "fold_1/calibration.json", "fold_1/train_predictions.csv"})
    CHECK_MESSAGE(std::filesystem::exists(dir / "a" / f), f);

  // The same config with a different output gives identical artifacts.
  const auto again = call({"train", "--config", (dir / "run.json").string(), "--out", run_b,
                           "--deterministic"});
  REQUIRE(again.code == 0);
  CHECK(again.out == trained.out);
  for (const char* f : {"predictions.csv", "fold_0/checkpoint.bin", "fold_1/calibration.json",
                        "fold_0/val_trace.csv", "corpus.jsonl"})
    CHECK_MESSAGE(read_file(dir / "a" / f) == read_file(dir / "b" / f), f);

  const auto evaluated = call({"evaluate", "--run", run_a});
  REQUIRE(evaluated.code == 0);
  CHECK(evaluated.out == trained.out);

  const auto profile = (dir / "profile.json").string();
  const auto calibrated =
      call({"calibrate", "--predictions", (dir / "a/fold_0/train_predictions.csv").string(),
            "--task", "od", "--mode", "mode1", "--out", profile});
  REQUIRE_MESSAGE(calibrated.code == 0, calibrated.err);
  CHECK(calibrated.out.rfind("mode mode1 threshold ", 0) == 0);
  CHECK(std::filesystem::exists(profile));

  const auto ckpt = (dir / "a/fold_0/checkpoint.bin").string();
  const auto corpus = (dir / "a/corpus.jsonl").string();
  const auto predicted = call({"predict", "--checkpoint", ckpt, "--stone", corpus, "--mode", "mode1"});
  REQUIRE_MESSAGE(predicted.code == 0, predicted.err);
  std::istringstream lines(predicted.out);
  std::string header, row;
  std::getline(lines, header);
  std::string expected = "stone_id,evaluation_time,predicted,confidence";
  for (std::size_t c = 0; c < kNumOrigins; ++c)
    expected += ",p_" + std::string(to_string(static_cast<Origin>(c)));
  CHECK(header == expected + ",decision");
  std::size_t rows = 0;
  while (std::getline(lines, row)) {
    ++rows;
    CHECK(std::count(row.begin(), row.end(), ',') == 8);
    const bool decided = row.ends_with(",accept") || row.ends_with(",abstain");
    CHECK(decided);
  }
  CHECK(rows == load_corpus(corpus).size());

  const auto pairs_csv = (dir / "pairs.csv").string();
  const auto consistency = call({"consistency", "--checkpoint", ckpt, "--corpus", corpus,
                                 "--mode", "mode2", "--out", pairs_csv});
  REQUIRE_MESSAGE(consistency.code == 0, consistency.err);
  CHECK(consistency.out.rfind("pairs ", 0) == 0);
  CHECK(read_file(pairs_csv).rfind("stone_id,time_a,time_b,label_a,label_b,outcome\n", 0) == 0);
}

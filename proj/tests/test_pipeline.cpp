/*
 * Copyright 2026 The SeqMoE Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "seqmoe/config.hpp"
#include "seqmoe/pipeline.hpp"

using namespace seqmoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& child) const {
    return (path / child).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("empty config text yields the documented defaults") {
  RunConfig c = parse_config_text("");
  CHECK(c.epochs == 40);
  CHECK(c.lr == doctest::Approx(5e-5));
  CHECK(c.bottleneck == 64);
  CHECK(c.max_item_tokens == 30);
  CHECK(c.n_s == 1);
  CHECK(c.n_cl == 5);
  CHECK(c.tau == 1.0);
  CHECK(c.replace_every == 1);
  CHECK(c.warmup_frac == doctest::Approx(0.06));
  CHECK(c.lambda1 == doctest::Approx(0.1));
  CHECK(c.lambda2 == doctest::Approx(1e-6));
  CHECK(c.lambda3 == doctest::Approx(0.001));
  CHECK(c.batch_size == 5);
  CHECK(c.bo_iterations == 30);
  CHECK(c.bo_subset == doctest::Approx(0.04));
  CHECK(c.cf_mode == "joint");
  CHECK(c.prompt_text == "Give the ID of the item described by:");
}

TEST_CASE("config parsing: values, comments, rejections") {
  RunConfig c = parse_config_text(
      "# comment\n"
      "lambda1 = 0.1\n"
      "epochs=7\n"
      "\n"
      "cf_mode=frozen\n");
  CHECK(c.lambda1 == doctest::Approx(0.1));
  CHECK(c.epochs == 7);
  CHECK(c.cf_mode == "frozen");

  // range violation names the key
  try {
    (void)parse_config_text("epochs=-3\n");
    FAIL("expected a range error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("epochs") != std::string::npos);
  }
  CHECK_THROWS(parse_config_text("no_such_key=1\n"));
  CHECK_THROWS(parse_config_text("lambda1=abc\n"));
  CHECK_THROWS(parse_config_text("bogus line without equals\n"));
  CHECK_THROWS(parse_config_text("tau=0\n"));
  CHECK_THROWS(parse_config_text("cf_mode=sometimes\n"));
  CHECK_THROWS(parse_config_text("dim=9\nheads=2\n"));
}

TEST_CASE("config write/parse round trip") {
  RunConfig c;
  c.epochs = 13;
  c.lr = 3.25e-4;
  c.lambda2 = 1e-6;
  c.bo_subset = 0.2;
  c.genome_bits = "010110";
  c.items_path = "/tmp/items.jsonl";
  c.seed = 777;
  RunConfig back = parse_config_text(write_config(c));
  CHECK(write_config(back) == write_config(c));
  CHECK(back.epochs == c.epochs);
  CHECK(back.lr == c.lr);
  CHECK(back.lambda2 == c.lambda2);
  CHECK(back.genome_bits == c.genome_bits);
  CHECK(back.seed == c.seed);
}

TEST_CASE("config hash covers settings but not the seed") {
  RunConfig a, b;
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 999;
  b.out_dir = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  b.epochs = 39;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("synthetic corpus: row counts, determinism, planted successor mass") {
  TempDir dir("seqmoe_synth_test");
  const std::string items = dir.str("items.jsonl");
  const std::string inter = dir.str("interactions.jsonl");
  pipeline::make_synthetic_corpus(200, 500, 11, items, inter);

  std::size_t item_rows = 0, user_rows = 0;
  {
    std::ifstream f(items);
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) ++item_rows;
  }
  std::map<std::string, std::map<std::string, int>> transitions;
  {
    std::ifstream f(inter);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      ++user_rows;
      auto row = nlohmann::json::parse(line);
      auto ids = row.at("items").get<std::vector<std::string>>();
      for (std::size_t i = 0; i + 1 < ids.size(); ++i)
        ++transitions[ids[i]][ids[i + 1]];
    }
  }
  CHECK(item_rows == 200);
  CHECK(user_rows == 500);

  // empirical frequency of each item's modal successor aggregates to ~0.6
  double modal = 0.0, total = 0.0;
  for (const auto& [src, dsts] : transitions) {
    int best = 0, sum = 0;
    for (const auto& [dst, n] : dsts) {
      best = std::max(best, n);
      sum += n;
    }
    modal += best;
    total += sum;
  }
  CHECK(std::abs(modal / total - 0.6) <= 0.05);

  // determinism
  const std::string items2 = dir.str("items2.jsonl");
  const std::string inter2 = dir.str("interactions2.jsonl");
  pipeline::make_synthetic_corpus(200, 500, 11, items2, inter2);
  CHECK(slurp(items) == slurp(items2));
  CHECK(slurp(inter) == slurp(inter2));

  CHECK_THROWS(pipeline::make_synthetic_corpus(10, 5, 1, items2, inter2));
}

TEST_CASE("genome file round trip") {
  TempDir dir("seqmoe_genome_test");
  model::Genome g;
  g.bits = {1, 0, 0, 1, 1, 0};
  pipeline::save_genome(g, 2, dir.str("genome.json"), "hash", 5);
  model::Genome back = pipeline::load_genome(dir.str("genome.json"));
  CHECK(back == g);
  auto j = nlohmann::json::parse(slurp(dir.str("genome.json")));
  CHECK(j.at("layout") == "(causal,context,rec) per layer");
  CHECK(j.at("r") == 2);
  CHECK(j.at("config_hash") == "hash");
  CHECK(j.at("seed") == 5);
}

TEST_CASE("metrics file carries provenance and parses back") {
  TempDir dir("seqmoe_metrics_test");
  evalh::MetricsReport r;
  r.mrr = 0.5;
  r.recall = 0.75;
  r.ndcg = 0.6;
  r.n = 10;
  r.count = 12;
  pipeline::save_metrics(r, "test", dir.str("metrics.json"), "cfg", 9, "gen");
  auto j = nlohmann::json::parse(slurp(dir.str("metrics.json")));
  CHECK(j.at("split") == "test");
  CHECK(j.at("mrr") == doctest::Approx(0.5));
  CHECK(j.at("recall") == doctest::Approx(0.75));
  CHECK(j.at("count") == 12);
  CHECK(j.at("seed") == 9);
  CHECK(j.at("config_hash") == "cfg");
  CHECK(j.at("genome_hash") == "gen");
}

TEST_CASE("output lock is exclusive") {
  TempDir dir("seqmoe_lock_test");
  auto lock = std::make_unique<pipeline::OutputLock>(dir.path.string());
  CHECK_THROWS(pipeline::OutputLock(dir.path.string()));
  lock.reset();
  CHECK_NOTHROW(pipeline::OutputLock(dir.path.string()));
}

TEST_CASE("missing prerequisites name the producing stage") {
  TempDir dir("seqmoe_stage_test");
  RunConfig c;
  c.out_dir = dir.str("out");
  c.items_path = dir.str("missing_items.jsonl");
  c.interactions_path = dir.str("missing_interactions.jsonl");
  try {
    pipeline::run_stage(c, pipeline::Stage::kSearch);
    FAIL("expected a stage error");
  } catch (const pipeline::StageError& e) {
    CHECK(std::string(e.what()).find("ingest") != std::string::npos);
    CHECK(e.stage == pipeline::Stage::kSearch);
  }
  try {
    pipeline::run_stage(c, pipeline::Stage::kEval);
    FAIL("expected a stage error");
  } catch (const pipeline::StageError& e) {
    CHECK(std::string(e.what()).find("stage eval") != std::string::npos);
  }
}

TEST_CASE("mini pipeline: stage flow, genome override, deterministic metrics") {
  TempDir dir("seqmoe_mini_pipeline");
  RunConfig c;
  c.items_path = dir.str("items.jsonl");
  c.interactions_path = dir.str("interactions.jsonl");
  c.out_dir = dir.str("out");
  c.synth_items = 24;
  c.synth_users = 30;
  c.dim = 8;
  c.layers = 2;
  c.bottleneck = 4;
  c.cf_dim = 4;
  c.max_stream = 96;
  c.epochs = 1;
  c.batch_size = 4;
  c.lr = 1e-3;
  c.n_cl = 2;
  c.genome_bits = "010101";  // explicit override: the search stage is skipped
  c.seed = 123;

  pipeline::make_synthetic_corpus(c.synth_items, c.synth_users, c.seed,
                                  c.items_path, c.interactions_path);
  pipeline::run_pipeline(c, {pipeline::Stage::kIngest,
                             pipeline::Stage::kHardSamples,
                             pipeline::Stage::kSearch, pipeline::Stage::kTrain,
                             pipeline::Stage::kEval});
  CHECK(fs::exists(pipeline::dataset_path(c)));
  CHECK(fs::exists(pipeline::hard_samples_path(c)));
  CHECK_FALSE(fs::exists(pipeline::genome_path(c)));  // override skipped it
  CHECK(fs::exists(pipeline::checkpoint_bin(c)));
  CHECK(fs::exists(pipeline::losses_csv_path(c)));
  CHECK(fs::exists(pipeline::metrics_path(c)));

  // loss csv has a header plus one row per epoch
  std::istringstream csv(slurp(pipeline::losses_csv_path(c)));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "epoch,l_seq,l_align,l_cl,l_cf,total");
  std::size_t rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == c.epochs);

  const std::string metrics_first = slurp(pipeline::metrics_path(c));

  // identical config + seed reproduces metrics.json bitwise
  RunConfig c2 = c;
  c2.out_dir = dir.str("out2");
  pipeline::run_pipeline(c2, {pipeline::Stage::kIngest,
                              pipeline::Stage::kHardSamples,
                              pipeline::Stage::kTrain, pipeline::Stage::kEval});
  CHECK(slurp(pipeline::metrics_path(c2)) == metrics_first);

  // report mentions the dataset and metrics
  std::string rep = pipeline::report(c);
  CHECK(rep.find("dataset:") != std::string::npos);
  CHECK(rep.find("metrics") != std::string::npos);
}

TEST_CASE("cf frozen mode requires a pre-trained checkpoint") {
  TempDir dir("seqmoe_frozen_pipeline");
  RunConfig c;
  c.items_path = dir.str("items.jsonl");
  c.interactions_path = dir.str("interactions.jsonl");
  c.out_dir = dir.str("out");
  c.synth_items = 20;
  c.synth_users = 16;
  c.dim = 8;
  c.bottleneck = 4;
  c.cf_dim = 4;
  c.epochs = 1;
  c.batch_size = 4;
  c.n_cl = 2;
  c.cf_mode = "frozen";
  c.genome_bits = "000000";
  pipeline::make_synthetic_corpus(c.synth_items, c.synth_users, c.seed,
                                  c.items_path, c.interactions_path);
  pipeline::run_pipeline(c, {pipeline::Stage::kIngest,
                             pipeline::Stage::kHardSamples});
  // train without train-cf fails and names the missing stage
  try {
    pipeline::run_stage(c, pipeline::Stage::kTrain);
    FAIL("expected a stage error");
  } catch (const pipeline::StageError& e) {
    CHECK(std::string(e.what()).find("train-cf") != std::string::npos);
  }
  pipeline::run_stage(c, pipeline::Stage::kTrainCf);
  CHECK_NOTHROW(pipeline::run_stage(c, pipeline::Stage::kTrain));
}

TEST_SUITE_END();

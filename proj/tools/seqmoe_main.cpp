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

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "seqmoe/config.hpp"
#include "seqmoe/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "random seed (overrides config)");
}

seqmoe::RunConfig resolve(const CommonOpts& opts) {
  seqmoe::RunConfig config = opts.config_path.empty()
                                 ? seqmoe::RunConfig{}
                                 : seqmoe::parse_config(opts.config_path);
  if (!opts.out_dir.empty()) config.out_dir = opts.out_dir;
  if (opts.seed >= 0) config.seed = static_cast<std::uint64_t>(opts.seed);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequential recommender with mixture-of-adapter experts"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string stages_arg;

  CLI::App* synth = app.add_subcommand(
      "synth", "generate a synthetic item catalog and interaction log");
  add_common(synth, opts);

  CLI::App* ingest =
      app.add_subcommand("ingest", "build the dataset artifact from jsonl inputs");
  add_common(ingest, opts);

  CLI::App* hard = app.add_subcommand(
      "hard-samples", "build the hard-negative index for contrastive learning");
  add_common(hard, opts);

  CLI::App* traincf = app.add_subcommand(
      "train-cf", "pre-train the collaborative embeddings (for frozen mode)");
  add_common(traincf, opts);

  CLI::App* search = app.add_subcommand(
      "search", "architecture search over the adapter layout");
  add_common(search, opts);

  CLI::App* train = app.add_subcommand("train", "train on the full dataset");
  add_common(train, opts);

  CLI::App* eval = app.add_subcommand("eval", "evaluate on the test split");
  add_common(eval, opts);

  CLI::App* report =
      app.add_subcommand("report", "summarize artifacts in the output directory");
  add_common(report, opts);

  CLI::App* run = app.add_subcommand("run", "run several stages in order");
  add_common(run, opts);
  run->add_option("--stages", stages_arg,
                  "comma-separated subset of "
                  "ingest,hard-samples,train-cf,search,train,eval")
      ->required();

  CLI11_PARSE(app, argc, argv);

  std::string current_stage = "setup";
  try {
    seqmoe::RunConfig config = resolve(opts);
    if (synth->parsed()) {
      current_stage = "synth";
      seqmoe::pipeline::make_synthetic_corpus(
          config.synth_items, config.synth_users, config.seed,
          config.items_path, config.interactions_path);
      std::cout << "wrote " << config.items_path << " and "
                << config.interactions_path << "\n";
    } else if (report->parsed()) {
      current_stage = "report";
      std::cout << seqmoe::pipeline::report(config);
    } else if (run->parsed()) {
      std::vector<seqmoe::pipeline::Stage> stages;
      std::string token;
      std::istringstream in(stages_arg);
      while (std::getline(in, token, ','))
        if (!token.empty())
          stages.push_back(seqmoe::pipeline::stage_from_name(token));
      current_stage = "run";
      seqmoe::pipeline::run_pipeline(config, stages);
    } else {
      seqmoe::pipeline::Stage stage;
      if (ingest->parsed()) stage = seqmoe::pipeline::Stage::kIngest;
      else if (hard->parsed()) stage = seqmoe::pipeline::Stage::kHardSamples;
      else if (traincf->parsed()) stage = seqmoe::pipeline::Stage::kTrainCf;
      else if (search->parsed()) stage = seqmoe::pipeline::Stage::kSearch;
      else if (train->parsed()) stage = seqmoe::pipeline::Stage::kTrain;
      else stage = seqmoe::pipeline::Stage::kEval;
      current_stage = seqmoe::pipeline::stage_name(stage);
      seqmoe::pipeline::run_stage(config, stage);
    }
  } catch (const seqmoe::pipeline::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error in stage " << current_stage << ": " << e.what()
              << "\n";
    return 1;
  }
  return 0;
}

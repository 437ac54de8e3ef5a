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

#ifndef SEQMOE_PIPELINE_HPP
#define SEQMOE_PIPELINE_HPP

#include <stdexcept>
#include <string>
#include <vector>

#include "seqmoe/config.hpp"
#include "seqmoe/evalharness.hpp"
#include "seqmoe/model.hpp"

namespace seqmoe::pipeline {

enum class Stage { kIngest, kHardSamples, kTrainCf, kSearch, kTrain, kEval };

Stage stage_from_name(const std::string& name);
std::string stage_name(Stage stage);

struct StageError : std::runtime_error {
  explicit StageError(Stage stage, const std::string& message)
      : std::runtime_error("stage " + stage_name(stage) + ": " + message),
        stage(stage) {}
  Stage stage;
};

// Artifact locations inside the output directory.
std::string dataset_path(const RunConfig& c);
std::string hard_samples_path(const RunConfig& c);
std::string cf_checkpoint_bin(const RunConfig& c);
std::string cf_checkpoint_manifest(const RunConfig& c);
std::string genome_path(const RunConfig& c);
std::string trace_path(const RunConfig& c);
std::string checkpoint_bin(const RunConfig& c);
std::string checkpoint_manifest(const RunConfig& c);
std::string losses_csv_path(const RunConfig& c);
std::string metrics_path(const RunConfig& c);

void save_genome(const model::Genome& genome, std::size_t replace_every,
                 const std::string& path, const std::string& config_hash,
                 std::uint64_t seed);
model::Genome load_genome(const std::string& path);
std::string genome_hash(const model::Genome& genome);

void save_metrics(const evalh::MetricsReport& report, const std::string& split,
                  const std::string& path, const std::string& config_hash,
                  std::uint64_t seed, const std::string& genome_hash_hex);

// Items follow a seeded first-order Markov chain with transition mass 0.6 to
// a planted successor; items carry 2-4 synthetic attributes.
void make_synthetic_corpus(std::size_t n_items, std::size_t n_users,
                           std::uint64_t seed, const std::string& items_path,
                           const std::string& interactions_path);

// Exclusive ownership of the output directory for the duration of a run.
class OutputLock {
 public:
  explicit OutputLock(const std::string& out_dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string lock_path_;
};

// Runs one stage (takes the output lock).
void run_stage(const RunConfig& config, Stage stage);
// Runs the given stages in dependency order under a single lock.
void run_pipeline(const RunConfig& config, const std::vector<Stage>& stages);

// Human-readable summary of the artifacts present in the output directory.
std::string report(const RunConfig& config);

}  // namespace seqmoe::pipeline

#endif  // SEQMOE_PIPELINE_HPP

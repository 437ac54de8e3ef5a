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

#ifndef SEQMOE_CONFIG_HPP
#define SEQMOE_CONFIG_HPP

#include <cstdint>
#include <string>

namespace seqmoe {

// key=value run configuration. Defaults follow the reference recipe; unknown
// keys are rejected, as are out-of-range values.
struct RunConfig {
  // paths
  std::string items_path = "items.jsonl";
  std::string interactions_path = "interactions.jsonl";
  std::string out_dir = "out";

  // model dimensions
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 1;
  std::size_t bottleneck = 64;
  std::size_t max_item_tokens = 30;  // m
  std::size_t collab_columns = 1;    // K_c
  std::size_t replace_every = 1;     // r
  std::size_t max_stream = 256;
  bool adapter_nonlinearity = false;
  std::string prompt_text = "Give the ID of the item described by:";

  // training
  std::size_t epochs = 40;
  double lr = 5e-5;
  double warmup_frac = 0.06;
  std::size_t batch_size = 5;
  double weight_decay = 0.01;
  std::uint64_t seed = 42;

  // loss weights
  double lambda1 = 0.1;
  double lambda2 = 1e-6;
  double lambda3 = 0.001;
  double tau = 1.0;
  std::size_t n_s = 1;
  std::size_t n_cl = 5;

  // architecture search
  std::size_t bo_iterations = 30;
  std::size_t bo_init_designs = 6;
  double bo_subset = 0.04;  // b, fraction of users used as the search split
  std::size_t bo_epochs = 3;
  std::string genome_bits;  // explicit override skips the search stage

  // collaborative model
  std::size_t cf_dim = 16;
  std::string cf_mode = "joint";
  std::size_t hard_mf_dim = 64;
  double hard_ratio = 0.005;

  // synthetic corpus
  std::size_t synth_items = 200;
  std::size_t synth_users = 1000;
  std::string synth_pattern = "markov";
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

// Every key in sorted order; parse(write(x)) == x.
std::string write_config(const RunConfig& config);

// FNV-1a over the canonical form, excluding the seed (which artifacts carry
// separately).
std::string config_hash(const RunConfig& config);

}  // namespace seqmoe

#endif  // SEQMOE_CONFIG_HPP

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

#ifndef SEQMOE_TRAINER_HPP
#define SEQMOE_TRAINER_HPP

#include <cstdint>
#include <vector>

#include "seqmoe/corpus.hpp"
#include "seqmoe/model.hpp"
#include "seqmoe/objectives.hpp"

namespace seqmoe::train {

// A training stream truncated to the position budget: items to feed, one
// next-item target per position.
struct SeqExample {
  int user_id = -1;
  std::vector<int> items;
  std::vector<int> targets;
};

struct AlignExample {
  int item_id = -1;
};

struct ClExample {
  int user_id = -1;
  std::vector<int> items;  // the (truncated) training stream
  std::size_t anchor_pos = 0;
  int positive = -1;
  std::vector<int> negatives;
};

struct CfExample {
  int user = -1;
  int pos = -1;
  int neg = -1;
};

// One step's worth of work; any section may be empty.
struct TotalLossBatch {
  std::vector<SeqExample> seq;
  std::vector<AlignExample> align;
  std::vector<ClExample> contrastive;
  std::vector<CfExample> cf;
};

// Evaluates l_seq + lambda1 l_align + lambda2 l_cl + lambda3 l_cf on the
// batch (each part a mean over its instances) and, when `with_grad`,
// accumulates gradients for every trainable parameter.
losses::LossBreakdown total_loss_batch(model::Model& m,
                                       const corpus::Dataset& dataset,
                                       const model::Genome& genome,
                                       const TotalLossBatch& batch,
                                       double lambda1, double lambda2,
                                       double lambda3, double tau,
                                       bool with_grad);

SeqExample make_seq_example(const corpus::UserSplit& us,
                            const corpus::Dataset& dataset,
                            std::size_t max_stream);

struct TrainOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 5;
  double lr = 5e-5;
  double warmup_frac = 0.06;
  double weight_decay = 0.01;
  double lambda1 = 0.1;
  double lambda2 = 1e-6;
  double lambda3 = 0.001;
  double tau = 1.0;
  std::size_t n_s = 1;
  std::size_t n_cl = 5;
  std::uint64_t seed = 42;
  bool quiet = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double l_seq = 0.0;
  double l_align = 0.0;
  double l_cl = 0.0;
  double l_cf = 0.0;
  double total = 0.0;
};

// Round-robin task steps (sequence, alignment, contrastive) with the CF term
// every step; an epoch is ceil(#train sequences / batch) steps.
std::vector<EpochLog> train_model(
    model::Model& m, const corpus::Dataset& dataset,
    const corpus::HardSampleIndex& hard_index,
    const corpus::CoOccurrence& cooc, const model::Genome& genome,
    const TrainOptions& options,
    const std::vector<std::size_t>& user_subset = {});

}  // namespace seqmoe::train

#endif  // SEQMOE_TRAINER_HPP

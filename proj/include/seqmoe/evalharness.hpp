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

#ifndef SEQMOE_EVALHARNESS_HPP
#define SEQMOE_EVALHARNESS_HPP

#include <span>
#include <string>
#include <vector>

#include "seqmoe/corpus.hpp"
#include "seqmoe/model.hpp"

namespace seqmoe::evalh {

struct MetricsReport {
  double mrr = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
  int n = 10;
  std::size_t count = 0;
};

// 1-based rank of the ground-truth score with mid-tie handling: rank =
// 1 + #{strictly greater} + #{ties excluding self} / 2. May be fractional.
double rank_ground_truth(std::span<const double> scores, std::size_t truth);

struct MetricTriple {
  double rr = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
};

// rr = 1/rank; recall = [rank <= n]; ndcg = 1/log2(rank + 1) within the
// cutoff (single relevant item, so the ideal DCG is 1).
MetricTriple compute_metrics(double rank, int n);

enum class Split { kValid, kTest };

// Leave-one-out evaluation: rank the held-out item among all items by the
// item projection at the final [SEQ] state of the context stream.
// `user_subset` empty means every user.
MetricsReport evaluate_model(model::Model& m, const model::Genome& genome,
                             const corpus::Dataset& dataset, Split split,
                             int n,
                             const std::vector<std::size_t>& user_subset = {});

}  // namespace seqmoe::evalh

#endif  // SEQMOE_EVALHARNESS_HPP

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

#include "seqmoe/evalharness.hpp"

#include <cmath>
#include <stdexcept>

namespace seqmoe::evalh {

double rank_ground_truth(std::span<const double> scores, std::size_t truth) {
  if (truth >= scores.size())
    throw std::out_of_range("rank_ground_truth: truth index out of range");
  const double s = scores[truth];
  std::size_t greater = 0, ties = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == truth) continue;
    if (scores[i] > s) ++greater;
    else if (scores[i] == s) ++ties;
  }
  return 1.0 + static_cast<double>(greater) + static_cast<double>(ties) / 2.0;
}

MetricTriple compute_metrics(double rank, int n) {
  if (rank < 1.0) throw std::invalid_argument("compute_metrics: rank < 1");
  MetricTriple m;
  m.rr = 1.0 / rank;
  if (rank <= static_cast<double>(n)) {
    m.recall = 1.0;
    m.ndcg = 1.0 / std::log2(rank + 1.0);
  }
  return m;
}

MetricsReport evaluate_model(model::Model& m, const model::Genome& genome,
                             const corpus::Dataset& dataset, Split split,
                             int n,
                             const std::vector<std::size_t>& user_subset) {
  std::vector<std::size_t> users = user_subset;
  if (users.empty()) {
    users.resize(dataset.splits.users.size());
    for (std::size_t i = 0; i < users.size(); ++i) users[i] = i;
  }
  if (users.empty()) throw std::invalid_argument("evaluate_model: empty split");

  MetricsReport report;
  report.n = n;
  for (std::size_t ui : users) {
    const corpus::UserSplit& us = dataset.splits.users[ui];
    const corpus::EvalExample& ex =
        split == Split::kTest ? us.test : us.valid;
    corpus::TokenStream stream =
        corpus::build_sequence_input(ex.context, dataset.sentences);
    const int last_item = ex.context.back();
    auto refs = m.collab_refs(model::Task::kSequence, ex.user_id, last_item);
    model::ForwardPass pass = m.forward(stream, model::Task::kSequence, genome,
                                        refs, /*need_cache=*/false);
    const std::size_t last_seq = pass.stream.seq_positions.back();
    auto scores = m.item_projection(pass.states.row_span(last_seq));
    const double rank =
        rank_ground_truth(scores, static_cast<std::size_t>(ex.target));
    MetricTriple t = compute_metrics(rank, n);
    report.mrr += t.rr;
    report.recall += t.recall;
    report.ndcg += t.ndcg;
    ++report.count;
  }
  report.mrr /= static_cast<double>(report.count);
  report.recall /= static_cast<double>(report.count);
  report.ndcg /= static_cast<double>(report.count);
  return report;
}

}  // namespace seqmoe::evalh

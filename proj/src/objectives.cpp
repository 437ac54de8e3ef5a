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

#include "seqmoe/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "seqmoe/numerics.hpp"

namespace seqmoe::losses {

LossBreakdown total_loss(double l_seq, double l_align, double l_cl,
                         double l_cf, double lambda1, double lambda2,
                         double lambda3) {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
    throw std::invalid_argument("loss weights must be non-negative");
  LossBreakdown b;
  b.l_seq = l_seq;
  b.l_align = l_align;
  b.l_cl = l_cl;
  b.l_cf = l_cf;
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.lambda3 = lambda3;
  b.total = l_seq + lambda1 * l_align + lambda2 * l_cl + lambda3 * l_cf;
  return b;
}

double align_loss(model::Model& m, const Tensor2D& h_align_states,
                  const std::vector<int>& item_ids) {
  if (h_align_states.rows() != item_ids.size())
    throw std::invalid_argument("align_loss: one state per item required");
  if (item_ids.empty()) throw std::invalid_argument("align_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    auto probs = m.item_projection(h_align_states.row_span(i));
    sum += num::cross_entropy(probs,
                              static_cast<std::size_t>(item_ids[i]));
  }
  return sum / static_cast<double>(item_ids.size());
}

double seq_loss(model::Model& m, const Tensor2D& h_seq_states,
                const std::vector<int>& targets) {
  if (h_seq_states.rows() != targets.size())
    throw std::invalid_argument("seq_loss: one target slot per state");
  double sum = 0.0;
  std::size_t supervised = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    auto probs = m.item_projection(h_seq_states.row_span(i));
    sum += num::cross_entropy(probs, static_cast<std::size_t>(targets[i]));
    ++supervised;
  }
  if (supervised == 0)
    throw std::invalid_argument("seq_loss: no supervised position");
  return sum / static_cast<double>(supervised);
}

double infonce_loss(std::span<const double> anchor,
                    std::span<const double> positive,
                    const std::vector<std::span<const double>>& negatives,
                    double tau) {
  if (tau <= 0) throw std::invalid_argument("infonce_loss: tau must be > 0");
  if (negatives.empty())
    throw std::invalid_argument("infonce_loss: at least one negative");
  const double s_pos = num::cosine_similarity(anchor, positive) / tau;
  std::vector<double> scores{s_pos};
  for (const auto& n : negatives)
    scores.push_back(num::cosine_similarity(anchor, n) / tau);
  // -log softmax(scores)[0]
  return num::cross_entropy_from_logits(scores, 0);
}

double infonce_loss_grad(std::span<const double> anchor,
                         std::span<const double> positive,
                         const std::vector<std::span<const double>>& negatives,
                         double tau, double scale, std::span<double> d_anchor,
                         std::span<double> d_positive,
                         std::vector<std::span<double>> d_negatives) {
  if (tau <= 0) throw std::invalid_argument("infonce_loss: tau must be > 0");
  if (negatives.empty() || d_negatives.size() != negatives.size())
    throw std::invalid_argument("infonce_loss: negative count mismatch");
  std::vector<double> scores(1 + negatives.size());
  scores[0] = num::cosine_similarity(anchor, positive) / tau;
  for (std::size_t j = 0; j < negatives.size(); ++j)
    scores[j + 1] = num::cosine_similarity(anchor, negatives[j]) / tau;
  std::vector<double> probs;
  double loss = num::cross_entropy_from_logits(scores, 0, &probs);
  // d loss / d score_k = probs_k - [k == 0]
  probs[0] -= 1.0;
  num::cosine_similarity_backward(anchor, positive, scale * probs[0] / tau,
                                  d_anchor, d_positive);
  for (std::size_t j = 0; j < negatives.size(); ++j)
    num::cosine_similarity_backward(anchor, negatives[j],
                                    scale * probs[j + 1] / tau, d_anchor,
                                    d_negatives[j]);
  return loss;
}

namespace {
double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
}  // namespace

double bpr_loss(std::span<const double> user, std::span<const double> pos,
                std::span<const double> neg) {
  const double gap = dot(user, pos) - dot(user, neg);
  // -ln sigmoid(gap) = ln(1 + exp(-gap)), computed stably
  return gap > 0 ? std::log1p(std::exp(-gap)) : -gap + std::log1p(std::exp(gap));
}

double bpr_loss_grad(std::span<const double> user, std::span<const double> pos,
                     std::span<const double> neg, double scale,
                     std::span<double> d_user, std::span<double> d_pos,
                     std::span<double> d_neg) {
  const double gap = dot(user, pos) - dot(user, neg);
  const double loss =
      gap > 0 ? std::log1p(std::exp(-gap)) : -gap + std::log1p(std::exp(gap));
  // d loss / d gap = -sigmoid(-gap)
  const double d_gap = -1.0 / (1.0 + std::exp(gap));
  for (std::size_t i = 0; i < user.size(); ++i) {
    d_user[i] += scale * d_gap * (pos[i] - neg[i]);
    d_pos[i] += scale * d_gap * user[i];
    d_neg[i] -= scale * d_gap * user[i];
  }
  return loss;
}

}  // namespace seqmoe::losses

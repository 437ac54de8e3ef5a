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

#ifndef SEQMOE_OBJECTIVES_HPP
#define SEQMOE_OBJECTIVES_HPP

#include <span>
#include <vector>

#include "seqmoe/model.hpp"
#include "seqmoe/tensor.hpp"

namespace seqmoe::losses {

struct LossBreakdown {
  double l_seq = 0.0;
  double l_align = 0.0;
  double l_cl = 0.0;
  double l_cf = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lambda3 = 0.0;
  double total = 0.0;
};

// total = l_seq + lambda1*l_align + lambda2*l_cl + lambda3*l_cf, exactly.
LossBreakdown total_loss(double l_seq, double l_align, double l_cl,
                         double l_cf, double lambda1, double lambda2,
                         double lambda3);

// Mean cross entropy of the item projection at each [ALIGN] state against
// the true item id. One row per item in the batch.
double align_loss(model::Model& m, const Tensor2D& h_align_states,
                  const std::vector<int>& item_ids);

// Mean cross entropy over supervised [SEQ] positions; targets[i] < 0 marks a
// position without a target, which is excluded.
double seq_loss(model::Model& m, const Tensor2D& h_seq_states,
                const std::vector<int>& targets);

// -log f(a,p) / (f(a,p) + sum_j f(a,n_j)) with f(h,h') = exp(sim(h,h')/tau)
// and cosine similarity.
double infonce_loss(std::span<const double> anchor,
                    std::span<const double> positive,
                    const std::vector<std::span<const double>>& negatives,
                    double tau);

// Same, accumulating gradients (scaled by `scale`) into all three states.
double infonce_loss_grad(std::span<const double> anchor,
                         std::span<const double> positive,
                         const std::vector<std::span<const double>>& negatives,
                         double tau, double scale, std::span<double> d_anchor,
                         std::span<double> d_positive,
                         std::vector<std::span<double>> d_negatives);

// -ln sigmoid(<u, pos> - <u, neg>).
double bpr_loss(std::span<const double> user, std::span<const double> pos,
                std::span<const double> neg);
double bpr_loss_grad(std::span<const double> user, std::span<const double> pos,
                     std::span<const double> neg, double scale,
                     std::span<double> d_user, std::span<double> d_pos,
                     std::span<double> d_neg);

}  // namespace seqmoe::losses

#endif  // SEQMOE_OBJECTIVES_HPP

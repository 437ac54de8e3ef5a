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

#ifndef SEQMOE_NUMERICS_HPP
#define SEQMOE_NUMERICS_HPP

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seqmoe/param_store.hpp"
#include "seqmoe/tensor.hpp"

namespace seqmoe::num {

inline constexpr double kLayerNormEps = 1e-5;

// Numerically stable softmax; output is positive and sums to 1.
std::vector<double> softmax(std::span<const double> v);

// -log(dist[target]) for a probability vector.
double cross_entropy(std::span<const double> dist, std::size_t target);

// Cross entropy straight from logits: logsumexp(u) - u[target]. The softmax
// probabilities are written to `probs` when non-null (for the backward pass).
double cross_entropy_from_logits(std::span<const double> logits,
                                 std::size_t target,
                                 std::vector<double>* probs = nullptr);

// Throws std::domain_error if either vector has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// d(cos(a,b))/da and /db scaled by `d_sim`, accumulated into da/db.
void cosine_similarity_backward(std::span<const double> a,
                                std::span<const double> b, double d_sim,
                                std::span<double> da, std::span<double> db);

// Standard layer norm over one vector: gain * (x - mean)/sqrt(var + eps) + bias.
std::vector<double> layer_norm(std::span<const double> x,
                               std::span<const double> gain,
                               std::span<const double> bias,
                               double eps = kLayerNormEps);

struct LayerNormCache {
  Tensor2D normalized;           // x-hat per row
  std::vector<double> inv_std;   // per row
};

// Row-wise layer norm over a T x d matrix with forward cache for backprop.
Tensor2D layer_norm_rows(const Tensor2D& x, const Tensor2D& gain,
                         const Tensor2D& bias, LayerNormCache* cache);
// Accumulates dx given the upstream gradient; gain/bias are frozen backbone
// tensors here so only the input gradient is produced.
void layer_norm_rows_backward(const Tensor2D& d_out, const Tensor2D& gain,
                              const LayerNormCache& cache, Tensor2D& dx);

double gelu(double x);
double gelu_grad(double x);

// Finite-difference gradient checker. `loss_fn(with_grad)` must return the
// loss; when `with_grad` it must also leave analytic gradients in `params`
// (on top of zeroed slots). Evaluations must be deterministic: the checker
// aborts if two plain evaluations disagree.
struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

GradCheckReport check_gradients(const std::function<double(bool)>& loss_fn,
                                ParamStore& params, double h, double tol);

// Linear warmup over the first `warmup_frac` of steps, cosine decay to zero
// afterwards.
struct LrSchedule {
  double peak = 5e-5;
  double warmup_frac = 0.06;
  std::size_t total_steps = 1;
  double at(std::size_t step) const;
};

// Adaptive-moment optimizer with decoupled weight decay. Frozen tensors are
// never touched.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore& params, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<Tensor2D, Tensor2D>> moments_;
};

}  // namespace seqmoe::num

#endif  // SEQMOE_NUMERICS_HPP

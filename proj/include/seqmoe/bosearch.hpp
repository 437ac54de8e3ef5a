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

#ifndef SEQMOE_BOSEARCH_HPP
#define SEQMOE_BOSEARCH_HPP

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace seqmoe::bo {

using BitVector = std::vector<std::uint8_t>;

struct Observation {
  BitVector z;
  double f = 0.0;
};

struct KernelConfig {
  double signal_var = 1.0;
  double lengthscale = 1.0;
  double noise = 1e-4;
  bool optimize = true;    // fit hyper-parameters by marginal likelihood
  double min_noise = 1e-8;
};

// Exact GP regression with an RBF kernel over bit vectors treated as real
// vectors; the prior mean is the observation mean.
class GpPosterior {
 public:
  static GpPosterior fit(const std::vector<Observation>& observations,
                         const KernelConfig& config);

  // (posterior mean, posterior variance >= 0)
  std::pair<double, double> predict(const BitVector& z) const;

  double signal_var() const { return signal_var_; }
  double lengthscale() const { return lengthscale_; }
  double noise() const { return noise_; }

 private:
  std::vector<BitVector> x_;
  std::vector<double> alpha_;           // K^-1 (y - mean)
  std::vector<std::vector<double>> chol_;  // lower Cholesky of K
  double mean_ = 0.0;
  double signal_var_ = 1.0, lengthscale_ = 1.0, noise_ = 1e-4;

  double kernel(const BitVector& a, const BitVector& b) const;
};

// EI for maximization: E[max(f(z) - f_best, 0)] under N(mean, variance).
double expected_improvement(double mean, double variance, double f_best);
double expected_improvement(const GpPosterior& gp, const BitVector& z,
                            double f_best);

using AcquisitionFn = std::function<double(const BitVector&)>;

enum class PoMode { kExact, kMonteCarlo };

struct PoResult {
  double value = 0.0;
  std::vector<double> grad;
};

// PO(theta) = sum_z p(z|theta) alpha(z) with independent Bernoulli bits.
// Exact mode enumerates the design space (requires <= 20 bits); Monte Carlo
// mode uses the score-function estimator alpha(z) * grad log p(z|theta).
PoResult po_and_gradient(const std::vector<double>& theta,
                         const AcquisitionFn& acquisition, PoMode mode,
                         std::size_t samples, std::mt19937_64* rng);

// Gradient ascent on PO in logit space; returns the best theta encountered
// (including theta0).
std::vector<double> optimize_theta(const std::vector<double>& theta0,
                                   const AcquisitionFn& acquisition,
                                   std::size_t steps, double lr, PoMode mode,
                                   std::size_t samples, std::mt19937_64* rng);

struct SearchTracePoint {
  std::size_t iter = 0;
  BitVector z;
  double f = 0.0;
  std::vector<double> theta;  // empty for initial designs
  double best_so_far = 0.0;
  bool failed = false;
};

struct SearchResult {
  BitVector best_z;
  double best_f = 0.0;
  std::vector<SearchTracePoint> trace;
};

struct SearchOptions {
  std::size_t n_iterations = 30;
  std::size_t init_designs = 6;
  std::uint64_t seed = 0;
  KernelConfig kernel;
  std::size_t theta_steps = 200;
  double theta_lr = 0.25;
  std::size_t exact_limit = 16;   // max bits for exact PO
  std::size_t mc_samples = 2048;  // PO samples beyond the exact limit
};

// Loop: fit GP -> maximize PO(theta) of EI -> sample z ~ p(Z|theta) ->
// evaluate -> extend the dataset. Initial designs are uniform. A failing
// objective records the worst value observed so far and continues.
SearchResult bo_search(const std::function<double(const BitVector&)>& objective,
                       std::size_t n_bits, const SearchOptions& options);

}  // namespace seqmoe::bo

#endif  // SEQMOE_BOSEARCH_HPP

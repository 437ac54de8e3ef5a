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

#include "seqmoe/bosearch.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace seqmoe::bo {

namespace {

double sq_dist(const BitVector& a, const BitVector& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d += diff * diff;
  }
  return d;
}

struct LmlState {
  Eigen::MatrixXd sqd;       // pairwise squared distances
  Eigen::VectorXd centered;  // y - mean
};

Eigen::LLT<Eigen::MatrixXd> robust_llt(const Eigen::MatrixXd& k,
                                       double signal_var) {
  Eigen::MatrixXd kk = k;
  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(kk);
    if (llt.info() == Eigen::Success) return llt;
    jitter = jitter == 0.0 ? 1e-10 * std::max(1.0, signal_var) : jitter * 10.0;
    kk = k + jitter * Eigen::MatrixXd::Identity(k.rows(), k.cols());
  }
  throw std::runtime_error("gp fit: covariance not positive definite");
}

// Log marginal likelihood and its gradient w.r.t. (log sv, log ls, log noise).
double log_marginal(const LmlState& state, double sv, double ls, double noise,
                    Eigen::Vector3d* grad) {
  const auto n = state.sqd.rows();
  Eigen::MatrixXd rbf =
      (state.sqd.array() / (-2.0 * ls * ls)).exp().matrix() * sv;
  Eigen::MatrixXd k = rbf + noise * Eigen::MatrixXd::Identity(n, n);
  auto llt = robust_llt(k, sv);
  Eigen::VectorXd alpha = llt.solve(state.centered);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    logdet += std::log(llt.matrixL()(i, i));
  double lml = -0.5 * state.centered.dot(alpha) - logdet -
               0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  if (grad) {
    Eigen::MatrixXd kinv =
        llt.solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::MatrixXd outer = alpha * alpha.transpose() - kinv;
    // dK/dlog sv = rbf ; dK/dlog ls = rbf .* (sqd / ls^2) ; dK/dlog noise = noise I
    (*grad)(0) = 0.5 * (outer.cwiseProduct(rbf)).sum();
    (*grad)(1) =
        0.5 *
        (outer.cwiseProduct(rbf.cwiseProduct(state.sqd / (ls * ls)))).sum();
    (*grad)(2) = 0.5 * noise * outer.trace();
  }
  return lml;
}

}  // namespace

double GpPosterior::kernel(const BitVector& a, const BitVector& b) const {
  return signal_var_ *
         std::exp(-sq_dist(a, b) / (2.0 * lengthscale_ * lengthscale_));
}

GpPosterior GpPosterior::fit(const std::vector<Observation>& observations,
                             const KernelConfig& config) {
  if (observations.empty())
    throw std::invalid_argument("gp fit: need at least one observation");
  const std::size_t n = observations.size();
  GpPosterior gp;
  gp.x_.reserve(n);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(observations[i].f))
      throw std::invalid_argument("gp fit: non-finite objective value");
    if (observations[i].z.size() != observations[0].z.size())
      throw std::invalid_argument("gp fit: inconsistent design lengths");
    gp.x_.push_back(observations[i].z);
    y(static_cast<Eigen::Index>(i)) = observations[i].f;
  }
  gp.mean_ = y.mean();

  LmlState state;
  state.sqd.resize(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      state.sqd(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          sq_dist(gp.x_[i], gp.x_[j]);
  state.centered = y.array() - gp.mean_;

  double sv = config.signal_var, ls = config.lengthscale, noise = config.noise;
  const double y_var = n > 1 ? state.centered.squaredNorm() / double(n) : 0.0;
  if (config.optimize && n >= 2 && y_var > 1e-14) {
    // Ascend the marginal likelihood in log-parameter space.
    Eigen::Vector3d u(std::log(std::max(y_var, 1e-8)),
                      std::log(std::max(1.0, std::sqrt(double(gp.x_[0].size())) / 2.0)),
                      std::log(std::max(config.min_noise, 1e-3 * y_var)));
    Eigen::Vector3d m = Eigen::Vector3d::Zero(), v = Eigen::Vector3d::Zero();
    Eigen::Vector3d best_u = u;
    double best_lml = -std::numeric_limits<double>::infinity();
    const double lr = 0.05, b1 = 0.9, b2 = 0.999;
    for (int it = 1; it <= 120; ++it) {
      Eigen::Vector3d g;
      double lml = log_marginal(state, std::exp(u(0)), std::exp(u(1)),
                                std::exp(u(2)), &g);
      if (lml > best_lml) {
        best_lml = lml;
        best_u = u;
      }
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      Eigen::Vector3d mhat = m / (1.0 - std::pow(b1, it));
      Eigen::Vector3d vhat = v / (1.0 - std::pow(b2, it));
      for (int i = 0; i < 3; ++i)
        u(i) += lr * mhat(i) / (std::sqrt(vhat(i)) + 1e-8);
      // Keep the noise floor and sane ranges.
      u(2) = std::max(u(2), std::log(config.min_noise));
      u(1) = std::clamp(u(1), std::log(1e-2), std::log(1e3));
      u(0) = std::clamp(u(0), std::log(1e-10), std::log(1e6));
    }
    sv = std::exp(best_u(0));
    ls = std::exp(best_u(1));
    noise = std::exp(best_u(2));
  }
  noise = std::max(noise, config.min_noise);

  gp.signal_var_ = sv;
  gp.lengthscale_ = ls;
  gp.noise_ = noise;

  Eigen::MatrixXd k =
      (state.sqd.array() / (-2.0 * ls * ls)).exp().matrix() * sv +
      noise * Eigen::MatrixXd::Identity(n, n);
  auto llt = robust_llt(k, sv);
  Eigen::VectorXd alpha = llt.solve(state.centered);
  gp.alpha_.assign(alpha.data(), alpha.data() + n);
  Eigen::MatrixXd l = llt.matrixL();
  gp.chol_.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      gp.chol_[i][j] = l(static_cast<Eigen::Index>(i),
                         static_cast<Eigen::Index>(j));
  return gp;
}

std::pair<double, double> GpPosterior::predict(const BitVector& z) const {
  const std::size_t n = x_.size();
  std::vector<double> kstar(n);
  for (std::size_t i = 0; i < n; ++i) kstar[i] = kernel(z, x_[i]);
  double mean = mean_;
  for (std::size_t i = 0; i < n; ++i) mean += kstar[i] * alpha_[i];
  // Forward solve L v = k*.
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = kstar[i];
    for (std::size_t j = 0; j < i; ++j) s -= chol_[i][j] * v[j];
    v[i] = s / chol_[i][i];
  }
  double var = signal_var_;
  for (double vi : v) var -= vi * vi;
  return {mean, std::max(var, 0.0)};
}

double expected_improvement(double mean, double variance, double f_best) {
  const double sigma = std::sqrt(std::max(variance, 0.0));
  const double delta = mean - f_best;
  if (sigma < 1e-12) return std::max(delta, 0.0);
  const double z = delta / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf =
      std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(delta * cdf + sigma * pdf, 0.0);
}

double expected_improvement(const GpPosterior& gp, const BitVector& z,
                            double f_best) {
  auto [mean, var] = gp.predict(z);
  return expected_improvement(mean, var, f_best);
}

PoResult po_and_gradient(const std::vector<double>& theta,
                         const AcquisitionFn& acquisition, PoMode mode,
                         std::size_t samples, std::mt19937_64* rng) {
  const std::size_t n = theta.size();
  PoResult res;
  res.grad.assign(n, 0.0);
  for (double t : theta)
    if (t <= 0.0 || t >= 1.0)
      throw std::invalid_argument("po_and_gradient: theta must be in (0,1)");

  if (mode == PoMode::kExact) {
    if (n > 20)
      throw std::invalid_argument("po_and_gradient: exact mode limited to 20 bits");
    BitVector z(n, 0);
    const std::size_t total = std::size_t{1} << n;
    for (std::size_t code = 0; code < total; ++code) {
      double p = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        z[i] = static_cast<std::uint8_t>((code >> i) & 1u);
        p *= z[i] ? theta[i] : 1.0 - theta[i];
      }
      const double a = acquisition(z);
      res.value += p * a;
      for (std::size_t i = 0; i < n; ++i) {
        // d p(z|theta) / d theta_i = p * (z_i - theta_i)/(theta_i(1-theta_i))
        res.grad[i] +=
            a * p * ((z[i] ? 1.0 : 0.0) - theta[i]) / (theta[i] * (1.0 - theta[i]));
      }
    }
    return res;
  }

  if (rng == nullptr)
    throw std::invalid_argument("po_and_gradient: Monte Carlo mode needs an rng");
  if (samples == 0)
    throw std::invalid_argument("po_and_gradient: samples must be >= 1");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  BitVector z(n, 0);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < n; ++i)
      z[i] = unit(*rng) < theta[i] ? 1 : 0;
    const double a = acquisition(z);
    res.value += a;
    for (std::size_t i = 0; i < n; ++i)
      res.grad[i] += a * ((z[i] ? 1.0 : 0.0) - theta[i]) /
                     (theta[i] * (1.0 - theta[i]));
  }
  res.value /= static_cast<double>(samples);
  for (double& g : res.grad) g /= static_cast<double>(samples);
  return res;
}

namespace {
constexpr double kLogitClamp = 12.0;

double logit(double p) {
  p = std::clamp(p, 1.0 / (1.0 + std::exp(kLogitClamp)),
                 1.0 / (1.0 + std::exp(-kLogitClamp)));
  return std::log(p / (1.0 - p));
}

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }
}  // namespace

std::vector<double> optimize_theta(const std::vector<double>& theta0,
                                   const AcquisitionFn& acquisition,
                                   std::size_t steps, double lr, PoMode mode,
                                   std::size_t samples, std::mt19937_64* rng) {
  const std::size_t n = theta0.size();
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = logit(theta0[i]);

  auto clamp_theta = [&](std::vector<double>& th) {
    for (double& t : th)
      t = std::clamp(t, sigmoid(-kLogitClamp), sigmoid(kLogitClamp));
  };

  std::vector<double> theta = theta0;
  clamp_theta(theta);
  PoResult cur = po_and_gradient(theta, acquisition, mode, samples, rng);
  std::vector<double> best_theta = theta;
  double best_value = cur.value;

  // Scale-free ascent: acquisition values can be arbitrarily small, so raw
  // gradient steps stall. Adam-style normalization keeps logit steps O(lr).
  std::vector<double> m(n, 0.0), v(n, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
  for (std::size_t step = 1; step <= steps; ++step) {
    // A gradient at rounding-noise level means the objective is flat here;
    // normalized steps would amplify the noise into a random walk.
    double gmax = 0.0;
    for (double g : cur.grad) gmax = std::max(gmax, std::abs(g));
    if (gmax <= 1e-12 * std::max(1.0, std::abs(cur.value))) break;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = cur.grad[i] * theta[i] * (1.0 - theta[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / (1.0 - std::pow(b1, double(step)));
      const double vhat = v[i] / (1.0 - std::pow(b2, double(step)));
      u[i] = std::clamp(u[i] + lr * mhat / (std::sqrt(vhat) + eps),
                        -kLogitClamp, kLogitClamp);
      theta[i] = sigmoid(u[i]);
    }
    cur = po_and_gradient(theta, acquisition, mode, samples, rng);
    if (cur.value > best_value) {
      best_value = cur.value;
      best_theta = theta;
    }
  }
  return best_theta;
}

SearchResult bo_search(
    const std::function<double(const BitVector&)>& objective,
    std::size_t n_bits, const SearchOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Observation> data;
  SearchResult result;
  result.best_f = -std::numeric_limits<double>::infinity();

  auto evaluate = [&](const BitVector& z, std::size_t iter,
                      std::vector<double> theta) {
    Observation obs;
    obs.z = z;
    bool failed = false;
    try {
      obs.f = objective(z);
      if (!std::isfinite(obs.f)) throw std::runtime_error("non-finite");
    } catch (...) {
      failed = true;
      obs.f = result.best_f == -std::numeric_limits<double>::infinity()
                  ? 0.0
                  : data.front().f;
      for (const auto& d : data) obs.f = std::min(obs.f, d.f);
    }
    data.push_back(obs);
    if (!failed && obs.f > result.best_f) {
      result.best_f = obs.f;
      result.best_z = z;
    }
    SearchTracePoint tp;
    tp.iter = iter;
    tp.z = z;
    tp.f = obs.f;
    tp.theta = std::move(theta);
    tp.best_so_far = result.best_f;
    tp.failed = failed;
    result.trace.push_back(std::move(tp));
  };

  std::size_t iter = 0;
  for (std::size_t i = 0; i < options.init_designs; ++i, ++iter) {
    BitVector z(n_bits);
    for (auto& bit : z) bit = unit(rng) < 0.5 ? 1 : 0;
    evaluate(z, iter, {});
  }

  const PoMode mode =
      n_bits <= options.exact_limit ? PoMode::kExact : PoMode::kMonteCarlo;
  for (std::size_t n = 0; n < options.n_iterations; ++n, ++iter) {
    if (data.empty()) {
      BitVector z(n_bits);
      for (auto& bit : z) bit = unit(rng) < 0.5 ? 1 : 0;
      evaluate(z, iter, {});
      continue;
    }
    GpPosterior gp = GpPosterior::fit(data, options.kernel);
    double f_best = data[0].f;
    for (const auto& d : data) f_best = std::max(f_best, d.f);

    AcquisitionFn acq;
    std::vector<double> memo;
    if (mode == PoMode::kExact) {
      // Memoize EI over the whole design space once per iteration.
      memo.assign(std::size_t{1} << n_bits,
                  std::numeric_limits<double>::quiet_NaN());
      acq = [&gp, f_best, &memo](const BitVector& z) {
        std::size_t code = 0;
        for (std::size_t i = 0; i < z.size(); ++i)
          if (z[i]) code |= std::size_t{1} << i;
        if (std::isnan(memo[code]))
          memo[code] = expected_improvement(gp, z, f_best);
        return memo[code];
      };
    } else {
      acq = [&gp, f_best](const BitVector& z) {
        return expected_improvement(gp, z, f_best);
      };
    }

    std::vector<double> theta0(n_bits, 0.5);
    std::vector<double> theta =
        optimize_theta(theta0, acq, options.theta_steps, options.theta_lr,
                       mode, options.mc_samples, &rng);
    BitVector z(n_bits);
    for (std::size_t i = 0; i < n_bits; ++i)
      z[i] = unit(rng) < theta[i] ? 1 : 0;
    evaluate(z, iter, theta);
  }
  if (result.best_z.empty() && !data.empty()) {
    // Every evaluation failed; fall back to the first design.
    result.best_z = data.front().z;
    result.best_f = data.front().f;
  }
  return result;
}

}  // namespace seqmoe::bo

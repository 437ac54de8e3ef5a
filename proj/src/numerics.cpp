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

#include "seqmoe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace seqmoe::num {

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double cross_entropy(std::span<const double> dist, std::size_t target) {
  if (target >= dist.size())
    throw std::out_of_range("cross_entropy: target out of range");
  return -std::log(dist[target]);
}

double cross_entropy_from_logits(std::span<const double> logits,
                                 std::size_t target,
                                 std::vector<double>* probs) {
  if (target >= logits.size())
    throw std::out_of_range("cross_entropy: target out of range");
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double u : logits) sum += std::exp(u - mx);
  if (probs) {
    probs->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      (*probs)[i] = std::exp(logits[i] - mx) / sum;
  }
  return std::log(sum) + mx - logits[target];
}

namespace {
double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}
double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
}  // namespace

double cosine_similarity(std::span<const double> a,
                         std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: size mismatch");
  double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0)
    throw std::domain_error("cosine_similarity: zero-norm vector");
  return dot(a, b) / (na * nb);
}

void cosine_similarity_backward(std::span<const double> a,
                                std::span<const double> b, double d_sim,
                                std::span<double> da, std::span<double> db) {
  double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0)
    throw std::domain_error("cosine_similarity: zero-norm vector");
  double ab = dot(a, b);
  double cos = ab / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    da[i] += d_sim * (b[i] / (na * nb) - cos * a[i] / (na * na));
    db[i] += d_sim * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
  }
}

std::vector<double> layer_norm(std::span<const double> x,
                               std::span<const double> gain,
                               std::span<const double> bias, double eps) {
  if (x.size() < 2) throw std::invalid_argument("layer_norm: dimension < 2");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
  return out;
}

Tensor2D layer_norm_rows(const Tensor2D& x, const Tensor2D& gain,
                         const Tensor2D& bias, LayerNormCache* cache) {
  const std::size_t t = x.rows(), d = x.cols();
  Tensor2D out(t, d);
  if (cache) {
    cache->normalized.resize(t, d);
    cache->inv_std.assign(t, 0.0);
  }
  for (std::size_t r = 0; r < t; ++r) {
    const double* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      double xhat = (xr[c] - mean) * inv;
      if (cache) cache->normalized(r, c) = xhat;
      out(r, c) = gain(0, c) * xhat + bias(0, c);
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return out;
}

void layer_norm_rows_backward(const Tensor2D& d_out, const Tensor2D& gain,
                              const LayerNormCache& cache, Tensor2D& dx) {
  const std::size_t t = d_out.rows(), d = d_out.cols();
  const double n = static_cast<double>(d);
  for (std::size_t r = 0; r < t; ++r) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double dxh = d_out(r, c) * gain(0, c);
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * cache.normalized(r, c);
    }
    double inv = cache.inv_std[r];
    for (std::size_t c = 0; c < d; ++c) {
      double dxh = d_out(r, c) * gain(0, c);
      dx(r, c) += inv * (dxh - sum_dxhat / n -
                         cache.normalized(r, c) * sum_dxhat_xhat / n);
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

GradCheckReport check_gradients(const std::function<double(bool)>& loss_fn,
                                ParamStore& params, double h, double tol) {
  double l0 = loss_fn(false);
  double l1 = loss_fn(false);
  if (l0 != l1)
    throw std::runtime_error("check_gradients: loss function is not "
                             "deterministic, aborting");

  params.zero_grads();
  (void)loss_fn(true);

  // Snapshot analytic gradients before finite differencing perturbs state.
  std::map<std::string, Tensor2D> analytic;
  for (const auto& name : params.names())
    analytic.emplace(name, params.param(name).grad);

  GradCheckReport report;
  for (const auto& name : params.names()) {
    Param& p = params.param(name);
    const Tensor2D& g = analytic.at(name);
    if (p.frozen) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (g.data()[i] != 0.0)
          throw std::runtime_error(
              "check_gradients: frozen parameter has nonzero gradient: " +
              name);
      }
      continue;
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      double lp = loss_fn(false);
      p.value.data()[i] = saved - h;
      double lm = loss_fn(false);
      p.value.data()[i] = saved;
      double fd = (lp - lm) / (2.0 * h);
      double a = g.data()[i];
      double abs_err = std::abs(a - fd);
      double rel = abs_err / std::max({std::abs(a), std::abs(fd), 1e-6});
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.max_abs_err = abs_err;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  (void)tol;
  return report;
}

double LrSchedule::at(std::size_t step) const {
  const double total = static_cast<double>(std::max<std::size_t>(total_steps, 1));
  const double warm = std::max(1.0, warmup_frac * total);
  const double s = static_cast<double>(step);
  if (s < warm) return peak * (s + 1.0) / warm;
  double progress = (s - warm) / std::max(1.0, total - warm);
  progress = std::clamp(progress, 0.0, 1.0);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(ParamStore& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    Param& p = params.param(name);
    if (p.frozen) continue;
    auto [it, inserted] = moments_.try_emplace(
        name, std::make_pair(Tensor2D(p.value.rows(), p.value.cols()),
                             Tensor2D(p.value.rows(), p.value.cols())));
    Tensor2D& m = it->second.first;
    Tensor2D& v = it->second.second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double g = p.grad.data()[i];
      m.data()[i] = beta1_ * m.data()[i] + (1.0 - beta1_) * g;
      v.data()[i] = beta2_ * v.data()[i] + (1.0 - beta2_) * g * g;
      double mhat = m.data()[i] / bc1;
      double vhat = v.data()[i] / bc2;
      p.value.data()[i] -=
          lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.value.data()[i]);
    }
  }
}

}  // namespace seqmoe::num

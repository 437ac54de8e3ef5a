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

#include "seqmoe/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace seqmoe {

namespace {

using EMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;

ECMap cmap(const Tensor2D& t) {
  return ECMap(t.data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}

EMap map(Tensor2D& t) {
  return EMap(t.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

void require_shape(bool ok, const char* op) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor2D Tensor2D::gaussian(std::size_t rows, std::size_t cols, double stddev,
                            std::mt19937_64& rng) {
  Tensor2D t(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

bool Tensor2D::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  require_shape(a.cols() == b.rows(), "matmul");
  Tensor2D out(a.rows(), b.cols());
  map(out).noalias() = cmap(a) * cmap(b);
  return out;
}

void add_matmul(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                double alpha) {
  require_shape(a.cols() == b.rows() && out.rows() == a.rows() &&
                    out.cols() == b.cols(),
                "add_matmul");
  map(out).noalias() += alpha * (cmap(a) * cmap(b));
}

void add_matmul_tn(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                   double alpha) {
  require_shape(a.rows() == b.rows() && out.rows() == a.cols() &&
                    out.cols() == b.cols(),
                "add_matmul_tn");
  map(out).noalias() += alpha * (cmap(a).transpose() * cmap(b));
}

void add_matmul_nt(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                   double alpha) {
  require_shape(a.cols() == b.cols() && out.rows() == a.rows() &&
                    out.cols() == b.rows(),
                "add_matmul_nt");
  map(out).noalias() += alpha * (cmap(a) * cmap(b).transpose());
}

void add_row_bias(Tensor2D& out, const Tensor2D& bias) {
  require_shape(bias.rows() == 1 && bias.cols() == out.cols(), "add_row_bias");
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* dst = out.row(r);
    const double* src = bias.row(0);
    for (std::size_t c = 0; c < out.cols(); ++c) dst[c] += src[c];
  }
}

void accumulate_bias_grad(Tensor2D& bias_grad, const Tensor2D& d_out) {
  require_shape(bias_grad.rows() == 1 && bias_grad.cols() == d_out.cols(),
                "accumulate_bias_grad");
  for (std::size_t r = 0; r < d_out.rows(); ++r) {
    const double* src = d_out.row(r);
    double* dst = bias_grad.row(0);
    for (std::size_t c = 0; c < d_out.cols(); ++c) dst[c] += src[c];
  }
}

void scale(Tensor2D& t, double alpha) {
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] *= alpha;
}

void add_scaled(Tensor2D& out, const Tensor2D& a, double alpha) {
  require_shape(out.rows() == a.rows() && out.cols() == a.cols(),
                "add_scaled");
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] += alpha * a.data()[i];
}

void require_finite(const Tensor2D& t, const std::string& what) {
  if (!t.all_finite())
    throw std::runtime_error("non-finite values in " + what);
}

}  // namespace seqmoe

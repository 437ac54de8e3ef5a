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

#ifndef SEQMOE_TENSOR_HPP
#define SEQMOE_TENSOR_HPP

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace seqmoe {

// Dense row-major matrix of doubles. The workhorse container for hidden
// states and parameters; heavy products go through Eigen internally.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

  static Tensor2D gaussian(std::size_t rows, std::size_t cols, double stddev,
                           std::mt19937_64& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& at(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  double& operator()(std::size_t r, std::size_t c) { return at(r, c); }
  double operator()(std::size_t r, std::size_t c) const { return at(r, c); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  double* row(std::size_t r) { return values_.data() + r * cols_; }
  const double* row(std::size_t r) const { return values_.data() + r * cols_; }
  std::span<double> row_span(std::size_t r) { return {row(r), cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {row(r), cols_};
  }

  void fill(double v) { values_.assign(values_.size(), v); }
  void resize(std::size_t rows, std::size_t cols, double fill = 0.0) {
    rows_ = rows;
    cols_ = cols;
    values_.assign(rows * cols, fill);
  }

  bool all_finite() const;
  bool operator==(const Tensor2D& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// out = A * B
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
// out += alpha * A * B
void add_matmul(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                double alpha = 1.0);
// out += alpha * A^T * B
void add_matmul_tn(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                   double alpha = 1.0);
// out += alpha * A * B^T
void add_matmul_nt(Tensor2D& out, const Tensor2D& a, const Tensor2D& b,
                   double alpha = 1.0);

// out(r, :) += bias for every row
void add_row_bias(Tensor2D& out, const Tensor2D& bias);
// bias_grad(0, :) += sum of rows of d_out
void accumulate_bias_grad(Tensor2D& bias_grad, const Tensor2D& d_out);

void scale(Tensor2D& t, double alpha);
void add_scaled(Tensor2D& out, const Tensor2D& a, double alpha = 1.0);

// Throws std::runtime_error naming `what` if any entry is NaN/Inf.
void require_finite(const Tensor2D& t, const std::string& what);

}  // namespace seqmoe

#endif  // SEQMOE_TENSOR_HPP

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

#ifndef SEQMOE_PARAM_STORE_HPP
#define SEQMOE_PARAM_STORE_HPP

#include <map>
#include <string>
#include <vector>

#include "seqmoe/tensor.hpp"

namespace seqmoe {

struct Param {
  Tensor2D value;
  Tensor2D grad;  // same shape; stays exactly zero for frozen tensors
  bool frozen = false;
};

// Named parameter tensors with trainable/frozen flags and gradient slots.
// Iteration order is insertion order, which keeps optimizer updates and
// checkpoints deterministic.
class ParamStore {
 public:
  Tensor2D& add(const std::string& name, std::size_t rows, std::size_t cols,
                bool frozen);
  Tensor2D& add(const std::string& name, Tensor2D init, bool frozen);

  bool has(const std::string& name) const;
  Param& param(const std::string& name);
  const Param& param(const std::string& name) const;
  Tensor2D& value(const std::string& name) { return param(name).value; }
  const Tensor2D& value(const std::string& name) const {
    return param(name).value;
  }
  Tensor2D& grad(const std::string& name) { return param(name).grad; }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t trainable_scalar_count() const;
  std::size_t frozen_scalar_count() const;

  void zero_grads();

  // Checkpoint: raw little-endian doubles plus a JSON manifest carrying
  // names, shapes, frozen flags, a format version and caller-provided
  // provenance fields.
  void save(const std::string& bin_path, const std::string& manifest_path,
            const std::map<std::string, std::string>& provenance = {}) const;
  // Loads into this store; shapes and names must match exactly.
  void load(const std::string& bin_path, const std::string& manifest_path);

 private:
  std::vector<std::string> order_;
  std::map<std::string, Param> params_;
};

}  // namespace seqmoe

#endif  // SEQMOE_PARAM_STORE_HPP

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

#ifndef SEQMOE_CF_HPP
#define SEQMOE_CF_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "seqmoe/corpus.hpp"
#include "seqmoe/param_store.hpp"
#include "seqmoe/tensor.hpp"

namespace seqmoe::cf {

struct CfEmbeddings {
  Tensor2D user;  // |U| x d_cf
  Tensor2D item;  // |I| x d_cf
};

// Seeded Gaussian init, scale 0.1.
CfEmbeddings cf_init(std::size_t n_users, std::size_t n_items,
                     std::size_t dim, std::uint64_t seed);

enum class Mode { kJoint, kFrozen };
Mode cf_mode(const std::string& name);  // "joint" | "frozen"

// -ln sigmoid(<e_u, e_pos> - <e_u, e_neg>) over the "cf.user"/"cf.item"
// tensors in `params`. Rejects pos == neg. When `with_grad`, accumulates
// scaled gradients unless the embeddings are frozen.
double bpr_step(ParamStore& params, int user, int pos, int neg, double scale,
                bool with_grad);

// Plain matrix-factorization pre-training with BPR over the training
// streams; used standalone for frozen mode and for the hard-sample latent
// vectors.
CfEmbeddings train_mf_bpr(const corpus::Splits& splits, std::size_t n_users,
                          std::size_t n_items, std::size_t dim,
                          std::size_t steps, double lr, std::uint64_t seed);

void save_cf(const CfEmbeddings& emb, const std::string& bin_path,
             const std::string& manifest_path,
             const std::string& config_hash, std::uint64_t seed);
CfEmbeddings load_cf(const std::string& bin_path,
                     const std::string& manifest_path);

}  // namespace seqmoe::cf

#endif  // SEQMOE_CF_HPP

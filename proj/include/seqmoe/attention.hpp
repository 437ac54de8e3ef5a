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

#ifndef SEQMOE_ATTENTION_HPP
#define SEQMOE_ATTENTION_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "seqmoe/tensor.hpp"

namespace seqmoe::attn {

// Per-token item ordinals for the query positions plus the number of
// collaborative prefix rows. Keys are laid out as
// [collab_0 .. collab_{Kc-1}, token_0 .. token_{T-1}]; collaborative rows are
// keys only, never queries.
struct SegmentMap {
  std::vector<int> ordinals;     // item ordinal per query token (prompt = 0)
  std::size_t collab_count = 0;  // K_c

  std::size_t query_count() const { return ordinals.size(); }
  std::size_t key_count() const { return collab_count + ordinals.size(); }
};

// Boolean query -> key visibility. True means the key is attended to.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  MaskMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), visible_(rows * cols, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool at(std::size_t q, std::size_t k) const {
    return visible_[q * cols_ + k] != 0;
  }
  void set(std::size_t q, std::size_t k, bool v) {
    visible_[q * cols_ + k] = v ? 1 : 0;
  }

  // Every query row must see at least one key (a token always sees itself).
  bool every_row_visible() const;

  // 0/1 grid, one row per line; used by golden-file tests and debug dumps.
  std::string to_grid() const;
  static MaskMatrix from_grid(const std::string& grid);

  bool operator==(const MaskMatrix&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> visible_;
};

// Each token attends to prior and current token keys; collaborative prefix
// keys are not visible under causal masking.
MaskMatrix build_causal_mask(const SegmentMap& seg);

// Each token attends to token keys of the same item plus every collaborative
// prefix key.
MaskMatrix build_context_mask(const SegmentMap& seg);

// Weights for one self-attention block; tensors live in a ParamStore and are
// referenced here. Row convention: out = in * W + b with W of shape
// (in_dim x out_dim) and b of shape (1 x out_dim).
struct AttentionWeights {
  const Tensor2D* wq = nullptr;
  const Tensor2D* bq = nullptr;
  const Tensor2D* wk = nullptr;
  const Tensor2D* bk = nullptr;
  const Tensor2D* wv = nullptr;
  const Tensor2D* bv = nullptr;
  const Tensor2D* wo = nullptr;
  const Tensor2D* bo = nullptr;
  std::size_t heads = 1;
};

// Q/K/V projections shared by every mask applied to the same inputs.
struct AttentionCore {
  Tensor2D q;  // T x d
  Tensor2D k;  // (Kc+T) x d
  Tensor2D v;  // (Kc+T) x d
};

AttentionCore project_qkv(const Tensor2D& queries, const Tensor2D& keys,
                          const AttentionWeights& w);

struct MaskedAttentionCache {
  std::vector<Tensor2D> weights;  // per head, T x (Kc+T)
  Tensor2D context;               // T x d, pre-output-projection
};

// Softmax((Q K^T)/sqrt(d_head)) restricted to visible keys, times V, then the
// output projection. Invisible keys receive exactly zero weight.
Tensor2D masked_attention(const AttentionCore& core, const MaskMatrix& mask,
                          const AttentionWeights& w,
                          MaskedAttentionCache* cache);

struct AttentionGrads {
  Tensor2D d_wo, d_bo;  // output projection (frozen in the model, but the
                        // standalone op is fully differentiable)
  bool accumulate_output_proj = false;
};

// Backward of masked_attention into dQ/dK/dV (accumulated); optionally also
// into the output projection when `grads` asks for it.
void masked_attention_backward(const Tensor2D& d_out,
                               const AttentionCore& core,
                               const MaskMatrix& mask,
                               const AttentionWeights& w,
                               const MaskedAttentionCache& cache, Tensor2D& dq,
                               Tensor2D& dk, Tensor2D& dv,
                               AttentionGrads* grads);

// The standalone operation: H_keys holds Kc collaborative rows followed by T
// token rows; queries are the token rows; the result has T rows.
Tensor2D masked_self_attention(const Tensor2D& h_keys, const MaskMatrix& mask,
                               const AttentionWeights& w,
                               std::size_t collab_count);

// Full reverse pass of the standalone op: gradients for every projection
// weight and for the input rows.
struct SelfAttentionGrads {
  Tensor2D d_wq, d_bq, d_wk, d_bk, d_wv, d_bv, d_wo, d_bo;
  Tensor2D d_h_keys;
};

SelfAttentionGrads masked_self_attention_backward(const Tensor2D& d_out,
                                                  const Tensor2D& h_keys,
                                                  const MaskMatrix& mask,
                                                  const AttentionWeights& w,
                                                  std::size_t collab_count);

}  // namespace seqmoe::attn

#endif  // SEQMOE_ATTENTION_HPP

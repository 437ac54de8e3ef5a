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

#ifndef SEQMOE_MODEL_HPP
#define SEQMOE_MODEL_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqmoe/attention.hpp"
#include "seqmoe/corpus.hpp"
#include "seqmoe/numerics.hpp"
#include "seqmoe/param_store.hpp"

namespace seqmoe::model {

struct ModelConfig {
  std::size_t dim = 32;          // hidden size
  std::size_t layers = 2;        // total backbone layers
  std::size_t heads = 1;
  std::size_t bottleneck = 64;   // adapter bottleneck
  std::size_t replace_every = 1; // r: layers 0, r, 2r, ... become MoE layers
  std::size_t max_stream = 256;
  std::size_t vocab_size = 0;
  std::size_t n_items = 0;
  std::size_t n_users = 0;
  std::size_t cf_dim = 16;
  int collab_columns = 1;        // 1 or 2 prefix columns for the sequence task
  bool adapter_nonlinearity = false;  // optional tanh inside the adapter
  bool cf_frozen = false;
  std::uint64_t init_seed = 1;
};

// 3 bits per replaced layer, laid out (causal expert, context expert,
// recommendation adapter) per layer; false = serial, true = parallel.
struct Genome {
  std::vector<std::uint8_t> bits;

  bool operator==(const Genome&) const = default;
};

std::vector<std::size_t> replaced_layer_indices(std::size_t layers,
                                                std::size_t replace_every);

enum class Task { kSequence, kAlignment };

struct CollabRef {
  enum class Kind { kUser, kItem };
  Kind kind = Kind::kUser;
  int index = 0;
};

// ---- building blocks -------------------------------------------------------

struct AdapterView {
  const Tensor2D* w1 = nullptr;  // d x b
  const Tensor2D* b1 = nullptr;  // 1 x b
  const Tensor2D* w2 = nullptr;  // b x d
  const Tensor2D* b2 = nullptr;  // 1 x d
  bool tanh_nonlinearity = false;
};

struct AdapterCache {
  Tensor2D input;
  Tensor2D pre;     // input*W1 + b1
  Tensor2D hidden;  // activation(pre)
};

struct AdapterGrads {
  Tensor2D* dw1 = nullptr;
  Tensor2D* db1 = nullptr;
  Tensor2D* dw2 = nullptr;
  Tensor2D* db2 = nullptr;
};

// Adapter(h) = W2 (act(W1 h + b1)) + b2 + h, rows independently.
Tensor2D adapter_forward(const Tensor2D& h, const AdapterView& view,
                         AdapterCache* cache);
void adapter_backward(const Tensor2D& d_out, const AdapterView& view,
                      const AdapterCache& cache, Tensor2D& d_in,
                      AdapterGrads* grads);

struct GateView {
  const Tensor2D* w = nullptr;  // 2d x 2
  const Tensor2D* b = nullptr;  // 1 x 2
};

struct GateResult {
  Tensor2D fused;  // T x d
  Tensor2D beta;   // T x 2, rows sum to 1
};

// beta = softmax([q, p] W_gate + b_gate); fused = beta_1 q + beta_2 p.
GateResult gate_fuse(const Tensor2D& q, const Tensor2D& p,
                     const GateView& view);
void gate_fuse_backward(const Tensor2D& d_fused, const Tensor2D& q,
                        const Tensor2D& p, const Tensor2D& beta,
                        const GateView& view, Tensor2D& dq, Tensor2D& dp,
                        Tensor2D* d_gate_w, Tensor2D* d_gate_b);

struct CollabProjection {
  const Tensor2D* w = nullptr;  // d_cf x d
  const Tensor2D* b = nullptr;  // 1 x d
};

// Prepends one projected row per collaborative vector to the token states;
// the result is the key matrix of a layer (K_c + T rows).
Tensor2D inject_collab_prefix(
    const Tensor2D& token_states,
    const std::vector<std::span<const double>>& collab_vecs,
    const std::vector<CollabProjection>& projections);

struct ExpertCache {
  attn::MaskedAttentionCache attn;
  Tensor2D attn_out;
  AdapterCache adapter;
};

// Serial: Adapter(SelfAttn(h, MASK)); parallel: (SelfAttn(h, MASK) +
// Adapter(h)) / 2. The Q/K/V core is shared between experts of one layer.
Tensor2D expert_forward(const attn::AttentionCore& core,
                        const attn::MaskMatrix& mask,
                        const attn::AttentionWeights& aw, const Tensor2D& x_in,
                        const AdapterView& adapter, bool parallel,
                        ExpertCache* cache);

struct DamoeLayerView {
  attn::AttentionWeights attn;
  AdapterView expert_causal;
  AdapterView expert_context;
  AdapterView rec_adapter;
  GateView gate;
  const Tensor2D* ln1_gain = nullptr;
  const Tensor2D* ln1_bias = nullptr;
  const Tensor2D* ln2_gain = nullptr;
  const Tensor2D* ln2_bias = nullptr;
  const Tensor2D* ffn_w1 = nullptr;  // d x 4d
  const Tensor2D* ffn_b1 = nullptr;
  const Tensor2D* ffn_w2 = nullptr;  // 4d x d
  const Tensor2D* ffn_b2 = nullptr;
};

struct DamoeLayerCache {
  Tensor2D x_in;
  Tensor2D keys;
  attn::AttentionCore core;
  ExpertCache causal, context;
  Tensor2D q, p;
  Tensor2D beta;
  Tensor2D h_tilde;
  num::LayerNormCache ln1;
  Tensor2D y;
  Tensor2D ffn_pre, ffn_hidden, ffn_out;
  AdapterCache rec;
  num::LayerNormCache ln2;
};

struct DamoeLayerGrads {
  AdapterGrads expert_causal, expert_context, rec_adapter;
  Tensor2D* d_gate_w = nullptr;
  Tensor2D* d_gate_b = nullptr;
};

// q = causal expert, p = context expert, gate fusion, add&norm, then the
// recommendation adapter around the frozen feed-forward block, add&norm.
// bits = (causal, context, rec); true selects the parallel form.
Tensor2D damoe_layer_forward(const Tensor2D& x, const Tensor2D& keys,
                             const attn::MaskMatrix& causal_mask,
                             const attn::MaskMatrix& context_mask,
                             const DamoeLayerView& view,
                             const std::array<bool, 3>& bits,
                             DamoeLayerCache* cache);

// Accumulates input gradients into d_x (token rows) and d_keys (prefix +
// token rows); trainable-parameter gradients go through `grads`.
void damoe_layer_backward(const Tensor2D& d_out, const DamoeLayerView& view,
                          const std::array<bool, 3>& bits,
                          const attn::MaskMatrix& causal_mask,
                          const attn::MaskMatrix& context_mask,
                          const DamoeLayerCache& cache, Tensor2D& d_x,
                          Tensor2D& d_keys, DamoeLayerGrads& grads);

struct FrozenLayerCache {
  Tensor2D x_in;
  attn::AttentionCore core;
  attn::MaskedAttentionCache attn;
  Tensor2D attn_out;
  num::LayerNormCache ln1;
  Tensor2D y;
  Tensor2D ffn_pre, ffn_hidden;
  num::LayerNormCache ln2;
};

// ---- whole model ------------------------------------------------------------

struct LayerCache {
  bool damoe = false;
  DamoeLayerCache moe;
  FrozenLayerCache frozen;
};

struct ForwardPass {
  corpus::TokenStream stream;  // after any truncation
  std::size_t dropped_items = 0;
  Task task = Task::kSequence;
  Genome genome;
  std::vector<CollabRef> collab;
  attn::MaskMatrix mask_causal;   // with collab columns
  attn::MaskMatrix mask_context;  // with collab columns
  attn::MaskMatrix mask_plain;    // token-only causal mask (frozen layers)
  Tensor2D states;                // final layer, T x d
  std::vector<LayerCache> layers;
  Tensor2D x0;
  bool cached = false;
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::vector<std::size_t> replaced_layers() const {
    return replaced_layer_indices(config_.layers, config_.replace_every);
  }
  std::size_t genome_size() const { return 3 * replaced_layers().size(); }
  void check_genome(const Genome& genome) const;

  // Collaborative prefix per task: the sequence task injects the user vector
  // (plus the most recent context item in two-column mode); the alignment
  // task injects the item's vector.
  std::vector<CollabRef> collab_refs(Task task, int user_id,
                                     int item_id) const;

  ForwardPass forward(const corpus::TokenStream& stream, Task task,
                      const Genome& genome,
                      const std::vector<CollabRef>& collab, bool need_cache);
  void backward(ForwardPass& pass, const Tensor2D& d_states);

  std::vector<double> item_logits(std::span<const double> h) const;
  // Softmax(W_item h + b_item) over the catalog.
  std::vector<double> item_projection(std::span<const double> h) const;
  // Cross entropy through the item head. When `with_grad`, accumulates head
  // gradients and adds the state gradient into dh, both scaled by grad_scale.
  double head_cross_entropy(std::span<const double> h, int target,
                            double grad_scale, std::span<double> dh,
                            bool with_grad);

  attn::AttentionWeights attention_weights(std::size_t layer) const;
  DamoeLayerView damoe_view(std::size_t layer) const;
  DamoeLayerGrads damoe_grads(std::size_t layer);
  AdapterView adapter_view(const std::string& prefix) const;
  AdapterGrads adapter_grads(const std::string& prefix);

 private:
  ModelConfig config_;
  ParamStore params_;

  Tensor2D embed(const corpus::TokenStream& stream) const;
  void embed_backward(const corpus::TokenStream& stream, const Tensor2D& dx0);
  std::span<const double> collab_vector(const CollabRef& ref) const;
  CollabProjection collab_projection(const CollabRef& ref) const;
};

// Drops whole items from the front until the stream fits the budget.
// Alignment streams cannot be truncated and raise instead.
corpus::TokenStream truncate_stream(const corpus::TokenStream& stream,
                                    std::size_t max_tokens,
                                    std::size_t* dropped_items);

}  // namespace seqmoe::model

#endif  // SEQMOE_MODEL_HPP

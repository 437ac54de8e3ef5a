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

#include "seqmoe/model.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace seqmoe::model {

std::vector<std::size_t> replaced_layer_indices(std::size_t layers,
                                                std::size_t replace_every) {
  if (replace_every < 1)
    throw std::invalid_argument("replace_every must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < layers; k += replace_every) out.push_back(k);
  return out;
}

// ---- adapter ----------------------------------------------------------------

Tensor2D adapter_forward(const Tensor2D& h, const AdapterView& view,
                         AdapterCache* cache) {
  Tensor2D pre = matmul(h, *view.w1);
  add_row_bias(pre, *view.b1);
  Tensor2D hidden = pre;
  if (view.tanh_nonlinearity)
    for (std::size_t i = 0; i < hidden.size(); ++i)
      hidden.data()[i] = std::tanh(hidden.data()[i]);
  Tensor2D out = matmul(hidden, *view.w2);
  add_row_bias(out, *view.b2);
  add_scaled(out, h);
  if (cache) {
    cache->input = h;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

void adapter_backward(const Tensor2D& d_out, const AdapterView& view,
                      const AdapterCache& cache, Tensor2D& d_in,
                      AdapterGrads* grads) {
  add_scaled(d_in, d_out);  // residual
  Tensor2D d_hidden(cache.hidden.rows(), cache.hidden.cols());
  add_matmul_nt(d_hidden, d_out, *view.w2);
  if (grads) {
    add_matmul_tn(*grads->dw2, cache.hidden, d_out);
    accumulate_bias_grad(*grads->db2, d_out);
  }
  if (view.tanh_nonlinearity) {
    for (std::size_t i = 0; i < d_hidden.size(); ++i) {
      double t = std::tanh(cache.pre.data()[i]);
      d_hidden.data()[i] *= 1.0 - t * t;
    }
  }
  if (grads) {
    add_matmul_tn(*grads->dw1, cache.input, d_hidden);
    accumulate_bias_grad(*grads->db1, d_hidden);
  }
  add_matmul_nt(d_in, d_hidden, *view.w1);
}

// ---- gate -------------------------------------------------------------------

GateResult gate_fuse(const Tensor2D& q, const Tensor2D& p,
                     const GateView& view) {
  const std::size_t t = q.rows(), d = q.cols();
  if (p.rows() != t || p.cols() != d)
    throw std::invalid_argument("gate_fuse: q/p shape mismatch");
  GateResult res;
  res.beta = Tensor2D(t, 2);
  res.fused = Tensor2D(t, d);
  for (std::size_t r = 0; r < t; ++r) {
    double l0 = view.b->at(0, 0), l1 = view.b->at(0, 1);
    for (std::size_t c = 0; c < d; ++c) {
      l0 += q(r, c) * view.w->at(c, 0) + p(r, c) * view.w->at(d + c, 0);
      l1 += q(r, c) * view.w->at(c, 1) + p(r, c) * view.w->at(d + c, 1);
    }
    double mx = std::max(l0, l1);
    double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
    double b0 = e0 / (e0 + e1), b1 = e1 / (e0 + e1);
    res.beta(r, 0) = b0;
    res.beta(r, 1) = b1;
    for (std::size_t c = 0; c < d; ++c)
      res.fused(r, c) = b0 * q(r, c) + b1 * p(r, c);
  }
  return res;
}

void gate_fuse_backward(const Tensor2D& d_fused, const Tensor2D& q,
                        const Tensor2D& p, const Tensor2D& beta,
                        const GateView& view, Tensor2D& dq, Tensor2D& dp,
                        Tensor2D* d_gate_w, Tensor2D* d_gate_b) {
  const std::size_t t = q.rows(), d = q.cols();
  for (std::size_t r = 0; r < t; ++r) {
    double b0 = beta(r, 0), b1 = beta(r, 1);
    double d_b0 = 0.0, d_b1 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double g = d_fused(r, c);
      dq(r, c) += b0 * g;
      dp(r, c) += b1 * g;
      d_b0 += g * q(r, c);
      d_b1 += g * p(r, c);
    }
    // softmax backward over the two gating logits
    double inner = d_b0 * b0 + d_b1 * b1;
    double d_l0 = b0 * (d_b0 - inner);
    double d_l1 = b1 * (d_b1 - inner);
    if (d_gate_b) {
      d_gate_b->at(0, 0) += d_l0;
      d_gate_b->at(0, 1) += d_l1;
    }
    for (std::size_t c = 0; c < d; ++c) {
      if (d_gate_w) {
        d_gate_w->at(c, 0) += q(r, c) * d_l0;
        d_gate_w->at(c, 1) += q(r, c) * d_l1;
        d_gate_w->at(d + c, 0) += p(r, c) * d_l0;
        d_gate_w->at(d + c, 1) += p(r, c) * d_l1;
      }
      dq(r, c) += view.w->at(c, 0) * d_l0 + view.w->at(c, 1) * d_l1;
      dp(r, c) += view.w->at(d + c, 0) * d_l0 + view.w->at(d + c, 1) * d_l1;
    }
  }
}

// ---- collaborative prefix ---------------------------------------------------

Tensor2D inject_collab_prefix(
    const Tensor2D& token_states,
    const std::vector<std::span<const double>>& collab_vecs,
    const std::vector<CollabProjection>& projections) {
  if (collab_vecs.size() != projections.size())
    throw std::invalid_argument("inject_collab_prefix: vec/projection count");
  const std::size_t kc = collab_vecs.size();
  const std::size_t t = token_states.rows(), d = token_states.cols();
  Tensor2D keys(kc + t, d);
  for (std::size_t i = 0; i < kc; ++i) {
    const auto& proj = projections[i];
    if (proj.w->rows() != collab_vecs[i].size() || proj.w->cols() != d)
      throw std::invalid_argument("inject_collab_prefix: dim mismatch");
    for (std::size_t c = 0; c < d; ++c) {
      double v = proj.b->at(0, c);
      for (std::size_t e = 0; e < collab_vecs[i].size(); ++e)
        v += collab_vecs[i][e] * proj.w->at(e, c);
      keys(i, c) = v;
    }
  }
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < d; ++c) keys(kc + r, c) = token_states(r, c);
  return keys;
}

// ---- experts ----------------------------------------------------------------

Tensor2D expert_forward(const attn::AttentionCore& core,
                        const attn::MaskMatrix& mask,
                        const attn::AttentionWeights& aw, const Tensor2D& x_in,
                        const AdapterView& adapter, bool parallel,
                        ExpertCache* cache) {
  Tensor2D attn_out =
      attn::masked_attention(core, mask, aw, cache ? &cache->attn : nullptr);
  if (cache) cache->attn_out = attn_out;
  if (parallel) {
    Tensor2D side =
        adapter_forward(x_in, adapter, cache ? &cache->adapter : nullptr);
    Tensor2D out(attn_out.rows(), attn_out.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data()[i] = 0.5 * (attn_out.data()[i] + side.data()[i]);
    return out;
  }
  return adapter_forward(attn_out, adapter, cache ? &cache->adapter : nullptr);
}

namespace {

void ffn_forward(const Tensor2D& y, const DamoeLayerView& view, Tensor2D& pre,
                 Tensor2D& hidden, Tensor2D& out) {
  pre = matmul(y, *view.ffn_w1);
  add_row_bias(pre, *view.ffn_b1);
  hidden = pre;
  for (std::size_t i = 0; i < hidden.size(); ++i)
    hidden.data()[i] = num::gelu(hidden.data()[i]);
  out = matmul(hidden, *view.ffn_w2);
  add_row_bias(out, *view.ffn_b2);
}

void ffn_backward(const Tensor2D& d_out, const Tensor2D& pre,
                  const Tensor2D& hidden, const Tensor2D& w1,
                  const Tensor2D& w2, Tensor2D& d_y) {
  Tensor2D d_hidden(hidden.rows(), hidden.cols());
  add_matmul_nt(d_hidden, d_out, w2);
  for (std::size_t i = 0; i < d_hidden.size(); ++i)
    d_hidden.data()[i] *= num::gelu_grad(pre.data()[i]);
  add_matmul_nt(d_y, d_hidden, w1);
}

// Backward of one expert: routes the expert gradient to the adapter, the
// attention output, and (parallel form) directly to the layer input.
void expert_backward(const Tensor2D& d_expert, const AdapterView& adapter,
                     bool parallel, const ExpertCache& cache,
                     AdapterGrads& grads, Tensor2D& d_attn_out,
                     Tensor2D& d_x) {
  if (parallel) {
    Tensor2D half = d_expert;
    scale(half, 0.5);
    add_scaled(d_attn_out, half);
    adapter_backward(half, adapter, cache.adapter, d_x, &grads);
  } else {
    adapter_backward(d_expert, adapter, cache.adapter, d_attn_out, &grads);
  }
}

}  // namespace

Tensor2D damoe_layer_forward(const Tensor2D& x, const Tensor2D& keys,
                             const attn::MaskMatrix& causal_mask,
                             const attn::MaskMatrix& context_mask,
                             const DamoeLayerView& view,
                             const std::array<bool, 3>& bits,
                             DamoeLayerCache* cache) {
  attn::AttentionCore core = attn::project_qkv(x, keys, view.attn);
  Tensor2D q = expert_forward(core, causal_mask, view.attn, x,
                              view.expert_causal, bits[0],
                              cache ? &cache->causal : nullptr);
  Tensor2D p = expert_forward(core, context_mask, view.attn, x,
                              view.expert_context, bits[1],
                              cache ? &cache->context : nullptr);
  GateResult gate = gate_fuse(q, p, view.gate);

  Tensor2D r1 = x;
  add_scaled(r1, gate.fused);
  Tensor2D y = num::layer_norm_rows(r1, *view.ln1_gain, *view.ln1_bias,
                                    cache ? &cache->ln1 : nullptr);

  Tensor2D ffn_pre, ffn_hidden, ffn_out;
  ffn_forward(y, view, ffn_pre, ffn_hidden, ffn_out);

  Tensor2D z;
  if (bits[2]) {
    Tensor2D side =
        adapter_forward(y, view.rec_adapter, cache ? &cache->rec : nullptr);
    z = Tensor2D(ffn_out.rows(), ffn_out.cols());
    for (std::size_t i = 0; i < z.size(); ++i)
      z.data()[i] = 0.5 * (ffn_out.data()[i] + side.data()[i]);
  } else {
    z = adapter_forward(ffn_out, view.rec_adapter,
                        cache ? &cache->rec : nullptr);
  }

  Tensor2D r2 = y;
  add_scaled(r2, z);
  Tensor2D out = num::layer_norm_rows(r2, *view.ln2_gain, *view.ln2_bias,
                                      cache ? &cache->ln2 : nullptr);
  if (cache) {
    cache->x_in = x;
    cache->keys = keys;
    cache->core = std::move(core);
    cache->q = std::move(q);
    cache->p = std::move(p);
    cache->beta = std::move(gate.beta);
    cache->h_tilde = std::move(gate.fused);
    cache->y = std::move(y);
    cache->ffn_pre = std::move(ffn_pre);
    cache->ffn_hidden = std::move(ffn_hidden);
    cache->ffn_out = std::move(ffn_out);
  }
  return out;
}

void damoe_layer_backward(const Tensor2D& d_out, const DamoeLayerView& view,
                          const std::array<bool, 3>& bits,
                          const attn::MaskMatrix& causal_mask,
                          const attn::MaskMatrix& context_mask,
                          const DamoeLayerCache& cache, Tensor2D& d_x,
                          Tensor2D& d_keys, DamoeLayerGrads& grads) {
  const std::size_t t = d_out.rows(), d = d_out.cols();

  Tensor2D d_r2(t, d);
  num::layer_norm_rows_backward(d_out, *view.ln2_gain, cache.ln2, d_r2);
  Tensor2D d_y = d_r2;
  const Tensor2D& d_z = d_r2;

  Tensor2D d_ffn_out(t, d);
  if (bits[2]) {
    Tensor2D half = d_z;
    scale(half, 0.5);
    add_scaled(d_ffn_out, half);
    adapter_backward(half, view.rec_adapter, cache.rec, d_y,
                     &grads.rec_adapter);
  } else {
    adapter_backward(d_z, view.rec_adapter, cache.rec, d_ffn_out,
                     &grads.rec_adapter);
  }
  ffn_backward(d_ffn_out, cache.ffn_pre, cache.ffn_hidden, *view.ffn_w1,
               *view.ffn_w2, d_y);

  Tensor2D d_r1(t, d);
  num::layer_norm_rows_backward(d_y, *view.ln1_gain, cache.ln1, d_r1);
  add_scaled(d_x, d_r1);
  const Tensor2D& d_fused = d_r1;

  Tensor2D dq(t, d), dp(t, d);
  gate_fuse_backward(d_fused, cache.q, cache.p, cache.beta, view.gate, dq, dp,
                     grads.d_gate_w, grads.d_gate_b);

  Tensor2D d_core_q(t, d);
  Tensor2D d_core_k(cache.core.k.rows(), d);
  Tensor2D d_core_v(cache.core.v.rows(), d);

  Tensor2D d_attn_causal(t, d), d_attn_context(t, d);
  expert_backward(dq, view.expert_causal, bits[0], cache.causal,
                  grads.expert_causal, d_attn_causal, d_x);
  expert_backward(dp, view.expert_context, bits[1], cache.context,
                  grads.expert_context, d_attn_context, d_x);
  attn::masked_attention_backward(d_attn_causal, cache.core, causal_mask,
                                  view.attn, cache.causal.attn, d_core_q,
                                  d_core_k, d_core_v, nullptr);
  attn::masked_attention_backward(d_attn_context, cache.core, context_mask,
                                  view.attn, cache.context.attn, d_core_q,
                                  d_core_k, d_core_v, nullptr);

  add_matmul_nt(d_x, d_core_q, *view.attn.wq);
  add_matmul_nt(d_keys, d_core_k, *view.attn.wk);
  add_matmul_nt(d_keys, d_core_v, *view.attn.wv);
}

// ---- model ------------------------------------------------------------------

namespace {

std::string layer_prefix(std::size_t k) { return "layer" + std::to_string(k); }

}  // namespace

Model::Model(const ModelConfig& config) : config_(config) {
  if (config_.dim % config_.heads != 0)
    throw std::invalid_argument("heads must divide dim");
  if (config_.vocab_size == 0 || config_.n_items < 2)
    throw std::invalid_argument("model needs a vocabulary and >= 2 items");
  std::mt19937_64 rng(config_.init_seed);
  const std::size_t d = config_.dim;
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));

  auto gauss = [&](std::size_t r, std::size_t c, double stddev) {
    return Tensor2D::gaussian(r, c, stddev, rng);
  };

  params_.add("embed.token", gauss(config_.vocab_size, d, 0.5), true);
  params_.add("embed.position", gauss(config_.max_stream, d, 0.5), true);
  params_.add("embed.special", gauss(2, d, 0.5), false);

  const auto replaced = replaced_layers();
  auto is_replaced = [&](std::size_t k) {
    for (std::size_t r : replaced)
      if (r == k) return true;
    return false;
  };

  for (std::size_t k = 0; k < config_.layers; ++k) {
    const std::string lp = layer_prefix(k);
    params_.add(lp + ".attn.wq", gauss(d, d, attn_std), true);
    params_.add(lp + ".attn.bq", Tensor2D(1, d), true);
    params_.add(lp + ".attn.wk", gauss(d, d, attn_std), true);
    params_.add(lp + ".attn.bk", Tensor2D(1, d), true);
    params_.add(lp + ".attn.wv", gauss(d, d, attn_std), true);
    params_.add(lp + ".attn.bv", Tensor2D(1, d), true);
    params_.add(lp + ".attn.wo", gauss(d, d, attn_std), true);
    params_.add(lp + ".attn.bo", Tensor2D(1, d), true);
    params_.add(lp + ".ln1.gain", Tensor2D(1, d, 1.0), true);
    params_.add(lp + ".ln1.bias", Tensor2D(1, d), true);
    params_.add(lp + ".ln2.gain", Tensor2D(1, d, 1.0), true);
    params_.add(lp + ".ln2.bias", Tensor2D(1, d), true);
    params_.add(lp + ".ffn.w1", gauss(d, 4 * d, attn_std), true);
    params_.add(lp + ".ffn.b1", Tensor2D(1, 4 * d), true);
    params_.add(lp + ".ffn.w2",
                gauss(4 * d, d, 1.0 / std::sqrt(4.0 * static_cast<double>(d))),
                true);
    params_.add(lp + ".ffn.b2", Tensor2D(1, d), true);
    if (!is_replaced(k)) continue;
    for (const char* name : {"expert_causal", "expert_context", "rec_adapter"}) {
      const std::string ap = lp + "." + name;
      params_.add(ap + ".w1", gauss(d, config_.bottleneck, attn_std), false);
      params_.add(ap + ".b1", Tensor2D(1, config_.bottleneck), false);
      params_.add(ap + ".w2", gauss(config_.bottleneck, d, 0.05), false);
      params_.add(ap + ".b2", Tensor2D(1, d), false);
    }
    params_.add(lp + ".gate.w", Tensor2D(2 * d, 2), false);
    params_.add(lp + ".gate.b", Tensor2D(1, 2), false);
  }

  const double cf_std = 1.0 / std::sqrt(static_cast<double>(config_.cf_dim));
  params_.add("collab.user.w", gauss(config_.cf_dim, d, cf_std), false);
  params_.add("collab.user.b", Tensor2D(1, d), false);
  params_.add("collab.item.w", gauss(config_.cf_dim, d, cf_std), false);
  params_.add("collab.item.b", Tensor2D(1, d), false);

  params_.add("head.item.w", gauss(d, config_.n_items, attn_std), false);
  params_.add("head.item.b", Tensor2D(1, config_.n_items), false);

  std::mt19937_64 cf_rng(config_.init_seed + 1);
  params_.add("cf.user",
              Tensor2D::gaussian(std::max<std::size_t>(config_.n_users, 1),
                                 config_.cf_dim, 0.1, cf_rng),
              config_.cf_frozen);
  params_.add("cf.item",
              Tensor2D::gaussian(config_.n_items, config_.cf_dim, 0.1, cf_rng),
              config_.cf_frozen);
}

void Model::check_genome(const Genome& genome) const {
  if (genome.bits.size() != genome_size())
    throw std::invalid_argument(
        "genome length " + std::to_string(genome.bits.size()) +
        " does not match 3 x replaced layers = " +
        std::to_string(genome_size()));
}

std::vector<CollabRef> Model::collab_refs(Task task, int user_id,
                                          int item_id) const {
  std::vector<CollabRef> refs;
  if (task == Task::kSequence) {
    refs.push_back({CollabRef::Kind::kUser, user_id});
    if (config_.collab_columns == 2 && item_id >= 0)
      refs.push_back({CollabRef::Kind::kItem, item_id});
  } else {
    refs.push_back({CollabRef::Kind::kItem, item_id});
  }
  return refs;
}

attn::AttentionWeights Model::attention_weights(std::size_t layer) const {
  const std::string lp = layer_prefix(layer);
  attn::AttentionWeights w;
  w.wq = &params_.value(lp + ".attn.wq");
  w.bq = &params_.value(lp + ".attn.bq");
  w.wk = &params_.value(lp + ".attn.wk");
  w.bk = &params_.value(lp + ".attn.bk");
  w.wv = &params_.value(lp + ".attn.wv");
  w.bv = &params_.value(lp + ".attn.bv");
  w.wo = &params_.value(lp + ".attn.wo");
  w.bo = &params_.value(lp + ".attn.bo");
  w.heads = config_.heads;
  return w;
}

AdapterView Model::adapter_view(const std::string& prefix) const {
  AdapterView v;
  v.w1 = &params_.value(prefix + ".w1");
  v.b1 = &params_.value(prefix + ".b1");
  v.w2 = &params_.value(prefix + ".w2");
  v.b2 = &params_.value(prefix + ".b2");
  v.tanh_nonlinearity = config_.adapter_nonlinearity;
  return v;
}

AdapterGrads Model::adapter_grads(const std::string& prefix) {
  AdapterGrads g;
  g.dw1 = &params_.grad(prefix + ".w1");
  g.db1 = &params_.grad(prefix + ".b1");
  g.dw2 = &params_.grad(prefix + ".w2");
  g.db2 = &params_.grad(prefix + ".b2");
  return g;
}

DamoeLayerView Model::damoe_view(std::size_t layer) const {
  const std::string lp = layer_prefix(layer);
  DamoeLayerView v;
  v.attn = attention_weights(layer);
  v.expert_causal = adapter_view(lp + ".expert_causal");
  v.expert_context = adapter_view(lp + ".expert_context");
  v.rec_adapter = adapter_view(lp + ".rec_adapter");
  v.gate.w = &params_.value(lp + ".gate.w");
  v.gate.b = &params_.value(lp + ".gate.b");
  v.ln1_gain = &params_.value(lp + ".ln1.gain");
  v.ln1_bias = &params_.value(lp + ".ln1.bias");
  v.ln2_gain = &params_.value(lp + ".ln2.gain");
  v.ln2_bias = &params_.value(lp + ".ln2.bias");
  v.ffn_w1 = &params_.value(lp + ".ffn.w1");
  v.ffn_b1 = &params_.value(lp + ".ffn.b1");
  v.ffn_w2 = &params_.value(lp + ".ffn.w2");
  v.ffn_b2 = &params_.value(lp + ".ffn.b2");
  return v;
}

DamoeLayerGrads Model::damoe_grads(std::size_t layer) {
  const std::string lp = layer_prefix(layer);
  DamoeLayerGrads g;
  g.expert_causal = adapter_grads(lp + ".expert_causal");
  g.expert_context = adapter_grads(lp + ".expert_context");
  g.rec_adapter = adapter_grads(lp + ".rec_adapter");
  g.d_gate_w = &params_.grad(lp + ".gate.w");
  g.d_gate_b = &params_.grad(lp + ".gate.b");
  return g;
}

corpus::TokenStream truncate_stream(const corpus::TokenStream& stream,
                                    std::size_t max_tokens,
                                    std::size_t* dropped_items) {
  if (dropped_items) *dropped_items = 0;
  if (stream.tokens.size() <= max_tokens) return stream;
  if (stream.align_position >= 0)
    throw std::runtime_error("alignment stream exceeds max length");
  // Accumulate whole items from the back until the budget is exhausted.
  std::size_t kept = 0;
  int first_kept = stream.segments.ordinals.back() + 1;
  std::size_t i = stream.tokens.size();
  while (i > 0) {
    const int ord = stream.segments.ordinals[i - 1];
    std::size_t start = i;
    while (start > 0 && stream.segments.ordinals[start - 1] == ord) --start;
    if (kept + (i - start) > max_tokens) break;
    kept += i - start;
    first_kept = ord;
    i = start;
  }
  if (kept == 0)
    throw std::runtime_error("stream truncation removed every item");
  corpus::TokenStream out;
  for (std::size_t j = stream.tokens.size() - kept; j < stream.tokens.size();
       ++j) {
    out.tokens.push_back(stream.tokens[j]);
    out.segments.ordinals.push_back(stream.segments.ordinals[j] -
                                    (first_kept - 1));
    if (stream.tokens[j] == corpus::Vocabulary::kSeq)
      out.seq_positions.push_back(out.tokens.size() - 1);
  }
  out.segments.collab_count = stream.segments.collab_count;
  if (dropped_items) *dropped_items = static_cast<std::size_t>(first_kept - 1);
  return out;
}

Tensor2D Model::embed(const corpus::TokenStream& stream) const {
  const Tensor2D& tok = params_.value("embed.token");
  const Tensor2D& pos = params_.value("embed.position");
  const Tensor2D& special = params_.value("embed.special");
  const std::size_t t = stream.tokens.size(), d = config_.dim;
  if (t > config_.max_stream)
    throw std::runtime_error("stream longer than position table");
  Tensor2D x(t, d);
  for (std::size_t r = 0; r < t; ++r) {
    const int id = stream.tokens[r];
    if (id < 0 || id >= static_cast<int>(config_.vocab_size))
      throw std::out_of_range("token id out of vocabulary range");
    const double* base;
    if (id == corpus::Vocabulary::kSeq)
      base = special.row(0);
    else if (id == corpus::Vocabulary::kAlign)
      base = special.row(1);
    else
      base = tok.row(static_cast<std::size_t>(id));
    const double* pr = pos.row(r);
    for (std::size_t c = 0; c < d; ++c) x(r, c) = base[c] + pr[c];
  }
  return x;
}

void Model::embed_backward(const corpus::TokenStream& stream,
                           const Tensor2D& dx0) {
  Tensor2D& d_special = params_.grad("embed.special");
  for (std::size_t r = 0; r < stream.tokens.size(); ++r) {
    const int id = stream.tokens[r];
    int row = -1;
    if (id == corpus::Vocabulary::kSeq) row = 0;
    if (id == corpus::Vocabulary::kAlign) row = 1;
    if (row < 0) continue;  // regular/positional embeddings are frozen
    for (std::size_t c = 0; c < config_.dim; ++c)
      d_special(static_cast<std::size_t>(row), c) += dx0(r, c);
  }
}

std::span<const double> Model::collab_vector(const CollabRef& ref) const {
  const Tensor2D& table = params_.value(
      ref.kind == CollabRef::Kind::kUser ? "cf.user" : "cf.item");
  if (ref.index < 0 || ref.index >= static_cast<int>(table.rows()))
    throw std::out_of_range("collaborative index out of range");
  return table.row_span(static_cast<std::size_t>(ref.index));
}

CollabProjection Model::collab_projection(const CollabRef& ref) const {
  CollabProjection p;
  if (ref.kind == CollabRef::Kind::kUser) {
    p.w = &params_.value("collab.user.w");
    p.b = &params_.value("collab.user.b");
  } else {
    p.w = &params_.value("collab.item.w");
    p.b = &params_.value("collab.item.b");
  }
  return p;
}

ForwardPass Model::forward(const corpus::TokenStream& stream, Task task,
                           const Genome& genome,
                           const std::vector<CollabRef>& collab,
                           bool need_cache) {
  check_genome(genome);
  ForwardPass pass;
  pass.task = task;
  pass.genome = genome;
  pass.collab = collab;
  pass.stream = truncate_stream(stream, config_.max_stream,
                                &pass.dropped_items);
  if (pass.dropped_items > 0)
    std::cerr << "[warn] stream truncated: dropped " << pass.dropped_items
              << " oldest item(s)\n";
  pass.stream.segments.collab_count = collab.size();

  pass.mask_causal = attn::build_causal_mask(pass.stream.segments);
  pass.mask_context = attn::build_context_mask(pass.stream.segments);
  attn::SegmentMap plain = pass.stream.segments;
  plain.collab_count = 0;
  pass.mask_plain = attn::build_causal_mask(plain);

  Tensor2D x = embed(pass.stream);
  pass.x0 = x;
  pass.cached = need_cache;
  if (need_cache) pass.layers.resize(config_.layers);

  const auto replaced = replaced_layers();
  std::size_t replaced_pos = 0;
  for (std::size_t k = 0; k < config_.layers; ++k) {
    const bool is_moe =
        replaced_pos < replaced.size() && replaced[replaced_pos] == k;
    if (is_moe) {
      std::vector<std::span<const double>> vecs;
      std::vector<CollabProjection> projs;
      for (const auto& ref : collab) {
        vecs.push_back(collab_vector(ref));
        projs.push_back(collab_projection(ref));
      }
      Tensor2D keys = inject_collab_prefix(x, vecs, projs);
      const std::size_t g = 3 * replaced_pos;
      std::array<bool, 3> bits = {genome.bits[g] != 0, genome.bits[g + 1] != 0,
                                  genome.bits[g + 2] != 0};
      DamoeLayerCache* cache = nullptr;
      if (need_cache) {
        pass.layers[k].damoe = true;
        cache = &pass.layers[k].moe;
      }
      x = damoe_layer_forward(x, keys, pass.mask_causal, pass.mask_context,
                              damoe_view(k), bits, cache);
      ++replaced_pos;
    } else {
      const attn::AttentionWeights aw = attention_weights(k);
      FrozenLayerCache* cache = nullptr;
      if (need_cache) {
        pass.layers[k].damoe = false;
        cache = &pass.layers[k].frozen;
      }
      attn::AttentionCore core = attn::project_qkv(x, x, aw);
      Tensor2D attn_out = attn::masked_attention(
          core, pass.mask_plain, aw, cache ? &cache->attn : nullptr);
      Tensor2D r1 = x;
      add_scaled(r1, attn_out);
      const std::string lp = layer_prefix(k);
      Tensor2D y = num::layer_norm_rows(r1, params_.value(lp + ".ln1.gain"),
                                        params_.value(lp + ".ln1.bias"),
                                        cache ? &cache->ln1 : nullptr);
      Tensor2D pre = matmul(y, params_.value(lp + ".ffn.w1"));
      add_row_bias(pre, params_.value(lp + ".ffn.b1"));
      Tensor2D hidden = pre;
      for (std::size_t i = 0; i < hidden.size(); ++i)
        hidden.data()[i] = num::gelu(hidden.data()[i]);
      Tensor2D ffn_out = matmul(hidden, params_.value(lp + ".ffn.w2"));
      add_row_bias(ffn_out, params_.value(lp + ".ffn.b2"));
      Tensor2D r2 = y;
      add_scaled(r2, ffn_out);
      Tensor2D out = num::layer_norm_rows(r2, params_.value(lp + ".ln2.gain"),
                                          params_.value(lp + ".ln2.bias"),
                                          cache ? &cache->ln2 : nullptr);
      if (cache) {
        cache->x_in = std::move(x);
        cache->core = std::move(core);
        cache->attn_out = std::move(attn_out);
        cache->y = std::move(y);
        cache->ffn_pre = std::move(pre);
        cache->ffn_hidden = std::move(hidden);
      }
      x = std::move(out);
    }
  }
  require_finite(x, "model forward states");
  pass.states = std::move(x);
  return pass;
}

void Model::backward(ForwardPass& pass, const Tensor2D& d_states) {
  if (!pass.cached)
    throw std::logic_error("backward requires a cached forward pass");
  Tensor2D d = d_states;
  const auto replaced = replaced_layers();
  std::size_t replaced_pos = replaced.size();
  for (std::size_t ki = config_.layers; ki-- > 0;) {
    LayerCache& lc = pass.layers[ki];
    if (lc.damoe) {
      --replaced_pos;
      const std::size_t g = 3 * replaced_pos;
      std::array<bool, 3> bits = {pass.genome.bits[g] != 0,
                                  pass.genome.bits[g + 1] != 0,
                                  pass.genome.bits[g + 2] != 0};
      const std::size_t t = d.rows(), kc = pass.collab.size();
      Tensor2D d_x(t, config_.dim);
      Tensor2D d_keys(kc + t, config_.dim);
      DamoeLayerGrads grads = damoe_grads(ki);
      damoe_layer_backward(d, damoe_view(ki), bits, pass.mask_causal,
                           pass.mask_context, lc.moe, d_x, d_keys, grads);
      for (std::size_t i = 0; i < kc; ++i) {
        const CollabRef& ref = pass.collab[i];
        const bool user = ref.kind == CollabRef::Kind::kUser;
        Tensor2D& dw = params_.grad(user ? "collab.user.w" : "collab.item.w");
        Tensor2D& db = params_.grad(user ? "collab.user.b" : "collab.item.b");
        const Tensor2D& w =
            params_.value(user ? "collab.user.w" : "collab.item.w");
        auto e = collab_vector(ref);
        Param& cf = params_.param(user ? "cf.user" : "cf.item");
        for (std::size_t c = 0; c < config_.dim; ++c) {
          const double dp = d_keys(i, c);
          db(0, c) += dp;
          for (std::size_t f = 0; f < e.size(); ++f) {
            dw(f, c) += e[f] * dp;
            if (!cf.frozen)
              cf.grad(static_cast<std::size_t>(ref.index), f) += dp * w(f, c);
          }
        }
      }
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < config_.dim; ++c)
          d_x(r, c) += d_keys(kc + r, c);
      d = std::move(d_x);
    } else {
      const FrozenLayerCache& cache = lc.frozen;
      const std::string lp = layer_prefix(ki);
      const std::size_t t = d.rows();
      Tensor2D d_r2(t, config_.dim);
      num::layer_norm_rows_backward(d, params_.value(lp + ".ln2.gain"),
                                    cache.ln2, d_r2);
      Tensor2D d_y = d_r2;
      ffn_backward(d_r2, cache.ffn_pre, cache.ffn_hidden,
                   params_.value(lp + ".ffn.w1"), params_.value(lp + ".ffn.w2"),
                   d_y);
      Tensor2D d_r1(t, config_.dim);
      num::layer_norm_rows_backward(d_y, params_.value(lp + ".ln1.gain"),
                                    cache.ln1, d_r1);
      Tensor2D d_x = d_r1;
      const attn::AttentionWeights aw = attention_weights(ki);
      Tensor2D d_q(t, config_.dim), d_k(t, config_.dim), d_v(t, config_.dim);
      attn::masked_attention_backward(d_r1, cache.core, pass.mask_plain, aw,
                                      cache.attn, d_q, d_k, d_v, nullptr);
      add_matmul_nt(d_x, d_q, *aw.wq);
      add_matmul_nt(d_x, d_k, *aw.wk);
      add_matmul_nt(d_x, d_v, *aw.wv);
      d = std::move(d_x);
    }
  }
  embed_backward(pass.stream, d);
}

std::vector<double> Model::item_logits(std::span<const double> h) const {
  const Tensor2D& w = params_.value("head.item.w");
  const Tensor2D& b = params_.value("head.item.b");
  std::vector<double> logits(config_.n_items);
  for (std::size_t i = 0; i < config_.n_items; ++i) {
    double v = b(0, i);
    for (std::size_t c = 0; c < config_.dim; ++c) v += h[c] * w(c, i);
    logits[i] = v;
  }
  return logits;
}

std::vector<double> Model::item_projection(std::span<const double> h) const {
  auto logits = item_logits(h);
  return num::softmax(logits);
}

double Model::head_cross_entropy(std::span<const double> h, int target,
                                 double grad_scale, std::span<double> dh,
                                 bool with_grad) {
  if (target < 0 || target >= static_cast<int>(config_.n_items))
    throw std::out_of_range("head_cross_entropy: item id out of range");
  auto logits = item_logits(h);
  std::vector<double> probs;
  double loss = num::cross_entropy_from_logits(
      logits, static_cast<std::size_t>(target), with_grad ? &probs : nullptr);
  if (with_grad) {
    Tensor2D& dw = params_.grad("head.item.w");
    Tensor2D& db = params_.grad("head.item.b");
    const Tensor2D& w = params_.value("head.item.w");
    probs[static_cast<std::size_t>(target)] -= 1.0;
    for (std::size_t i = 0; i < config_.n_items; ++i) {
      const double g = grad_scale * probs[i];
      db(0, i) += g;
      for (std::size_t c = 0; c < config_.dim; ++c) {
        dw(c, i) += g * h[c];
        dh[c] += g * w(c, i);
      }
    }
  }
  return loss;
}

}  // namespace seqmoe::model

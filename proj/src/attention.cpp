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

#include "seqmoe/attention.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace seqmoe::attn {

bool MaskMatrix::every_row_visible() const {
  for (std::size_t q = 0; q < rows_; ++q) {
    bool any = false;
    for (std::size_t k = 0; k < cols_ && !any; ++k) any = at(q, k);
    if (!any) return false;
  }
  return true;
}

std::string MaskMatrix::to_grid() const {
  std::string out;
  out.reserve(rows_ * (cols_ + 1));
  for (std::size_t q = 0; q < rows_; ++q) {
    for (std::size_t k = 0; k < cols_; ++k) out.push_back(at(q, k) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

MaskMatrix MaskMatrix::from_grid(const std::string& grid) {
  std::vector<std::string> lines;
  std::istringstream in(grid);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.empty()) return {};
  MaskMatrix m(lines.size(), lines[0].size());
  for (std::size_t q = 0; q < lines.size(); ++q) {
    if (lines[q].size() != m.cols())
      throw std::invalid_argument("mask grid: ragged rows");
    for (std::size_t k = 0; k < m.cols(); ++k)
      m.set(q, k, lines[q][k] == '1');
  }
  return m;
}

MaskMatrix build_causal_mask(const SegmentMap& seg) {
  const std::size_t t = seg.query_count(), kc = seg.collab_count;
  MaskMatrix m(t, kc + t);
  for (std::size_t q = 0; q < t; ++q)
    for (std::size_t s = 0; s <= q; ++s) m.set(q, kc + s, true);
  return m;
}

MaskMatrix build_context_mask(const SegmentMap& seg) {
  const std::size_t t = seg.query_count(), kc = seg.collab_count;
  MaskMatrix m(t, kc + t);
  for (std::size_t q = 0; q < t; ++q) {
    for (std::size_t c = 0; c < kc; ++c) m.set(q, c, true);
    for (std::size_t s = 0; s < t; ++s)
      if (seg.ordinals[s] == seg.ordinals[q]) m.set(q, kc + s, true);
  }
  return m;
}

AttentionCore project_qkv(const Tensor2D& queries, const Tensor2D& keys,
                          const AttentionWeights& w) {
  AttentionCore core;
  core.q = matmul(queries, *w.wq);
  add_row_bias(core.q, *w.bq);
  core.k = matmul(keys, *w.wk);
  add_row_bias(core.k, *w.bk);
  core.v = matmul(keys, *w.wv);
  add_row_bias(core.v, *w.bv);
  return core;
}

namespace {

void check_dims(const AttentionCore& core, const MaskMatrix& mask,
                std::size_t heads) {
  if (mask.rows() != core.q.rows() || mask.cols() != core.k.rows())
    throw std::invalid_argument("masked_attention: mask/core shape mismatch");
  if (core.q.cols() % heads != 0)
    throw std::invalid_argument("masked_attention: heads must divide dim");
  if (!mask.every_row_visible())
    throw std::invalid_argument(
        "masked_attention: a query row has no visible key");
}

}  // namespace

Tensor2D masked_attention(const AttentionCore& core, const MaskMatrix& mask,
                          const AttentionWeights& w,
                          MaskedAttentionCache* cache) {
  const std::size_t heads = w.heads;
  check_dims(core, mask, heads);
  const std::size_t t = core.q.rows(), m = core.k.rows();
  const std::size_t d = core.q.cols(), dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor2D context(t, d);
  if (cache) {
    cache->weights.assign(heads, Tensor2D(t, m));
  }
  std::vector<double> logits(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t q = 0; q < t; ++q) {
      const double* qr = core.q.row(q) + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        const double* kr = core.k.row(k) + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
        s *= inv_sqrt;
        logits[k] = s;
        if (s > mx) mx = s;
      }
      double sum = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        logits[k] = std::exp(logits[k] - mx);
        sum += logits[k];
      }
      double* ctx = context.row(q) + off;
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        double weight = logits[k] / sum;
        if (cache) cache->weights[h](q, k) = weight;
        const double* vr = core.v.row(k) + off;
        for (std::size_t c = 0; c < dh; ++c) ctx[c] += weight * vr[c];
      }
    }
  }
  if (cache) cache->context = context;
  Tensor2D out = matmul(context, *w.wo);
  add_row_bias(out, *w.bo);
  return out;
}

void masked_attention_backward(const Tensor2D& d_out,
                               const AttentionCore& core,
                               const MaskMatrix& mask,
                               const AttentionWeights& w,
                               const MaskedAttentionCache& cache, Tensor2D& dq,
                               Tensor2D& dk, Tensor2D& dv,
                               AttentionGrads* grads) {
  const std::size_t heads = w.heads;
  const std::size_t t = core.q.rows(), m = core.k.rows();
  const std::size_t d = core.q.cols(), dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor2D d_context(t, d);
  add_matmul_nt(d_context, d_out, *w.wo);
  if (grads && grads->accumulate_output_proj) {
    add_matmul_tn(grads->d_wo, cache.context, d_out);
    accumulate_bias_grad(grads->d_bo, d_out);
  }

  std::vector<double> d_weight(m), d_logit(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Tensor2D& weights = cache.weights[h];
    for (std::size_t q = 0; q < t; ++q) {
      const double* dc = d_context.row(q) + off;
      // dW = dContext . V^T restricted to visible keys, then softmax backward.
      double inner = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        const double* vr = core.v.row(k) + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += dc[c] * vr[c];
        d_weight[k] = s;
        inner += s * weights(q, k);
      }
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        double wqk = weights(q, k);
        d_logit[k] = wqk * (d_weight[k] - inner);
        // dV += w * dContext
        double* dvr = dv.row(k) + off;
        for (std::size_t c = 0; c < dh; ++c) dvr[c] += wqk * dc[c];
      }
      const double* qr = core.q.row(q) + off;
      double* dqr = dq.row(q) + off;
      for (std::size_t k = 0; k < m; ++k) {
        if (!mask.at(q, k)) continue;
        double dl = d_logit[k] * inv_sqrt;
        const double* kr = core.k.row(k) + off;
        double* dkr = dk.row(k) + off;
        for (std::size_t c = 0; c < dh; ++c) {
          dqr[c] += dl * kr[c];
          dkr[c] += dl * qr[c];
        }
      }
    }
  }
}

namespace {

Tensor2D query_rows(const Tensor2D& h_keys, std::size_t collab_count) {
  if (h_keys.rows() < collab_count)
    throw std::invalid_argument("masked_self_attention: bad collab count");
  const std::size_t t = h_keys.rows() - collab_count;
  Tensor2D queries(t, h_keys.cols());
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < h_keys.cols(); ++c)
      queries(r, c) = h_keys(collab_count + r, c);
  return queries;
}

}  // namespace

Tensor2D masked_self_attention(const Tensor2D& h_keys, const MaskMatrix& mask,
                               const AttentionWeights& w,
                               std::size_t collab_count) {
  AttentionCore core = project_qkv(query_rows(h_keys, collab_count), h_keys, w);
  return masked_attention(core, mask, w, nullptr);
}

SelfAttentionGrads masked_self_attention_backward(const Tensor2D& d_out,
                                                  const Tensor2D& h_keys,
                                                  const MaskMatrix& mask,
                                                  const AttentionWeights& w,
                                                  std::size_t collab_count) {
  const Tensor2D queries = query_rows(h_keys, collab_count);
  AttentionCore core = project_qkv(queries, h_keys, w);
  MaskedAttentionCache cache;
  (void)masked_attention(core, mask, w, &cache);

  const std::size_t d = h_keys.cols();
  SelfAttentionGrads g;
  g.d_wq = Tensor2D(d, d);
  g.d_bq = Tensor2D(1, d);
  g.d_wk = Tensor2D(d, d);
  g.d_bk = Tensor2D(1, d);
  g.d_wv = Tensor2D(d, d);
  g.d_bv = Tensor2D(1, d);
  g.d_wo = Tensor2D(d, d);
  g.d_bo = Tensor2D(1, d);
  g.d_h_keys = Tensor2D(h_keys.rows(), d);

  Tensor2D dq(queries.rows(), d), dk(h_keys.rows(), d), dv(h_keys.rows(), d);
  AttentionGrads out_grads;
  out_grads.d_wo = Tensor2D(d, d);
  out_grads.d_bo = Tensor2D(1, d);
  out_grads.accumulate_output_proj = true;
  masked_attention_backward(d_out, core, mask, w, cache, dq, dk, dv,
                            &out_grads);
  g.d_wo = std::move(out_grads.d_wo);
  g.d_bo = std::move(out_grads.d_bo);

  add_matmul_tn(g.d_wq, queries, dq);
  accumulate_bias_grad(g.d_bq, dq);
  add_matmul_tn(g.d_wk, h_keys, dk);
  accumulate_bias_grad(g.d_bk, dk);
  add_matmul_tn(g.d_wv, h_keys, dv);
  accumulate_bias_grad(g.d_bv, dv);

  add_matmul_nt(g.d_h_keys, dk, *w.wk);
  add_matmul_nt(g.d_h_keys, dv, *w.wv);
  Tensor2D d_queries(queries.rows(), d);
  add_matmul_nt(d_queries, dq, *w.wq);
  for (std::size_t r = 0; r < queries.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c)
      g.d_h_keys(collab_count + r, c) += d_queries(r, c);
  return g;
}

}  // namespace seqmoe::attn

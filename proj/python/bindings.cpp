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

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "seqmoe/attention.hpp"
#include "seqmoe/bosearch.hpp"
#include "seqmoe/config.hpp"
#include "seqmoe/evalharness.hpp"
#include "seqmoe/model.hpp"
#include "seqmoe/numerics.hpp"
#include "seqmoe/objectives.hpp"
#include "seqmoe/pipeline.hpp"

namespace py = pybind11;
using namespace seqmoe;

namespace {

using Rows = std::vector<std::vector<double>>;

Tensor2D to_tensor(const Rows& rows) {
  if (rows.empty()) return {};
  Tensor2D t(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size())
      throw std::invalid_argument("ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) t(r, c) = rows[r][c];
  }
  return t;
}

Rows from_tensor(const Tensor2D& t) {
  Rows rows(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) rows[r][c] = t(r, c);
  return rows;
}

attn::SegmentMap make_segments(const std::vector<int>& ordinals,
                               std::size_t collab_count) {
  attn::SegmentMap seg;
  seg.ordinals = ordinals;
  seg.collab_count = collab_count;
  return seg;
}

std::vector<std::vector<bool>> mask_rows(const attn::MaskMatrix& m) {
  std::vector<std::vector<bool>> out(m.rows(), std::vector<bool>(m.cols()));
  for (std::size_t q = 0; q < m.rows(); ++q)
    for (std::size_t k = 0; k < m.cols(); ++k) out[q][k] = m.at(q, k);
  return out;
}

std::vector<pipeline::Stage> parse_stages(
    const std::vector<std::string>& names) {
  std::vector<pipeline::Stage> stages;
  for (const auto& n : names) stages.push_back(pipeline::stage_from_name(n));
  return stages;
}

RunConfig resolve_config(const std::string& config_path,
                         const std::string& out_dir, long long seed) {
  RunConfig c = config_path.empty() ? RunConfig{} : parse_config(config_path);
  if (!out_dir.empty()) c.out_dir = out_dir;
  if (seed >= 0) c.seed = static_cast<std::uint64_t>(seed);
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "sequential recommender with mixture-of-adapter experts";
#ifdef SEQMOE_VERSION
  m.attr("__version__") = SEQMOE_VERSION;
#else
  m.attr("__version__") = "dev";
#endif

  // numerics
  m.def("softmax",
        [](const std::vector<double>& v) { return num::softmax(v); },
        py::arg("values"));
  m.def("cross_entropy",
        [](const std::vector<double>& dist, std::size_t target) {
          return num::cross_entropy(dist, target);
        },
        py::arg("dist"), py::arg("target"));
  m.def("cosine_similarity",
        [](const std::vector<double>& a, const std::vector<double>& b) {
          return num::cosine_similarity(a, b);
        },
        py::arg("a"), py::arg("b"));
  m.def("layer_norm",
        [](const std::vector<double>& x, const std::vector<double>& gain,
           const std::vector<double>& bias) {
          return num::layer_norm(x, gain, bias);
        },
        py::arg("x"), py::arg("gain"), py::arg("bias"));

  // attention masks and the standalone masked self-attention
  m.def("build_causal_mask",
        [](const std::vector<int>& ordinals, std::size_t collab_count) {
          return mask_rows(
              attn::build_causal_mask(make_segments(ordinals, collab_count)));
        },
        py::arg("ordinals"), py::arg("collab_count") = 0);
  m.def("build_context_mask",
        [](const std::vector<int>& ordinals, std::size_t collab_count) {
          return mask_rows(attn::build_context_mask(
              make_segments(ordinals, collab_count)));
        },
        py::arg("ordinals"), py::arg("collab_count") = 0);
  m.def(
      "masked_self_attention",
      [](const Rows& h_keys, const std::vector<std::vector<bool>>& mask,
         const Rows& wq, const std::vector<double>& bq, const Rows& wk,
         const std::vector<double>& bk, const Rows& wv,
         const std::vector<double>& bv, const Rows& wo,
         const std::vector<double>& bo, std::size_t collab_count,
         std::size_t heads) {
        Tensor2D h = to_tensor(h_keys);
        attn::MaskMatrix mm(mask.size(), mask.empty() ? 0 : mask[0].size());
        for (std::size_t q = 0; q < mask.size(); ++q)
          for (std::size_t k = 0; k < mask[q].size(); ++k)
            mm.set(q, k, mask[q][k]);
        Tensor2D twq = to_tensor(wq), twk = to_tensor(wk), twv = to_tensor(wv),
                 two = to_tensor(wo);
        Tensor2D tbq = to_tensor({bq}), tbk = to_tensor({bk}),
                 tbv = to_tensor({bv}), tbo = to_tensor({bo});
        attn::AttentionWeights w{&twq, &tbq, &twk, &tbk, &twv,
                                 &tbv, &two, &tbo, heads};
        return from_tensor(
            attn::masked_self_attention(h, mm, w, collab_count));
      },
      py::arg("h_keys"), py::arg("mask"), py::arg("wq"), py::arg("bq"),
      py::arg("wk"), py::arg("bk"), py::arg("wv"), py::arg("bv"),
      py::arg("wo"), py::arg("bo"), py::arg("collab_count") = 0,
      py::arg("heads") = 1);

  // adapter and gate
  m.def(
      "adapter_forward",
      [](const Rows& h, const Rows& w1, const std::vector<double>& b1,
         const Rows& w2, const std::vector<double>& b2,
         bool tanh_nonlinearity) {
        Tensor2D th = to_tensor(h), tw1 = to_tensor(w1), tw2 = to_tensor(w2);
        Tensor2D tb1 = to_tensor({b1}), tb2 = to_tensor({b2});
        model::AdapterView view{&tw1, &tb1, &tw2, &tb2, tanh_nonlinearity};
        return from_tensor(model::adapter_forward(th, view, nullptr));
      },
      py::arg("h"), py::arg("w1"), py::arg("b1"), py::arg("w2"), py::arg("b2"),
      py::arg("tanh_nonlinearity") = false);
  m.def(
      "gate_fuse",
      [](const Rows& q, const Rows& p, const Rows& w,
         const std::vector<double>& b) {
        Tensor2D tq = to_tensor(q), tp = to_tensor(p), tw = to_tensor(w);
        Tensor2D tb = to_tensor({b});
        model::GateResult res = model::gate_fuse(tq, tp, {&tw, &tb});
        return py::make_tuple(from_tensor(res.fused), from_tensor(res.beta));
      },
      py::arg("q"), py::arg("p"), py::arg("gate_w"), py::arg("gate_b"));

  // losses
  m.def(
      "infonce_loss",
      [](const std::vector<double>& anchor,
         const std::vector<double>& positive, const Rows& negatives,
         double tau) {
        std::vector<std::span<const double>> spans;
        for (const auto& n : negatives) spans.emplace_back(n);
        return losses::infonce_loss(anchor, positive, spans, tau);
      },
      py::arg("anchor"), py::arg("positive"), py::arg("negatives"),
      py::arg("tau") = 1.0);
  m.def("bpr_loss",
        [](const std::vector<double>& user, const std::vector<double>& pos,
           const std::vector<double>& neg) {
          return losses::bpr_loss(user, pos, neg);
        },
        py::arg("user"), py::arg("pos"), py::arg("neg"));
  m.def(
      "total_loss",
      [](double l_seq, double l_align, double l_cl, double l_cf, double l1,
         double l2, double l3) {
        losses::LossBreakdown b =
            losses::total_loss(l_seq, l_align, l_cl, l_cf, l1, l2, l3);
        py::dict d;
        d["l_seq"] = b.l_seq;
        d["l_align"] = b.l_align;
        d["l_cl"] = b.l_cl;
        d["l_cf"] = b.l_cf;
        d["total"] = b.total;
        return d;
      },
      py::arg("l_seq"), py::arg("l_align"), py::arg("l_cl"), py::arg("l_cf"),
      py::arg("lambda1"), py::arg("lambda2"), py::arg("lambda3"));

  // evaluation metrics
  m.def("rank_ground_truth",
        [](const std::vector<double>& scores, std::size_t truth) {
          return evalh::rank_ground_truth(scores, truth);
        },
        py::arg("scores"), py::arg("truth"));
  m.def("compute_metrics",
        [](double rank, int n) {
          evalh::MetricTriple t = evalh::compute_metrics(rank, n);
          py::dict d;
          d["rr"] = t.rr;
          d["recall"] = t.recall;
          d["ndcg"] = t.ndcg;
          return d;
        },
        py::arg("rank"), py::arg("n") = 10);

  // architecture search
  m.def("expected_improvement",
        [](double mean, double variance, double best) {
          return bo::expected_improvement(mean, variance, best);
        },
        py::arg("mean"), py::arg("variance"), py::arg("best"));
  m.def(
      "po_and_gradient",
      [](const std::vector<double>& theta,
         const std::function<double(std::vector<int>)>& alpha,
         const std::string& mode, std::size_t samples, std::uint64_t seed) {
        auto acq = [&](const bo::BitVector& z) {
          std::vector<int> bits(z.begin(), z.end());
          return alpha(bits);
        };
        std::mt19937_64 rng(seed);
        bo::PoResult res = bo::po_and_gradient(
            theta, acq,
            mode == "exact" ? bo::PoMode::kExact : bo::PoMode::kMonteCarlo,
            samples, &rng);
        return py::make_tuple(res.value, res.grad);
      },
      py::arg("theta"), py::arg("alpha"), py::arg("mode") = "exact",
      py::arg("samples") = 0, py::arg("seed") = 0);
  m.def(
      "bo_search",
      [](const std::function<double(std::vector<int>)>& objective,
         std::size_t n_bits, std::size_t iterations, std::size_t init_designs,
         std::uint64_t seed) {
        bo::SearchOptions opts;
        opts.n_iterations = iterations;
        opts.init_designs = init_designs;
        opts.seed = seed;
        auto fn = [&](const bo::BitVector& z) {
          std::vector<int> bits(z.begin(), z.end());
          return objective(bits);
        };
        bo::SearchResult res = bo::bo_search(fn, n_bits, opts);
        py::list trace;
        for (const auto& tp : res.trace) {
          py::dict row;
          row["iter"] = tp.iter;
          row["z"] = std::vector<int>(tp.z.begin(), tp.z.end());
          row["f"] = tp.f;
          row["theta"] = tp.theta;
          row["best_so_far"] = tp.best_so_far;
          row["failed"] = tp.failed;
          trace.append(row);
        }
        py::dict out;
        out["best_z"] = std::vector<int>(res.best_z.begin(), res.best_z.end());
        out["best_f"] = res.best_f;
        out["trace"] = trace;
        return out;
      },
      py::arg("objective"), py::arg("n_bits"), py::arg("iterations") = 30,
      py::arg("init_designs") = 6, py::arg("seed") = 0);

  // pipeline
  m.def("make_synthetic_corpus",
        [](std::size_t n_items, std::size_t n_users, std::uint64_t seed,
           const std::string& items_path,
           const std::string& interactions_path) {
          pipeline::make_synthetic_corpus(n_items, n_users, seed, items_path,
                                          interactions_path);
        },
        py::arg("n_items"), py::arg("n_users"), py::arg("seed"),
        py::arg("items_path"), py::arg("interactions_path"));
  m.def(
      "run_stages",
      [](const std::string& config_path,
         const std::vector<std::string>& stages, const std::string& out_dir,
         long long seed) {
        pipeline::run_pipeline(resolve_config(config_path, out_dir, seed),
                               parse_stages(stages));
      },
      py::arg("config_path"), py::arg("stages"), py::arg("out_dir") = "",
      py::arg("seed") = -1);
  m.def("report",
        [](const std::string& config_path, const std::string& out_dir,
           long long seed) {
          return pipeline::report(resolve_config(config_path, out_dir, seed));
        },
        py::arg("config_path") = "", py::arg("out_dir") = "",
        py::arg("seed") = -1);
  m.def("default_config", [] { return write_config(RunConfig{}); });
  m.def("config_hash_of",
        [](const std::string& text) {
          return config_hash(parse_config_text(text));
        },
        py::arg("config_text"));
}

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

#include "seqmoe/trainer.hpp"

#include <algorithm>
#include <iostream>
#include <stdexcept>
#include <unordered_set>

#include "seqmoe/cf.hpp"
#include "seqmoe/numerics.hpp"

namespace seqmoe::train {

SeqExample make_seq_example(const corpus::UserSplit& us,
                            const corpus::Dataset& dataset,
                            std::size_t max_stream) {
  SeqExample ex;
  ex.user_id = us.user_id;
  // Keep the longest suffix of whole items whose tokens (+ one [SEQ] each)
  // fit the budget.
  std::size_t tokens = 0;
  std::size_t start = us.train_items.size();
  while (start > 0) {
    const std::size_t item =
        static_cast<std::size_t>(us.train_items[start - 1]);
    const std::size_t cost = dataset.sentences[item].token_ids.size() + 1;
    if (tokens + cost > max_stream) break;
    tokens += cost;
    --start;
  }
  if (start == us.train_items.size())
    throw std::runtime_error("sequence example: no item fits the budget");
  ex.items.assign(us.train_items.begin() + static_cast<std::ptrdiff_t>(start),
                  us.train_items.end());
  ex.targets.assign(us.train_targets.begin() + static_cast<std::ptrdiff_t>(start),
                    us.train_targets.end());
  return ex;
}

namespace {

struct PendingPass {
  model::ForwardPass pass;
  Tensor2D d_states;
};

}  // namespace

losses::LossBreakdown total_loss_batch(model::Model& m,
                                       const corpus::Dataset& dataset,
                                       const model::Genome& genome,
                                       const TotalLossBatch& batch,
                                       double lambda1, double lambda2,
                                       double lambda3, double tau,
                                       bool with_grad) {
  const std::size_t d = m.config().dim;
  double l_seq = 0.0, l_align = 0.0, l_cl = 0.0, l_cf = 0.0;

  // Sequence task: mean over every supervised position in the batch.
  if (!batch.seq.empty()) {
    std::vector<PendingPass> pending;
    std::size_t positions = 0;
    for (const auto& ex : batch.seq) {
      corpus::TokenStream stream =
          corpus::build_sequence_input(ex.items, dataset.sentences);
      auto refs = m.collab_refs(model::Task::kSequence, ex.user_id,
                                ex.items.back());
      PendingPass pp{m.forward(stream, model::Task::kSequence, genome, refs,
                               with_grad),
                     Tensor2D()};
      positions += pp.pass.stream.seq_positions.size();
      pending.push_back(std::move(pp));
    }
    const double scale = 1.0 / static_cast<double>(positions);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const auto& ex = batch.seq[i];
      auto& pp = pending[i];
      pp.d_states = Tensor2D(pp.pass.states.rows(), d);
      const auto& seq_pos = pp.pass.stream.seq_positions;
      if (seq_pos.size() != ex.targets.size())
        throw std::logic_error("sequence example/stream position mismatch");
      for (std::size_t j = 0; j < seq_pos.size(); ++j) {
        l_seq += scale * m.head_cross_entropy(
                             pp.pass.states.row_span(seq_pos[j]),
                             ex.targets[j], scale,
                             pp.d_states.row_span(seq_pos[j]), with_grad);
      }
      if (with_grad) m.backward(pp.pass, pp.d_states);
    }
  }

  if (!batch.align.empty()) {
    const double scale = lambda1 / static_cast<double>(batch.align.size());
    for (const auto& ex : batch.align) {
      corpus::TokenStream stream = corpus::build_alignment_input(
          dataset.sentences[static_cast<std::size_t>(ex.item_id)],
          dataset.prompt_tokens);
      auto refs = m.collab_refs(model::Task::kAlignment, -1, ex.item_id);
      model::ForwardPass pass = m.forward(stream, model::Task::kAlignment,
                                          genome, refs, with_grad);
      Tensor2D d_states(pass.states.rows(), d);
      const auto pos = static_cast<std::size_t>(pass.stream.align_position);
      l_align += m.head_cross_entropy(pass.states.row_span(pos), ex.item_id,
                                      scale, d_states.row_span(pos),
                                      with_grad) /
                 static_cast<double>(batch.align.size());
      if (with_grad) m.backward(pass, d_states);
    }
  }

  if (!batch.contrastive.empty()) {
    const double scale =
        lambda2 / static_cast<double>(batch.contrastive.size());
    for (const auto& ex : batch.contrastive) {
      corpus::TokenStream anchor_stream =
          corpus::build_sequence_input(ex.items, dataset.sentences);
      auto anchor_refs = m.collab_refs(model::Task::kSequence, ex.user_id,
                                       ex.items.back());
      model::ForwardPass anchor_pass = m.forward(
          anchor_stream, model::Task::kSequence, genome, anchor_refs,
          with_grad);
      const std::size_t anchor_state_pos =
          anchor_pass.stream.seq_positions.at(ex.anchor_pos);

      auto run_alignment = [&](int item) {
        corpus::TokenStream s = corpus::build_alignment_input(
            dataset.sentences[static_cast<std::size_t>(item)],
            dataset.prompt_tokens);
        auto refs = m.collab_refs(model::Task::kAlignment, -1, item);
        return m.forward(s, model::Task::kAlignment, genome, refs, with_grad);
      };
      model::ForwardPass pos_pass = run_alignment(ex.positive);
      std::vector<model::ForwardPass> neg_passes;
      neg_passes.reserve(ex.negatives.size());
      for (int n : ex.negatives) neg_passes.push_back(run_alignment(n));

      const std::size_t pos_state =
          static_cast<std::size_t>(pos_pass.stream.align_position);
      std::vector<std::span<const double>> neg_spans;
      for (auto& np : neg_passes)
        neg_spans.push_back(np.states.row_span(
            static_cast<std::size_t>(np.stream.align_position)));

      if (!with_grad) {
        l_cl += losses::infonce_loss(
                    anchor_pass.states.row_span(anchor_state_pos),
                    pos_pass.states.row_span(pos_state), neg_spans, tau) /
                static_cast<double>(batch.contrastive.size());
        continue;
      }
      Tensor2D d_anchor(anchor_pass.states.rows(), d);
      Tensor2D d_pos(pos_pass.states.rows(), d);
      std::vector<Tensor2D> d_negs;
      std::vector<std::span<double>> d_neg_spans;
      d_negs.reserve(neg_passes.size());
      for (auto& np : neg_passes) d_negs.emplace_back(np.states.rows(), d);
      for (std::size_t j = 0; j < neg_passes.size(); ++j)
        d_neg_spans.push_back(d_negs[j].row_span(static_cast<std::size_t>(
            neg_passes[j].stream.align_position)));
      l_cl += losses::infonce_loss_grad(
                  anchor_pass.states.row_span(anchor_state_pos),
                  pos_pass.states.row_span(pos_state), neg_spans, tau, scale,
                  d_anchor.row_span(anchor_state_pos),
                  d_pos.row_span(pos_state), d_neg_spans) /
              static_cast<double>(batch.contrastive.size());
      m.backward(anchor_pass, d_anchor);
      m.backward(pos_pass, d_pos);
      for (std::size_t j = 0; j < neg_passes.size(); ++j)
        m.backward(neg_passes[j], d_negs[j]);
    }
  }

  if (!batch.cf.empty()) {
    const double scale = lambda3 / static_cast<double>(batch.cf.size());
    for (const auto& ex : batch.cf)
      l_cf += cf::bpr_step(m.params(), ex.user, ex.pos, ex.neg, scale,
                           with_grad) /
              static_cast<double>(batch.cf.size());
  }

  return losses::total_loss(l_seq, l_align, l_cl, l_cf, lambda1, lambda2,
                            lambda3);
}

namespace {

// Cyclic shuffled order; reshuffles on wrap-around.
class ShuffledCycle {
 public:
  ShuffledCycle(std::size_t n, std::mt19937_64& rng) : rng_(rng) {
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::mt19937_64& rng_;
};

}  // namespace

std::vector<EpochLog> train_model(
    model::Model& m, const corpus::Dataset& dataset,
    const corpus::HardSampleIndex& hard_index,
    const corpus::CoOccurrence& cooc, const model::Genome& genome,
    const TrainOptions& options,
    const std::vector<std::size_t>& user_subset) {
  m.check_genome(genome);
  std::vector<std::size_t> users = user_subset;
  if (users.empty()) {
    users.resize(dataset.splits.users.size());
    for (std::size_t i = 0; i < users.size(); ++i) users[i] = i;
  }
  if (users.empty()) throw std::invalid_argument("train_model: no sequences");

  std::mt19937_64 rng(options.seed);

  // Pre-truncated training streams and per-user positive pools.
  std::vector<SeqExample> examples;
  examples.reserve(users.size());
  std::vector<std::vector<int>> positives(users.size());
  std::vector<std::unordered_set<int>> seen(users.size());
  for (std::size_t i = 0; i < users.size(); ++i) {
    const auto& us = dataset.splits.users[users[i]];
    examples.push_back(make_seq_example(us, dataset, m.config().max_stream));
    for (int item : us.train_items)
      if (seen[i].insert(item).second) positives[i].push_back(item);
  }

  ShuffledCycle seq_cycle(users.size(), rng);
  ShuffledCycle align_cycle(dataset.n_items(), rng);
  ShuffledCycle cl_cycle(users.size(), rng);
  ShuffledCycle cf_cycle(users.size(), rng);
  std::uniform_int_distribution<int> pick_item(
      0, static_cast<int>(dataset.n_items()) - 1);

  const std::size_t steps_per_epoch =
      (users.size() + options.batch_size - 1) / options.batch_size;
  num::LrSchedule schedule{options.lr, options.warmup_frac,
                           options.epochs * steps_per_epoch};
  num::AdamW opt(0.9, 0.999, 1e-8, options.weight_decay);

  std::vector<EpochLog> log;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    double seq_n = 0, align_n = 0, cl_n = 0, total_n = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
      TotalLossBatch batch;
      const int task = static_cast<int>(global_step % 3);
      if (task == 0) {
        for (std::size_t b = 0; b < options.batch_size; ++b)
          batch.seq.push_back(examples[seq_cycle.next()]);
      } else if (task == 1) {
        for (std::size_t b = 0; b < options.batch_size; ++b)
          batch.align.push_back(
              {static_cast<int>(align_cycle.next())});
      } else {
        for (std::size_t b = 0; b < options.batch_size; ++b) {
          const std::size_t ui = cl_cycle.next();
          auto tuples = corpus::sample_contrastive_batch(
              examples[ui].items, options.n_s, options.n_cl, hard_index, cooc,
              dataset.n_items(), rng);
          for (auto& t : tuples) {
            ClExample ex;
            ex.user_id = examples[ui].user_id;
            ex.items = examples[ui].items;
            ex.anchor_pos = t.anchor_pos;
            ex.positive = t.positive;
            ex.negatives = std::move(t.negatives);
            batch.contrastive.push_back(std::move(ex));
          }
        }
      }
      // One BPR pair per batch slot, every step.
      for (std::size_t b = 0; b < options.batch_size; ++b) {
        const std::size_t ui = cf_cycle.next();
        if (positives[ui].empty()) continue;
        std::uniform_int_distribution<std::size_t> pick_pos(
            0, positives[ui].size() - 1);
        CfExample ex;
        ex.user = examples[ui].user_id;
        ex.pos = positives[ui][pick_pos(rng)];
        ex.neg = pick_item(rng);
        for (int tries = 0; tries < 32 && (seen[ui].count(ex.neg) ||
                                           ex.neg == ex.pos);
             ++tries)
          ex.neg = pick_item(rng);
        if (ex.neg == ex.pos) continue;
        batch.cf.push_back(ex);
      }

      m.params().zero_grads();
      losses::LossBreakdown b = total_loss_batch(
          m, dataset, genome, batch, options.lambda1, options.lambda2,
          options.lambda3, options.tau, /*with_grad=*/true);
      opt.step(m.params(), schedule.at(global_step));

      if (!batch.seq.empty()) el.l_seq += b.l_seq, ++seq_n;
      if (!batch.align.empty()) el.l_align += b.l_align, ++align_n;
      if (!batch.contrastive.empty()) el.l_cl += b.l_cl, ++cl_n;
      el.l_cf += b.l_cf;
      el.total += b.total;
      ++total_n;
    }
    if (seq_n > 0) el.l_seq /= seq_n;
    if (align_n > 0) el.l_align /= align_n;
    if (cl_n > 0) el.l_cl /= cl_n;
    el.l_cf /= total_n;
    el.total /= total_n;
    if (!options.quiet)
      std::cerr << "[train] epoch " << epoch << " total " << el.total
                << " seq " << el.l_seq << " align " << el.l_align << "\n";
    log.push_back(el);
  }
  return log;
}

}  // namespace seqmoe::train

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

#ifndef SEQMOE_CORPUS_HPP
#define SEQMOE_CORPUS_HPP

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "seqmoe/attention.hpp"
#include "seqmoe/tensor.hpp"

namespace seqmoe::corpus {

// Token <-> id bijection with reserved ids for the special tokens. Regular
// ids are handed out in first-seen order, which makes ingestion
// deterministic for identical inputs.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSeq = 1;
  static constexpr int kAlign = 2;
  static constexpr int kUnknown = 3;
  static constexpr int kFirstRegular = 4;

  Vocabulary();

  // Building mode: unseen tokens get fresh ids. After freeze(), unseen
  // tokens map to kUnknown.
  int add_or_lookup(const std::string& token);
  int lookup(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  static bool is_special(int id) { return id < kFirstRegular; }

  const std::vector<std::string>& all_tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  bool frozen_ = false;
};

// Lowercased whitespace tokenization.
std::vector<std::string> tokenize(const std::string& text);

struct ItemRecord {
  std::string external_id;
  // Ordered (key tokens, value tokens) pairs.
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>>
      attributes;
};

struct ItemSentence {
  std::vector<int> token_ids;
};

struct InteractionSequence {
  int user_id = -1;
  std::vector<int> item_ids;  // time-ordered dense catalog indices
};

// Flattens k_1, v_1, ..., k_g, v_g in attribute order, truncated to the
// first max_tokens tokens. Throws on an empty attribute list.
ItemSentence flatten_item(const ItemRecord& record, Vocabulary& vocab,
                          std::size_t max_tokens);

struct TokenStream {
  std::vector<int> tokens;
  attn::SegmentMap segments;               // collab_count filled in later
  std::vector<std::size_t> seq_positions;  // 0-based positions of [SEQ]
  std::ptrdiff_t align_position = -1;      // 0-based position of [ALIGN]
};

// T_1 [SEQ] ... T_n [SEQ]; each [SEQ] belongs to the item it terminates.
TokenStream build_sequence_input(const std::vector<int>& item_ids,
                                 const std::vector<ItemSentence>& catalog);

// prompt ++ T_i ++ [ALIGN]; prompt tokens are segment 0, the item sentence
// and [ALIGN] are segment 1.
TokenStream build_alignment_input(const ItemSentence& item,
                                  const std::vector<int>& prompt_tokens);

struct EvalExample {
  int user_id = -1;
  std::vector<int> context;
  int target = -1;
};

struct UserSplit {
  int user_id = -1;
  // Training stream items (1..n-2) and per-position next-item targets
  // (items 2..n-1). Same length; position j predicts targets[j].
  std::vector<int> train_items;
  std::vector<int> train_targets;
  EvalExample valid;
  EvalExample test;
};

struct Splits {
  std::vector<UserSplit> users;
  std::size_t excluded_short = 0;  // sequences shorter than 3
};

Splits leave_one_out_split(const std::vector<InteractionSequence>& sequences);

// Items sharing a training stream (items 1..n-2) with each item.
struct CoOccurrence {
  std::vector<std::unordered_set<int>> sets;
  bool co_occur(int a, int b) const { return sets[a].count(b) > 0; }
};

CoOccurrence build_co_occurrence(const Splits& splits, std::size_t n_items);

struct HardSampleIndex {
  std::vector<std::vector<int>> neighbors;  // sorted, self excluded
  std::size_t empty_count = 0;              // items left with no neighbor
};

// Deterministic bag-of-tokens embedding: the mean of seed-fixed Gaussian
// token vectors over the item sentence.
Tensor2D text_embeddings(const std::vector<ItemSentence>& sentences,
                         std::size_t vocab_size, std::size_t dim,
                         std::uint64_t seed);

// N_j = (top-k by L2 on text embeddings  u  top-k by L2 on latent vectors)
// minus items co-occurring with j, minus j itself; k = max(1, ceil(ratio*|I|)).
HardSampleIndex generate_hard_samples(const Tensor2D& text_emb,
                                      const Tensor2D& cf_latent,
                                      const CoOccurrence& cooc, double ratio);

struct ContrastiveTuple {
  std::size_t anchor_pos = 0;  // position of the anchor within the item list
  int anchor = -1;
  int positive = -1;
  std::vector<int> negatives;
};

// Anchors are drawn from every position except the last; the positive is the
// next item; negatives come from the positive's hard set, falling back to
// uniform non-co-occurring items when the set runs dry.
std::vector<ContrastiveTuple> sample_contrastive_batch(
    const std::vector<int>& items, std::size_t n_s, std::size_t n_cl,
    const HardSampleIndex& index, const CoOccurrence& cooc,
    std::size_t n_items, std::mt19937_64& rng);

struct Dataset {
  Vocabulary vocab;
  std::vector<std::string> item_external_ids;
  std::vector<ItemSentence> sentences;
  std::vector<std::string> user_external_ids;
  std::vector<InteractionSequence> sequences;
  std::vector<int> prompt_tokens;
  Splits splits;
  std::size_t rejected_items = 0;
  std::size_t dropped_unknown_refs = 0;
  std::size_t dropped_short_sequences = 0;

  std::size_t n_items() const { return sentences.size(); }
  std::size_t n_users() const { return sequences.size(); }
};

inline constexpr const char* kDefaultPrompt =
    "Give the ID of the item described by:";

// items.jsonl: {"item_id": str, "attributes": {key: value, ...}} with
// attributes taken in key-sorted order. interactions.jsonl: {"user_id": str,
// "items": [item_id, ...]} time-ordered. Sequences shorter than 4 after
// filtering are dropped.
Dataset ingest(const std::string& items_path,
               const std::string& interactions_path, std::size_t max_tokens,
               const std::string& prompt_text = kDefaultPrompt);

void save_dataset(const Dataset& ds, const std::string& path,
                  const std::string& config_hash, std::uint64_t seed);
Dataset load_dataset(const std::string& path);

void save_hard_samples(const HardSampleIndex& index,
                       const std::vector<std::string>& item_external_ids,
                       const std::string& path);
HardSampleIndex load_hard_samples(
    const std::string& path,
    const std::vector<std::string>& item_external_ids);

}  // namespace seqmoe::corpus

#endif  // SEQMOE_CORPUS_HPP

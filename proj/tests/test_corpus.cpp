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

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "seqmoe/corpus.hpp"

using namespace seqmoe;
using namespace seqmoe::corpus;
namespace fs = std::filesystem;

namespace {

ItemRecord mug_record() {
  ItemRecord r;
  r.external_id = "mug1";
  r.attributes = {{{"title"}, {"red", "mug"}}, {{"brand"}, {"acme"}}};
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() /
                   "seqmoe_corpus_test") {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream f(p);
  f << content;
}

}  // namespace

TEST_SUITE_BEGIN("corpus");

TEST_CASE("vocabulary is a bijection with distinct reserved ids") {
  Vocabulary v;
  CHECK(v.size() == 4);
  std::set<int> reserved{Vocabulary::kPad, Vocabulary::kSeq,
                         Vocabulary::kAlign, Vocabulary::kUnknown};
  CHECK(reserved.size() == 4);
  int a = v.add_or_lookup("red");
  int b = v.add_or_lookup("mug");
  CHECK(a != b);
  CHECK(v.add_or_lookup("red") == a);
  CHECK(v.token(a) == "red");
  CHECK(v.token(b) == "mug");
  // bijection over everything seen so far
  std::set<std::string> tokens(v.all_tokens().begin(), v.all_tokens().end());
  CHECK(tokens.size() == v.size());
  v.freeze();
  CHECK(v.add_or_lookup("unseen") == Vocabulary::kUnknown);
  CHECK(v.lookup("red") == a);
}

TEST_CASE("tokenize lowercases and splits on whitespace") {
  auto toks = tokenize("  Red  MUG\tacme\n");
  REQUIRE(toks.size() == 3);
  CHECK(toks[0] == "red");
  CHECK(toks[1] == "mug");
  CHECK(toks[2] == "acme");
}

TEST_CASE("flatten_item concatenates key/value tokens in order") {
  Vocabulary v;
  ItemSentence s = flatten_item(mug_record(), v, 30);
  std::vector<std::string> words;
  for (int id : s.token_ids) words.push_back(v.token(id));
  CHECK(words == std::vector<std::string>{"title", "red", "mug", "brand",
                                          "acme"});
  for (int id : s.token_ids) CHECK_FALSE(Vocabulary::is_special(id));
}

TEST_CASE("flatten_item truncates to the first m tokens") {
  Vocabulary v;
  ItemSentence s = flatten_item(mug_record(), v, 3);
  std::vector<std::string> words;
  for (int id : s.token_ids) words.push_back(v.token(id));
  CHECK(words == std::vector<std::string>{"title", "red", "mug"});
}

TEST_CASE("flatten_item rejects an empty attribute list") {
  Vocabulary v;
  ItemRecord r;
  r.external_id = "empty";
  CHECK_THROWS_AS((void)flatten_item(r, v, 30), std::invalid_argument);
}

TEST_CASE("sequence input: stream layout and [SEQ] positions") {
  Vocabulary v;
  std::vector<ItemSentence> catalog(2);
  catalog[0].token_ids = {v.add_or_lookup("a1"), v.add_or_lookup("a2")};
  catalog[1].token_ids = {v.add_or_lookup("b1")};
  TokenStream s = build_sequence_input({0, 1}, catalog);
  CHECK(s.tokens.size() == 5);
  // [SEQ] positions 3 and 5 in 1-indexed terms
  REQUIRE(s.seq_positions.size() == 2);
  CHECK(s.seq_positions[0] == 2);
  CHECK(s.seq_positions[1] == 4);
  CHECK(s.tokens[2] == Vocabulary::kSeq);
  CHECK(s.tokens[4] == Vocabulary::kSeq);
  CHECK(s.segments.ordinals == std::vector<int>{1, 1, 1, 2, 2});
}

TEST_CASE("sequence input: single item segments") {
  Vocabulary v;
  std::vector<ItemSentence> catalog(1);
  catalog[0].token_ids = {v.add_or_lookup("x"), v.add_or_lookup("y"),
                          v.add_or_lookup("z")};
  TokenStream s = build_sequence_input({0}, catalog);
  CHECK(s.segments.ordinals == std::vector<int>{1, 1, 1, 1});
}

TEST_CASE("sequence input: one [SEQ] per item; segments non-decreasing") {
  Vocabulary v;
  std::mt19937_64 rng(5);
  std::vector<ItemSentence> catalog(7);
  for (auto& s : catalog) {
    const std::size_t len = 1 + rng() % 5;
    for (std::size_t i = 0; i < len; ++i)
      s.token_ids.push_back(v.add_or_lookup("w" + std::to_string(rng() % 40)));
  }
  std::vector<int> items{3, 1, 4, 1, 5};
  TokenStream s = build_sequence_input(items, catalog);
  std::size_t seq_count = 0;
  for (int t : s.tokens)
    if (t == Vocabulary::kSeq) ++seq_count;
  CHECK(seq_count == items.size());
  CHECK(s.seq_positions.size() == items.size());
  for (std::size_t i = 1; i < s.segments.ordinals.size(); ++i)
    CHECK(s.segments.ordinals[i] >= s.segments.ordinals[i - 1]);
  // each [SEQ] maps back to exactly one item ordinal
  for (std::size_t i = 0; i < s.seq_positions.size(); ++i)
    CHECK(s.segments.ordinals[s.seq_positions[i]] == static_cast<int>(i + 1));
}

TEST_CASE("sequence input: missing sentence is a data-integrity error") {
  std::vector<ItemSentence> catalog(2);
  catalog[0].token_ids = {5};
  CHECK_THROWS_AS((void)build_sequence_input({0, 1}, catalog),
                  std::runtime_error);
}

TEST_CASE("alignment input layout") {
  Vocabulary v;
  std::vector<int> prompt{v.add_or_lookup("p1"), v.add_or_lookup("p2"),
                          v.add_or_lookup("p3"), v.add_or_lookup("p4")};
  ItemSentence item;
  item.token_ids = {v.add_or_lookup("i1"), v.add_or_lookup("i2"),
                    v.add_or_lookup("i3")};
  TokenStream s = build_alignment_input(item, prompt);
  CHECK(s.tokens.size() == 8);
  CHECK(s.align_position == 7);
  CHECK(s.tokens[7] == Vocabulary::kAlign);
  CHECK(s.segments.ordinals ==
        std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1});

  TokenStream empty_prompt = build_alignment_input(item, {});
  CHECK(empty_prompt.tokens.size() == item.token_ids.size() + 1);
}

TEST_CASE("default prompt text") {
  CHECK(std::string(kDefaultPrompt) ==
        "Give the ID of the item described by:");
}

TEST_CASE("leave-one-out split on [a,b,c,d]") {
  InteractionSequence seq;
  seq.user_id = 0;
  seq.item_ids = {10, 11, 12, 13};
  Splits s = leave_one_out_split({seq});
  REQUIRE(s.users.size() == 1);
  const UserSplit& us = s.users[0];
  CHECK(us.test.context == std::vector<int>{10, 11, 12});
  CHECK(us.test.target == 13);
  CHECK(us.valid.context == std::vector<int>{10, 11});
  CHECK(us.valid.target == 12);
  CHECK(us.train_items == std::vector<int>{10, 11});
  CHECK(us.train_targets == std::vector<int>{11, 12});
}

TEST_CASE("leave-one-out split on [a,b,c] keeps the single pair a->b") {
  InteractionSequence seq;
  seq.user_id = 3;
  seq.item_ids = {7, 8, 9};
  Splits s = leave_one_out_split({seq});
  REQUIRE(s.users.size() == 1);
  CHECK(s.users[0].train_items == std::vector<int>{7});
  CHECK(s.users[0].train_targets == std::vector<int>{8});
}

TEST_CASE("leave-one-out: targets never in their own context") {
  std::mt19937_64 rng(9);
  std::vector<InteractionSequence> seqs;
  for (int u = 0; u < 30; ++u) {
    InteractionSequence s;
    s.user_id = u;
    const std::size_t n = 3 + rng() % 8;
    std::vector<int> pool(40);
    for (int i = 0; i < 40; ++i) pool[i] = i;
    std::shuffle(pool.begin(), pool.end(), rng);
    s.item_ids.assign(pool.begin(), pool.begin() + n);
    seqs.push_back(s);
  }
  Splits splits = leave_one_out_split(seqs);
  for (const auto& us : splits.users) {
    CHECK(std::find(us.test.context.begin(), us.test.context.end(),
                    us.test.target) == us.test.context.end());
    CHECK(std::find(us.valid.context.begin(), us.valid.context.end(),
                    us.valid.target) == us.valid.context.end());
  }
}

TEST_CASE("leave-one-out excludes short sequences with a count") {
  std::vector<InteractionSequence> seqs(3);
  for (auto& s : seqs) s.item_ids = {1, 2};
  Splits splits = leave_one_out_split(seqs);
  CHECK(splits.users.empty());
  CHECK(splits.excluded_short == 3);
}

TEST_CASE("hard samples: ceiling rule and zero-distance neighbor") {
  // |I| = 4, ratio 0.005 -> k = 1 per similarity source.
  Tensor2D text(4, 3), latent(4, 3);
  // items 0 and 1 identical in text space, far in latent space
  text(0, 0) = 1.0;
  text(1, 0) = 1.0;
  text(2, 0) = 50.0;
  text(3, 0) = -50.0;
  for (int i = 0; i < 4; ++i) latent(i, 0) = i * 100.0;
  CoOccurrence cooc;
  cooc.sets.resize(4);
  HardSampleIndex idx = generate_hard_samples(text, latent, cooc, 0.005);
  REQUIRE(idx.neighbors.size() == 4);
  // each union has at most 2 entries (k = 1 from each source)
  for (const auto& n : idx.neighbors) CHECK(n.size() <= 2);
  CHECK(std::find(idx.neighbors[0].begin(), idx.neighbors[0].end(), 1) !=
        idx.neighbors[0].end());
}

TEST_CASE("hard samples match a brute-force oracle on a 20-item catalog") {
  std::mt19937_64 rng(77);
  const std::size_t n = 20, dim = 6;
  Tensor2D text = Tensor2D::gaussian(n, dim, 1.0, rng);
  Tensor2D latent = Tensor2D::gaussian(n, dim, 1.0, rng);
  CoOccurrence cooc;
  cooc.sets.resize(n);
  // some co-occurrence structure
  for (int a = 0; a < 10; ++a) {
    int i = static_cast<int>(rng() % n), j = static_cast<int>(rng() % n);
    if (i == j) continue;
    cooc.sets[i].insert(j);
    cooc.sets[j].insert(i);
  }
  const double ratio = 0.1;  // k = 2
  HardSampleIndex idx = generate_hard_samples(text, latent, cooc, ratio);

  auto l2 = [&](const Tensor2D& e, std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c)
      s += (e(a, c) - e(b, c)) * (e(a, c) - e(b, c));
    return s;
  };
  const std::size_t k = 2;  // ceil(0.1 * 20)
  for (std::size_t j = 0; j < n; ++j) {
    // oracle: sort all pairs by distance, take top k from each source
    std::set<int> expected;
    for (const Tensor2D* emb : {&text, &latent}) {
      std::vector<std::pair<double, int>> d;
      for (std::size_t o = 0; o < n; ++o)
        if (o != j) d.emplace_back(l2(*emb, j, o), static_cast<int>(o));
      std::sort(d.begin(), d.end());
      for (std::size_t i = 0; i < k; ++i) expected.insert(d[i].second);
    }
    std::set<int> filtered;
    for (int e : expected)
      if (!cooc.co_occur(static_cast<int>(j), e)) filtered.insert(e);
    std::set<int> actual(idx.neighbors[j].begin(), idx.neighbors[j].end());
    CHECK(actual == filtered);
  }
}

TEST_CASE("hard-sample index never contains a co-occurring pair or self") {
  std::mt19937_64 rng(79);
  const std::size_t n = 30;
  Tensor2D text = Tensor2D::gaussian(n, 4, 1.0, rng);
  Tensor2D latent = Tensor2D::gaussian(n, 4, 1.0, rng);
  std::vector<InteractionSequence> seqs;
  for (int u = 0; u < 15; ++u) {
    InteractionSequence s;
    s.user_id = u;
    for (int i = 0; i < 6; ++i)
      s.item_ids.push_back(static_cast<int>(rng() % n));
    seqs.push_back(s);
  }
  Splits splits = leave_one_out_split(seqs);
  CoOccurrence cooc = build_co_occurrence(splits, n);
  HardSampleIndex idx = generate_hard_samples(text, latent, cooc, 0.2);
  for (std::size_t j = 0; j < n; ++j) {
    for (int o : idx.neighbors[j]) {
      CHECK(o != static_cast<int>(j));
      for (const auto& us : splits.users) {
        bool has_j = std::find(us.train_items.begin(), us.train_items.end(),
                               static_cast<int>(j)) != us.train_items.end();
        bool has_o = std::find(us.train_items.begin(), us.train_items.end(),
                               o) != us.train_items.end();
        CHECK_FALSE((has_j && has_o));
      }
    }
  }
}

TEST_CASE("contrastive sampling: [a,b] yields anchor a, positive b") {
  HardSampleIndex idx;
  idx.neighbors = {{2}, {2}, {0}};
  CoOccurrence cooc;
  cooc.sets.resize(3);
  std::mt19937_64 rng(1);
  auto batch = sample_contrastive_batch({0, 1}, 1, 1, idx, cooc, 3, rng);
  REQUIRE(batch.size() == 1);
  CHECK(batch[0].anchor == 0);
  CHECK(batch[0].anchor_pos == 0);
  CHECK(batch[0].positive == 1);
  REQUIRE(batch[0].negatives.size() == 1);
  CHECK(batch[0].negatives[0] == 2);
}

TEST_CASE("contrastive sampling is deterministic under a fixed seed") {
  HardSampleIndex idx;
  idx.neighbors.resize(10);
  for (std::size_t j = 0; j < 10; ++j)
    for (int o = 0; o < 10; ++o)
      if (o != static_cast<int>(j)) idx.neighbors[j].push_back(o);
  CoOccurrence cooc;
  cooc.sets.resize(10);
  std::vector<int> items{0, 1, 2, 3, 4, 5};
  std::mt19937_64 rng1(42), rng2(42);
  auto b1 = sample_contrastive_batch(items, 2, 3, idx, cooc, 10, rng1);
  auto b2 = sample_contrastive_batch(items, 2, 3, idx, cooc, 10, rng2);
  REQUIRE(b1.size() == b2.size());
  for (std::size_t i = 0; i < b1.size(); ++i) {
    CHECK(b1[i].anchor == b2[i].anchor);
    CHECK(b1[i].positive == b2[i].positive);
    CHECK(b1[i].negatives == b2[i].negatives);
  }
  // anchors never at the last position; positives follow anchors
  for (const auto& t : b1) {
    CHECK(t.anchor_pos < items.size() - 1);
    CHECK(t.positive == items[t.anchor_pos + 1]);
  }
}

TEST_CASE("contrastive sampling falls back to non-co-occurring uniforms") {
  HardSampleIndex idx;
  idx.neighbors.resize(5);  // all empty
  CoOccurrence cooc;
  cooc.sets.resize(5);
  cooc.sets[1].insert(3);  // positive 1 co-occurs with 3
  cooc.sets[3].insert(1);
  std::mt19937_64 rng(11);
  auto batch = sample_contrastive_batch({0, 1}, 1, 4, idx, cooc, 5, rng);
  REQUIRE(batch.size() == 1);
  CHECK(batch[0].negatives.size() == 4);
  for (int n : batch[0].negatives) {
    CHECK(n != 1);  // never the positive
    CHECK(n != 3);  // never a co-occurring item
  }
}

TEST_CASE("too-short sequence yields an empty contrastive batch") {
  HardSampleIndex idx;
  idx.neighbors.resize(2);
  CoOccurrence cooc;
  cooc.sets.resize(2);
  std::mt19937_64 rng(1);
  CHECK(sample_contrastive_batch({0}, 1, 2, idx, cooc, 2, rng).empty());
}

TEST_CASE("ingest end to end with filtering, determinism and round trips") {
  TempDir dir;
  const auto items = dir.path / "items.jsonl";
  const auto inter = dir.path / "interactions.jsonl";
  write_file(items,
             R"({"item_id": "A", "attributes": {"title": "Red Mug", "brand": "acme"}})"
             "\n"
             R"({"item_id": "B", "attributes": {"title": "blue cup"}})"
             "\n"
             R"({"item_id": "C", "attributes": {"title": "green bowl"}})"
             "\n"
             R"({"item_id": "D", "attributes": {"title": "red bowl"}})"
             "\n"
             R"({"item_id": "E", "attributes": {}})"
             "\n");
  write_file(inter,
             R"({"user_id": "u1", "items": ["A", "B", "C", "D", "A"]})"
             "\n"
             R"({"user_id": "u2", "items": ["A", "B"]})"
             "\n"
             R"({"user_id": "u3", "items": ["A", "B", "C", "ZZZ", "D"]})"
             "\n");
  Dataset ds = ingest(items.string(), inter.string(), 30);
  CHECK(ds.n_items() == 4);       // E rejected (empty attributes)
  CHECK(ds.rejected_items == 1);
  CHECK(ds.n_users() == 2);       // u2 too short
  CHECK(ds.dropped_short_sequences == 1);
  CHECK(ds.dropped_unknown_refs == 1);  // ZZZ
  CHECK(ds.vocab.frozen());
  // attributes in key-sorted order: brand before title for item A
  std::vector<std::string> words;
  for (int id : ds.sentences[0].token_ids) words.push_back(ds.vocab.token(id));
  CHECK(words == std::vector<std::string>{"brand", "acme", "title", "red",
                                          "mug"});
  // prompt tokens present in vocab
  CHECK(ds.prompt_tokens.size() == 8);

  // determinism: identical files -> identical vocab ids and splits
  Dataset ds2 = ingest(items.string(), inter.string(), 30);
  CHECK(ds2.vocab.all_tokens() == ds.vocab.all_tokens());
  REQUIRE(ds2.splits.users.size() == ds.splits.users.size());
  for (std::size_t i = 0; i < ds.splits.users.size(); ++i)
    CHECK(ds2.splits.users[i].train_items == ds.splits.users[i].train_items);

  // dataset artifact round trip
  const auto art = dir.path / "dataset.json";
  save_dataset(ds, art.string(), "cafebabe", 42);
  Dataset loaded = load_dataset(art.string());
  CHECK(loaded.vocab.all_tokens() == ds.vocab.all_tokens());
  CHECK(loaded.n_items() == ds.n_items());
  CHECK(loaded.n_users() == ds.n_users());
  CHECK(loaded.prompt_tokens == ds.prompt_tokens);
  for (std::size_t i = 0; i < ds.sentences.size(); ++i)
    CHECK(loaded.sentences[i].token_ids == ds.sentences[i].token_ids);

  // hard-samples file round trip
  HardSampleIndex idx;
  idx.neighbors = {{1, 2}, {0}, {}, {0, 1}};
  save_hard_samples(idx, ds.item_external_ids,
                    (dir.path / "hs.json").string());
  HardSampleIndex back =
      load_hard_samples((dir.path / "hs.json").string(),
                        ds.item_external_ids);
  CHECK(back.neighbors == idx.neighbors);
  CHECK(back.empty_count == 1);
}

TEST_CASE("text embeddings are deterministic and bag-of-tokens") {
  std::vector<ItemSentence> sentences(3);
  sentences[0].token_ids = {4, 5};
  sentences[1].token_ids = {4, 5};
  sentences[2].token_ids = {6};
  Tensor2D a = text_embeddings(sentences, 10, 8, 123);
  Tensor2D b = text_embeddings(sentences, 10, 8, 123);
  CHECK(a == b);
  for (std::size_t c = 0; c < 8; ++c)
    CHECK(a(0, c) == a(1, c));  // identical sentences embed identically
  Tensor2D other = text_embeddings(sentences, 10, 8, 124);
  CHECK_FALSE(a == other);
}

TEST_SUITE_END();

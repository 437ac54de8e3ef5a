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

#include "seqmoe/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace seqmoe::corpus {

Vocabulary::Vocabulary() {
  tokens_ = {"[PAD]", "[SEQ]", "[ALIGN]", "[UNK]"};
  for (int i = 0; i < kFirstRegular; ++i) ids_[tokens_[i]] = i;
}

int Vocabulary::add_or_lookup(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  if (frozen_) return kUnknown;
  int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_[token] = id;
  return id;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= static_cast<int>(tokens_.size()))
    throw std::out_of_range("vocabulary id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

ItemSentence flatten_item(const ItemRecord& record, Vocabulary& vocab,
                          std::size_t max_tokens) {
  if (record.attributes.empty())
    throw std::invalid_argument("rejected record " + record.external_id +
                                ": empty attribute list");
  if (max_tokens < 1)
    throw std::invalid_argument("flatten_item: max_tokens must be >= 1");
  ItemSentence sentence;
  for (const auto& [key, value] : record.attributes) {
    for (const auto& tok : key) sentence.token_ids.push_back(vocab.add_or_lookup(tok));
    for (const auto& tok : value)
      sentence.token_ids.push_back(vocab.add_or_lookup(tok));
  }
  if (sentence.token_ids.size() > max_tokens)
    sentence.token_ids.resize(max_tokens);
  if (sentence.token_ids.empty())
    throw std::invalid_argument("rejected record " + record.external_id +
                                ": no tokens after flattening");
  return sentence;
}

TokenStream build_sequence_input(const std::vector<int>& item_ids,
                                 const std::vector<ItemSentence>& catalog) {
  TokenStream stream;
  int ordinal = 0;
  for (int item : item_ids) {
    if (item < 0 || item >= static_cast<int>(catalog.size()) ||
        catalog[static_cast<std::size_t>(item)].token_ids.empty())
      throw std::runtime_error("data integrity: missing item sentence for " +
                               std::to_string(item));
    ++ordinal;
    for (int tok : catalog[static_cast<std::size_t>(item)].token_ids) {
      stream.tokens.push_back(tok);
      stream.segments.ordinals.push_back(ordinal);
    }
    stream.tokens.push_back(Vocabulary::kSeq);
    stream.segments.ordinals.push_back(ordinal);
    stream.seq_positions.push_back(stream.tokens.size() - 1);
  }
  return stream;
}

TokenStream build_alignment_input(const ItemSentence& item,
                                  const std::vector<int>& prompt_tokens) {
  if (item.token_ids.empty())
    throw std::invalid_argument("build_alignment_input: empty item sentence");
  TokenStream stream;
  for (int tok : prompt_tokens) {
    stream.tokens.push_back(tok);
    stream.segments.ordinals.push_back(0);
  }
  for (int tok : item.token_ids) {
    stream.tokens.push_back(tok);
    stream.segments.ordinals.push_back(1);
  }
  stream.tokens.push_back(Vocabulary::kAlign);
  stream.segments.ordinals.push_back(1);
  stream.align_position =
      static_cast<std::ptrdiff_t>(stream.tokens.size()) - 1;
  return stream;
}

Splits leave_one_out_split(const std::vector<InteractionSequence>& sequences) {
  Splits splits;
  for (const auto& seq : sequences) {
    const auto& items = seq.item_ids;
    if (items.size() < 3) {
      ++splits.excluded_short;
      continue;
    }
    UserSplit us;
    us.user_id = seq.user_id;
    const std::size_t n = items.size();
    us.train_items.assign(items.begin(), items.begin() + (n - 2));
    us.train_targets.assign(items.begin() + 1, items.begin() + (n - 1));
    us.valid.user_id = seq.user_id;
    us.valid.context.assign(items.begin(), items.begin() + (n - 2));
    us.valid.target = items[n - 2];
    us.test.user_id = seq.user_id;
    us.test.context.assign(items.begin(), items.begin() + (n - 1));
    us.test.target = items[n - 1];
    splits.users.push_back(std::move(us));
  }
  return splits;
}

CoOccurrence build_co_occurrence(const Splits& splits, std::size_t n_items) {
  CoOccurrence cooc;
  cooc.sets.resize(n_items);
  for (const auto& us : splits.users) {
    for (std::size_t i = 0; i < us.train_items.size(); ++i) {
      for (std::size_t j = i + 1; j < us.train_items.size(); ++j) {
        int a = us.train_items[i], b = us.train_items[j];
        if (a == b) continue;
        cooc.sets[static_cast<std::size_t>(a)].insert(b);
        cooc.sets[static_cast<std::size_t>(b)].insert(a);
      }
    }
  }
  return cooc;
}

Tensor2D text_embeddings(const std::vector<ItemSentence>& sentences,
                         std::size_t vocab_size, std::size_t dim,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor2D token_vecs = Tensor2D::gaussian(
      vocab_size, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  Tensor2D out(sentences.size(), dim);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& toks = sentences[i].token_ids;
    if (toks.empty()) continue;
    for (int tok : toks)
      for (std::size_t c = 0; c < dim; ++c)
        out(i, c) += token_vecs(static_cast<std::size_t>(tok), c);
    for (std::size_t c = 0; c < dim; ++c)
      out(i, c) /= static_cast<double>(toks.size());
  }
  return out;
}

namespace {

// Indices of the k nearest rows to `row` under squared L2 distance, self
// excluded. Ties broken by index for determinism.
std::vector<int> top_k_neighbors(const Tensor2D& emb, std::size_t row,
                                 std::size_t k) {
  std::vector<std::pair<double, int>> dists;
  dists.reserve(emb.rows() - 1);
  for (std::size_t other = 0; other < emb.rows(); ++other) {
    if (other == row) continue;
    double d = 0.0;
    for (std::size_t c = 0; c < emb.cols(); ++c) {
      double diff = emb(row, c) - emb(other, c);
      d += diff * diff;
    }
    dists.emplace_back(d, static_cast<int>(other));
  }
  k = std::min(k, dists.size());
  std::partial_sort(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k),
                    dists.end());
  std::vector<int> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dists[i].second;
  return out;
}

}  // namespace

HardSampleIndex generate_hard_samples(const Tensor2D& text_emb,
                                      const Tensor2D& cf_latent,
                                      const CoOccurrence& cooc, double ratio) {
  if (text_emb.rows() != cf_latent.rows())
    throw std::invalid_argument("hard samples: embedding row mismatch");
  const std::size_t n = text_emb.rows();
  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(ratio * static_cast<double>(n))));
  HardSampleIndex index;
  index.neighbors.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<int> cand = top_k_neighbors(text_emb, j, k);
    std::vector<int> latent = top_k_neighbors(cf_latent, j, k);
    cand.insert(cand.end(), latent.begin(), latent.end());
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    std::vector<int>& out = index.neighbors[j];
    for (int c : cand) {
      if (c == static_cast<int>(j)) continue;
      if (cooc.co_occur(static_cast<int>(j), c)) continue;
      out.push_back(c);
    }
    if (out.empty()) ++index.empty_count;
  }
  return index;
}

namespace {

int uniform_non_cooccurring(int positive, const CoOccurrence& cooc,
                            std::size_t n_items, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(n_items) - 1);
  for (int attempt = 0; attempt < 64; ++attempt) {
    int c = pick(rng);
    if (c == positive) continue;
    if (cooc.co_occur(positive, c)) continue;
    return c;
  }
  // Dense co-occurrence; fall back to any other item.
  int c = pick(rng);
  while (c == positive) c = pick(rng);
  return c;
}

}  // namespace

std::vector<ContrastiveTuple> sample_contrastive_batch(
    const std::vector<int>& items, std::size_t n_s, std::size_t n_cl,
    const HardSampleIndex& index, const CoOccurrence& cooc,
    std::size_t n_items, std::mt19937_64& rng) {
  std::vector<ContrastiveTuple> batch;
  if (items.size() < 2 || n_cl < 1) return batch;
  std::vector<std::size_t> positions(items.size() - 1);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  std::shuffle(positions.begin(), positions.end(), rng);
  const std::size_t take = std::min(n_s, positions.size());
  for (std::size_t i = 0; i < take; ++i) {
    ContrastiveTuple tuple;
    tuple.anchor_pos = positions[i];
    tuple.anchor = items[tuple.anchor_pos];
    tuple.positive = items[tuple.anchor_pos + 1];
    const auto& pool =
        index.neighbors[static_cast<std::size_t>(tuple.positive)];
    std::vector<int> shuffled(pool);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t s = 0; s < shuffled.size() && tuple.negatives.size() < n_cl;
         ++s)
      tuple.negatives.push_back(shuffled[s]);
    while (tuple.negatives.size() < n_cl)
      tuple.negatives.push_back(
          uniform_non_cooccurring(tuple.positive, cooc, n_items, rng));
    batch.push_back(std::move(tuple));
  }
  return batch;
}

namespace {

ItemRecord record_from_json(const nlohmann::json& obj) {
  ItemRecord record;
  record.external_id = obj.at("item_id").get<std::string>();
  const auto& attrs = obj.at("attributes");
  // Key-sorted order for determinism; nlohmann objects iterate sorted by key.
  std::map<std::string, std::string> sorted;
  for (auto it = attrs.begin(); it != attrs.end(); ++it)
    sorted[it.key()] = it.value().get<std::string>();
  for (const auto& [key, value] : sorted) {
    auto key_toks = tokenize(key);
    auto val_toks = tokenize(value);
    if (key_toks.empty() && val_toks.empty()) continue;
    record.attributes.emplace_back(std::move(key_toks), std::move(val_toks));
  }
  return record;
}

}  // namespace

Dataset ingest(const std::string& items_path,
               const std::string& interactions_path, std::size_t max_tokens,
               const std::string& prompt_text) {
  Dataset ds;
  std::ifstream items_in(items_path);
  if (!items_in) throw std::runtime_error("cannot open " + items_path);
  std::unordered_map<std::string, int> item_index;
  std::string line;
  while (std::getline(items_in, line)) {
    if (line.empty()) continue;
    ItemRecord record = record_from_json(nlohmann::json::parse(line));
    if (item_index.count(record.external_id))
      throw std::runtime_error("duplicate item_id " + record.external_id);
    try {
      ItemSentence sentence = flatten_item(record, ds.vocab, max_tokens);
      item_index[record.external_id] = static_cast<int>(ds.sentences.size());
      ds.item_external_ids.push_back(record.external_id);
      ds.sentences.push_back(std::move(sentence));
    } catch (const std::invalid_argument&) {
      ++ds.rejected_items;
    }
  }

  for (const auto& tok : tokenize(prompt_text))
    ds.prompt_tokens.push_back(ds.vocab.add_or_lookup(tok));
  ds.vocab.freeze();

  std::ifstream inter_in(interactions_path);
  if (!inter_in) throw std::runtime_error("cannot open " + interactions_path);
  while (std::getline(inter_in, line)) {
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line);
    InteractionSequence seq;
    for (const auto& item : obj.at("items")) {
      auto it = item_index.find(item.get<std::string>());
      if (it == item_index.end()) {
        ++ds.dropped_unknown_refs;
        continue;
      }
      seq.item_ids.push_back(it->second);
    }
    if (seq.item_ids.size() < 4) {
      ++ds.dropped_short_sequences;
      continue;
    }
    seq.user_id = static_cast<int>(ds.sequences.size());
    ds.user_external_ids.push_back(obj.at("user_id").get<std::string>());
    ds.sequences.push_back(std::move(seq));
  }

  ds.splits = leave_one_out_split(ds.sequences);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path,
                  const std::string& config_hash, std::uint64_t seed) {
  nlohmann::json out;
  out["config_hash"] = config_hash;
  out["seed"] = seed;
  out["tokens"] = ds.vocab.all_tokens();
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.sentences.size(); ++i)
    items.push_back({{"id", ds.item_external_ids[i]},
                     {"tokens", ds.sentences[i].token_ids}});
  out["items"] = std::move(items);
  nlohmann::json users = nlohmann::json::array();
  for (std::size_t u = 0; u < ds.sequences.size(); ++u)
    users.push_back({{"id", ds.user_external_ids[u]},
                     {"items", ds.sequences[u].item_ids}});
  out["users"] = std::move(users);
  out["prompt_tokens"] = ds.prompt_tokens;
  out["rejected_items"] = ds.rejected_items;
  out["dropped_unknown_refs"] = ds.dropped_unknown_refs;
  out["dropped_short_sequences"] = ds.dropped_short_sequences;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << out.dump() << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json in = nlohmann::json::parse(f);
  Dataset ds;
  const auto tokens = in.at("tokens").get<std::vector<std::string>>();
  for (std::size_t i = Vocabulary::kFirstRegular; i < tokens.size(); ++i)
    ds.vocab.add_or_lookup(tokens[i]);
  ds.vocab.freeze();
  for (const auto& item : in.at("items")) {
    ds.item_external_ids.push_back(item.at("id").get<std::string>());
    ItemSentence s;
    s.token_ids = item.at("tokens").get<std::vector<int>>();
    ds.sentences.push_back(std::move(s));
  }
  for (const auto& user : in.at("users")) {
    InteractionSequence seq;
    seq.user_id = static_cast<int>(ds.sequences.size());
    seq.item_ids = user.at("items").get<std::vector<int>>();
    ds.user_external_ids.push_back(user.at("id").get<std::string>());
    ds.sequences.push_back(std::move(seq));
  }
  ds.prompt_tokens = in.at("prompt_tokens").get<std::vector<int>>();
  ds.rejected_items = in.at("rejected_items").get<std::size_t>();
  ds.dropped_unknown_refs = in.at("dropped_unknown_refs").get<std::size_t>();
  ds.dropped_short_sequences =
      in.at("dropped_short_sequences").get<std::size_t>();
  ds.splits = leave_one_out_split(ds.sequences);
  return ds;
}

void save_hard_samples(const HardSampleIndex& index,
                       const std::vector<std::string>& item_external_ids,
                       const std::string& path) {
  nlohmann::json out = nlohmann::json::object();
  for (std::size_t j = 0; j < index.neighbors.size(); ++j) {
    nlohmann::json arr = nlohmann::json::array();
    for (int n : index.neighbors[j])
      arr.push_back(item_external_ids[static_cast<std::size_t>(n)]);
    out[item_external_ids[j]] = std::move(arr);
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << out.dump() << "\n";
}

HardSampleIndex load_hard_samples(
    const std::string& path,
    const std::vector<std::string>& item_external_ids) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json in = nlohmann::json::parse(f);
  std::unordered_map<std::string, int> index_of;
  for (std::size_t i = 0; i < item_external_ids.size(); ++i)
    index_of[item_external_ids[i]] = static_cast<int>(i);
  HardSampleIndex index;
  index.neighbors.resize(item_external_ids.size());
  for (auto it = in.begin(); it != in.end(); ++it) {
    auto found = index_of.find(it.key());
    if (found == index_of.end())
      throw std::runtime_error("hard_samples references unknown item " +
                               it.key());
    std::vector<int>& out = index.neighbors[static_cast<std::size_t>(found->second)];
    for (const auto& n : it.value()) out.push_back(index_of.at(n.get<std::string>()));
    std::sort(out.begin(), out.end());
  }
  for (const auto& n : index.neighbors)
    if (n.empty()) ++index.empty_count;
  return index;
}

}  // namespace seqmoe::corpus

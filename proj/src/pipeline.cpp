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

#include "seqmoe/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <json.hpp>

#include "seqmoe/bosearch.hpp"
#include "seqmoe/cf.hpp"
#include "seqmoe/corpus.hpp"
#include "seqmoe/trainer.hpp"

namespace fs = std::filesystem;

namespace seqmoe::pipeline {

Stage stage_from_name(const std::string& name) {
  if (name == "ingest") return Stage::kIngest;
  if (name == "hard-samples") return Stage::kHardSamples;
  if (name == "train-cf") return Stage::kTrainCf;
  if (name == "search") return Stage::kSearch;
  if (name == "train") return Stage::kTrain;
  if (name == "eval") return Stage::kEval;
  throw std::invalid_argument("unknown stage '" + name + "'");
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::kIngest: return "ingest";
    case Stage::kHardSamples: return "hard-samples";
    case Stage::kTrainCf: return "train-cf";
    case Stage::kSearch: return "search";
    case Stage::kTrain: return "train";
    case Stage::kEval: return "eval";
  }
  return "?";
}

std::string dataset_path(const RunConfig& c) {
  return c.out_dir + "/dataset.json";
}
std::string hard_samples_path(const RunConfig& c) {
  return c.out_dir + "/hard_samples.json";
}
std::string cf_checkpoint_bin(const RunConfig& c) {
  return c.out_dir + "/cf_checkpoint.bin";
}
std::string cf_checkpoint_manifest(const RunConfig& c) {
  return c.out_dir + "/cf_checkpoint.json";
}
std::string genome_path(const RunConfig& c) { return c.out_dir + "/genome.json"; }
std::string trace_path(const RunConfig& c) {
  return c.out_dir + "/search_trace.jsonl";
}
std::string checkpoint_bin(const RunConfig& c) {
  return c.out_dir + "/checkpoint.bin";
}
std::string checkpoint_manifest(const RunConfig& c) {
  return c.out_dir + "/checkpoint.json";
}
std::string losses_csv_path(const RunConfig& c) {
  return c.out_dir + "/training_log.csv";
}
std::string metrics_path(const RunConfig& c) {
  return c.out_dir + "/metrics.json";
}

void save_genome(const model::Genome& genome, std::size_t replace_every,
                 const std::string& path, const std::string& config_hash,
                 std::uint64_t seed) {
  nlohmann::json out;
  out["bits"] = genome.bits;
  out["layout"] = "(causal,context,rec) per layer";
  out["r"] = replace_every;
  out["config_hash"] = config_hash;
  out["seed"] = seed;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << out.dump() << "\n";
}

model::Genome load_genome(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json in = nlohmann::json::parse(f);
  model::Genome g;
  g.bits = in.at("bits").get<std::vector<std::uint8_t>>();
  return g;
}

std::string genome_hash(const model::Genome& genome) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : genome.bits) {
    h ^= b ? '1' : '0';
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void save_metrics(const evalh::MetricsReport& report, const std::string& split,
                  const std::string& path, const std::string& config_hash,
                  std::uint64_t seed, const std::string& genome_hash_hex) {
  nlohmann::json out;
  out["split"] = split;
  out["n"] = report.n;
  out["mrr"] = report.mrr;
  out["recall"] = report.recall;
  out["ndcg"] = report.ndcg;
  out["count"] = report.count;
  out["seed"] = seed;
  out["genome_hash"] = genome_hash_hex;
  out["config_hash"] = config_hash;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << out.dump() << "\n";
}

void make_synthetic_corpus(std::size_t n_items, std::size_t n_users,
                           std::uint64_t seed, const std::string& items_path,
                           const std::string& interactions_path) {
  if (n_items < 20)
    throw std::invalid_argument("synthetic corpus needs >= 20 items");
  std::mt19937_64 rng(seed);

  // Planted successor: a seeded permutation with fixed points removed.
  std::vector<std::size_t> successor(n_items);
  for (std::size_t i = 0; i < n_items; ++i) successor[i] = i;
  std::shuffle(successor.begin(), successor.end(), rng);
  for (std::size_t i = 0; i < n_items; ++i)
    if (successor[i] == i) std::swap(successor[i], successor[(i + 1) % n_items]);

  std::uniform_int_distribution<int> pick_adj(0, 23);
  std::uniform_int_distribution<int> pick_brand(0, 19);
  std::uniform_int_distribution<int> pick_color(0, 11);
  std::uniform_int_distribution<int> pick_extra(1, 3);

  std::ofstream items(items_path);
  if (!items) throw std::runtime_error("cannot open for write: " + items_path);
  for (std::size_t i = 0; i < n_items; ++i) {
    nlohmann::json attrs;
    attrs["title"] =
        "item" + std::to_string(i) + " style" + std::to_string(pick_adj(rng));
    const int extras = pick_extra(rng);
    if (extras >= 1) attrs["brand"] = "brand" + std::to_string(pick_brand(rng));
    if (extras >= 2)
      attrs["category"] = "cat" + std::to_string(i % 8);
    if (extras >= 3) attrs["color"] = "color" + std::to_string(pick_color(rng));
    nlohmann::json row;
    char id[24];
    std::snprintf(id, sizeof(id), "i%04zu", i);
    row["item_id"] = id;
    row["attributes"] = attrs;
    items << row.dump() << "\n";
  }
  items.close();

  std::uniform_int_distribution<std::size_t> pick_start(0, n_items - 1);
  std::uniform_int_distribution<std::size_t> pick_len(6, 14);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::ofstream inter(interactions_path);
  if (!inter)
    throw std::runtime_error("cannot open for write: " + interactions_path);
  for (std::size_t u = 0; u < n_users; ++u) {
    const std::size_t len = pick_len(rng);
    std::vector<std::string> ids;
    std::size_t cur = pick_start(rng);
    for (std::size_t t = 0; t < len; ++t) {
      char id[24];
      std::snprintf(id, sizeof(id), "i%04zu", cur);
      ids.emplace_back(id);
      if (unit(rng) < 0.6) {
        cur = successor[cur];
      } else {
        std::size_t next = pick_start(rng);
        while (next == cur) next = pick_start(rng);
        cur = next;
      }
    }
    nlohmann::json row;
    char uid[24];
    std::snprintf(uid, sizeof(uid), "u%05zu", u);
    row["user_id"] = uid;
    row["items"] = ids;
    inter << row.dump() << "\n";
  }
}

OutputLock::OutputLock(const std::string& out_dir) {
  fs::create_directories(out_dir);
  lock_path_ = out_dir + "/.lock";
  if (fs::exists(lock_path_))
    throw std::runtime_error(
        "output directory is locked by another run (remove " + lock_path_ +
        " if stale)");
  std::ofstream f(lock_path_);
  if (!f) throw std::runtime_error("cannot create lock file " + lock_path_);
  f << "locked\n";
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

namespace {

void require_artifact(Stage stage, const std::string& path,
                      const std::string& producer) {
  if (!fs::exists(path))
    throw StageError(stage, "missing prerequisite " + path + " (run the " +
                                producer + " stage first)");
}

model::ModelConfig model_config_for(const RunConfig& c,
                                    const corpus::Dataset& ds) {
  model::ModelConfig mc;
  mc.dim = c.dim;
  mc.layers = c.layers;
  mc.heads = c.heads;
  mc.bottleneck = c.bottleneck;
  mc.replace_every = c.replace_every;
  mc.max_stream = c.max_stream;
  mc.vocab_size = ds.vocab.size();
  mc.n_items = ds.n_items();
  mc.n_users = ds.n_users();
  mc.cf_dim = c.cf_dim;
  mc.collab_columns = static_cast<int>(c.collab_columns);
  mc.adapter_nonlinearity = c.adapter_nonlinearity;
  mc.cf_frozen = c.cf_mode == "frozen";
  mc.init_seed = c.seed;
  return mc;
}

train::TrainOptions train_options_for(const RunConfig& c) {
  train::TrainOptions o;
  o.epochs = c.epochs;
  o.batch_size = c.batch_size;
  o.lr = c.lr;
  o.warmup_frac = c.warmup_frac;
  o.weight_decay = c.weight_decay;
  o.lambda1 = c.lambda1;
  o.lambda2 = c.lambda2;
  o.lambda3 = c.lambda3;
  o.tau = c.tau;
  o.n_s = c.n_s;
  o.n_cl = c.n_cl;
  o.seed = c.seed;
  return o;
}

// Seeded shuffle; the search split is the first ceil(b * |U|) users.
std::vector<std::size_t> search_subset(const RunConfig& c, std::size_t n_users) {
  std::vector<std::size_t> order(n_users);
  for (std::size_t i = 0; i < n_users; ++i) order[i] = i;
  std::mt19937_64 rng(c.seed ^ 0x5eedb05eedb05eull);
  std::shuffle(order.begin(), order.end(), rng);
  const auto take = static_cast<std::size_t>(
      std::ceil(c.bo_subset * static_cast<double>(n_users)));
  order.resize(std::max<std::size_t>(1, std::min(take, n_users)));
  return order;
}

std::uint64_t mix_seed(std::uint64_t seed, const bo::BitVector& z) {
  std::uint64_t h = seed ^ 0xcbf29ce484222325ull;
  for (auto b : z) {
    h ^= b + 1u;
    h *= 0x100000001b3ull;
  }
  return h;
}

void load_frozen_cf(const RunConfig& c, Stage stage, model::Model& m) {
  if (c.cf_mode != "frozen") return;
  require_artifact(stage, cf_checkpoint_bin(c), "train-cf");
  require_artifact(stage, cf_checkpoint_manifest(c), "train-cf");
  cf::CfEmbeddings emb =
      cf::load_cf(cf_checkpoint_bin(c), cf_checkpoint_manifest(c));
  if (emb.user.rows() != m.params().value("cf.user").rows() ||
      emb.item.rows() != m.params().value("cf.item").rows() ||
      emb.user.cols() != m.config().cf_dim)
    throw StageError(stage, "cf checkpoint shape mismatch");
  m.params().value("cf.user") = emb.user;
  m.params().value("cf.item") = emb.item;
}

void run_stage_impl(const RunConfig& c, Stage stage) {
  const std::string hash = config_hash(c);
  switch (stage) {
    case Stage::kIngest: {
      if (!fs::exists(c.items_path))
        throw StageError(stage, "missing input " + c.items_path);
      if (!fs::exists(c.interactions_path))
        throw StageError(stage, "missing input " + c.interactions_path);
      corpus::Dataset ds = corpus::ingest(c.items_path, c.interactions_path,
                                          c.max_item_tokens, c.prompt_text);
      if (ds.dropped_short_sequences > 0 || ds.rejected_items > 0 ||
          ds.dropped_unknown_refs > 0)
        std::cerr << "[ingest] rejected_items=" << ds.rejected_items
                  << " dropped_unknown_refs=" << ds.dropped_unknown_refs
                  << " dropped_short_sequences=" << ds.dropped_short_sequences
                  << "\n";
      corpus::save_dataset(ds, dataset_path(c), hash, c.seed);
      break;
    }
    case Stage::kHardSamples: {
      require_artifact(stage, dataset_path(c), "ingest");
      corpus::Dataset ds = corpus::load_dataset(dataset_path(c));
      Tensor2D text = corpus::text_embeddings(ds.sentences, ds.vocab.size(),
                                              32, c.seed ^ 0x7e27u);
      cf::CfEmbeddings mf = cf::train_mf_bpr(
          ds.splits, ds.n_users(), ds.n_items(), c.hard_mf_dim,
          /*steps=*/20000, /*lr=*/0.05, c.seed ^ 0x113355u);
      corpus::CoOccurrence cooc =
          corpus::build_co_occurrence(ds.splits, ds.n_items());
      corpus::HardSampleIndex index =
          corpus::generate_hard_samples(text, mf.item, cooc, c.hard_ratio);
      if (index.empty_count > 0)
        std::cerr << "[hard-samples] items with empty hard set: "
                  << index.empty_count << "\n";
      corpus::save_hard_samples(index, ds.item_external_ids,
                                hard_samples_path(c));
      break;
    }
    case Stage::kTrainCf: {
      require_artifact(stage, dataset_path(c), "ingest");
      corpus::Dataset ds = corpus::load_dataset(dataset_path(c));
      cf::CfEmbeddings emb = cf::train_mf_bpr(
          ds.splits, ds.n_users(), ds.n_items(), c.cf_dim,
          /*steps=*/20000, /*lr=*/0.05, c.seed ^ 0xcf00u);
      cf::save_cf(emb, cf_checkpoint_bin(c), cf_checkpoint_manifest(c), hash,
                  c.seed);
      break;
    }
    case Stage::kSearch: {
      require_artifact(stage, dataset_path(c), "ingest");
      require_artifact(stage, hard_samples_path(c), "hard-samples");
      corpus::Dataset ds = corpus::load_dataset(dataset_path(c));
      corpus::HardSampleIndex index =
          corpus::load_hard_samples(hard_samples_path(c), ds.item_external_ids);
      corpus::CoOccurrence cooc =
          corpus::build_co_occurrence(ds.splits, ds.n_items());
      const std::vector<std::size_t> subset = search_subset(c, ds.n_users());
      const model::ModelConfig mc = model_config_for(c, ds);
      const std::size_t bits = 3 * model::replaced_layer_indices(
                                       mc.layers, mc.replace_every)
                                       .size();
      train::TrainOptions to = train_options_for(c);
      to.epochs = c.bo_epochs;
      to.quiet = true;

      auto objective = [&](const bo::BitVector& z) {
        model::Model candidate(mc);
        load_frozen_cf(c, stage, candidate);
        model::Genome genome{z};
        train::TrainOptions cto = to;
        cto.seed = mix_seed(c.seed, z);
        train::train_model(candidate, ds, index, cooc, genome, cto, subset);
        evalh::MetricsReport report = evalh::evaluate_model(
            candidate, genome, ds, evalh::Split::kValid, 10, subset);
        return report.mrr;
      };

      bo::SearchOptions so;
      so.n_iterations = c.bo_iterations;
      so.init_designs = c.bo_init_designs;
      so.seed = c.seed;
      bo::SearchResult result = bo::bo_search(objective, bits, so);

      std::ofstream trace(trace_path(c));
      if (!trace)
        throw StageError(stage, "cannot write " + trace_path(c));
      for (const auto& tp : result.trace) {
        nlohmann::json row;
        row["iter"] = tp.iter;
        row["z"] = tp.z;
        row["f"] = tp.f;
        row["theta"] = tp.theta;
        row["best_so_far"] = tp.best_so_far;
        row["failed"] = tp.failed;
        trace << row.dump() << "\n";
      }
      save_genome(model::Genome{result.best_z}, c.replace_every,
                  genome_path(c), hash, c.seed);
      std::cerr << "[search] best validation MRR " << result.best_f << "\n";
      break;
    }
    case Stage::kTrain: {
      require_artifact(stage, dataset_path(c), "ingest");
      require_artifact(stage, hard_samples_path(c), "hard-samples");
      corpus::Dataset ds = corpus::load_dataset(dataset_path(c));
      corpus::HardSampleIndex index =
          corpus::load_hard_samples(hard_samples_path(c), ds.item_external_ids);
      corpus::CoOccurrence cooc =
          corpus::build_co_occurrence(ds.splits, ds.n_items());
      model::Genome genome;
      if (!c.genome_bits.empty()) {
        for (char ch : c.genome_bits) genome.bits.push_back(ch == '1');
      } else {
        require_artifact(stage, genome_path(c), "search");
        genome = load_genome(genome_path(c));
      }
      model::Model m(model_config_for(c, ds));
      load_frozen_cf(c, stage, m);
      m.check_genome(genome);
      auto log = train::train_model(m, ds, index, cooc, genome,
                                    train_options_for(c));
      std::ofstream csv(losses_csv_path(c));
      if (!csv) throw StageError(stage, "cannot write " + losses_csv_path(c));
      csv << "epoch,l_seq,l_align,l_cl,l_cf,total\n";
      for (const auto& el : log) {
        char line[160];
        std::snprintf(line, sizeof(line), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      el.epoch, el.l_seq, el.l_align, el.l_cl, el.l_cf,
                      el.total);
        csv << line;
      }
      m.params().save(checkpoint_bin(c), checkpoint_manifest(c),
                      {{"config_hash", hash},
                       {"seed", std::to_string(c.seed)},
                       {"genome", genome_hash(genome)}});
      break;
    }
    case Stage::kEval: {
      require_artifact(stage, dataset_path(c), "ingest");
      require_artifact(stage, checkpoint_bin(c), "train");
      require_artifact(stage, checkpoint_manifest(c), "train");
      corpus::Dataset ds = corpus::load_dataset(dataset_path(c));
      model::Genome genome;
      if (!c.genome_bits.empty()) {
        for (char ch : c.genome_bits) genome.bits.push_back(ch == '1');
      } else {
        require_artifact(stage, genome_path(c), "search");
        genome = load_genome(genome_path(c));
      }
      model::Model m(model_config_for(c, ds));
      m.params().load(checkpoint_bin(c), checkpoint_manifest(c));
      m.check_genome(genome);
      evalh::MetricsReport report =
          evalh::evaluate_model(m, genome, ds, evalh::Split::kTest, 10);
      save_metrics(report, "test", metrics_path(c), hash, c.seed,
                   genome_hash(genome));
      std::cerr << "[eval] mrr " << report.mrr << " recall@10 "
                << report.recall << " ndcg@10 " << report.ndcg << "\n";
      break;
    }
  }
}

}  // namespace

void run_stage(const RunConfig& config, Stage stage) {
  OutputLock lock(config.out_dir);
  run_stage_impl(config, stage);
}

void run_pipeline(const RunConfig& config, const std::vector<Stage>& stages) {
  OutputLock lock(config.out_dir);
  // Fixed dependency order, regardless of the order given.
  const Stage order[] = {Stage::kIngest,  Stage::kHardSamples,
                         Stage::kTrainCf, Stage::kSearch,
                         Stage::kTrain,   Stage::kEval};
  for (Stage s : order) {
    if (std::find(stages.begin(), stages.end(), s) == stages.end()) continue;
    if (s == Stage::kSearch && !config.genome_bits.empty()) {
      std::cerr << "[search] skipped: explicit genome override in config\n";
      continue;
    }
    run_stage_impl(config, s);
  }
}

std::string report(const RunConfig& config) {
  std::string out;
  out += "config_hash: " + config_hash(config) + "\n";
  out += "seed: " + std::to_string(config.seed) + "\n";
  if (fs::exists(dataset_path(config))) {
    corpus::Dataset ds = corpus::load_dataset(dataset_path(config));
    out += "dataset: " + std::to_string(ds.n_items()) + " items, " +
           std::to_string(ds.n_users()) + " sequences, vocab " +
           std::to_string(ds.vocab.size()) + "\n";
  }
  if (fs::exists(genome_path(config))) {
    model::Genome g = load_genome(genome_path(config));
    out += "genome:";
    for (auto b : g.bits) out += b ? " 1" : " 0";
    out += " (hash " + genome_hash(g) + ")\n";
  }
  if (fs::exists(losses_csv_path(config))) {
    std::ifstream csv(losses_csv_path(config));
    std::string line, last;
    std::getline(csv, line);  // header
    while (std::getline(csv, line))
      if (!line.empty()) last = line;
    if (!last.empty()) out += "final epoch (epoch,l_seq,l_align,l_cl,l_cf,total): " + last + "\n";
  }
  if (fs::exists(metrics_path(config))) {
    std::ifstream mf(metrics_path(config));
    nlohmann::json metrics = nlohmann::json::parse(mf);
    out += "metrics (" + metrics.at("split").get<std::string>() +
           "): mrr=" + std::to_string(metrics.at("mrr").get<double>()) +
           " recall@" + std::to_string(metrics.at("n").get<int>()) + "=" +
           std::to_string(metrics.at("recall").get<double>()) + " ndcg@" +
           std::to_string(metrics.at("n").get<int>()) + "=" +
           std::to_string(metrics.at("ndcg").get<double>()) + "\n";
  }
  if (out.empty()) out = "no artifacts found in " + config.out_dir + "\n";
  return out;
}

}  // namespace seqmoe::pipeline

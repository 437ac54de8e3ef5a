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

#include "seqmoe/cf.hpp"

#include <fstream>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "seqmoe/objectives.hpp"

namespace seqmoe::cf {

CfEmbeddings cf_init(std::size_t n_users, std::size_t n_items,
                     std::size_t dim, std::uint64_t seed) {
  if (n_users < 1 || n_items < 1 || dim < 1)
    throw std::invalid_argument("cf_init: dims must be >= 1");
  std::mt19937_64 rng(seed);
  CfEmbeddings emb;
  emb.user = Tensor2D::gaussian(n_users, dim, 0.1, rng);
  emb.item = Tensor2D::gaussian(n_items, dim, 0.1, rng);
  return emb;
}

Mode cf_mode(const std::string& name) {
  if (name == "joint") return Mode::kJoint;
  if (name == "frozen") return Mode::kFrozen;
  throw std::invalid_argument("cf_mode must be 'joint' or 'frozen', got '" +
                              name + "'");
}

double bpr_step(ParamStore& params, int user, int pos, int neg, double scale,
                bool with_grad) {
  if (pos == neg)
    throw std::invalid_argument("bpr: positive and negative item coincide");
  Param& users = params.param("cf.user");
  Param& items = params.param("cf.item");
  auto eu = users.value.row_span(static_cast<std::size_t>(user));
  auto ep = items.value.row_span(static_cast<std::size_t>(pos));
  auto en = items.value.row_span(static_cast<std::size_t>(neg));
  if (!with_grad || users.frozen)
    return losses::bpr_loss(eu, ep, en);
  return losses::bpr_loss_grad(
      eu, ep, en, scale, users.grad.row_span(static_cast<std::size_t>(user)),
      items.grad.row_span(static_cast<std::size_t>(pos)),
      items.grad.row_span(static_cast<std::size_t>(neg)));
}

CfEmbeddings train_mf_bpr(const corpus::Splits& splits, std::size_t n_users,
                          std::size_t n_items, std::size_t dim,
                          std::size_t steps, double lr, std::uint64_t seed) {
  CfEmbeddings emb = cf_init(n_users, n_items, dim, seed);
  // Positive pools from the training streams.
  std::vector<std::vector<int>> positives(n_users);
  std::vector<std::unordered_set<int>> seen(n_users);
  std::vector<int> active_users;
  for (const auto& us : splits.users) {
    auto& pool = positives[static_cast<std::size_t>(us.user_id)];
    for (int item : us.train_items) {
      if (seen[static_cast<std::size_t>(us.user_id)].insert(item).second)
        pool.push_back(item);
    }
    if (!pool.empty()) active_users.push_back(us.user_id);
  }
  if (active_users.empty())
    throw std::runtime_error("train_mf_bpr: no training interactions");

  std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ull);
  std::uniform_int_distribution<std::size_t> pick_user(0,
                                                       active_users.size() - 1);
  std::uniform_int_distribution<int> pick_item(0,
                                               static_cast<int>(n_items) - 1);
  std::vector<double> du(dim), dp(dim), dn(dim);
  for (std::size_t step = 0; step < steps; ++step) {
    const int u = active_users[pick_user(rng)];
    const auto& pool = positives[static_cast<std::size_t>(u)];
    std::uniform_int_distribution<std::size_t> pick_pos(0, pool.size() - 1);
    const int pos = pool[pick_pos(rng)];
    int neg = pick_item(rng);
    for (int tries = 0;
         tries < 32 && seen[static_cast<std::size_t>(u)].count(neg); ++tries)
      neg = pick_item(rng);
    if (neg == pos) continue;
    std::fill(du.begin(), du.end(), 0.0);
    std::fill(dp.begin(), dp.end(), 0.0);
    std::fill(dn.begin(), dn.end(), 0.0);
    losses::bpr_loss_grad(emb.user.row_span(static_cast<std::size_t>(u)),
                          emb.item.row_span(static_cast<std::size_t>(pos)),
                          emb.item.row_span(static_cast<std::size_t>(neg)),
                          1.0, du, dp, dn);
    double* eu = emb.user.row(static_cast<std::size_t>(u));
    double* ep = emb.item.row(static_cast<std::size_t>(pos));
    double* en = emb.item.row(static_cast<std::size_t>(neg));
    for (std::size_t c = 0; c < dim; ++c) {
      eu[c] -= lr * du[c];
      ep[c] -= lr * dp[c];
      en[c] -= lr * dn[c];
    }
  }
  return emb;
}

void save_cf(const CfEmbeddings& emb, const std::string& bin_path,
             const std::string& manifest_path,
             const std::string& config_hash, std::uint64_t seed) {
  ParamStore store;
  store.add("cf.user", emb.user, false);
  store.add("cf.item", emb.item, false);
  store.save(bin_path, manifest_path,
             {{"config_hash", config_hash}, {"seed", std::to_string(seed)}});
}

CfEmbeddings load_cf(const std::string& bin_path,
                     const std::string& manifest_path) {
  // Peek at the manifest for shapes, then load through a ParamStore.
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open " + manifest_path);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  std::size_t ur = 0, uc = 0, ir = 0, ic = 0;
  for (const auto& t : manifest.at("tensors")) {
    if (t.at("name") == "cf.user") {
      ur = t.at("rows").get<std::size_t>();
      uc = t.at("cols").get<std::size_t>();
    } else if (t.at("name") == "cf.item") {
      ir = t.at("rows").get<std::size_t>();
      ic = t.at("cols").get<std::size_t>();
    }
  }
  if (ur == 0 || ir == 0)
    throw std::runtime_error("cf checkpoint missing tensors");
  ParamStore store;
  store.add("cf.user", ur, uc, false);
  store.add("cf.item", ir, ic, false);
  store.load(bin_path, manifest_path);
  CfEmbeddings emb;
  emb.user = store.value("cf.user");
  emb.item = store.value("cf.item");
  return emb;
}

}  // namespace seqmoe::cf

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

#include "seqmoe/param_store.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace seqmoe {

namespace {
constexpr int kCheckpointFormatVersion = 1;
}

Tensor2D& ParamStore::add(const std::string& name, std::size_t rows,
                          std::size_t cols, bool frozen) {
  return add(name, Tensor2D(rows, cols), frozen);
}

Tensor2D& ParamStore::add(const std::string& name, Tensor2D init,
                          bool frozen) {
  if (params_.count(name))
    throw std::invalid_argument("duplicate parameter: " + name);
  Param p;
  p.grad = Tensor2D(init.rows(), init.cols());
  p.value = std::move(init);
  p.frozen = frozen;
  order_.push_back(name);
  return params_.emplace(name, std::move(p)).first->second.value;
}

bool ParamStore::has(const std::string& name) const {
  return params_.count(name) > 0;
}

Param& ParamStore::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Param& ParamStore::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& name : order_) {
    const Param& p = params_.at(name);
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

std::size_t ParamStore::frozen_scalar_count() const {
  std::size_t n = 0;
  for (const auto& name : order_) {
    const Param& p = params_.at(name);
    if (p.frozen) n += p.value.size();
  }
  return n;
}

void ParamStore::zero_grads() {
  for (const auto& name : order_) params_.at(name).grad.fill(0.0);
}

void ParamStore::save(const std::string& bin_path,
                      const std::string& manifest_path,
                      const std::map<std::string, std::string>& provenance)
    const {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  for (const auto& [k, v] : provenance) manifest[k] = v;

  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open for write: " + bin_path);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& name : order_) {
    const Param& p = params_.at(name);
    tensors.push_back({{"name", name},
                       {"rows", p.value.rows()},
                       {"cols", p.value.cols()},
                       {"frozen", p.frozen},
                       {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    offset += p.value.size() * sizeof(double);
  }
  manifest["tensors"] = std::move(tensors);
  if (!bin) throw std::runtime_error("write failed: " + bin_path);
  bin.close();

  std::ofstream mf(manifest_path);
  if (!mf)
    throw std::runtime_error("cannot open for write: " + manifest_path);
  mf << manifest.dump(2) << "\n";
}

void ParamStore::load(const std::string& bin_path,
                      const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open: " + manifest_path);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw std::runtime_error("unsupported checkpoint format version");

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open: " + bin_path);
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    Param& p = param(name);
    const auto rows = entry.at("rows").get<std::size_t>();
    const auto cols = entry.at("cols").get<std::size_t>();
    if (rows != p.value.rows() || cols != p.value.cols())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    if (entry.at("frozen").get<bool>() != p.frozen)
      throw std::runtime_error("checkpoint frozen-flag mismatch for " + name);
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
    bin.read(reinterpret_cast<char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("short read in " + bin_path);
  }
}

}  // namespace seqmoe

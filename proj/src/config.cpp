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

#include "seqmoe/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace seqmoe {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void fail(const std::string& key, const std::string& why) {
  throw std::invalid_argument("config key '" + key + "': " + why);
}

std::size_t parse_count(const std::string& key, const std::string& v,
                        std::size_t min_value) {
  try {
    const long long x = std::stoll(v);
    if (x < static_cast<long long>(min_value))
      fail(key, "must be >= " + std::to_string(min_value));
    return static_cast<std::size_t>(x);
  } catch (const std::invalid_argument&) {
    fail(key, "not an integer: '" + v + "'");
  } catch (const std::out_of_range&) {
    fail(key, "out of range: '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) fail(key, "not a number: '" + v + "'");
    return x;
  } catch (const std::invalid_argument&) {
    fail(key, "not a number: '" + v + "'");
  } catch (const std::out_of_range&) {
    fail(key, "out of range: '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(key, "expected true/false");
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    auto add_string = [&](const char* key, std::string RunConfig::* member) {
      f[key] = {[member](RunConfig& c, const std::string& v) { c.*member = v; },
                [member](const RunConfig& c) { return c.*member; }};
    };
    auto add_count = [&](const char* key, std::size_t RunConfig::* member,
                         std::size_t min_value) {
      f[key] = {[key, member, min_value](RunConfig& c, const std::string& v) {
                  c.*member = parse_count(key, v, min_value);
                },
                [member](const RunConfig& c) {
                  return std::to_string(c.*member);
                }};
    };
    auto add_real = [&](const char* key, double RunConfig::* member,
                        double lo, bool lo_open, double hi) {
      f[key] = {[key, member, lo, lo_open, hi](RunConfig& c,
                                               const std::string& v) {
                  double x = parse_real(key, v);
                  if (x < lo || (lo_open && x == lo) || x > hi)
                    fail(key, "value " + format_double(x) + " out of range");
                  c.*member = x;
                },
                [member](const RunConfig& c) {
                  return format_double(c.*member);
                }};
    };
    auto add_bool = [&](const char* key, bool RunConfig::* member) {
      f[key] = {[key, member](RunConfig& c, const std::string& v) {
                  c.*member = parse_bool(key, v);
                },
                [member](const RunConfig& c) {
                  return (c.*member) ? std::string("true") : std::string("false");
                }};
    };

    add_string("items_path", &RunConfig::items_path);
    add_string("interactions_path", &RunConfig::interactions_path);
    add_string("out_dir", &RunConfig::out_dir);
    add_string("prompt_text", &RunConfig::prompt_text);

    add_count("dim", &RunConfig::dim, 2);
    add_count("layers", &RunConfig::layers, 1);
    add_count("heads", &RunConfig::heads, 1);
    add_count("bottleneck", &RunConfig::bottleneck, 1);
    add_count("max_item_tokens", &RunConfig::max_item_tokens, 1);
    add_count("collab_columns", &RunConfig::collab_columns, 1);
    add_count("replace_every", &RunConfig::replace_every, 1);
    add_count("max_stream", &RunConfig::max_stream, 4);
    add_bool("adapter_nonlinearity", &RunConfig::adapter_nonlinearity);

    add_count("epochs", &RunConfig::epochs, 1);
    add_real("lr", &RunConfig::lr, 0.0, true, 1.0);
    add_real("warmup_frac", &RunConfig::warmup_frac, 0.0, true, 1.0);
    add_count("batch_size", &RunConfig::batch_size, 1);
    add_real("weight_decay", &RunConfig::weight_decay, 0.0, false, 10.0);
    f["seed"] = {[](RunConfig& c, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(std::stoull(v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};

    add_real("lambda1", &RunConfig::lambda1, 0.0, false, 1e6);
    add_real("lambda2", &RunConfig::lambda2, 0.0, false, 1e6);
    add_real("lambda3", &RunConfig::lambda3, 0.0, false, 1e6);
    add_real("tau", &RunConfig::tau, 0.0, true, 1e6);
    add_count("n_s", &RunConfig::n_s, 1);
    add_count("n_cl", &RunConfig::n_cl, 1);

    add_count("bo_iterations", &RunConfig::bo_iterations, 0);
    add_count("bo_init_designs", &RunConfig::bo_init_designs, 1);
    add_real("bo_subset", &RunConfig::bo_subset, 0.0, true, 1.0);
    add_count("bo_epochs", &RunConfig::bo_epochs, 1);
    f["genome_bits"] = {
        [](RunConfig& c, const std::string& v) {
          for (char ch : v)
            if (ch != '0' && ch != '1')
              fail("genome_bits", "expected a string of 0/1");
          c.genome_bits = v;
        },
        [](const RunConfig& c) { return c.genome_bits; }};

    add_count("cf_dim", &RunConfig::cf_dim, 1);
    f["cf_mode"] = {[](RunConfig& c, const std::string& v) {
                      if (v != "joint" && v != "frozen")
                        fail("cf_mode", "expected joint|frozen");
                      c.cf_mode = v;
                    },
                    [](const RunConfig& c) { return c.cf_mode; }};
    add_count("hard_mf_dim", &RunConfig::hard_mf_dim, 1);
    add_real("hard_ratio", &RunConfig::hard_ratio, 0.0, true, 1.0);

    add_count("synth_items", &RunConfig::synth_items, 20);
    add_count("synth_users", &RunConfig::synth_users, 1);
    f["synth_pattern"] = {[](RunConfig& c, const std::string& v) {
                            if (v != "markov")
                              fail("synth_pattern", "expected markov");
                            c.synth_pattern = v;
                          },
                          [](const RunConfig& c) { return c.synth_pattern; }};
    return f;
  }();
  return table;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value, got '" + s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    auto it = fields().find(key);
    if (it == fields().end())
      throw std::invalid_argument("unknown config key '" + key + "'");
    it->second.set(config, value);
  }
  if (config.dim % config.heads != 0)
    throw std::invalid_argument("config key 'heads': must divide dim");
  if (config.collab_columns > 2)
    throw std::invalid_argument("config key 'collab_columns': must be 1 or 2");
  return config;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

std::string write_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields())
    out += key + "=" + field.get(config) + "\n";
  return out;
}

std::string config_hash(const RunConfig& config) {
  // Covers the semantic settings; paths and the seed are recorded separately.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [key, field] : fields()) {
    if (key == "seed" || key == "items_path" || key == "interactions_path" ||
        key == "out_dir")
      continue;
    const std::string line = key + "=" + field.get(config) + "\n";
    for (unsigned char ch : line) {
      h ^= ch;
      h *= 0x100000001b3ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace seqmoe

#pragma once

// Run configuration files: one `key = value` per line, `#` starts a comment.
// `setting` picks the setting-dependent defaults; every other key overrides.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctxil/data.hpp"
#include "ctxil/train.hpp"

namespace ctxil {

struct RunConfig {
  TrainConfig train;
  std::string expert_data;   // CEIL-TRAJ file with the expert demonstrations
  std::string offline_data;  // CEIL-TRAJ file with D (offline settings only)

  void validate() const {
    train.validate();
    require(!expert_data.empty(), "config: expert_data is required");
    require(train.setting.online || !offline_data.empty(), "config: offline settings require offline_data");
    require(!train.setting.online || offline_data.empty(), "config: online settings take no offline_data");
  }
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw FormatError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config: bad value '" + v + "' for " + key + " (expected true/false)");
}

template <class T>
std::string show(const T& v) {
  if constexpr (std::is_same_v<T, bool>)
    return v ? "true" : "false";
  else if constexpr (std::is_floating_point_v<T>)
    return format_double(v);
  else if constexpr (std::is_same_v<T, std::string>)
    return v;
  else
    return std::to_string(v);
}

template <class T>
ConfigKey key(std::string name, std::string help, T RunConfig::*field) {
  return {name, std::move(help),
          [field, name](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>)
              c.*field = v;
            else
              c.*field = parse_number<T>(name, v);
          },
          [field](const RunConfig& c) { return show(c.*field); }};
}

template <class T>
ConfigKey key(std::string name, std::string help, T TrainConfig::*field) {
  return {name, std::move(help),
          [field, name](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>)
              c.train.*field = parse_bool(name, v);
            else if constexpr (std::is_same_v<T, std::string>)
              c.train.*field = v;
            else
              c.train.*field = parse_number<T>(name, v);
          },
          [field](const RunConfig& c) { return show(c.train.*field); }};
}

template <class T>
ConfigKey model_key(std::string name, std::string help, T ModelConfig::*field) {
  return {name, std::move(help),
          [field, name](RunConfig& c, const std::string& v) { c.train.model.*field = parse_number<T>(name, v); },
          [field](const RunConfig& c) { return show(c.train.model.*field); }};
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using detail::key;
  using detail::model_key;
  static const std::vector<ConfigKey> keys = {
      {"setting", "S|C-on|off-LfD|LfO, e.g. S-off-LfO (required, first)",
       [](RunConfig& c, const std::string& v) { c.train = TrainConfig::for_setting(parse_setting(v)); },
       [](const RunConfig& c) { return c.train.setting.name(); }},
      key("env", "learner's environment", &TrainConfig::env),
      key("expert_env", "environment the expert data came from", &TrainConfig::expert_env),
      key("expert_data", "expert trajectory file", &RunConfig::expert_data),
      key("offline_data", "offline dataset file (offline settings)", &RunConfig::offline_data),
      key("iterations", "training iterations", &TrainConfig::iterations),
      key("batch_size", "windows per self-consistency batch", &TrainConfig::batch_size),
      key("expert_batch_size", "expert windows per joint step", &TrainConfig::expert_batch_size),
      key("alpha", "weight of the expert-likelihood term on z*", &TrainConfig::alpha),
      key("cd_weight", "cross-domain regularizer weight (C-* only)", &TrainConfig::cd_weight),
      key("vq_weight", "dictionary loss weight", &TrainConfig::vq_weight),
      key("decoder_weight", "next-state decoder loss weight", &TrainConfig::decoder_weight),
      key("lr", "peak learning rate of the networks", &TrainConfig::lr),
      key("lr_min", "cosine schedule floor", &TrainConfig::lr_min),
      key("lr_period", "cosine schedule restart period (iterations)", &TrainConfig::lr_period),
      key("zstar_lr", "peak learning rate of z*", &TrainConfig::zstar_lr),
      key("joint_lr_scale", "encoder learning-rate multiplier in the joint step", &TrainConfig::joint_lr_scale),
      key("merge_expert", "add expert demos to the self-consistency pool (LfD)", &TrainConfig::merge_expert),
      key("full_form", "also push policy-rollout embeddings away from z* (online)", &TrainConfig::full_form),
      key("noise_scale", "pseudo-expert noise scale (cross-domain)", &TrainConfig::noise_scale),
      key("buffer_capacity", "replay buffer size in episodes", &TrainConfig::buffer_capacity),
      key("eval_every", "iterations between evaluations", &TrainConfig::eval_every),
      key("eval_episodes", "episodes per evaluation", &TrainConfig::eval_episodes),
      key("eval_seed", "evaluation episode seed", &TrainConfig::eval_seed),
      key("seed", "training seed", &TrainConfig::seed),
      model_key("window", "window length T", &ModelConfig::window),
      model_key("embed_dim", "embedding dimension", &ModelConfig::embed_dim),
      model_key("codebook_size", "dictionary entries", &ModelConfig::codebook_size),
      model_key("hidden_layers", "hidden layers per network", &ModelConfig::hidden_layers),
      model_key("hidden_width", "hidden units per layer", &ModelConfig::hidden_width),
  };
  return keys;
}

inline std::string config_help() {
  std::ostringstream os;
  os << "config keys:\n";
  for (const ConfigKey& k : config_keys()) os << "  " << k.name << "  " << k.help << '\n';
  return os.str();
}

inline RunConfig read_config(std::istream& is, const std::string& source = "<config>") {
  const auto& keys = config_keys();
  std::map<std::string, std::pair<std::string, int>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    auto fail = [&](const std::string& msg) { throw FormatError(source + ":" + std::to_string(line_no) + ": " + msg); };
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (std::none_of(keys.begin(), keys.end(), [&](const ConfigKey& c) { return c.name == k; }))
      fail("unknown key '" + k + "'");
    if (v.empty()) fail("empty value for " + k);
    if (!entries.emplace(k, std::pair{v, line_no}).second) fail("duplicate key '" + k + "'");
  }
  if (!entries.count("setting")) throw FormatError(source + ": missing required key 'setting'");
  RunConfig c;
  for (const ConfigKey& k : keys) {  // registry order; `setting` first
    const auto it = entries.find(k.name);
    if (it == entries.end()) continue;
    try {
      k.set(c, it->second.first);
    } catch (const std::exception& e) {
      throw FormatError(source + ":" + std::to_string(it->second.second) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config " + path);
  return read_config(f, path);
}

// Every key with its resolved value, in registry order.
inline void write_config(std::ostream& os, const RunConfig& c) {
  for (const ConfigKey& k : config_keys()) {
    const std::string v = k.get(c);
    if (!v.empty()) os << k.name << " = " << v << '\n';
  }
}

}  // namespace ctxil

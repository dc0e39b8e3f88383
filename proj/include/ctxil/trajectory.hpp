#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxil/errors.hpp"

namespace ctxil {

enum class Source { expert, buffer, offline, noised };

inline std::string_view source_name(Source s) {
  switch (s) {
    case Source::expert: return "expert";
    case Source::buffer: return "buffer";
    case Source::offline: return "offline";
    case Source::noised: return "noised";
  }
  return "?";
}

// One episode: L+1 states and, unless actions were stripped, L actions.
// Values are stored flat, row per step.
struct Trajectory {
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  bool has_actions = true;
  std::vector<double> states;
  std::vector<double> actions;
  std::string domain;
  Source source = Source::expert;

  std::size_t length() const { return obs_dim ? states.size() / obs_dim - 1 : 0; }
  std::span<const double> state(std::size_t i) const { return {states.data() + i * obs_dim, obs_dim}; }
  std::span<const double> action(std::size_t i) const { return {actions.data() + i * act_dim, act_dim}; }

  void validate() const {
    require(obs_dim > 0 && act_dim > 0, "trajectory: zero dimension");
    require(!states.empty() && states.size() % obs_dim == 0, "trajectory: ragged states");
    if (has_actions)
      require(actions.size() == length() * act_dim, "trajectory: action count must equal state count - 1");
    else
      require(actions.empty(), "trajectory: actions present on a state-only trajectory");
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

}  // namespace ctxil

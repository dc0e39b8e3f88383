#pragma once

// Point-mass environments with double-integrator dynamics:
//   vel' = (1 - d) vel + g dt R(psi) a,   pos' = pos + dt vel'
// Observations are [pos, vel]. Reward is the negative distance to the goal
// after the step and is only used for evaluation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxil/errors.hpp"
#include "ctxil/random.hpp"
#include "ctxil/trajectory.hpp"

namespace ctxil {

struct EnvSpec {
  std::string name;
  std::size_t dim = 2;  // spatial dimension; obs_dim = 2 * dim, act_dim = dim
  int horizon = 100;
  double dt = 0.05;
  double drag = 0.05;
  double gain = 1.5;
  double rotation = 0.0;  // radians, 2-D only
  double goal = 0.5;      // goal position on every axis
  double goal_radius = 0.05;
  double start_lo = -1.0;
  double start_hi = -0.8;
  double kp = 14.0;  // scripted expert gains
  double kd = 2.75;
  // Normalization anchors: mean returns of the scripted expert and of uniform
  // random actions over the calibration episodes (see calibrate_returns).
  double expert_return = 0.0;
  double random_return = 0.0;

  std::size_t obs_dim() const { return 2 * dim; }
  std::size_t act_dim() const { return dim; }
};

struct EnvState {
  std::vector<double> obs;
  int t = 0;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;
};

inline const std::vector<EnvSpec>& env_registry() {
  static const std::vector<EnvSpec> specs = [] {
    const double deg = std::numbers::pi / 180.0;
    EnvSpec base{.name = "pm2d", .expert_return = -41.232379020526437, .random_return = -197.84269309535699};
    EnvSpec rot15 = base;
    rot15.name = "pm2d-rot15";
    rot15.rotation = 15 * deg;
    rot15.kp = 14.5;
    rot15.kd = 4.5;
    rot15.expert_return = -44.629113464456722;
    rot15.random_return = -199.08007707077826;
    EnvSpec rot30 = base;
    rot30.name = "pm2d-rot30";
    rot30.rotation = 30 * deg;
    rot30.kp = 5.5;
    rot30.kd = 2.5;
    rot30.expert_return = -51.242881690202708;
    rot30.random_return = -200.25729503540259;
    EnvSpec g07 = base;
    g07.name = "pm2d-g07";
    g07.gain = 1.5 * 0.7;
    g07.kp = 13.0;
    g07.expert_return = -51.786824406469215;
    g07.random_return = -197.46272347470517;
    EnvSpec g13 = base;
    g13.name = "pm2d-g13";
    g13.gain = 1.5 * 1.3;
    g13.kp = 13.5;
    g13.kd = 2.5;
    g13.expert_return = -35.01353593075342;
    g13.random_return = -198.47885575340425;
    EnvSpec di{.name = "di1d", .dim = 1, .expert_return = -28.637457900029908, .random_return = -137.27437535998467};
    return std::vector<EnvSpec>{base, rot15, rot30, g07, g13, di};
  }();
  return specs;
}

inline const EnvSpec& env_spec(std::string_view name) {
  for (const EnvSpec& s : env_registry())
    if (s.name == name) return s;
  throw ContractError("unknown environment '" + std::string(name) + "'");
}

// Counts every transition simulated by step(); training code uses it to prove
// that offline runs never touch the environment.
inline std::atomic<long>& env_step_counter() {
  static std::atomic<long> count{0};
  return count;
}

inline EnvState reset(const EnvSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  EnvState s;
  s.obs.assign(spec.obs_dim(), 0.0);
  for (std::size_t i = 0; i < spec.dim; ++i) s.obs[i] = uniform(rng, spec.start_lo, spec.start_hi);
  return s;
}

inline double goal_distance(const EnvSpec& spec, std::span<const double> obs) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < spec.dim; ++i) d2 += (obs[i] - spec.goal) * (obs[i] - spec.goal);
  return std::sqrt(d2);
}

inline StepResult step(const EnvSpec& spec, const EnvState& state, std::span<const double> action) {
  require(action.size() == spec.act_dim(), "step: action has " + std::to_string(action.size()) + " dims, expected " +
                                               std::to_string(spec.act_dim()));
  require(state.t < spec.horizon, "step: episode already at horizon");
  std::vector<double> a(action.begin(), action.end());
  for (double& v : a) v = std::clamp(v, -1.0, 1.0);
  if (spec.dim == 2 && spec.rotation != 0.0) {
    const double c = std::cos(spec.rotation), s = std::sin(spec.rotation);
    a = {c * a[0] - s * a[1], s * a[0] + c * a[1]};
  }
  StepResult r;
  r.next.obs = state.obs;
  r.next.t = state.t + 1;
  const std::size_t n = spec.dim;
  for (std::size_t i = 0; i < n; ++i) {
    double& vel = r.next.obs[n + i];
    vel = (1.0 - spec.drag) * vel + spec.gain * spec.dt * a[i];
    r.next.obs[i] += spec.dt * vel;
  }
  const double dist = goal_distance(spec, r.next.obs);
  r.reward = -dist;
  r.done = r.next.t >= spec.horizon || dist < spec.goal_radius;
  env_step_counter().fetch_add(1, std::memory_order_relaxed);
  return r;
}

inline std::vector<double> scripted_expert(const EnvSpec& spec, std::span<const double> obs) {
  std::vector<double> a(spec.act_dim());
  for (std::size_t i = 0; i < spec.dim; ++i)
    a[i] = std::clamp(spec.kp * (spec.goal - obs[i]) - spec.kd * obs[spec.dim + i], -1.0, 1.0);
  return a;
}

struct Episode {
  Trajectory traj;
  double ret = 0.0;
};

// Runs one episode. `policy(obs)` returns an action; the clipped action that
// was applied is what gets recorded.
template <class Policy>
Episode run_episode(const EnvSpec& spec, Policy&& policy, std::uint64_t reset_seed, Source source) {
  Episode ep;
  Trajectory& tr = ep.traj;
  tr.obs_dim = spec.obs_dim();
  tr.act_dim = spec.act_dim();
  tr.domain = spec.name;
  tr.source = source;
  EnvState s = reset(spec, reset_seed);
  tr.states.insert(tr.states.end(), s.obs.begin(), s.obs.end());
  for (;;) {
    std::vector<double> a = policy(std::span<const double>(s.obs));
    require(a.size() == spec.act_dim(), "rollout: policy action dimension mismatch");
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
    StepResult r = step(spec, s, a);
    tr.actions.insert(tr.actions.end(), a.begin(), a.end());
    tr.states.insert(tr.states.end(), r.next.obs.begin(), r.next.obs.end());
    ep.ret += r.reward;
    s = std::move(r.next);
    if (r.done) break;
  }
  return ep;
}

// Episode i resets with derive_seed(seed, i).
template <class Policy>
std::vector<Episode> rollout(const EnvSpec& spec, Policy&& policy, int episodes, std::uint64_t seed,
                             Source source = Source::buffer) {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(std::max(episodes, 0)));
  for (int i = 0; i < episodes; ++i)
    out.push_back(run_episode(spec, policy, derive_seed(seed, static_cast<std::uint64_t>(i)), source));
  return out;
}

inline double mean_return(const std::vector<Episode>& eps) {
  require(!eps.empty(), "mean_return: no episodes");
  double s = 0.0;
  for (const Episode& e : eps) s += e.ret;
  return s / static_cast<double>(eps.size());
}

inline constexpr int kCalibrationEpisodes = 20;
inline constexpr std::uint64_t kCalibrationSeed = 7001;

struct Calibration {
  double expert_return = 0.0;
  double random_return = 0.0;
};

// Re-simulates the normalization anchors stored in the registry.
inline Calibration calibrate_returns(const EnvSpec& spec) {
  Calibration c;
  auto expert = [&](std::span<const double> o) { return scripted_expert(spec, o); };
  c.expert_return = mean_return(rollout(spec, expert, kCalibrationEpisodes, kCalibrationSeed, Source::expert));
  Rng rng(derive_seed(kCalibrationSeed, 99));
  auto random = [&](std::span<const double>) {
    std::vector<double> a(spec.act_dim());
    for (double& v : a) v = uniform(rng, -1.0, 1.0);
    return a;
  };
  c.random_return = mean_return(rollout(spec, random, kCalibrationEpisodes, kCalibrationSeed, Source::buffer));
  return c;
}

}  // namespace ctxil

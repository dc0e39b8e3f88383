#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxil/envs.hpp"
#include "ctxil/errors.hpp"
#include "ctxil/random.hpp"
#include "ctxil/tensor.hpp"
#include "ctxil/trajectory.hpp"

namespace ctxil {

// T consecutive states s_i..s_{i+T-1}, the next-state target s_{i+T}, and the
// actions a_i..a_{i+T-1} when the trajectory has them.
struct Window {
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  std::size_t size = 0;  // T
  bool has_actions = false;
  std::vector<double> states;  // (T + 1) x obs_dim, last row is the target
  std::vector<double> actions;
  int label = 0;  // 1 for noised pseudo-expert windows

  std::vector<double> encoder_input() const {
    return {states.begin(), states.begin() + static_cast<std::ptrdiff_t>(size * obs_dim)};
  }
};

inline std::size_t window_count(const Trajectory& t, std::size_t T, std::size_t stride = 1) {
  const std::size_t L = t.length();
  return L < T ? 0 : (L - T) / stride + 1;
}

inline Window make_window(const Trajectory& t, std::size_t start, std::size_t T) {
  require(start + T <= t.length(), "window: slice past the end of the trajectory");
  Window w;
  w.obs_dim = t.obs_dim;
  w.act_dim = t.act_dim;
  w.size = T;
  w.has_actions = t.has_actions;
  w.label = t.source == Source::noised ? 1 : 0;
  w.states.assign(t.states.begin() + static_cast<std::ptrdiff_t>(start * t.obs_dim),
                  t.states.begin() + static_cast<std::ptrdiff_t>((start + T + 1) * t.obs_dim));
  if (t.has_actions)
    w.actions.assign(t.actions.begin() + static_cast<std::ptrdiff_t>(start * t.act_dim),
                     t.actions.begin() + static_cast<std::ptrdiff_t>((start + T) * t.act_dim));
  return w;
}

inline std::vector<Window> slide_windows(const Trajectory& t, std::size_t T, std::size_t stride = 1) {
  require(T >= 1 && stride >= 1, "slide_windows: window size and stride must be positive");
  std::vector<Window> out;
  const std::size_t n = window_count(t, T, stride);
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(make_window(t, k * stride, T));
  return out;
}

// Windows of a training batch laid out as tensors. Step rows are grouped by
// window: rows [i*T, (i+1)*T) belong to window i.
struct WindowBatch {
  std::size_t count = 0;
  std::size_t T = 0;
  bool has_actions = false;
  Tensor encoder_input;  // [count, T*obs]
  Tensor states;         // [count*T, obs]
  Tensor next_states;    // [count*T, obs]
  Tensor actions;        // [count*T, act] or empty
  std::vector<std::size_t> step_window;  // window index of each step row
  std::vector<int> labels;

  std::size_t steps() const { return count * T; }
};

struct WindowRef {
  const Trajectory* traj = nullptr;
  std::size_t start = 0;
};

inline WindowBatch make_batch(const std::vector<WindowRef>& refs, std::size_t T) {
  require(!refs.empty(), "make_batch: no windows");
  const std::size_t obs = refs.front().traj->obs_dim, act = refs.front().traj->act_dim;
  WindowBatch b;
  b.count = refs.size();
  b.T = T;
  b.has_actions = std::all_of(refs.begin(), refs.end(), [](const WindowRef& r) { return r.traj->has_actions; });
  b.encoder_input = Tensor(Shape{b.count, T * obs});
  b.states = Tensor(Shape{b.count * T, obs});
  b.next_states = Tensor(Shape{b.count * T, obs});
  if (b.has_actions) b.actions = Tensor(Shape{b.count * T, act});
  b.step_window.resize(b.count * T);
  b.labels.resize(b.count);
  for (std::size_t i = 0; i < b.count; ++i) {
    const Trajectory& t = *refs[i].traj;
    const std::size_t s0 = refs[i].start;
    require(t.obs_dim == obs && t.act_dim == act, "make_batch: mixed dimensions");
    require(s0 + T <= t.length(), "make_batch: window past the end of its trajectory");
    b.labels[i] = t.source == Source::noised ? 1 : 0;
    for (std::size_t k = 0; k < T; ++k) {
      const std::size_t row = i * T + k;
      b.step_window[row] = i;
      for (std::size_t d = 0; d < obs; ++d) {
        const double s = t.states[(s0 + k) * obs + d];
        b.encoder_input[i * T * obs + k * obs + d] = s;
        b.states[row * obs + d] = s;
        b.next_states[row * obs + d] = t.states[(s0 + k + 1) * obs + d];
      }
      if (b.has_actions)
        for (std::size_t d = 0; d < act; ++d) b.actions[row * act + d] = t.actions[(s0 + k) * act + d];
    }
  }
  return b;
}

// Every window of every trajectory, in order.
inline std::vector<WindowRef> all_windows(const std::vector<const Trajectory*>& trajs, std::size_t T) {
  std::vector<WindowRef> refs;
  for (const Trajectory* t : trajs)
    for (std::size_t k = 0, n = window_count(*t, T); k < n; ++k) refs.push_back({t, k});
  return refs;
}

// Uniform sampling (with replacement) over all windows of a trajectory pool.
class WindowSampler {
 public:
  WindowSampler(std::vector<const Trajectory*> trajs, std::size_t T) : trajs_(std::move(trajs)), T_(T) {
    std::size_t total = 0;
    for (const Trajectory* t : trajs_) {
      total += window_count(*t, T_);
      cumulative_.push_back(total);
    }
  }

  std::size_t total() const { return cumulative_.empty() ? 0 : cumulative_.back(); }

  std::vector<WindowRef> sample(std::size_t n, Rng& rng) const {
    require(total() > 0, "window sampler: pool has no windows");
    std::vector<WindowRef> out(n);
    for (WindowRef& r : out) {
      const std::size_t k = uniform_index(rng, total());
      const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), k);
      const std::size_t j = static_cast<std::size_t>(it - cumulative_.begin());
      r.traj = trajs_[j];
      r.start = k - (j ? cumulative_[j - 1] : 0);
    }
    return out;
  }

 private:
  std::vector<const Trajectory*> trajs_;
  std::size_t T_;
  std::vector<std::size_t> cumulative_;
};

// Bounded FIFO of episodes; the oldest is evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    require(capacity > 0, "replay buffer: capacity must be positive");
  }

  void push(Trajectory t) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(t));
    ++inserted_;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t inserted() const { return inserted_; }
  const Trajectory& operator[](std::size_t i) const { return items_[i]; }

  std::vector<const Trajectory*> pointers() const {
    std::vector<const Trajectory*> p;
    for (const Trajectory& t : items_) p.push_back(&t);
    return p;
  }

 private:
  std::size_t capacity_;
  std::size_t inserted_ = 0;
  std::deque<Trajectory> items_;
};

struct Dataset {
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  std::string domain;
  std::vector<std::string> comments;  // provenance lines, stored without the leading '#'
  std::vector<Trajectory> trajectories;

  bool has_actions() const {
    return std::all_of(trajectories.begin(), trajectories.end(), [](const Trajectory& t) { return t.has_actions; });
  }

  std::vector<const Trajectory*> pointers() const {
    std::vector<const Trajectory*> p;
    for (const Trajectory& t : trajectories) p.push_back(&t);
    return p;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline Dataset dataset_from_episodes(const EnvSpec& spec, std::vector<Episode> eps) {
  Dataset d;
  d.obs_dim = spec.obs_dim();
  d.act_dim = spec.act_dim();
  d.domain = spec.name;
  for (Episode& e : eps) d.trajectories.push_back(std::move(e.traj));
  return d;
}

// LfO view: actions are removed from expert trajectories only.
inline Dataset strip_actions(Dataset d) {
  for (Trajectory& t : d.trajectories)
    if (t.source == Source::expert) {
      t.has_actions = false;
      t.actions.clear();
    }
  return d;
}

inline Dataset make_expert_dataset(const EnvSpec& spec, int episodes, std::uint64_t seed) {
  auto expert = [&](std::span<const double> o) { return scripted_expert(spec, o); };
  return dataset_from_episodes(spec, rollout(spec, expert, episodes, seed, Source::expert));
}

inline std::vector<double> offline_preset(std::string_view name) {
  if (name == "medium") return {0.3, 0.6};
  if (name == "medium-expert") return {0.0, 0.3, 0.6};
  throw ContractError("unknown offline preset '" + std::string(name) + "' (expected medium or medium-expert)");
}

// Episodes from the epsilon-noised scripted expert, a = clip(expert + eps N(0, 1)).
// Episode i uses noise level i mod |levels|, so strata differ by at most one.
inline Dataset make_offline_dataset(const EnvSpec& spec, int episodes, const std::vector<double>& noise_levels,
                                    std::uint64_t seed, std::vector<double>* returns = nullptr) {
  require(!noise_levels.empty(), "offline dataset: no noise levels");
  for (double e : noise_levels) require(e >= 0.0 && e <= 1.0, "offline dataset: noise level outside [0, 1]");
  Dataset d;
  d.obs_dim = spec.obs_dim();
  d.act_dim = spec.act_dim();
  d.domain = spec.name;
  for (int i = 0; i < episodes; ++i) {
    const double eps = noise_levels[static_cast<std::size_t>(i) % noise_levels.size()];
    Rng rng(derive_seed(seed, 1000003ull + static_cast<std::uint64_t>(i)));
    auto noisy = [&](std::span<const double> o) {
      std::vector<double> a = scripted_expert(spec, o);
      for (double& v : a) v += eps * normal(rng);
      return a;
    };
    Episode ep = run_episode(spec, noisy, derive_seed(seed, static_cast<std::uint64_t>(i)), Source::offline);
    if (returns) returns->push_back(ep.ret);
    d.trajectories.push_back(std::move(ep.traj));
  }
  return d;
}

// Per-dimension standard deviation of all states in the pool.
inline std::vector<double> state_std(const std::vector<Trajectory>& trajs) {
  require(!trajs.empty(), "state_std: empty pool");
  const std::size_t obs = trajs.front().obs_dim;
  std::vector<double> mean(obs, 0.0), sq(obs, 0.0);
  double n = 0;
  for (const Trajectory& t : trajs)
    for (std::size_t i = 0; i <= t.length(); ++i) {
      for (std::size_t d = 0; d < obs; ++d) mean[d] += t.states[i * obs + d];
      n += 1;
    }
  for (double& m : mean) m /= n;
  for (const Trajectory& t : trajs)
    for (std::size_t i = 0; i <= t.length(); ++i)
      for (std::size_t d = 0; d < obs; ++d) sq[d] += std::pow(t.states[i * obs + d] - mean[d], 2);
  for (double& s : sq) s = std::sqrt(s / n);
  return sq;
}

inline constexpr double kDefaultNoiseScale = 0.5;

// Pseudo-experts: states get N(0, (scale * state_std)^2) noise per dimension,
// actions (when present) N(0, scale^2). Results carry the noised label.
inline std::vector<Trajectory> noise_expert(const std::vector<Trajectory>& trajs, double scale, std::uint64_t seed) {
  require(scale > 0.0, "noise_expert: noise scale must be positive");
  const std::vector<double> sd = state_std(trajs);
  Rng rng(seed);
  std::vector<Trajectory> out = trajs;
  for (Trajectory& t : out) {
    for (std::size_t i = 0; i < t.states.size(); ++i) t.states[i] += scale * sd[i % t.obs_dim] * normal(rng);
    for (double& a : t.actions) a += scale * normal(rng);
    t.source = Source::noised;
  }
  return out;
}

inline double normalized_score(double mean_return, const EnvSpec& spec) {
  return 100.0 * (mean_return - spec.random_return) / (spec.expert_return - spec.random_return);
}

// ---- CEIL-TRAJ v1 text format ----------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_dataset(std::ostream& os, const Dataset& d) {
  require(!d.domain.empty() && d.domain.find_first_of(" \t\n") == std::string::npos,
          "save_dataset: domain tag must be a single non-empty token");
  const bool acts = d.has_actions();
  for (const Trajectory& t : d.trajectories) {
    t.validate();
    require(t.obs_dim == d.obs_dim && t.act_dim == d.act_dim, "save_dataset: trajectory dimension mismatch");
    require(acts || !t.has_actions, "save_dataset: mixed action presence; strip or split the dataset");
  }
  os << "ceil-traj 1 " << d.obs_dim << ' ' << d.act_dim << ' ' << (acts ? 1 : 0) << ' ' << d.domain << '\n';
  for (const std::string& c : d.comments) os << '#' << c << '\n';
  auto row = [&](char tag, const std::vector<double>& v, std::size_t i, std::size_t n) {
    os << tag;
    for (std::size_t k = 0; k < n; ++k) os << ' ' << format_double(v[i * n + k]);
    os << '\n';
  };
  for (const Trajectory& t : d.trajectories) {
    os << "episode " << t.length() << '\n';
    for (std::size_t i = 0; i <= t.length(); ++i) {
      row('s', t.states, i, d.obs_dim);
      if (acts && i < t.length()) row('a', t.actions, i, d.act_dim);
    }
  }
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_dataset(os, d);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

namespace detail {

struct LineReader {
  std::istream& is;
  std::string source;
  std::size_t line_no = 0;
  std::string line;

  bool next() {
    if (!std::getline(is, line)) return false;
    ++line_no;
    return true;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source + ":" + std::to_string(line_no) + ": " + what);
  }
};

inline std::vector<double> parse_row(LineReader& r, char tag, std::size_t n) {
  if (r.line.size() < 1 || r.line[0] != tag || (r.line.size() > 1 && r.line[1] != ' '))
    r.fail(std::string("expected '") + tag + "' row");
  std::vector<double> v;
  v.reserve(n);
  const char* p = r.line.c_str() + 1;
  while (*p) {
    while (*p == ' ') ++p;
    if (!*p) break;
    char* end = nullptr;
    const double x = std::strtod(p, &end);
    if (end == p || (*end && *end != ' ')) r.fail("malformed number");
    v.push_back(x);
    p = end;
  }
  if (v.size() != n) r.fail("expected " + std::to_string(n) + " values, found " + std::to_string(v.size()));
  return v;
}

}  // namespace detail

inline Dataset read_dataset(std::istream& is, const std::string& source = "<stream>") {
  detail::LineReader r{is, source, 0, {}};
  Dataset d;
  if (!r.next()) r.fail("empty file");
  std::istringstream hs(r.line);
  std::string magic, extra;
  int version = 0, has_actions = -1;
  if (!(hs >> magic >> version >> d.obs_dim >> d.act_dim >> has_actions >> d.domain) || magic != "ceil-traj")
    r.fail("bad header, expected 'ceil-traj 1 <obs_dim> <act_dim> <has_actions> <domain>'");
  if (hs >> extra) r.fail("trailing tokens in header");
  if (version != 1) r.fail("unsupported version " + std::to_string(version));
  if (d.obs_dim == 0 || d.act_dim == 0) r.fail("zero dimension in header");
  if (has_actions != 0 && has_actions != 1) r.fail("has_actions must be 0 or 1");

  bool pending = r.next();
  while (pending && !r.line.empty() && r.line[0] == '#') {
    d.comments.push_back(r.line.substr(1));
    pending = r.next();
  }
  while (pending) {
    std::istringstream es(r.line);
    std::string kw;
    long long L = -1;
    if (!(es >> kw >> L) || kw != "episode" || L < 0 || (es >> extra)) r.fail("expected 'episode <L>'");
    Trajectory t;
    t.obs_dim = d.obs_dim;
    t.act_dim = d.act_dim;
    t.has_actions = has_actions == 1;
    t.domain = d.domain;
    t.source = Source::expert;
    for (long long i = 0; i <= L; ++i) {
      if (!r.next()) r.fail("unexpected end of file inside episode");
      const auto s = detail::parse_row(r, 's', d.obs_dim);
      t.states.insert(t.states.end(), s.begin(), s.end());
      if (has_actions && i < L) {
        if (!r.next()) r.fail("unexpected end of file inside episode");
        const auto a = detail::parse_row(r, 'a', d.act_dim);
        t.actions.insert(t.actions.end(), a.begin(), a.end());
      }
    }
    d.trajectories.push_back(std::move(t));
    pending = r.next();
  }
  return d;
}

// Loaded trajectories are tagged with `source`; the format does not store it.
inline Dataset load_dataset(const std::string& path, Source source = Source::expert) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  Dataset d = read_dataset(is, path);
  for (Trajectory& t : d.trajectories) t.source = source;
  return d;
}

}  // namespace ctxil

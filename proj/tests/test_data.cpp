#include <cmath>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "ctxil/data.hpp"
#include "ctxil/verify.hpp"

using namespace ctxil;

namespace {

Trajectory counting_trajectory(std::size_t L, bool actions = true) {
  Trajectory t;
  t.obs_dim = 2;
  t.act_dim = 1;
  t.has_actions = actions;
  for (std::size_t i = 0; i <= L; ++i) {
    t.states.push_back(static_cast<double>(i));
    t.states.push_back(-static_cast<double>(i));
    if (actions && i < L) t.actions.push_back(0.5 * static_cast<double>(i));
  }
  return t;
}

std::string serialize(const Dataset& d) {
  std::ostringstream os;
  write_dataset(os, d);
  return os.str();
}

}  // namespace

TEST(Windows, Counts) {
  EXPECT_EQ(slide_windows(counting_trajectory(5), 2).size(), 4u);
  EXPECT_EQ(slide_windows(counting_trajectory(2), 2).size(), 1u);
  EXPECT_EQ(slide_windows(counting_trajectory(1), 2).size(), 0u);
  EXPECT_EQ(slide_windows(counting_trajectory(9), 2, 3).size(), 3u);
}

TEST(Windows, FirstStatesReproduceTrajectory) {
  const Trajectory t = counting_trajectory(7);
  const auto ws = slide_windows(t, 3);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    EXPECT_EQ(ws[i].states[0], t.states[2 * i]);
    EXPECT_EQ(ws[i].states[1], t.states[2 * i + 1]);
    EXPECT_EQ(ws[i].states.size(), 4u * 2);  // T + 1 states
    EXPECT_EQ(ws[i].actions.size(), 3u);
    EXPECT_EQ(ws[i].encoder_input().size(), 3u * 2);
  }
}

TEST(Windows, LabelFollowsSource) {
  Trajectory t = counting_trajectory(3);
  EXPECT_EQ(slide_windows(t, 2)[0].label, 0);
  t.source = Source::noised;
  EXPECT_EQ(slide_windows(t, 2)[0].label, 1);
}

TEST(Windows, BatchLayout) {
  const Trajectory t = counting_trajectory(6);
  const WindowBatch b = make_batch({{&t, 1}, {&t, 4}}, 2);
  EXPECT_EQ(b.encoder_input.shape(), (Shape{2, 4}));
  EXPECT_EQ(b.encoder_input.row(1), (std::vector<double>{4, -4, 5, -5}));
  EXPECT_EQ(b.states.row(1), (std::vector<double>{2, -2}));
  EXPECT_EQ(b.next_states.row(3), (std::vector<double>{6, -6}));
  EXPECT_EQ(b.actions.row(2), (std::vector<double>{2.0}));
  EXPECT_EQ(b.step_window, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_THROW(make_batch({{&t, 5}}, 2), ContractError);
}

TEST(Windows, SamplerCoversPoolUniformly) {
  const Trajectory a = counting_trajectory(3), b = counting_trajectory(9);
  WindowSampler s({&a, &b}, 2);
  EXPECT_EQ(s.total(), 2u + 8u);
  Rng rng(4);
  std::map<std::pair<const Trajectory*, std::size_t>, int> hits;
  const int n = 20000;
  for (const WindowRef& r : s.sample(n, rng)) {
    ASSERT_LE(r.start + 2, r.traj->length());
    ++hits[{r.traj, r.start}];
  }
  EXPECT_EQ(hits.size(), 10u);
  for (const auto& [k, c] : hits) EXPECT_NEAR(c, n / 10.0, 5 * std::sqrt(n * 0.1 * 0.9));
}

TEST(ReplayBuffer, FifoEviction) {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) {
    Trajectory t = counting_trajectory(2);
    t.domain = std::to_string(i);
    buf.push(std::move(t));
    EXPECT_LE(buf.size(), 3u);
  }
  EXPECT_EQ(buf[0].domain, "2");
  EXPECT_EQ(buf[1].domain, "3");
  EXPECT_EQ(buf[2].domain, "4");
  EXPECT_EQ(buf.inserted(), 5u);
  EXPECT_THROW(ReplayBuffer(0), ContractError);
}

TEST(StripActions, ExpertOnly) {
  const EnvSpec& spec = env_spec("pm2d");
  Dataset d = make_expert_dataset(spec, 5, 1);
  Dataset off = make_offline_dataset(spec, 4, {0.3}, 2);
  d.trajectories.insert(d.trajectories.end(), off.trajectories.begin(), off.trajectories.end());
  const Dataset s = strip_actions(d);
  ASSERT_EQ(s.trajectories.size(), 9u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_FALSE(s.trajectories[i].has_actions);
    EXPECT_TRUE(s.trajectories[i].actions.empty());
    EXPECT_EQ(s.trajectories[i].states, d.trajectories[i].states);
    s.trajectories[i].validate();
  }
  for (std::size_t i = 5; i < 9; ++i) EXPECT_EQ(s.trajectories[i].actions, d.trajectories[i].actions);
  EXPECT_EQ(strip_actions(s), s);
}

TEST(OfflineDataset, StratifiedAndDegradesWithNoise) {
  const EnvSpec& spec = env_spec("pm2d");
  std::vector<double> returns;
  const Dataset d = make_offline_dataset(spec, 200, offline_preset("medium-expert"), 9, &returns);
  ASSERT_EQ(d.trajectories.size(), 200u);
  std::vector<double> sum(3, 0.0), count(3, 0.0);
  for (std::size_t i = 0; i < returns.size(); ++i) {
    sum[i % 3] += returns[i];
    count[i % 3] += 1;
    EXPECT_EQ(d.trajectories[i].source, Source::offline);
  }
  for (double c : count) EXPECT_LE(std::abs(c - 200.0 / 3.0), 1.0);
  const double m0 = sum[0] / count[0], m3 = sum[1] / count[1], m6 = sum[2] / count[2];
  EXPECT_NEAR(m0, spec.expert_return, 0.05 * std::abs(spec.expert_return));
  EXPECT_LT(m6, m3);
  EXPECT_LT(m3, m0);
  EXPECT_EQ(offline_preset("medium"), (std::vector<double>{0.3, 0.6}));
  EXPECT_THROW(offline_preset("expert"), ContractError);
  EXPECT_THROW(make_offline_dataset(spec, 2, {1.5}, 1), ContractError);
}

TEST(NoiseExpert, RejectsZeroScale) {
  const Dataset d = make_expert_dataset(env_spec("pm2d"), 2, 3);
  EXPECT_THROW(noise_expert(d.trajectories, 0.0, 1), ContractError);
}

TEST(NoiseExpert, DisplacementMatchesScale) {
  const Dataset d = make_expert_dataset(env_spec("pm2d"), 30, 3);
  const auto sd = state_std(d.trajectories);
  const auto noised = noise_expert(d.trajectories, kDefaultNoiseScale, 5);
  std::vector<double> sq(4, 0.0);
  double n = 0;
  for (std::size_t t = 0; t < noised.size(); ++t) {
    EXPECT_EQ(noised[t].source, Source::noised);
    for (std::size_t i = 0; i < noised[t].states.size(); i += 4) {
      for (std::size_t k = 0; k < 4; ++k) sq[k] += std::pow(noised[t].states[i + k] - d.trajectories[t].states[i + k], 2);
      n += 1;
    }
  }
  ASSERT_GE(n, 1000);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(std::sqrt(sq[k] / n), 0.5 * sd[k], 0.1 * 0.5 * sd[k]);
}

TEST(NoiseExpert, ProbeSeparatesNoisedWindows) {
  const Dataset d = make_expert_dataset(env_spec("pm2d"), 20, 8);
  const auto noised = noise_expert(d.trajectories, kDefaultNoiseScale, 6);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (std::size_t t = 0; t < noised.size(); ++t)
    for (std::size_t k = 0; k < window_count(noised[t], 2); ++k) {
      x.push_back(make_window(d.trajectories[t], k, 2).encoder_input());
      y.push_back(0);
      x.push_back(make_window(noised[t], k, 2).encoder_input());
      y.push_back(1);
    }
  EXPECT_GT(verify::logistic_probe_accuracy(x, y, true), 0.9);
}

TEST(Score, Anchors) {
  const EnvSpec& s = env_spec("pm2d");
  EXPECT_DOUBLE_EQ(normalized_score(s.expert_return, s), 100.0);
  EXPECT_DOUBLE_EQ(normalized_score(s.random_return, s), 0.0);
}

TEST(Format, RoundTripIsByteStable) {
  Dataset d = make_offline_dataset(env_spec("pm2d"), 3, {0.3}, 12);
  d.comments.push_back(" preset=medium seed=12");
  const std::string text = serialize(d);
  std::istringstream is(text);
  Dataset back = read_dataset(is);
  EXPECT_EQ(serialize(back), text);
  for (Trajectory& t : back.trajectories) t.source = Source::offline;
  EXPECT_EQ(back, d);
}

TEST(Format, NoRewardFields) {
  const std::string text = serialize(make_expert_dataset(env_spec("pm2d"), 2, 1));
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "ceil-traj 1 4 2 1 pm2d");
  while (std::getline(is, line)) EXPECT_TRUE(line.starts_with("episode ") || line.starts_with("s ") || line.starts_with("a "));
}

TEST(Format, LfoFileHasNoActionRows) {
  const Dataset d = strip_actions(make_expert_dataset(env_spec("pm2d"), 3, 1));
  const std::string text = serialize(d);
  EXPECT_TRUE(text.starts_with("ceil-traj 1 4 2 0 pm2d\n"));
  EXPECT_EQ(text.find("\na "), std::string::npos);
  std::istringstream is(text);
  const Dataset back = read_dataset(is);
  EXPECT_FALSE(back.has_actions());
  EXPECT_EQ(back.act_dim, 2u);
}

TEST(Format, ErrorsNameTheLine) {
  auto error_of = [](const std::string& text) {
    std::istringstream is(text);
    try {
      read_dataset(is, "f");
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(error_of("ceil-trax 1 2 1 1 x\n").rfind("f:1:", 0), 0u);
  EXPECT_EQ(error_of("ceil-traj 2 2 1 1 x\n").rfind("f:1:", 0), 0u);
  EXPECT_EQ(error_of("ceil-traj 1 2 1 1 x\nepisode 1\ns 0 0\na 1\ns 0 nan?\n").rfind("f:5:", 0), 0u);
  EXPECT_EQ(error_of("ceil-traj 1 2 1 1 x\nepisode 1\ns 0 0\ns 1 1\n").rfind("f:4:", 0), 0u);
  EXPECT_EQ(error_of("ceil-traj 1 2 1 0 x\nepisode 2\ns 0 0\n").rfind("f:3:", 0), 0u);
}

TEST(Format, MixedActionPresenceRefused) {
  Dataset d = make_expert_dataset(env_spec("pm2d"), 2, 1);
  d.trajectories[0].has_actions = false;
  d.trajectories[0].actions.clear();
  std::ostringstream os;
  EXPECT_THROW(write_dataset(os, d), ContractError);
}

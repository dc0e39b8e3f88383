#pragma once

// Online and offline training loops, evaluation, one-shot adaptation and the
// behavioural-cloning reference.
//
// Each iteration:
//   online:  roll out pi(.|., z*) for one episode into the replay buffer
//   model:   one step on self-consistency + w_dec decoder + w_vq VQ loss
//   joint:   one step on z-inference + alpha J_D (+ w_cd cross-domain reg)
//            updating z*, the encoder (and the MINE statistic)
//   offline: one step on R(z*) with the encoder frozen

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxil/data.hpp"
#include "ctxil/envs.hpp"
#include "ctxil/model.hpp"
#include "ctxil/nn.hpp"

namespace ctxil {

struct Setting {
  bool cross_domain = false;
  bool online = true;
  bool lfo = false;

  std::string name() const {
    return std::string(cross_domain ? "C" : "S") + (online ? "-on-" : "-off-") + (lfo ? "LfO" : "LfD");
  }
  friend bool operator==(const Setting&, const Setting&) = default;
};

inline Setting parse_setting(std::string_view s) {
  for (bool c : {false, true})
    for (bool on : {true, false})
      for (bool lfo : {false, true}) {
        Setting st{c, on, lfo};
        if (st.name() == s) return st;
      }
  throw ContractError("unknown setting '" + std::string(s) + "' (expected e.g. S-on-LfD, C-off-LfO)");
}

struct TrainConfig {
  Setting setting;
  std::string env = "pm2d";         // learner's domain
  std::string expert_env = "pm2d";  // domain the expert data came from
  int iterations = 2000;
  std::size_t batch_size = 256;
  std::size_t expert_batch_size = 256;
  double alpha = 0.1;
  double cd_weight = 0.0;
  double vq_weight = 1.0;
  double decoder_weight = 1.0;
  double lr = 1e-3;
  double lr_min = 1e-5;
  long lr_period = 1000;
  double zstar_lr = 1e-4;
  double joint_lr_scale = 3.0;  // encoder step size in the joint step, relative to lr
  bool merge_expert = true;
  bool full_form = false;
  double noise_scale = kDefaultNoiseScale;
  std::size_t buffer_capacity = 500;
  int eval_every = 100;
  int eval_episodes = 10;
  std::uint64_t eval_seed = 900001;
  std::uint64_t seed = 1;
  ModelConfig model;

  // Setting-dependent defaults: alpha 0.1 / 0 and cross-domain weight 0 / 1
  // for single / cross domain; expert demos join D only in single-domain LfD.
  static TrainConfig for_setting(Setting s) {
    TrainConfig c;
    c.setting = s;
    c.alpha = s.cross_domain ? 0.0 : 0.1;
    c.cd_weight = s.cross_domain ? 1.0 : 0.0;
    c.merge_expert = !s.cross_domain && !s.lfo;
    return c;
  }

  void validate() const {
    require(iterations >= 0, "config: iterations must be non-negative");
    require(batch_size > 0 && expert_batch_size > 0, "config: batch sizes must be positive");
    require(alpha >= 0.0, "config: alpha must be non-negative");
    require(cd_weight >= 0.0, "config: cd_weight must be non-negative");
    require(cd_weight == 0.0 || setting.cross_domain, "config: cd_weight > 0 requires a cross-domain (C-*) setting");
    require(!(merge_expert && setting.lfo), "config: merge_expert needs expert actions (LfD)");
    require(!(full_form && !setting.online), "config: full_form needs policy rollouts (online setting)");
    require(lr > 0 && zstar_lr > 0 && lr_min >= 0 && lr_min <= lr && lr_period > 0, "config: invalid learning rates");
    require(joint_lr_scale > 0, "config: joint_lr_scale must be positive");
    require(noise_scale > 0, "config: noise_scale must be positive");
    require(eval_every > 0 && eval_episodes > 0, "config: evaluation cadence and episodes must be positive");
    require(buffer_capacity > 0, "config: buffer_capacity must be positive");
    require(model.window >= 1 && model.embed_dim >= 1 && model.codebook_size >= 1, "config: invalid model sizes");
    env_spec(env);
    env_spec(expert_env);
  }
};

struct MetricsRow {
  int iteration = 0;
  double mean_return = 0.0;
  double normalized_score = 0.0;
  double z_expert_distance = 0.0;
  double policy_z_distance = 0.0;
  // Loss means over the iterations since the previous row (absent at row 0).
  std::optional<double> loss_self_consistency, loss_decoder, loss_vq, loss_z_inference, loss_jd, loss_reg_offline,
      loss_cross_domain;
  std::optional<double> code_entropy;
};

struct Evaluation {
  double mean_return = 0.0;
  double normalized_score = 0.0;
  std::vector<Episode> episodes;
};

// Deterministic (mean-action) rollouts of pi(.|., z). Reads the model only.
inline Evaluation evaluate(const EnvSpec& spec, const CeilModel& m, const Tensor& z, int episodes, std::uint64_t seed) {
  require(z.size() == m.cfg.embed_dim, "evaluate: latent has the wrong dimension");
  require(spec.act_dim() == m.cfg.act_dim && spec.obs_dim() == m.cfg.obs_dim, "evaluate: model/env dims differ");
  Evaluation ev;
  auto pol = [&](std::span<const double> o) { return policy_mean(m, o, z.values()); };
  ev.episodes = rollout(spec, pol, episodes, seed, Source::buffer);
  ev.mean_return = mean_return(ev.episodes);
  ev.normalized_score = normalized_score(ev.mean_return, spec);
  return ev;
}

// Mean over windows of ||z_e(w) - z||.
inline double mean_embedding_distance(const CeilModel& m, const std::vector<const Trajectory*>& trajs,
                                      const Tensor& z) {
  const auto refs = all_windows(trajs, m.cfg.window);
  if (refs.empty()) return 0.0;
  const Tensor ze = embed(m, make_batch(refs, m.cfg.window).encoder_input);
  const std::size_t d = m.cfg.embed_dim;
  double total = 0.0;
  for (std::size_t r = 0; r < ze.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (ze[r * d + j] - z[j]) * (ze[r * d + j] - z[j]);
    total += std::sqrt(s);
  }
  return total / static_cast<double>(ze.rows());
}

inline Tensor mean_expert_embedding(const CeilModel& m, const std::vector<const Trajectory*>& expert) {
  const auto refs = all_windows(expert, m.cfg.window);
  require(!refs.empty(), "train: expert data has no windows");
  const Tensor ze = embed(m, make_batch(refs, m.cfg.window).encoder_input);
  const std::size_t d = m.cfg.embed_dim;
  Tensor z(Shape{d});
  for (std::size_t r = 0; r < ze.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) z[j] += ze[r * d + j] / static_cast<double>(ze.rows());
  return z;
}

struct RunResult {
  CeilModel model;
  std::vector<MetricsRow> rows;
  long training_env_steps = 0;
};

namespace detail {

struct LossMeans {
  double sc = 0, dec = 0, vq = 0, zi = 0, jd = 0, reg = 0, cd = 0;
  int n = 0;
};

template <class... Groups>
std::vector<Tensor*> concat_params(Groups&&... groups) {
  std::vector<Tensor*> out;
  (out.insert(out.end(), groups.begin(), groups.end()), ...);
  return out;
}

inline Adam adam_for(const std::vector<Tensor*>& params) {
  std::vector<const Tensor*> c(params.begin(), params.end());
  return Adam(c);
}

}  // namespace detail

// Runs either loop. `offline` must be non-null exactly for offline settings.
inline RunResult train(const TrainConfig& cfg, const Dataset& expert, const Dataset* offline) {
  cfg.validate();
  const Setting st = cfg.setting;
  require(st.online == (offline == nullptr), st.online ? "train: online settings never read an offline dataset"
                                                       : "train: offline setting needs an offline dataset");
  const EnvSpec& spec = env_spec(cfg.env);
  require(!expert.trajectories.empty(), "train: no expert data");
  require(expert.obs_dim == spec.obs_dim() && expert.act_dim == spec.act_dim(), "train: expert data dims differ from env");
  require(st.lfo || expert.has_actions(), "train: LfD setting needs expert actions");
  if (offline) {
    require(offline->obs_dim == spec.obs_dim() && offline->act_dim == spec.act_dim(), "train: offline data dims differ");
    require(offline->has_actions(), "train: offline data must carry actions");
  }

  ModelConfig mc = cfg.model;
  mc.obs_dim = spec.obs_dim();
  mc.act_dim = spec.act_dim();
  RunResult res;
  CeilModel& m = res.model;
  m = CeilModel::init(mc, derive_seed(cfg.seed, 1));
  const std::size_t T = mc.window;

  Rng sample_rng(derive_seed(cfg.seed, 2));
  Rng rollout_rng(derive_seed(cfg.seed, 3));
  Rng mine_rng(derive_seed(cfg.seed, 4));

  // LfO expert data is used without actions even when the file had them.
  const Dataset expert_view = st.lfo ? strip_actions(expert) : expert;
  std::vector<Trajectory> expert_trajs = expert_view.trajectories;
  for (Trajectory& t : expert_trajs) t.source = Source::expert;
  std::vector<const Trajectory*> expert_ptrs;
  for (const Trajectory& t : expert_trajs) expert_ptrs.push_back(&t);
  const WindowSampler expert_sampler(expert_ptrs, T);
  require(expert_sampler.total() > 0, "train: expert trajectories are shorter than the window");

  const bool use_cd = st.cross_domain && cfg.cd_weight > 0.0;
  std::vector<Trajectory> noised;
  std::vector<const Trajectory*> labeled_ptrs;
  if (use_cd) {
    noised = noise_expert(expert_trajs, cfg.noise_scale, derive_seed(cfg.seed, 5));
    labeled_ptrs = expert_ptrs;
    for (const Trajectory& t : noised) labeled_ptrs.push_back(&t);
  }

  ReplayBuffer buffer(cfg.buffer_capacity);
  long env_steps = 0;
  auto counted = [&](auto&& fn) {
    const long before = env_step_counter().load();
    fn();
    env_steps += env_step_counter().load() - before;
  };
  if (st.online) {
    Rng warm(derive_seed(cfg.seed, 6));
    auto random_policy = [&](std::span<const double>) {
      std::vector<double> a(spec.act_dim());
      for (double& v : a) v = uniform(warm, -1.0, 1.0);
      return a;
    };
    counted([&] { buffer.push(run_episode(spec, random_policy, derive_seed(cfg.seed, 7), Source::buffer).traj); });
  }

  // Dictionary rows start at embeddings of windows drawn from the initial
  // pool, so every code begins inside the encoder's image.
  {
    std::vector<const Trajectory*> pool0 = st.online ? buffer.pointers() : offline->pointers();
    if (cfg.merge_expert || st.online) pool0.insert(pool0.end(), expert_ptrs.begin(), expert_ptrs.end());
    Rng init_rng(derive_seed(cfg.seed, 8));
    m.codebook = embed(m, make_batch(WindowSampler(pool0, T).sample(mc.codebook_size, init_rng), T).encoder_input);
  }
  m.z_star = mean_expert_embedding(m, expert_ptrs);

  std::vector<Tensor*> model_params =
      detail::concat_params(m.encoder.parameters(), std::vector<Tensor*>{&m.codebook}, m.policy.parameters(),
                            m.decoder.parameters());
  Adam opt_model = detail::adam_for(model_params);
  std::vector<Tensor*> enc_params = m.encoder.parameters();
  Adam opt_encoder = detail::adam_for(enc_params);
  std::vector<Tensor*> zstar_params{&m.z_star};
  Adam opt_zstar = detail::adam_for(zstar_params);
  std::vector<Tensor*> mine_params = m.mine.parameters();
  Adam opt_mine = detail::adam_for(mine_params);
  const CosineWarmRestarts sched{cfg.lr, cfg.lr_min, cfg.lr_period, 1};
  const CosineWarmRestarts zsched{cfg.zstar_lr, std::min(cfg.lr_min, cfg.zstar_lr), cfg.lr_period, 1};

  detail::LossMeans acc;
  std::vector<std::size_t> last_codes;
  const Trajectory* last_rollout = nullptr;

  auto record_row = [&](int iteration) {
    MetricsRow row;
    row.iteration = iteration;
    const Evaluation ev = evaluate(spec, m, m.z_star, cfg.eval_episodes, cfg.eval_seed);
    row.mean_return = ev.mean_return;
    row.normalized_score = ev.normalized_score;
    row.z_expert_distance = mean_embedding_distance(m, expert_ptrs, m.z_star);
    std::vector<const Trajectory*> eval_ptrs;
    for (const Episode& e : ev.episodes) eval_ptrs.push_back(&e.traj);
    row.policy_z_distance = mean_embedding_distance(m, eval_ptrs, m.z_star);
    if (acc.n > 0) {
      const double n = acc.n;
      row.loss_self_consistency = acc.sc / n;
      row.loss_decoder = acc.dec / n;
      row.loss_vq = acc.vq / n;
      row.loss_z_inference = acc.zi / n;
      row.loss_jd = acc.jd / n;
      row.loss_reg_offline = acc.reg / n;
      row.loss_cross_domain = acc.cd / n;
      row.code_entropy = code_entropy(last_codes, mc.codebook_size);
    }
    acc = {};
    res.rows.push_back(row);
  };
  record_row(0);

  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = sched.lr(it), zlr = zsched.lr(it);

    // (a) support constraint online: act in the learner's env with z*
    if (st.online) {
      auto pol = [&](std::span<const double> o) { return policy_sample(m, o, m.z_star.values(), rollout_rng); };
      counted([&] {
        buffer.push(run_episode(spec, pol, derive_seed(cfg.seed, 1000000 + static_cast<std::uint64_t>(it)),
                                Source::buffer)
                        .traj);
      });
      last_rollout = &buffer[buffer.size() - 1];
    }

    // (b) the self-consistency pool D (plus expert demos in LfD)
    std::vector<const Trajectory*> pool = st.online ? buffer.pointers() : offline->pointers();
    if (cfg.merge_expert) pool.insert(pool.end(), expert_ptrs.begin(), expert_ptrs.end());
    const WindowBatch batch = make_batch(WindowSampler(pool, T).sample(cfg.batch_size, sample_rng), T);

    // (c) model step
    {
      Tape t;
      BoundMlp enc = bind(t, m.encoder, true), pol = bind(t, m.policy, true), dec = bind(t, m.decoder, true);
      Var book = t.leaf(m.codebook);
      Encoded e = encode(enc, book, t.constant(batch.encoder_input));
      Var sc = loss_self_consistency(pol, e.z_q, batch);
      Var dl = loss_decoder(dec, stop_gradient(e.z_q), batch);  // decoder head only
      Var vq = loss_vq(e.z_e, e.codes);
      t.backward(add(sc, add(scale(dl, cfg.decoder_weight), scale(vq, cfg.vq_weight))));
      std::vector<Tensor> g = enc.grads(t);
      g.push_back(t.grad(book));
      for (Tensor& x : pol.grads(t)) g.push_back(std::move(x));
      for (Tensor& x : dec.grads(t)) g.push_back(std::move(x));
      opt_model.step(model_params, g, lr);
      acc.sc += sc.value().item();
      acc.dec += dl.value().item();
      acc.vq += vq.value().item();
      last_codes = e.index;
    }

    // (d) joint step on z* and the encoder
    const WindowBatch eb = make_batch(expert_sampler.sample(cfg.expert_batch_size, sample_rng), T);
    {
      Tape t;
      BoundMlp enc = bind(t, m.encoder, true);
      BoundMlp pol = bind(t, m.policy, false), dec = bind(t, m.decoder, false);
      Var zs = t.leaf(m.z_star);
      Var zE = enc.forward(t.constant(eb.encoder_input));
      Var zi;
      if (cfg.full_form) {
        const WindowBatch tb = make_batch(all_windows({last_rollout}, T), T);
        Var zT = enc.forward(t.constant(tb.encoder_input));
        zi = loss_z_inference(zs, zE, &zT, true);
      } else {
        zi = loss_z_inference(zs, zE);
      }
      Var jd = loss_jd(t, pol, dec, zs, eb, cfg.alpha, st.lfo);
      Var total = add(zi, jd);
      std::optional<BoundMlp> mine;
      if (use_cd) {
        const WindowBatch lb =
            make_batch(WindowSampler(labeled_ptrs, T).sample(cfg.expert_batch_size, mine_rng), T);
        std::vector<int> shuffled = lb.labels;
        std::shuffle(shuffled.begin(), shuffled.end(), mine_rng);
        mine = bind(t, m.mine, true);
        Var cd = reg_cross_domain(*mine, enc.forward(t.constant(lb.encoder_input)), lb.labels, shuffled);
        total = add(total, scale(cd, cfg.cd_weight));
        acc.cd += cd.value().item();
      }
      t.backward(total);
      opt_encoder.step(enc_params, enc.grads(t), lr * cfg.joint_lr_scale);
      opt_zstar.step(zstar_params, std::vector<Tensor>{t.grad(zs)}, zlr);
      if (mine) opt_mine.step(mine_params, mine->grads(t), lr);
      acc.zi += zi.value().item();
      acc.jd += jd.value().item();
    }

    // (e) offline support constraint on z*
    if (!st.online) {
      const Tensor zE = embed(m, eb.encoder_input);
      const Tensor zD = embed(m, batch.encoder_input);
      Tape t;
      Var zs = t.leaf(m.z_star);
      Var r = reg_offline_z(zs, zE, zD);
      t.backward(r);
      opt_zstar.step(zstar_params, std::vector<Tensor>{t.grad(zs)}, zlr);
      acc.reg += r.value().item();
    }
    ++acc.n;

    if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations) record_row(it + 1);
  }
  res.training_env_steps = env_steps;
  return res;
}

// ---- behavioural cloning reference ----------------------------------------------

struct BcResult {
  Mlp policy;  // obs -> [tanh mean | log_std]
  double mean_return = 0.0;
  double normalized_score = 0.0;
};

inline std::vector<double> bc_action(const Mlp& policy, std::span<const double> obs) {
  Tensor x(Shape{1, obs.size()});
  std::copy(obs.begin(), obs.end(), x.data());
  const Tensor out = policy.forward(x);
  std::vector<double> a(out.size() / 2);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(out[i]);
  return a;
}

// Max-likelihood cloning of the expert demos alone, with the same network
// size, batch size, schedule and iteration count as the CEIL run.
inline BcResult bc_baseline(const TrainConfig& cfg, const Dataset& expert) {
  const EnvSpec& spec = env_spec(cfg.env);
  require(expert.has_actions(), "bc_baseline: needs expert actions");
  Rng rng(derive_seed(cfg.seed, 11));
  BcResult r;
  r.policy = Mlp(mlp_dims(spec.obs_dim(), 2 * spec.act_dim(), cfg.model.hidden_layers, cfg.model.hidden_width), rng);
  std::vector<Tensor*> params = r.policy.parameters();
  Adam opt = detail::adam_for(params);
  const CosineWarmRestarts sched{cfg.lr, cfg.lr_min, cfg.lr_period, 1};
  const WindowSampler sampler(expert.pointers(), 1);
  for (int it = 0; it < cfg.iterations; ++it) {
    const WindowBatch b = make_batch(sampler.sample(cfg.batch_size, rng), 1);
    Tape t;
    BoundMlp p = bind(t, r.policy, true);
    t.backward(head_nll(p.forward(t.constant(b.states)), t.constant(b.actions), nullptr));
    opt.step(params, p.grads(t), sched.lr(it));
  }
  auto pol = [&](std::span<const double> o) { return bc_action(r.policy, o); };
  r.mean_return = mean_return(rollout(spec, pol, cfg.eval_episodes, cfg.eval_seed));
  r.normalized_score = normalized_score(r.mean_return, spec);
  return r;
}

}  // namespace ctxil

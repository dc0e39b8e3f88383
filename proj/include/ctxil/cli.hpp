#pragma once

// Command-line front end: gen-expert, gen-offline, train, eval, one-shot.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ctxil/config.hpp"
#include "ctxil/data.hpp"
#include "ctxil/model.hpp"
#include "ctxil/report.hpp"
#include "ctxil/train.hpp"

namespace ctxil {

namespace fs = std::filesystem;

struct TrainOutputs {
  std::string config, metrics, curves, checkpoint, latent;
};

inline TrainOutputs train_outputs(const fs::path& dir) {
  return {(dir / "config.cfg").string(), (dir / "metrics.csv").string(), (dir / "curves.svg").string(),
          (dir / "checkpoint.txt").string(), (dir / "z_star.txt").string()};
}

// Runs one configured training and writes everything into `dir`.
inline RunResult run_training(const RunConfig& rc, const Dataset& expert, const Dataset* offline,
                              const fs::path& dir) {
  RunResult r = train(rc.train, expert, offline);
  fs::create_directories(dir);
  const TrainOutputs out = train_outputs(dir);
  std::ostringstream cfg, csv, svg;
  write_config(cfg, rc);
  write_metrics_csv(csv, r.rows);
  write_curves_svg(svg, r.rows, rc.train.setting.name() + " on " + rc.train.env + ", seed " +
                                    std::to_string(rc.train.seed));
  save_text(out.config, cfg.str());
  save_text(out.metrics, csv.str());
  save_text(out.curves, svg.str());
  save_checkpoint(out.checkpoint, r.model);
  save_latent(out.latent, r.model.z_star);
  return r;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(detail::parse_number<std::uint64_t>("--seeds", item));
  if (out.empty()) throw FormatError("--seeds: empty list");
  return out;
}

inline Dataset load_expert_for(const RunConfig& rc) {
  Dataset d = load_dataset(rc.expert_data, Source::expert);
  const EnvSpec& spec = env_spec(rc.train.env);
  require(d.obs_dim == spec.obs_dim() && d.act_dim == spec.act_dim(),
          "expert data dimensions do not match env " + rc.train.env);
  return d;
}

// Returns the process exit status. All output goes to `out`/`err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contextual imitation learning on small point-mass tasks"};
  app.require_subcommand(1);

  std::string env = "pm2d", out_path, preset = "medium", config_path, out_dir, seeds, checkpoint, z_arg = "latest",
              new_traj;
  int episodes = 20, eval_episodes = 10;
  std::uint64_t seed = 1;
  bool lfo = false;

  auto* gen_expert = app.add_subcommand("gen-expert", "roll out the scripted expert and save its trajectories");
  gen_expert->add_option("--env", env, "environment name")->capture_default_str();
  gen_expert->add_option("--episodes", episodes, "number of episodes")->capture_default_str();
  gen_expert->add_option("--seed", seed, "reset seed")->capture_default_str();
  gen_expert->add_option("--out", out_path, "output file")->required();
  gen_expert->add_flag("--lfo", lfo, "drop the actions (observation-only demos)");

  auto* gen_offline = app.add_subcommand("gen-offline", "synthesize an offline dataset from noisy experts");
  gen_offline->add_option("--env", env, "environment name")->capture_default_str();
  gen_offline->add_option("--episodes", episodes, "number of episodes")->capture_default_str();
  gen_offline->add_option("--preset", preset, "medium | medium-expert")->capture_default_str();
  gen_offline->add_option("--seed", seed, "generation seed")->capture_default_str();
  gen_offline->add_option("--out", out_path, "output file")->required();

  auto* train_cmd = app.add_subcommand("train", "train from a config file");
  train_cmd->add_option("--config", config_path, "config file (key = value)")->required();
  train_cmd->add_option("--out-dir", out_dir, "output directory")->required();
  train_cmd->add_option("--seeds", seeds, "comma-separated seeds; one run per seed in seed-<n>/");
  train_cmd->footer(config_help());

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; prints mean_return,normalized_score");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--env", env, "environment name")->capture_default_str();
  eval_cmd->add_option("--episodes", eval_episodes, "evaluation episodes")->capture_default_str();
  eval_cmd->add_option("--seed", seed, "evaluation seed")->capture_default_str();
  eval_cmd->add_option("--z", z_arg, "'latest' (the checkpoint's z*) or a latent file")->capture_default_str();

  auto* one_shot = app.add_subcommand("one-shot", "embed one new trajectory and compare z_new with z*");
  one_shot->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  one_shot->add_option("--new-traj", new_traj, "trajectory file (first trajectory is used)")->required();
  one_shot->add_option("--env", env, "environment to evaluate on")->capture_default_str();
  one_shot->add_option("--episodes", eval_episodes, "evaluation episodes")->capture_default_str();
  one_shot->add_option("--seed", seed, "evaluation seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen_expert) {
      require(episodes > 0, "--episodes must be positive");
      Dataset d = make_expert_dataset(env_spec(env), episodes, seed);
      if (lfo) d = strip_actions(d);
      d.comments.push_back("gen-expert env=" + env + " episodes=" + std::to_string(episodes) +
                           " seed=" + std::to_string(seed) + (lfo ? " lfo" : ""));
      save_dataset(out_path, d);
    } else if (*gen_offline) {
      require(episodes > 0, "--episodes must be positive");
      const auto levels = offline_preset(preset);
      std::vector<double> returns;
      Dataset d = make_offline_dataset(env_spec(env), episodes, levels, seed, &returns);
      std::ostringstream lv;
      for (std::size_t i = 0; i < levels.size(); ++i) lv << (i ? "," : "") << levels[i];
      d.comments.push_back("gen-offline env=" + env + " preset=" + preset + " noise_levels=" + lv.str() +
                           " episodes=" + std::to_string(episodes) + " seed=" + std::to_string(seed) +
                           " mean_return=" +
                           format_double(std::accumulate(returns.begin(), returns.end(), 0.0) / returns.size()));
      save_dataset(out_path, d);
    } else if (*train_cmd) {
      // Everything that can fail on input is checked before any training.
      RunConfig rc = load_config(config_path);
      std::vector<std::uint64_t> seed_list;
      if (!seeds.empty()) seed_list = parse_seed_list(seeds);
      const Dataset expert = load_expert_for(rc);
      Dataset offline;
      if (!rc.train.setting.online) offline = load_dataset(rc.offline_data, Source::offline);
      const Dataset* off = rc.train.setting.online ? nullptr : &offline;
      if (seed_list.empty()) {
        const RunResult r = run_training(rc, expert, off, out_dir);
        out << rc.train.setting.name() << " seed " << rc.train.seed << ": score "
            << format_double(r.rows.back().normalized_score) << '\n';
      } else {
        for (std::uint64_t s : seed_list) {
          RunConfig one = rc;
          one.train.seed = s;
          const RunResult r = run_training(one, expert, off, fs::path(out_dir) / ("seed-" + std::to_string(s)));
          out << rc.train.setting.name() << " seed " << s << ": score "
              << format_double(r.rows.back().normalized_score) << '\n';
        }
      }
    } else if (*eval_cmd) {
      require(eval_episodes > 0, "--episodes must be positive");
      const CeilModel m = load_checkpoint(checkpoint);
      const Tensor z = z_arg == "latest" ? m.z_star : load_latent(z_arg);
      const Evaluation ev = evaluate(env_spec(env), m, z, eval_episodes, seed);
      out << format_double(ev.mean_return) << ',' << format_double(ev.normalized_score) << '\n';
    } else if (*one_shot) {
      require(eval_episodes > 0, "--episodes must be positive");
      const CeilModel m = load_checkpoint(checkpoint);
      const Dataset d = load_dataset(new_traj, Source::expert);
      require(!d.trajectories.empty(), "--new-traj holds no trajectories");
      const Tensor z_new = one_shot_adapt(m, d.trajectories.front());
      const EnvSpec& spec = env_spec(env);
      const Evaluation a = evaluate(spec, m, m.z_star, eval_episodes, seed);
      const Evaluation b = evaluate(spec, m, z_new, eval_episodes, seed);
      out << "z_star_return,z_star_score,z_new_return,z_new_score\n"
          << format_double(a.mean_return) << ',' << format_double(a.normalized_score) << ','
          << format_double(b.mean_return) << ',' << format_double(b.normalized_score) << '\n';
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ctxil

#pragma once

// Contextual imitation model: a VQ window encoder, a z-conditioned Gaussian
// policy, a z-conditioned next-state decoder, the learned optimal embedding
// z*, and a MINE statistic network; plus every loss that trains them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctxil/autodiff.hpp"
#include "ctxil/data.hpp"
#include "ctxil/errors.hpp"
#include "ctxil/nn.hpp"
#include "ctxil/random.hpp"
#include "ctxil/tensor.hpp"

namespace ctxil {

struct ModelConfig {
  std::size_t obs_dim = 4;
  std::size_t act_dim = 2;
  std::size_t window = 2;
  std::size_t embed_dim = 16;
  std::size_t codebook_size = 256;
  std::size_t hidden_layers = 2;
  std::size_t hidden_width = 64;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::vector<std::size_t> mlp_dims(std::size_t in, std::size_t out, std::size_t layers, std::size_t width) {
  std::vector<std::size_t> d{in};
  for (std::size_t i = 0; i < layers; ++i) d.push_back(width);
  d.push_back(out);
  return d;
}

struct CeilModel {
  ModelConfig cfg;
  Mlp encoder;   // T*obs -> d
  Mlp policy;    // obs + d -> 2*act (tanh mean, log_std)
  Mlp decoder;   // obs + d -> 2*obs (state delta mean, log_std)
  Mlp mine;      // d + 2 -> 1
  Tensor codebook;  // [K, d]
  Tensor z_star;    // [d]

  static CeilModel init(const ModelConfig& c, std::uint64_t seed) {
    require(c.obs_dim > 0 && c.act_dim > 0 && c.window > 0 && c.embed_dim > 0, "model: zero dimension");
    require(c.codebook_size > 0, "model: empty dictionary");
    Rng rng(seed);
    CeilModel m;
    m.cfg = c;
    const std::size_t d = c.embed_dim;
    m.encoder = Mlp(mlp_dims(c.window * c.obs_dim, d, c.hidden_layers, c.hidden_width), rng);
    m.policy = Mlp(mlp_dims(c.obs_dim + d, 2 * c.act_dim, c.hidden_layers, c.hidden_width), rng);
    m.decoder = Mlp(mlp_dims(c.obs_dim + d, 2 * c.obs_dim, c.hidden_layers, c.hidden_width), rng);
    m.mine = Mlp(mlp_dims(d + 2, 1, c.hidden_layers, c.hidden_width), rng);
    m.codebook = Tensor(Shape{c.codebook_size, d});
    const double r = 1.0 / static_cast<double>(c.codebook_size);
    for (double& v : m.codebook.storage()) v = uniform(rng, -r, r);
    m.z_star = Tensor(Shape{d});
    return m;
  }

  friend bool operator==(const CeilModel&, const CeilModel&) = default;
};

// ---- quantization ------------------------------------------------------------

// Index of the nearest dictionary row for every row of z_e (Euclidean; ties
// resolve to the lowest index).
inline std::vector<std::size_t> quantize(const Tensor& codebook, const Tensor& z_e) {
  require(codebook.rank() == 2 && codebook.shape()[0] > 0, "quantize: empty dictionary");
  const std::size_t K = codebook.shape()[0], d = codebook.shape()[1];
  require(z_e.cols() == d, "quantize: embedding width " + std::to_string(z_e.cols()) + " vs dictionary width " +
                               std::to_string(d));
  std::vector<std::size_t> idx(z_e.rows());
  for (std::size_t r = 0; r < z_e.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = z_e[r * d + j] - codebook[k * d + j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        idx[r] = k;
      }
    }
  }
  return idx;
}

inline Tensor gather_codes(const Tensor& codebook, const std::vector<std::size_t>& idx) {
  const std::size_t d = codebook.shape()[1];
  Tensor out(Shape{idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(codebook.data() + idx[r] * d, d, out.data() + r * d);
  return out;
}

struct Encoded {
  Var z_e;    // encoder output [n, d]
  Var codes;  // selected dictionary rows [n, d], gradient to the dictionary
  Var z_q;    // value of codes, gradient routed to z_e (straight-through)
  std::vector<std::size_t> index;
};

inline Encoded encode(const BoundMlp& encoder, Var codebook, Var input) {
  Encoded e;
  e.z_e = encoder.forward(input);
  e.index = quantize(codebook.value(), e.z_e.value());
  e.codes = gather_rows(codebook, e.index);
  e.z_q = straight_through(e.codes, e.z_e);
  return e;
}

// Tape-free encoder output.
inline Tensor embed(const CeilModel& m, const Tensor& encoder_input) { return m.encoder.forward(encoder_input); }

// ---- conditioned heads -------------------------------------------------------

// z rows repeated to one row per step: [count, d] -> [count*T, d].
inline Var per_step(Var z_window, const WindowBatch& b) { return gather_rows(z_window, b.step_window); }

// The same vector for every row: [d] -> [n, d].
inline Var broadcast_rows(Var z, std::size_t n) { return gather_rows(z, std::vector<std::size_t>(n, 0)); }

// -mean log N(target | mean, exp(log_std)) for a head emitting [mean | log_std].
// With `residual_base`, the mean is base + head (next-state prediction);
// otherwise it is tanh(head) (bounded actions).
inline Var head_nll(Var out, Var target, const Var* residual_base) {
  const std::size_t k = target.shape()[1];
  require(out.shape()[1] == 2 * k, "head_nll: head width must be twice the target width");
  Var raw = slice_cols(out, 0, k);
  Var mean_v = residual_base ? add(*residual_base, raw) : tanh(raw);
  Var log_std = slice_cols(out, k, 2 * k);
  return scale(mean(gaussian_log_prob(target, mean_v, log_std)), -1.0);
}

inline Var loss_self_consistency(const BoundMlp& policy, Var z_window, const WindowBatch& b) {
  require(b.has_actions, "loss_self_consistency: windows carry no actions");
  Tape& tape = *z_window.tape();
  Var s = tape.constant(b.states);
  return head_nll(policy.forward(concat_cols(s, per_step(z_window, b))), tape.constant(b.actions), nullptr);
}

inline Var loss_decoder(const BoundMlp& decoder, Var z_window, const WindowBatch& b) {
  Tape& tape = *z_window.tape();
  Var s = tape.constant(b.states);
  return head_nll(decoder.forward(concat_cols(s, per_step(z_window, b))), tape.constant(b.next_states), &s);
}

// Codebook term ||sg[z_e] - e||^2 plus commitment term ||z_e - sg[e]||^2,
// summed over the embedding and averaged over rows.
inline Var loss_vq(Var z_e, Var codes) {
  const double n = static_cast<double>(z_e.value().rows());
  Var codebook_term = sum(square(sub(stop_gradient(z_e), codes)));
  Var commitment_term = sum(square(sub(z_e, stop_gradient(codes))));
  return scale(add(codebook_term, commitment_term), 1.0 / n);
}

// mean over rows of ||z - rows_i||^2, z: [d], rows: [n, d].
inline Var mean_sq_distance(Var z, Var rows) {
  const std::size_t n = rows.value().rows();
  return scale(sum(square(sub(rows, broadcast_rows(z, n)))), 1.0 / static_cast<double>(n));
}

// Simplified form: mean ||z* - f(tau_E)||^2. The full form also subtracts
// mean ||z* - f(tau_theta)||^2 over policy windows.
inline Var loss_z_inference(Var z_star, Var z_expert, const Var* z_theta = nullptr, bool full_form = false) {
  Var l = mean_sq_distance(z_star, z_expert);
  if (!full_form) return l;
  require(z_theta != nullptr, "loss_z_inference: full form needs policy-rollout windows");
  return sub(l, mean_sq_distance(z_star, *z_theta));
}

// alpha * -mean log-likelihood of expert pairs under the z*-conditioned policy
// (LfD) or decoder (LfO). alpha = 0 returns a constant 0.
inline Var loss_jd(Tape& tape, const BoundMlp& policy, const BoundMlp& decoder, Var z_star, const WindowBatch& expert,
                   double alpha, bool lfo) {
  require(alpha >= 0.0, "loss_jd: alpha must be non-negative");
  if (alpha == 0.0) return tape.constant(Tensor::scalar(0.0));
  Var s = tape.constant(expert.states);
  Var zin = concat_cols(s, broadcast_rows(z_star, expert.steps()));
  Var nll = lfo ? head_nll(decoder.forward(zin), tape.constant(expert.next_states), &s)
                : (require(expert.has_actions, "loss_jd: LfD expert windows carry no actions"),
                   head_nll(policy.forward(zin), tape.constant(expert.actions), nullptr));
  return scale(nll, alpha);
}

// min(mean ||z* - f(tau_E)||^2, mean ||z* - f(tau_D)||^2) with the encoder
// outputs treated as constants.
inline Var reg_offline_z(Var z_star, const Tensor& z_expert, const Tensor& z_offline) {
  Tape& tape = *z_star.tape();
  return minimum(mean_sq_distance(z_star, tape.constant(z_expert)), mean_sq_distance(z_star, tape.constant(z_offline)));
}

// ---- MINE ---------------------------------------------------------------------

// Donsker-Varadhan bound: mean f(joint) - log mean exp f(marginal).
inline Var mine_dv_bound(const BoundMlp& f, Var joint, Var marginal) {
  const double n = static_cast<double>(marginal.value().rows());
  Var t_joint = mean(f.forward(joint));
  Var t_marg = add_scalar(log_sum_exp(f.forward(marginal)), -std::log(n));
  return sub(t_joint, t_marg);
}

inline Tensor one_hot_labels(const std::vector<int>& labels) {
  Tensor t(Shape{labels.size(), 2});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "one_hot_labels: label must be 0 or 1");
    t[2 * i + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

// Bound on I(z; n). The marginal batch pairs z with the labels shuffled.
inline Var mine_lower_bound(const BoundMlp& mine, Var z, const std::vector<int>& labels,
                            const std::vector<int>& shuffled) {
  Tape& tape = *z.tape();
  require(labels.size() == z.value().rows() && shuffled.size() == labels.size(), "mine: label count mismatch");
  Var joint = concat_cols(z, tape.constant(one_hot_labels(labels)));
  Var marg = concat_cols(z, tape.constant(one_hot_labels(shuffled)));
  return mine_dv_bound(mine, joint, marg);
}

inline Var reg_cross_domain(const BoundMlp& mine, Var z, const std::vector<int>& labels,
                            const std::vector<int>& shuffled) {
  return scale(mine_lower_bound(mine, z, labels, shuffled), -1.0);
}

// ---- tape-free inference -------------------------------------------------------

inline Tensor with_latent(std::span<const double> obs, std::span<const double> z) {
  Tensor x(Shape{1, obs.size() + z.size()});
  std::copy(obs.begin(), obs.end(), x.data());
  std::copy(z.begin(), z.end(), x.data() + obs.size());
  return x;
}

// Mean action of pi(.|s, z).
inline std::vector<double> policy_mean(const CeilModel& m, std::span<const double> obs, std::span<const double> z) {
  const Tensor out = m.policy.forward(with_latent(obs, z));
  std::vector<double> a(m.cfg.act_dim);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(out[i]);
  return a;
}

inline std::vector<double> policy_sample(const CeilModel& m, std::span<const double> obs, std::span<const double> z,
                                         Rng& rng) {
  const Tensor out = m.policy.forward(with_latent(obs, z));
  const std::size_t k = m.cfg.act_dim;
  std::vector<double> a(k);
  for (std::size_t i = 0; i < k; ++i)
    a[i] = std::tanh(out[i]) + std::exp(std::clamp(out[k + i], kLogStdMin, kLogStdMax)) * normal(rng);
  return a;
}

// Shannon entropy (nats) of the code-usage histogram.
inline double code_entropy(const std::vector<std::size_t>& index, std::size_t K) {
  if (index.empty()) return 0.0;
  std::vector<double> c(K, 0.0);
  for (std::size_t i : index) c[i] += 1.0;
  double h = 0.0;
  for (double v : c)
    if (v > 0) {
      const double p = v / static_cast<double>(index.size());
      h -= p * std::log(p);
    }
  return h;
}

// z_new = mean over the trajectory's windows of the quantized embeddings.
inline Tensor one_shot_adapt(const CeilModel& m, const Trajectory& t) {
  const auto refs = all_windows({&t}, m.cfg.window);
  require(!refs.empty(), "one_shot_adapt: trajectory shorter than the window");
  const WindowBatch b = make_batch(refs, m.cfg.window);
  const Tensor codes = gather_codes(m.codebook, quantize(m.codebook, embed(m, b.encoder_input)));
  const std::size_t d = m.cfg.embed_dim;
  Tensor z(Shape{d});
  for (std::size_t r = 0; r < codes.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) z[j] += codes[r * d + j] / static_cast<double>(codes.rows());
  return z;
}

// ---- checkpoints ---------------------------------------------------------------
//
//   ctxil-checkpoint 1
//   config <obs> <act> <window> <embed> <codebook> <layers> <width>
//   block <name> <rank> <dims...>
//   <one line per row, %.17g values>

namespace detail {

inline void write_block(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "block " << name << ' ' << t.rank();
  for (std::size_t d : t.shape()) os << ' ' << d;
  os << '\n';
  const std::size_t cols = t.cols();
  for (std::size_t r = 0; r < t.size() / std::max<std::size_t>(cols, 1); ++r) {
    for (std::size_t c = 0; c < cols; ++c) os << (c ? " " : "") << format_double(t[r * cols + c]);
    os << '\n';
  }
}

// Works for const and mutable models alike.
template <class Model>
auto named_parameters(Model& m) {
  using Ptr = decltype(&m.codebook);
  std::vector<std::pair<std::string, Ptr>> out;
  auto add_mlp = [&](const std::string& prefix, auto& net) {
    for (std::size_t l = 0; l < net.layers(); ++l) {
      out.emplace_back(prefix + ".w" + std::to_string(l), &net.weights()[l]);
      out.emplace_back(prefix + ".b" + std::to_string(l), &net.biases()[l]);
    }
  };
  add_mlp("encoder", m.encoder);
  add_mlp("policy", m.policy);
  add_mlp("decoder", m.decoder);
  add_mlp("mine", m.mine);
  out.emplace_back("codebook", &m.codebook);
  out.emplace_back("z_star", &m.z_star);
  return out;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const CeilModel& m) {
  const ModelConfig& c = m.cfg;
  os << "ctxil-checkpoint 1\n";
  os << "config " << c.obs_dim << ' ' << c.act_dim << ' ' << c.window << ' ' << c.embed_dim << ' '
     << c.codebook_size << ' ' << c.hidden_layers << ' ' << c.hidden_width << '\n';
  for (const auto& [name, t] : detail::named_parameters(m)) detail::write_block(os, name, *t);
}

inline CeilModel read_checkpoint(std::istream& is, const std::string& source = "<stream>") {
  detail::LineReader r{is, source, 0, {}};
  if (!r.next() || r.line != "ctxil-checkpoint 1") r.fail("expected 'ctxil-checkpoint 1'");
  if (!r.next()) r.fail("missing config line");
  ModelConfig c;
  {
    std::istringstream ss(r.line);
    std::string kw;
    if (!(ss >> kw >> c.obs_dim >> c.act_dim >> c.window >> c.embed_dim >> c.codebook_size >> c.hidden_layers >>
          c.hidden_width) ||
        kw != "config")
      r.fail("malformed config line");
  }
  CeilModel m = CeilModel::init(c, 0);
  for (const auto& [name, t] : detail::named_parameters(m)) {
    if (!r.next()) r.fail("missing block '" + name + "'");
    std::istringstream ss(r.line);
    std::string kw, got;
    std::size_t rank = 0;
    if (!(ss >> kw >> got >> rank) || kw != "block") r.fail("expected 'block " + name + "'");
    if (got != name) r.fail("expected block '" + name + "', found '" + got + "'");
    Shape shape(rank);
    for (std::size_t& d : shape)
      if (!(ss >> d)) r.fail("malformed block shape");
    if (shape != t->shape()) r.fail("block '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                    shape_str(t->shape()));
    const std::size_t cols = t->cols();
    for (std::size_t row = 0; row < t->size() / std::max<std::size_t>(cols, 1); ++row) {
      if (!r.next()) r.fail("unexpected end of file in block '" + name + "'");
      r.line = "v " + r.line;
      const auto v = detail::parse_row(r, 'v', cols);
      std::copy(v.begin(), v.end(), t->data() + row * cols);
    }
  }
  if (r.next()) r.fail("trailing content after the last block");
  return m;
}

inline void save_checkpoint(const std::string& path, const CeilModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(os, m);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

inline CeilModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return read_checkpoint(is, path);
}

// A bare latent vector: `ctxil-z 1 <d>` then one line of values.
inline void save_latent(const std::string& path, const Tensor& z) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os << "ctxil-z 1 " << z.size() << '\n';
  for (std::size_t i = 0; i < z.size(); ++i) os << (i ? " " : "") << format_double(z[i]);
  os << '\n';
}

inline Tensor load_latent(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  detail::LineReader r{is, path, 0, {}};
  std::size_t d = 0;
  std::string magic;
  int version = 0;
  if (!r.next()) r.fail("empty file");
  std::istringstream ss(r.line);
  if (!(ss >> magic >> version >> d) || magic != "ctxil-z" || version != 1 || d == 0)
    r.fail("expected 'ctxil-z 1 <dim>'");
  if (!r.next()) r.fail("missing values");
  r.line = "z " + r.line;
  return Tensor::vector(detail::parse_row(r, 'z', d));
}

}  // namespace ctxil

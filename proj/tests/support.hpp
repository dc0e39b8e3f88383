#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "ctxil/model.hpp"
#include "ctxil/nn.hpp"
#include "ctxil/verify.hpp"

namespace ctxil::support {

// Exhaustive nearest-neighbour scan, written independently of quantize():
// collects every distance first and returns the first minimum.
inline std::size_t brute_force_nearest(const Tensor& codebook, std::span<const double> q) {
  const std::size_t K = codebook.shape()[0], d = codebook.shape()[1];
  std::vector<double> dist(K);
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += (q[j] - codebook.at(k, j)) * (q[j] - codebook.at(k, j));
    dist[k] = acc;
  }
  return static_cast<std::size_t>(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

struct VqOracleResult {
  std::size_t queries = 0;
  std::size_t agree = 0;
  std::size_t ties = 0;
};

// Random queries plus constructed ties (duplicated dictionary rows, and
// queries placed exactly on a code). Ties must resolve to the lowest index.
inline VqOracleResult vq_oracle(std::uint64_t seed, std::size_t n_queries) {
  Rng rng(seed);
  const std::size_t K = 64, d = 4;
  Tensor book(Shape{K, d});
  for (double& v : book.storage()) v = std::round(uniform(rng, -2, 2) * 4) / 4;
  for (std::size_t k = 40; k < K; ++k)  // duplicates of earlier rows
    for (std::size_t j = 0; j < d; ++j) book.at(k, j) = book.at(k - 40, j);
  Tensor q(Shape{n_queries, d});
  for (std::size_t i = 0; i < n_queries; ++i) {
    if (i % 4 == 0) {
      const std::size_t k = uniform_index(rng, K);
      for (std::size_t j = 0; j < d; ++j) q.at(i, j) = book.at(k, j);
    } else {
      for (std::size_t j = 0; j < d; ++j) q.at(i, j) = uniform(rng, -2.5, 2.5);
    }
  }
  const auto idx = quantize(book, q);
  VqOracleResult r;
  r.queries = n_queries;
  for (std::size_t i = 0; i < n_queries; ++i) {
    const auto row = q.row(i);
    const std::size_t expect = brute_force_nearest(book, row);
    r.agree += idx[i] == expect ? 1 : 0;
    // count queries whose minimum is attained more than once
    std::size_t hits = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += (row[j] - book.at(k, j)) * (row[j] - book.at(k, j));
      if (s < best) {
        best = s;
        hits = 1;
      } else if (s == best) {
        ++hits;
      }
    }
    r.ties += hits > 1 ? 1 : 0;
  }
  return r;
}

// Largest |difference| between encoder gradients obtained through the
// straight-through path and those obtained by evaluating the downstream loss
// at the quantized point and back-propagating its z-gradient into z_e.
inline double straight_through_gap(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.codebook_size = 32;
  CeilModel m = CeilModel::init(cfg, seed);
  Rng rng(seed + 1);
  for (double& v : m.codebook.storage()) v = uniform(rng, -1, 1);
  Tensor x(Shape{6, cfg.window * cfg.obs_dim});
  for (double& v : x.storage()) v = uniform(rng, -1, 1);
  Tensor target(Shape{6, cfg.embed_dim});
  for (double& v : target.storage()) v = uniform(rng, -1, 1);
  auto loss_of = [&](Tape& t, Var z) { return sum(mul(tanh(z), t.constant(target))); };

  Tape t1;
  BoundMlp enc1 = bind(t1, m.encoder, true);
  Encoded e = encode(enc1, t1.constant(m.codebook), t1.constant(x));
  t1.backward(loss_of(t1, e.z_q));
  const auto g1 = enc1.grads(t1);

  Tape t2;
  Var zq = t2.leaf(e.z_q.value());
  t2.backward(loss_of(t2, zq));
  const Tensor dz = t2.grad(zq);
  Tape t3;
  BoundMlp enc3 = bind(t3, m.encoder, true);
  t3.backward(sum(mul(enc3.forward(t3.constant(x)), t3.constant(dz))));
  const auto g3 = enc3.grads(t3);

  double worst = 0;
  for (std::size_t p = 0; p < g1.size(); ++p)
    for (std::size_t i = 0; i < g1[p].size(); ++i) worst = std::max(worst, std::abs(g1[p][i] - g3[p][i]));
  return worst;
}

struct MineCalibration {
  double estimate = 0.0;
  double oracle = 0.0;
  int steps = 0;
};

// Trains a DV statistic on samples (x, y) of a standard bivariate Gaussian
// with correlation rho; the marginal batch pairs x with shuffled y. The final
// estimate is the bound on a large fresh sample.
inline MineCalibration mine_calibration(double rho, int steps, std::uint64_t seed, std::size_t batch = 256) {
  Rng rng(seed);
  Mlp f({2, 64, 64, 1}, rng);
  Adam opt(std::as_const(f).parameters());
  auto draw = [&](std::size_t n, Tensor& joint, Tensor& marg) {
    joint = Tensor(Shape{n, 2});
    marg = Tensor(Shape{n, 2});
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = normal(rng), b = normal(rng);
      joint.at(i, 0) = a;
      joint.at(i, 1) = ys[i] = rho * a + std::sqrt(1 - rho * rho) * b;
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n; ++i) {
      marg.at(i, 0) = joint.at(i, 0);
      marg.at(i, 1) = ys[perm[i]];
    }
  };
  Tensor joint, marg;
  for (int s = 0; s < steps; ++s) {
    draw(batch, joint, marg);
    Tape t;
    BoundMlp b = bind(t, f, true);
    t.backward(scale(mine_dv_bound(b, t.constant(joint), t.constant(marg)), -1.0));
    auto params = f.parameters();
    opt.step(params, b.grads(t), 1e-3);
  }
  draw(50000, joint, marg);
  Tape t;
  BoundMlp b = bind(t, f, false);
  MineCalibration r;
  r.estimate = mine_dv_bound(b, t.constant(joint), t.constant(marg)).value().item();
  r.oracle = verify::gaussian_mi_oracle(rho);
  r.steps = steps;
  return r;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace ctxil::support

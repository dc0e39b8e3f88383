#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ctxil/autodiff.hpp"
#include "ctxil/errors.hpp"
#include "ctxil/random.hpp"
#include "ctxil/tensor.hpp"

namespace ctxil {

// Fully connected ReLU network with a linear output layer.
// Weights are stored [in, out], biases [out].
class Mlp {
 public:
  Mlp() = default;

  // dims = {in, hidden..., out}. Glorot-uniform weights, zero biases.
  Mlp(const std::vector<std::size_t>& dims, Rng& rng) {
    require(dims.size() >= 2, "mlp: need at least input and output dims");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t in = dims[l], out = dims[l + 1];
      require(in > 0 && out > 0, "mlp: zero-width layer");
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      Tensor w(Shape{in, out});
      for (double& v : w.storage()) v = uniform(rng, -limit, limit);
      weights_.push_back(std::move(w));
      biases_.emplace_back(Shape{out});
    }
  }

  static Mlp zeros(const std::vector<std::size_t>& dims) {
    Mlp m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      m.weights_.emplace_back(Shape{dims[l], dims[l + 1]});
      m.biases_.emplace_back(Shape{dims[l + 1]});
    }
    return m;
  }

  static Mlp from_layers(std::vector<Tensor> weights, std::vector<Tensor> biases) {
    require(!weights.empty() && weights.size() == biases.size(), "mlp: layer count mismatch");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      require(weights[l].rank() == 2 && biases[l].rank() == 1 && weights[l].shape()[1] == biases[l].shape()[0],
              "mlp: malformed layer " + std::to_string(l));
      if (l > 0)
        require(weights[l].shape()[0] == weights[l - 1].shape()[1],
                "mlp: layer " + std::to_string(l) + " does not chain");
    }
    Mlp m;
    m.weights_ = std::move(weights);
    m.biases_ = std::move(biases);
    return m;
  }

  std::size_t layers() const noexcept { return weights_.size(); }
  std::size_t in_dim() const { return weights_.front().shape()[0]; }
  std::size_t out_dim() const { return weights_.back().shape()[1]; }
  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d{in_dim()};
    for (const Tensor& w : weights_) d.push_back(w.shape()[1]);
    return d;
  }

  std::vector<Tensor>& weights() noexcept { return weights_; }
  std::vector<Tensor>& biases() noexcept { return biases_; }
  const std::vector<Tensor>& weights() const noexcept { return weights_; }
  const std::vector<Tensor>& biases() const noexcept { return biases_; }

  // Interleaved w0, b0, w1, b1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(&weights_[l]);
      p.push_back(&biases_[l]);
    }
    return p;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(&weights_[l]);
      p.push_back(&biases_[l]);
    }
    return p;
  }

  // Tape-free forward for rollouts and evaluation. x: [n, in].
  Tensor forward(const Tensor& x) const {
    require(x.rank() == 2 && x.shape()[1] == in_dim(),
            "mlp_forward: input " + shape_str(x.shape()) + " for in_dim " + std::to_string(in_dim()));
    Tensor h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Tensor& w = weights_[l];
      Tensor y(Shape{h.shape()[0], w.shape()[1]});
      detail::as_mat(y).noalias() = detail::as_mat(h) * detail::as_mat(w);
      const std::size_t m = w.shape()[1];
      const bool hidden = l + 1 < weights_.size();
      for (std::size_t r = 0; r < y.shape()[0]; ++r)
        for (std::size_t k = 0; k < m; ++k) {
          double& v = y[r * m + k];
          v += biases_[l][k];
          if (hidden && v < 0.0) v = 0.0;
        }
      h = std::move(y);
    }
    if (!h.all_finite()) throw NumericError("mlp_forward: non-finite output");
    return h;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// An Mlp's parameters recorded on a tape.
struct BoundMlp {
  std::vector<Var> params;  // interleaved w, b

  Var forward(Var x) const {
    Var h = x;
    const std::size_t n_layers = params.size() / 2;
    for (std::size_t l = 0; l < n_layers; ++l) {
      h = add_row(matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < n_layers) h = relu(h);
    }
    return h;
  }

  std::vector<Tensor> grads(const Tape& tape) const {
    std::vector<Tensor> g;
    g.reserve(params.size());
    for (Var v : params) g.push_back(tape.grad(v));
    return g;
  }
};

inline BoundMlp bind(Tape& tape, const Mlp& mlp, bool trainable) {
  BoundMlp b;
  for (const Tensor* p : mlp.parameters()) b.params.push_back(tape.leaf(*p, trainable));
  return b;
}

inline Var mlp_forward(const BoundMlp& mlp, Var x) { return mlp.forward(x); }

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. One instance per parameter group.
class Adam {
 public:
  Adam() = default;

  explicit Adam(std::span<const Tensor* const> params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros_like(*p));
      v_.push_back(Tensor::zeros_like(*p));
    }
  }

  // Refuses the whole step (nothing is modified) if any gradient is non-finite.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
    require(params.size() == m_.size() && grads.size() == m_.size(), "adam: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(params[i]->shape() == m_[i].shape() && grads[i].shape() == m_[i].shape(),
              "adam: shape mismatch at parameter " + std::to_string(i));
      if (!grads[i].all_finite()) throw NumericError("adam: non-finite gradient, step refused");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      double* p = params[i]->data();
      double* m = m_[i].data();
      double* v = v_[i].data();
      const double* g = grads[i].data();
      for (std::size_t k = 0, n = m_[i].size(); k < n; ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      }
    }
  }

  long steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

// Cosine annealing with warm restarts:
//   lr = eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / T_i)) / 2
// where T_i starts at `period` and is multiplied by `period_mult` at each restart.
struct CosineWarmRestarts {
  double eta_max = 3e-4;
  double eta_min = 1e-5;
  long period = 1000;
  long period_mult = 1;

  double lr(long global_step) const {
    require(global_step >= 0, "scheduled_lr: negative step");
    require(period > 0 && period_mult >= 1, "scheduled_lr: invalid period");
    long t_cur = global_step;
    long t_i = period;
    if (period_mult == 1) {
      t_cur = global_step % period;
    } else {
      while (t_cur >= t_i) {
        t_cur -= t_i;
        t_i *= period_mult;
      }
    }
    const double frac = static_cast<double>(t_cur) / static_cast<double>(t_i);
    return eta_min + (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
  }
};

}  // namespace ctxil

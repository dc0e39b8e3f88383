#pragma once

// Independent oracles used by the test suites: central finite differences,
// exact enumeration of the KL/mutual-information decomposition on small
// discrete models, and the bivariate-Gaussian mutual information.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxil/errors.hpp"
#include "ctxil/random.hpp"
#include "ctxil/tensor.hpp"

namespace ctxil::verify {

// Central differences of loss() w.r.t. every entry of every tensor in params.
// Each entry is restored exactly after probing.
inline std::vector<Tensor> finite_difference_grads(const std::function<double()>& loss,
                                                   std::span<Tensor* const> params, double h = 1e-5) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g = Tensor::zeros_like(*p);
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = (*p)[i];
      (*p)[i] = orig + h;
      const double up = loss();
      (*p)[i] = orig - h;
      const double down = loss();
      (*p)[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const Tensor> a, std::span<const Tensor> b, double floor = 1e-8) {
  require(a.size() == b.size(), "max_relative_error: count mismatch");
  double worst = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    require(a[t].shape() == b[t].shape(), "max_relative_error: shape mismatch");
    for (std::size_t i = 0; i < a[t].size(); ++i) worst = std::max(worst, relative_error(a[t][i], b[t][i], floor));
  }
  return worst;
}

// ||a - b|| / max(||a||, ||b||) over all entries of all tensors: the relative
// error of the whole gradient vector. Unlike the entry-wise ratio it stays
// meaningful when some true entries are exactly zero.
inline double gradient_relative_error(std::span<const Tensor> a, std::span<const Tensor> b) {
  require(a.size() == b.size(), "gradient_relative_error: count mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    require(a[t].shape() == b[t].shape(), "gradient_relative_error: shape mismatch");
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      diff += (a[t][i] - b[t][i]) * (a[t][i] - b[t][i]);
      na += a[t][i] * a[t][i];
      nb += b[t][i] * b[t][i];
    }
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// Tabulated joint over a finite trajectory alphabet and a finite latent alphabet.
struct DiscreteModel {
  std::vector<double> expert;                   // pi_E(tau)
  std::vector<std::vector<double>> policy;      // pi_theta(tau | z), one row per z
  std::vector<double> prior;                    // p(z)

  std::size_t trajectories() const { return expert.size(); }
  std::size_t latents() const { return prior.size(); }

  void validate() const {
    require(!expert.empty() && expert.size() <= 6, "discrete model: trajectory alphabet must have 1..6 symbols");
    require(!prior.empty() && prior.size() <= 4, "discrete model: latent alphabet must have 1..4 symbols");
    require(policy.size() == prior.size(), "discrete model: one policy row per latent");
    auto check_row = [](const std::vector<double>& row, const char* what) {
      double s = 0.0;
      for (double p : row) {
        require(p > 0.0, std::string("discrete model: non-positive probability in ") + what);
        s += p;
      }
      require(std::abs(s - 1.0) <= 1e-12, std::string("discrete model: ") + what + " does not sum to 1");
    };
    check_row(expert, "expert");
    check_row(prior, "prior");
    for (const auto& row : policy) {
      require(row.size() == expert.size(), "discrete model: policy row width mismatch");
      check_row(row, "policy");
    }
  }
};

namespace detail {
inline std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0.0;
  for (double& x : v) {
    x = uniform(rng, 0.05, 1.0);
    s += x;
  }
  for (double& x : v) x /= s;
  return v;
}
}  // namespace detail

inline DiscreteModel random_discrete_model(Rng& rng, std::size_t n_traj, std::size_t n_latent) {
  DiscreteModel m;
  m.expert = detail::random_simplex(rng, n_traj);
  m.prior = detail::random_simplex(rng, n_latent);
  for (std::size_t z = 0; z < n_latent; ++z) m.policy.push_back(detail::random_simplex(rng, n_traj));
  return m;
}

struct IdentityCheck {
  double lhs = 0.0;                // E_z [ KL(pi_theta(.|z) || pi_E) + KL(pi_E || pi_theta(.|z)) ]
  double rhs = 0.0;                // -( I_E - I_theta - D(pi_theta, pi_E) )
  double gap = 0.0;                // |lhs - rhs|
  double mi_expert = 0.0;          // E_{p(z) pi_E(tau)} log p(z|tau)/p(z), posterior taken under pi_theta
  double mi_policy = 0.0;          // I(z; tau_theta)
  double marginal_divergence = 0.0;  // symmetric KL between pi_theta(tau) and pi_E(tau)
};

// The left side sums per-latent KL terms directly from the conditionals. The
// right side goes through the policy marginal and the Bayes posterior over z;
// the two paths share no intermediate quantity.
inline IdentityCheck check_appendix_identity(const DiscreteModel& m) {
  m.validate();
  const std::size_t nt = m.trajectories(), nz = m.latents();

  IdentityCheck r;
  for (std::size_t z = 0; z < nz; ++z) {
    double kl_rev = 0.0, kl_fwd = 0.0;
    for (std::size_t t = 0; t < nt; ++t) {
      const double q = m.policy[z][t], p = m.expert[t];
      kl_rev += q * std::log(q / p);
      kl_fwd += p * std::log(p / q);
    }
    r.lhs += m.prior[z] * (kl_rev + kl_fwd);
  }

  std::vector<double> marginal(nt, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t z = 0; z < nz; ++z) marginal[t] += m.prior[z] * m.policy[z][t];
  auto log_posterior_ratio = [&](std::size_t z, std::size_t t) {
    const double posterior = m.prior[z] * m.policy[z][t] / marginal[t];
    return std::log(posterior / m.prior[z]);
  };
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t t = 0; t < nt; ++t) {
      r.mi_policy += m.prior[z] * m.policy[z][t] * log_posterior_ratio(z, t);
      r.mi_expert += m.prior[z] * m.expert[t] * log_posterior_ratio(z, t);
    }
  for (std::size_t t = 0; t < nt; ++t) {
    r.marginal_divergence += marginal[t] * std::log(marginal[t] / m.expert[t]);
    r.marginal_divergence += m.expert[t] * std::log(m.expert[t] / marginal[t]);
  }
  r.rhs = -(r.mi_expert - r.mi_policy - r.marginal_divergence);
  r.gap = std::abs(r.lhs - r.rhs);
  return r;
}

// Mutual information (nats) of a bivariate Gaussian with correlation rho.
inline double gaussian_mi_oracle(double rho) {
  require(rho > -1.0 && rho < 1.0, "gaussian_mi_oracle: |rho| must be < 1");
  return 0.5 * std::log(1.0 / (1.0 - rho * rho));
}

// Held-out accuracy of a logistic-regression probe. Rows are shuffled with a
// fixed seed; the first half is fitted and the second half scored. With
// `quadratic` the probe also sees all degree-2 monomials of the standardized
// features.
inline double logistic_probe_accuracy(const std::vector<std::vector<double>>& x_in, const std::vector<int>& y_in,
                                      bool quadratic = false, int iterations = 2000, double lr = 0.5) {
  require(x_in.size() == y_in.size(), "probe: row/label count mismatch");
  std::vector<std::size_t> order(x_in.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(12345);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (std::size_t i : order) {
    x.push_back(x_in[i]);
    y.push_back(y_in[i]);
  }
  require(x.size() == y.size() && x.size() >= 4, "probe: need at least four labelled rows");
  const std::size_t f = x.front().size();
  std::vector<double> mu(f, 0.0), sd(f, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < f; ++j) mu[j] += r[j] / static_cast<double>(x.size());
  for (const auto& r : x)
    for (std::size_t j = 0; j < f; ++j) sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]) / static_cast<double>(x.size());
  for (double& s : sd) s = std::sqrt(s) + 1e-12;
  std::vector<std::vector<double>> phi;
  phi.reserve(x.size());
  for (const auto& r : x) {
    std::vector<double> z(f);
    for (std::size_t j = 0; j < f; ++j) z[j] = (r[j] - mu[j]) / sd[j];
    std::vector<double> p{1.0};
    p.insert(p.end(), z.begin(), z.end());
    if (quadratic)
      for (std::size_t i = 0; i < f; ++i)
        for (std::size_t j = i; j < f; ++j) p.push_back(z[i] * z[j]);
    phi.push_back(std::move(p));
  }
  const std::size_t k = phi.front().size();
  std::vector<double> w(k, 0.0), g(k);
  const std::size_t n_fit = phi.size() / 2;
  for (int it = 0; it < iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < n_fit; ++i) {
      double a = 0.0;
      for (std::size_t j = 0; j < k; ++j) a += w[j] * phi[i][j];
      const double err = 1.0 / (1.0 + std::exp(-a)) - y[i];
      for (std::size_t j = 0; j < k; ++j) g[j] += err * phi[i][j] / static_cast<double>(n_fit);
    }
    for (std::size_t j = 0; j < k; ++j) w[j] -= lr * g[j];
  }
  std::size_t correct = 0, scored = 0;
  for (std::size_t i = n_fit; i < phi.size(); ++i) {
    double a = 0.0;
    for (std::size_t j = 0; j < k; ++j) a += w[j] * phi[i][j];
    correct += ((a > 0.0) == (y[i] == 1)) ? 1 : 0;
    ++scored;
  }
  return static_cast<double>(correct) / static_cast<double>(scored);
}

}  // namespace ctxil::verify

#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "ctxil/autodiff.hpp"
#include "ctxil/nn.hpp"
#include "ctxil/random.hpp"
#include "ctxil/verify.hpp"

using namespace ctxil;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(Shape{r, c});
  for (double& v : t.storage()) v = scale * uniform(rng, -1.0, 1.0);
  return t;
}

// Checks analytic gradients of f against central differences for every leaf.
void expect_fd_parity(std::vector<Tensor> leaves, const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                      double tol = 1e-6) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
  Var loss = f(tape, vars);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  std::vector<Tensor*> ptrs;
  for (Tensor& t : leaves) ptrs.push_back(&t);
  auto eval = [&] {
    Tape t2;
    std::vector<Var> v2;
    for (const Tensor& t : leaves) v2.push_back(t2.leaf(t));
    return f(t2, v2).value().item();
  };
  auto numeric = verify::finite_difference_grads(eval, ptrs);
  EXPECT_LE(verify::max_relative_error(analytic, numeric), tol);
}

}  // namespace

TEST(Autodiff, ReluForward) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  EXPECT_EQ(relu(x).value().storage(), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Autodiff, LogSumExpOfZeros) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({0.0, 0.0}));
  EXPECT_NEAR(log_sum_exp(x).value().item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(log_sum_exp(x).value().item(), 0.693147, 1e-6);
}

TEST(Autodiff, LogSumExpIsStableForLargeInputs) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1000.0, 1000.0}));
  EXPECT_NEAR(log_sum_exp(x).value().item(), 1000.0 + std::log(2.0), 1e-9);
}

TEST(Autodiff, SquaredL2OfSelfIsZero) {
  Rng rng(3);
  Tape tape;
  Var x = tape.leaf(random_matrix(rng, 3, 4));
  EXPECT_EQ(squared_l2(x, x).value().item(), 0.0);
}

TEST(Autodiff, SumOfSquaresGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var loss = sum(mul(x, x));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<double>{2.0, 4.0}));
}

TEST(Autodiff, MeanGradientIsUniform) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0, -1.0, 4.0, 1.0, 5.0}));
  tape.backward(mean(x));
  for (double g : tape.grad(x).values()) EXPECT_DOUBLE_EQ(g, 1.0 / 5.0);
}

TEST(Autodiff, FanOutAccumulates) {
  Rng rng(5);
  Tensor xv = random_matrix(rng, 2, 3);
  auto f = [](Var x) { return sum(tanh(x)); };
  auto g = [](Var x) { return sum(square(x)); };

  Tape both;
  Var x = both.leaf(xv);
  both.backward(add(f(x), g(x)));
  Tape only_f;
  Var xf = only_f.leaf(xv);
  only_f.backward(f(xf));
  Tape only_g;
  Var xg = only_g.leaf(xv);
  only_g.backward(g(xg));

  for (std::size_t i = 0; i < xv.size(); ++i)
    EXPECT_NEAR(both.grad(x)[i], only_f.grad(xf)[i] + only_g.grad(xg)[i], 1e-14);
}

TEST(Autodiff, NonScalarLossIsRejected) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(square(x)), ContractError);
}

TEST(Autodiff, ShapeMismatchIsRejected) {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 3}));
  Var b = tape.leaf(Tensor(Shape{2, 2}));
  EXPECT_THROW(add(a, b), ContractError);
  EXPECT_THROW(matmul(a, a), ContractError);
}

TEST(Autodiff, NonFiniteOutputIsANumericError) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1.0}));
  EXPECT_THROW(log(x), NumericError);
  Var big = tape.leaf(Tensor::vector({1000.0}));
  EXPECT_THROW(exp(big), NumericError);
}

TEST(Autodiff, StopGradientBlocks) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var loss = add(sum(square(stop_gradient(x))), sum(x));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<double>{1.0, 1.0}));
}

TEST(Autodiff, StraightThroughRoutesGradient) {
  Tape tape;
  Var code = tape.leaf(Tensor::matrix(1, 2, {5.0, 5.0}));
  Var enc = tape.leaf(Tensor::matrix(1, 2, {1.0, 2.0}));
  Var st = straight_through(code, enc);
  EXPECT_EQ(st.value().storage(), code.value().storage());
  tape.backward(sum(square(st)));
  EXPECT_EQ(tape.grad(enc).storage(), (std::vector<double>{10.0, 10.0}));
  EXPECT_EQ(tape.grad(code).storage(), (std::vector<double>{0.0, 0.0}));
}

TEST(Autodiff, PrimitiveGradientsMatchFiniteDifferences) {
  Rng rng(11);
  // matmul + add_row + tanh + log_sum_exp
  expect_fd_parity({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2), random_matrix(rng, 1, 2).reshaped({2})},
                   [](Tape&, const std::vector<Var>& v) {
                     return log_sum_exp(tanh(add_row(matmul(v[0], v[1]), v[2])));
                   });
  // exp, log, mul, sub, concat, slice, gather, row_sum
  expect_fd_parity({random_matrix(rng, 3, 2), random_matrix(rng, 3, 3)}, [](Tape&, const std::vector<Var>& v) {
    Var c = concat_cols(v[0], v[1]);
    Var s = slice_cols(c, 1, 4);
    Var g = gather_rows(s, {2, 0, 2, 1});
    Var p = log(add_scalar(exp(g), 1.0));
    return mean(row_sum(mul(p, sub(p, scale(g, 0.3)))));
  });
  // minimum + row_squared_l2
  expect_fd_parity({random_matrix(rng, 4, 3), random_matrix(rng, 4, 3)}, [](Tape&, const std::vector<Var>& v) {
    Var a = mean(row_squared_l2(v[0], v[1]));
    Var b = scale(mean(row_squared_l2(v[0], scale(v[1], -1.0))), 0.5);
    return minimum(a, b);
  });
}

TEST(GaussianLogProb, AtTheMeanWithUnitScale) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({0.3}));
  Var ls = tape.leaf(Tensor::vector({0.0}));
  EXPECT_NEAR(gaussian_log_prob(a, a, ls).value().item(), -0.5 * std::log(2 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(gaussian_log_prob(a, a, ls).value().item(), -0.918939, 1e-6);
}

TEST(GaussianLogProb, OneSigmaAway) {
  Tape tape;
  Var mu = tape.leaf(Tensor::vector({0.3}));
  Var a = tape.leaf(Tensor::vector({1.3}));
  Var ls = tape.leaf(Tensor::vector({0.0}));
  EXPECT_NEAR(gaussian_log_prob(a, mu, ls).value().item(), -1.418939, 1e-6);
}

TEST(GaussianLogProb, DensityIntegratesToOneOnAGrid) {
  // Product density over 3 dims; integrate each dim on a fine grid.
  Rng rng(17);
  const std::vector<double> mu{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
  const std::vector<double> ls{uniform(rng, -1, 0.5), uniform(rng, -1, 0.5), uniform(rng, -1, 0.5)};
  const int n = 60;
  std::vector<std::vector<double>> grid(3);
  std::vector<double> step(3);
  for (int d = 0; d < 3; ++d) {
    const double sd = std::exp(ls[d]);
    const double lo = mu[d] - 8 * sd, hi = mu[d] + 8 * sd;
    step[d] = (hi - lo) / n;
    for (int i = 0; i < n; ++i) grid[d].push_back(lo + (i + 0.5) * step[d]);
  }
  std::vector<double> pts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) pts.insert(pts.end(), {grid[0][i], grid[1][j], grid[2][k]});
  const std::size_t rows = pts.size() / 3;
  std::vector<double> mus, lss;
  for (std::size_t r = 0; r < rows; ++r) {
    mus.insert(mus.end(), mu.begin(), mu.end());
    lss.insert(lss.end(), ls.begin(), ls.end());
  }
  Tape tape;
  Var lp = gaussian_log_prob(tape.constant(Tensor::matrix(rows, 3, pts)), tape.constant(Tensor::matrix(rows, 3, mus)),
                             tape.constant(Tensor::matrix(rows, 3, lss)));
  double total = 0.0;
  for (double v : lp.value().values()) total += std::exp(v);
  total *= step[0] * step[1] * step[2];
  EXPECT_NEAR(total, 1.0, 1e-3);
}

TEST(GaussianLogProb, GradientsMatchFiniteDifferences) {
  Rng rng(23);
  Tensor ls = random_matrix(rng, 5, 3, 0.8);
  expect_fd_parity({random_matrix(rng, 5, 3), random_matrix(rng, 5, 3), ls}, [](Tape&, const std::vector<Var>& v) {
    return mean(gaussian_log_prob(v[0], v[1], v[2]));
  });
}

TEST(GaussianLogProb, LogStdIsClamped) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({0.0}));
  Var huge = tape.leaf(Tensor::vector({50.0}));
  Var clamped = tape.leaf(Tensor::vector({kLogStdMax}));
  EXPECT_DOUBLE_EQ(gaussian_log_prob(a, a, huge).value().item(), gaussian_log_prob(a, a, clamped).value().item());
}

// Random MLPs with a Gaussian-likelihood head: every parameter gradient must
// match central differences.
TEST(Autodiff, RandomMlpGradientParity) {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t layers = 1 + uniform_index(rng, 4);
    std::vector<std::size_t> dims{1 + uniform_index(rng, 6)};
    for (std::size_t l = 0; l + 1 < layers; ++l) dims.push_back(1 + uniform_index(rng, 32));
    dims.push_back(2);
    Mlp mlp(dims, rng);
    // Non-zero biases keep pre-activations off the ReLU kink.
    for (Tensor& b : mlp.biases())
      for (double& v : b.storage()) v = uniform(rng, -0.5, 0.5);
    const Tensor x = random_matrix(rng, 3, dims.front());
    const Tensor target = random_matrix(rng, 3, 1);
    auto loss_on = [&](Tape& tape, const Mlp& m) {
      Var out = bind(tape, m, true).forward(tape.constant(x));
      return scale(mean(gaussian_log_prob(tape.constant(target), slice_cols(out, 0, 1), slice_cols(out, 1, 2))), -1.0);
    };
    Tape tape;
    BoundMlp bound = bind(tape, mlp, true);
    Var out = bound.forward(tape.constant(x));
    Var loss = scale(mean(gaussian_log_prob(tape.constant(target), slice_cols(out, 0, 1), slice_cols(out, 1, 2))), -1.0);
    tape.backward(loss);
    const auto analytic = bound.grads(tape);
    auto params = mlp.parameters();
    const auto numeric = verify::finite_difference_grads(
        [&] {
          Tape t;
          return loss_on(t, mlp).value().item();
        },
        params);
    EXPECT_LE(verify::max_relative_error(analytic, numeric), 1e-4) << "trial " << trial;
  }
}

TEST(Autodiff, ValueReferencesSurviveLaterRecords) {
  Tape t;
  Var a = t.leaf(Tensor::vector({1.0, 2.0, 3.0}));
  const Tensor& ref = a.value();
  for (int i = 0; i < 5000; ++i) t.constant(Tensor::scalar(i));
  EXPECT_EQ(ref.storage(), (std::vector<double>{1.0, 2.0, 3.0}));
}

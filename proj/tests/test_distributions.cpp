#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "psam/distributions.hpp"
#include "psam/errors.hpp"

namespace psam {
namespace {

GaussianDiag random_gaussian(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> mu(0.0, 1.0);
  std::uniform_real_distribution<double> lv(-2.0, 2.0);
  GaussianDiag g;
  for (int i = 0; i < dim; ++i) {
    g.mu.push_back(mu(rng));
    g.log_var.push_back(lv(rng));
  }
  return g;
}

// E_q[log q(z) - log p(z)] over reparameterized draws, written directly from the densities.
double kl_monte_carlo(const GaussianDiag& q, const GaussianDiag& p, int draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  double acc = 0.0;
  for (int s = 0; s < draws; ++s) {
    double log_ratio = 0.0;
    for (int i = 0; i < q.dim(); ++i) {
      const double z = q.mu[i] + std::exp(0.5 * q.log_var[i]) * n(rng);
      const double lq = -0.5 * (q.log_var[i] + (z - q.mu[i]) * (z - q.mu[i]) / std::exp(q.log_var[i]));
      const double lp = -0.5 * (p.log_var[i] + (z - p.mu[i]) * (z - p.mu[i]) / std::exp(p.log_var[i]));
      log_ratio += lq - lp;
    }
    acc += log_ratio;
  }
  return acc / draws;
}

TEST(SampleReparam, Examples) {
  EXPECT_EQ(sample_reparam({{3.0}, {0.0}}, std::vector<double>{0.0}), std::vector<double>{3.0});
  EXPECT_EQ(sample_reparam({{0.0, 0.0}, {0.0, 0.0}}, std::vector<double>{1.5, -2.0}), (std::vector<double>{1.5, -2.0}));
  const auto z = sample_reparam({{1.0}, {std::log(4.0)}}, std::vector<double>{0.5});
  EXPECT_NEAR(z[0], 2.0, 1e-15);
}

TEST(SampleReparam, RejectsLengthMismatch) {
  EXPECT_THROW(sample_reparam({{0.0, 0.0}, {0.0, 0.0}}, std::vector<double>{1.0}), DimensionError);
}

TEST(SampleReparam, PureFunction) {
  const GaussianDiag q{{0.3, -1.2}, {0.1, -0.4}};
  const std::vector<double> noise{0.7, -0.2};
  EXPECT_EQ(sample_reparam(q, noise), sample_reparam(q, noise));
}

TEST(KlDiag, Examples) {
  EXPECT_EQ(kl_diag({{1.0}, {0.0}}, {{1.0}, {0.0}}), 0.0);
  EXPECT_DOUBLE_EQ(kl_diag({{1.0}, {0.0}}, {{0.0}, {0.0}}), 0.5);
  // 0.5 * (4 - 1 - ln 4)
  EXPECT_NEAR(kl_diag({{0.0}, {std::log(4.0)}}, {{0.0}, {0.0}}), 0.5 * (3.0 - std::log(4.0)), 1e-15);
  EXPECT_NEAR(kl_diag({{0.0}, {std::log(4.0)}}, {{0.0}, {0.0}}), 0.806853, 1e-6);
}

TEST(KlDiag, Errors) {
  EXPECT_THROW(kl_diag({{0.0}, {0.0}}, {{0.0, 0.0}, {0.0, 0.0}}), DimensionError);
  EXPECT_THROW(kl_diag({{NAN}, {0.0}}, {{0.0}, {0.0}}), NumericError);
  EXPECT_THROW(kl_diag({{0.0}, {INFINITY}}, {{0.0}, {0.0}}), NumericError);
}

TEST(KlDiag, SelfDivergenceIsExactlyZero) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const GaussianDiag q = random_gaussian(rng, 1 + trial % 8);
    EXPECT_EQ(kl_diag(q, q), 0.0);
  }
}

TEST(KlDiag, NonNegativeOverRandomPairs) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const int dim = 1 + trial % 8;
    EXPECT_GE(kl_diag(random_gaussian(rng, dim), random_gaussian(rng, dim)), -1e-9);
  }
}

TEST(KlDiag, AgreesWithMonteCarlo) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const int dim = 1 + trial;
    const GaussianDiag q = random_gaussian(rng, dim), p = random_gaussian(rng, dim);
    const double exact = kl_diag(q, p);
    const double mc = kl_monte_carlo(q, p, 200000, 100 + trial);
    EXPECT_LT(std::abs(exact - mc) / std::max(exact, 0.1), 2e-2) << "dim " << dim;
  }
}

TEST(KlDiag, TapeVersionMatchesAndDifferentiates) {
  std::mt19937_64 rng(14);
  const GaussianDiag q = random_gaussian(rng, 3), p = random_gaussian(rng, 3);
  ad::Tape tape;
  auto param = [&](const std::vector<double>& v) { return tape.input(Tensor({static_cast<int>(v.size())}, v), true); };
  ad::Var mq = param(q.mu), lq = param(q.log_var), mp = param(p.mu), lp = param(p.log_var);
  ad::Var kl = kl_diag(mq, lq, mp, lp);
  EXPECT_NEAR(kl.value()[0], kl_diag(q, p), 1e-14);
  tape.backward(kl);
  // d/dmu_q = (mu_q - mu_p) / var_p ; d/dlog_var_q = 0.5 (var_q / var_p - 1)
  for (int i = 0; i < 3; ++i) {
    const double vp = std::exp(p.log_var[i]), vq = std::exp(q.log_var[i]);
    EXPECT_NEAR(tape.grad(mq)[i], (q.mu[i] - p.mu[i]) / vp, 1e-12);
    EXPECT_NEAR(tape.grad(lq)[i], 0.5 * (vq / vp - 1.0), 1e-12);
    EXPECT_NEAR(tape.grad(mp)[i], -(q.mu[i] - p.mu[i]) / vp, 1e-12);
    EXPECT_NEAR(tape.grad(lp)[i], 0.5 * (1.0 - (vq + (q.mu[i] - p.mu[i]) * (q.mu[i] - p.mu[i])) / vp), 1e-12);
  }
}

TEST(SampleReparam, TapeGradients) {
  ad::Tape tape;
  ad::Var mu = tape.input(Tensor({2}, {0.5, -0.5}), true);
  ad::Var lv = tape.input(Tensor({2}, {std::log(4.0), 0.0}), true);
  const std::vector<double> noise{1.0, -2.0};
  ad::Var z = sample_reparam(mu, lv, noise);
  EXPECT_DOUBLE_EQ(z.value()[0], 2.5);
  EXPECT_DOUBLE_EQ(z.value()[1], -2.5);
  tape.backward(ad::sum(z));
  EXPECT_DOUBLE_EQ(tape.grad(mu)[0], 1.0);
  // dz/dlog_var = 0.5 * sigma * noise
  EXPECT_DOUBLE_EQ(tape.grad(lv)[0], 0.5 * 2.0 * 1.0);
  EXPECT_DOUBLE_EQ(tape.grad(lv)[1], 0.5 * 1.0 * -2.0);
}

TEST(GaussianDiag, Validate) {
  EXPECT_NO_THROW((GaussianDiag{{0.0}, {0.0}}.validate()));
  EXPECT_THROW((GaussianDiag{{}, {}}.validate()), DimensionError);
  EXPECT_THROW((GaussianDiag{{0.0}, {0.0, 1.0}}.validate()), DimensionError);
  EXPECT_THROW((GaussianDiag{{NAN}, {0.0}}.validate()), NumericError);
}

}  // namespace
}  // namespace psam

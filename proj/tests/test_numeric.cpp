#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "riim/numeric.hpp"
#include "riim/rng.hpp"

namespace {

// Composite Simpson on [-12, 12]; the integrands here are smooth and the
// normal density is negligible outside that range.
template <typename F>
double simpson_normal_expectation(F&& g, double mu, double sigma, int panels = 20000) {
  const double a = -12.0, b = 12.0, h = (b - a) / panels;
  auto f = [&](double t) { return g(mu + sigma * t) * riim::normal_pdf(t); };
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

TEST(NormalQuantile, ReferenceValues) {
  // Reference quantiles to 16 digits (tabulated values of the probit).
  EXPECT_NEAR(riim::normal_quantile(0.975), 1.959963984540054, 1e-13);
  EXPECT_NEAR(riim::normal_quantile(0.95), 1.6448536269514722, 1e-13);
  EXPECT_NEAR(riim::normal_quantile(0.995), 2.5758293035489004, 1e-13);
  EXPECT_NEAR(riim::normal_quantile(0.5), 0.0, 1e-15);
  EXPECT_NEAR(riim::normal_quantile(1e-10), -6.361340902404056, 1e-10);
}

TEST(NormalQuantile, InvertsCdfAcrossRange) {
  for (double p : {1e-300, 1e-20, 1e-8, 0.001, 0.02425, 0.1, 0.3, 0.5, 0.7, 0.97575, 0.999, 1 - 1e-12}) {
    const double x = riim::normal_quantile(p);
    const double back = p < 0.5 ? riim::normal_cdf(x) : 1.0 - riim::normal_cdf(-x);
    EXPECT_NEAR(back / p, 1.0, 1e-12) << "p=" << p;
  }
}

TEST(NormalQuantile, Symmetric) {
  for (double p : {0.01, 0.2, 0.4})
    EXPECT_NEAR(riim::normal_quantile(p), -riim::normal_quantile(1.0 - p), 1e-14);
}

TEST(Expit, StableAtExtremes) {
  EXPECT_DOUBLE_EQ(riim::expit(0.0), 0.5);
  EXPECT_GT(riim::expit(-800.0), -1.0);
  EXPECT_EQ(riim::expit(-800.0), 0.0);
  EXPECT_EQ(riim::expit(800.0), 1.0);
  EXPECT_NEAR(riim::logit(riim::expit(3.7)), 3.7, 1e-12);
  EXPECT_NEAR(riim::expit(-40.0), std::exp(-40.0), 1e-30);
}

TEST(PairwiseSum, MatchesNaiveOnSmallInput) {
  std::vector<double> v{1.0, 2.0, 3.5, -0.5, 10.0};
  EXPECT_DOUBLE_EQ(riim::pairwise_sum(v), 16.0);
  EXPECT_EQ(riim::pairwise_sum(std::vector<double>{}), 0.0);
}

TEST(PairwiseSum, AccurateOnLongInput) {
  std::vector<double> v(1 << 20, 0.1);
  EXPECT_NEAR(riim::pairwise_sum(v), 0.1 * (1 << 20), 1e-8);
}

TEST(GaussHermite, TwoPointRule) {
  const auto r = riim::gauss_hermite(2);
  EXPECT_NEAR(r.nodes[0], 1.0 / std::numbers::sqrt2, 1e-14);
  EXPECT_NEAR(r.nodes[1], -1.0 / std::numbers::sqrt2, 1e-14);
  EXPECT_NEAR(r.weights[0], std::sqrt(std::numbers::pi) / 2.0, 1e-14);
}

TEST(GaussHermite, NormalMomentsExact) {
  const auto r = riim::gauss_hermite(64);
  EXPECT_NEAR(riim::normal_expectation(r, [](double) { return 1.0; }), 1.0, 1e-12);
  EXPECT_NEAR(riim::normal_expectation(r, [](double t) { return t * t; }), 1.0, 1e-12);
  EXPECT_NEAR(riim::normal_expectation(r, [](double t) { return t * t * t * t; }), 3.0, 1e-11);
  EXPECT_NEAR(riim::normal_expectation(r, [](double t) { return t; }, 2.0, 3.0), 2.0, 1e-12);
}

TEST(GaussHermite, LogisticNormalAgreesWithSimpson) {
  const auto r = riim::gauss_hermite(64);
  for (double mu : {-6.0, -2.5, 0.0, 1.3, 4.0}) {
    const double gh = riim::normal_expectation(r, [](double t) { return riim::expit(t); }, mu);
    const double simpson = simpson_normal_expectation([](double t) { return riim::expit(t); }, mu, 1.0);
    EXPECT_NEAR(gh, simpson, 1e-10) << "mu=" << mu;
  }
}

TEST(GaussHermite, LogisticNormalAgreesWithMonteCarlo) {
  // 10^7 draws from the library stream; tolerance 1e-4 is about 1.1 standard errors
  // for the worst case, so the check uses five standard errors instead.
  const auto r = riim::gauss_hermite(64);
  const double mu = -1.0;
  const double gh = riim::normal_expectation(r, [](double t) { return riim::expit(t); }, mu);
  riim::CounterStream rng(riim::stream_key(2024, {1}));
  const int n = 10'000'000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = riim::expit(mu + rng.normal());
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - gh), std::max(1e-4, 5 * se));
}

TEST(CounterStream, DeterministicAndKeyed) {
  riim::CounterStream a(riim::stream_key(7, {1, 2})), b(riim::stream_key(7, {1, 2})),
      c(riim::stream_key(7, {2, 1}));
  for (int i = 0; i < 100; ++i) {
    const auto va = a(), vb = b(), vc = c();
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
  }
}

TEST(CounterStream, UniformStrictlyInsideUnitInterval) {
  riim::CounterStream s(3);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_GT(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(CounterStream, LaplaceAndNormalMoments) {
  riim::CounterStream s(11);
  const int n = 400000;
  const double scale = std::numbers::sqrt2 / 2.0;  // variance 2 b^2 = 1
  double ls = 0, ls2 = 0, ns = 0, ns2 = 0;
  for (int i = 0; i < n; ++i) {
    const double l = s.laplace(0.0, scale), z = s.normal();
    ls += l;
    ls2 += l * l;
    ns += z;
    ns2 += z * z;
  }
  EXPECT_NEAR(ls / n, 0.0, 0.01);
  EXPECT_NEAR(ls2 / n, 1.0, 0.02);
  EXPECT_NEAR(ns / n, 0.0, 0.01);
  EXPECT_NEAR(ns2 / n, 1.0, 0.01);
}

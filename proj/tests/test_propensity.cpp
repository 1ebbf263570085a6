#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "riim/propensity.hpp"

namespace {

struct Sample {
  Eigen::MatrixXd x;
  std::vector<int> z;
};

Sample logistic_sample(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Sample s{Eigen::MatrixXd(n, 2), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    s.x(i, 0) = nd(rng);
    s.x(i, 1) = nd(rng);
    s.z[i] = u(rng) < riim::expit(-0.3 + 0.8 * s.x(i, 0) - 0.5 * s.x(i, 1)) ? 1 : 0;
  }
  return s;
}

// Gradient of the log-likelihood by central differences.
Eigen::VectorXd numeric_score(const Eigen::MatrixXd& x, const std::vector<int>& z, const Eigen::VectorXd& b) {
  auto loglik = [&](const Eigen::VectorXd& beta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double eta = beta(0) + x.row(i).dot(beta.tail(beta.size() - 1));
      s += z[i] * eta - std::log1p(std::exp(eta));
    }
    return s;
  };
  Eigen::VectorXd g(b.size());
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < b.size(); ++k) {
    Eigen::VectorXd up = b, dn = b;
    up(k) += h;
    dn(k) -= h;
    g(k) = (loglik(up) - loglik(dn)) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(Logistic, BalancedIndependentLabelsGiveMean) {
  // Z alternates within each covariate level, so the MLE has zero slopes.
  Eigen::MatrixXd x(40, 1);
  std::vector<int> z(40);
  for (int i = 0; i < 40; ++i) {
    x(i, 0) = (i / 2) % 5;
    z[i] = i % 2;
  }
  const auto fit = riim::fit_logistic(x, z);
  for (double e : fit.fitted) EXPECT_NEAR(e, 0.5, 1e-6);
  EXPECT_EQ(fit.ridge, 0.0);
}

TEST(Logistic, ScoreVanishesAtConvergence) {
  const auto s = logistic_sample(500, 1);
  const auto fit = riim::fit_logistic(s.x, s.z);
  EXPECT_EQ(fit.ridge, 0.0);
  EXPECT_LT(numeric_score(s.x, s.z, fit.coef).lpNorm<Eigen::Infinity>(), 1e-6);
  EXPECT_NEAR(fit.coef(1), 0.8, 0.3);
}

TEST(Logistic, DevianceDecreasesMonotonically) {
  const auto s = logistic_sample(300, 2);
  const auto fit = riim::fit_logistic(s.x, s.z);
  ASSERT_GE(fit.objective_trace.size(), 2u);
  for (std::size_t k = 1; k < fit.objective_trace.size(); ++k)
    EXPECT_LE(fit.objective_trace[k], fit.objective_trace[k - 1] + 1e-12);
}

TEST(Logistic, SeparationFallsBackToRidge) {
  Eigen::MatrixXd x(20, 1);
  std::vector<int> z(20);
  for (int i = 0; i < 20; ++i) {
    x(i, 0) = i;
    z[i] = i >= 10;
  }
  const auto fit = riim::fit_logistic(x, z);
  EXPECT_GT(fit.ridge, 0.0);
  for (double e : fit.fitted) {
    EXPECT_TRUE(std::isfinite(e));
    EXPECT_GT(e, 0.0);
    EXPECT_LT(e, 1.0);
  }
  EXPECT_LT(fit.fitted[0], 0.5);
  EXPECT_GT(fit.fitted[19], 0.5);
}

TEST(Logistic, InputChecks) {
  Eigen::MatrixXd x(2, 2);
  x.setRandom();
  EXPECT_THROW(riim::fit_logistic(x, std::vector<int>{0, 1}), riim::InputError);
  Eigen::MatrixXd y(3, 1);
  y.setRandom();
  EXPECT_THROW(riim::fit_logistic(y, std::vector<int>{1, 1, 1}), riim::InputError);
}

TEST(Gbm, LearnsThresholdRule) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  auto draw = [&](std::size_t n) {
    Sample s{Eigen::MatrixXd(n, 3), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) s.x(i, k) = nd(rng);
      s.z[i] = s.x(i, 0) > 0 ? 1 : 0;
    }
    return s;
  };
  const auto train = draw(1000), test = draw(1000);
  const auto model = riim::fit_gbm(train.x, train.z);
  const auto e = model.predict(test.x);
  int wrong = 0;
  for (std::size_t i = 0; i < e.size(); ++i) wrong += (e[i] > 0.5) != (test.z[i] == 1);
  EXPECT_LT(wrong / 1000.0, 0.1);
}

TEST(Gbm, TrainingLossNonIncreasing) {
  const auto s = logistic_sample(400, 5);
  const auto model = riim::fit_gbm(s.x, s.z);
  ASSERT_EQ(model.train_loss.size(), 101u);
  for (std::size_t k = 1; k < model.train_loss.size(); ++k)
    EXPECT_LE(model.train_loss[k], model.train_loss[k - 1] + 1e-12);
  for (double e : model.predict(s.x)) {
    EXPECT_GT(e, 0.0);
    EXPECT_LT(e, 1.0);
  }
}

TEST(Gbm, RejectsBadOptionsAndLabels) {
  const auto s = logistic_sample(50, 6);
  riim::GbmOptions opt;
  opt.rounds = 0;
  EXPECT_THROW(riim::fit_gbm(s.x, s.z, opt), riim::InputError);
  opt.rounds = 10;
  opt.max_depth = 0;
  EXPECT_THROW(riim::fit_gbm(s.x, s.z, opt), riim::InputError);
  EXPECT_THROW(riim::fit_gbm(s.x, std::vector<int>(50, 0)), riim::InputError);
}

TEST(Gbm, InvariantToRowPermutation) {
  const auto s = logistic_sample(300, 7);
  std::vector<Eigen::Index> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(8));
  Eigen::MatrixXd xp(300, 2);
  std::vector<int> zp(300);
  for (Eigen::Index i = 0; i < 300; ++i) {
    xp.row(i) = s.x.row(perm[i]);
    zp[i] = s.z[perm[i]];
  }
  const auto a = riim::fit_gbm(s.x, s.z).predict(s.x);
  const auto b = riim::fit_gbm(xp, zp).predict(s.x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Gbm, DeterministicTieBreakOnDuplicateFeatures) {
  // Two identical columns: every split must use the first one.
  const auto s = logistic_sample(200, 9);
  Eigen::MatrixXd x(200, 2);
  x.col(0) = s.x.col(0);
  x.col(1) = s.x.col(0);
  const auto model = riim::fit_gbm(x, s.z);
  for (const auto& tree : model.trees)
    for (const auto& node : tree.nodes) EXPECT_NE(node.feature, 1);
}

TEST(ClampScores, Rule) {
  const auto c = riim::clamp_scores(std::vector<double>{0.05, 0.5, 0.95, 0.1, 0.9}, 0.1);
  EXPECT_EQ(c, (std::vector<double>{0.1, 0.5, 0.9, 0.1, 0.9}));
  EXPECT_EQ(riim::clamp_scores(c, 0.1), c);
  EXPECT_THROW(riim::clamp_scores(c, 0.5), std::invalid_argument);
}

TEST(EstimatePropensity, ExternalReadsColumn) {
  riim::UnitTable t;
  t.covariate_names = {"x"};
  for (int i = 0; i < 4; ++i) {
    riim::UnitRecord r;
    r.z = i % 2;
    r.x = {static_cast<double>(i)};
    r.e_hat = 0.2 + 0.1 * i;
    t.units.push_back(r);
  }
  riim::PropensityModelSpec spec;
  spec.learner = riim::Learner::external;
  const auto e = riim::estimate_propensity(t, spec);
  EXPECT_DOUBLE_EQ(e[3], 0.5);
  t.units[2].e_hat.reset();
  EXPECT_THROW(riim::estimate_propensity(t, spec), riim::InputError);
  EXPECT_EQ(riim::parse_learner("gbm"), riim::Learner::gbm);
  EXPECT_THROW(riim::parse_learner("xgboost"), riim::InputError);
}

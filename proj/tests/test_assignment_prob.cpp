#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "riim/assignment_prob.hpp"
#include "toy_designs.hpp"

namespace {

std::vector<double> reversed_complement(const std::vector<double>& v) {
  std::vector<double> out;
  for (auto it = v.rbegin(); it != v.rend(); ++it) out.push_back(1.0 - *it);
  return out;
}

riim::MatchedDataset with_scores(const std::vector<std::vector<std::pair<int, double>>>& sets,
                                 const std::vector<double>& e) {
  auto t = toy::dataset(sets).as_table();
  for (std::size_t u = 0; u < t.units.size(); ++u) t.units[u].e_hat = e[u];
  return riim::MatchedDataset::from_table(std::move(t));
}

}  // namespace

TEST(ProbsOneTreated, Examples) {
  EXPECT_EQ(riim::probs_one_treated(std::vector<double>{0.5, 0.5}), (std::vector<double>{0.5, 0.5}));
  const auto p = riim::probs_one_treated(std::vector<double>{0.3, 0.6});
  EXPECT_NEAR(p[0], 0.12 / 0.54, 1e-15);
  EXPECT_NEAR(p[1], 0.42 / 0.54, 1e-15);
  for (double c : {0.01, 0.37, 0.99}) {
    const auto q = riim::probs_one_treated(std::vector<double>{c, c, c});
    for (double v : q) EXPECT_EQ(v, 1.0 / 3.0);
  }
}

TEST(ProbsOneControl, Examples) {
  for (double v : riim::probs_one_control(std::vector<double>{0.5, 0.5, 0.5})) EXPECT_EQ(v, 2.0 / 3.0);
  const auto p = riim::probs_one_control(std::vector<double>{0.3, 0.6});
  EXPECT_NEAR(p[0], 0.12 / 0.54, 1e-15);
  EXPECT_NEAR(p[1], 0.42 / 0.54, 1e-15);
  const auto q = riim::probs_one_control(std::vector<double>{0.9, 0.9, 0.1});
  EXPECT_NEAR(q[0] + q[1] + q[2], 2.0, 1e-15);
  // Oracle: assignments {1,1,0}: .9*.9*.9, {1,0,1}: .9*.1*.1, {0,1,1}: .1*.9*.1.
  const double a = 0.729, b = 0.009, c = 0.009, total = a + b + c;
  EXPECT_NEAR(q[0], (a + b) / total, 1e-15);
  EXPECT_NEAR(q[2], (b + c) / total, 1e-15);
}

TEST(ProbsOneTreated, RejectsBoundaryPropensity) {
  EXPECT_THROW(riim::probs_one_treated(std::vector<double>{0.0, 0.5}), std::domain_error);
  EXPECT_THROW(riim::probs_one_control(std::vector<double>{0.5, 1.0}), std::domain_error);
}

TEST(ProbsOneTreated, ExtremeInputsStayFinite) {
  std::vector<double> e(8, 1e-300);
  e[3] = 0.5;
  const auto p = riim::probs_one_treated(e);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
}

TEST(ProbsDuality, PairsAgreeAndComplementsMirror) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 200; ++rep) {
    const std::vector<double> pair{u(rng), u(rng)};
    const auto a = riim::probs_one_treated(pair), b = riim::probs_one_control(pair);
    EXPECT_NEAR(a[0], b[0], 1e-12);
    EXPECT_NEAR(a[1], b[1], 1e-12);
    // One control among n: the control's probability of being the control,
    // 1 - p_j, is the one-treated formula applied to 1 - e.
    std::vector<double> e(2 + rep % 6);
    for (double& v : e) v = u(rng);
    std::vector<double> flipped;
    for (double v : e) flipped.push_back(1.0 - v);
    const auto c = riim::probs_one_control(e), t = riim::probs_one_treated(flipped);
    for (std::size_t j = 0; j < e.size(); ++j) EXPECT_NEAR(1.0 - c[j], t[j], 1e-12);
  }
  EXPECT_EQ(reversed_complement({0.25}), (std::vector<double>{0.75}));
}

TEST(Enumeration, Examples) {
  const auto d = riim::enumerate_assignment_dist(std::vector<double>{0.3, 0.6}, 1);
  ASSERT_EQ(d.assignments.size(), 2u);
  EXPECT_NEAR(d.probs[0], 0.12 / 0.54, 1e-15);  // {1,0}
  EXPECT_NEAR(d.probs[1], 0.42 / 0.54, 1e-15);
  const auto uniform = riim::enumerate_assignment_dist(std::vector<double>(5, 0.4), 2);
  EXPECT_EQ(uniform.assignments.size(), 10u);
  for (double p : uniform.probs) EXPECT_NEAR(p, 0.1, 1e-15);
  const auto m = uniform.marginals();
  EXPECT_NEAR(std::accumulate(m.begin(), m.end(), 0.0), 2.0, 1e-14);
  EXPECT_THROW(riim::enumerate_assignment_dist(std::vector<double>(21, 0.5), 1), std::length_error);
}

TEST(Enumeration, FormulasMatchOracleMarginals) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> e(2 + rep % 7);
    for (double& v : e) v = u(rng);
    const auto one_t = riim::probs_one_treated(e);
    const auto oracle_t = riim::enumerate_assignment_dist(e, 1).marginals();
    const auto one_c = riim::probs_one_control(e);
    const auto oracle_c = riim::enumerate_assignment_dist(e, e.size() - 1).marginals();
    for (std::size_t j = 0; j < e.size(); ++j) {
      EXPECT_NEAR(one_t[j], oracle_t[j], 1e-12);
      EXPECT_NEAR(one_c[j], oracle_c[j], 1e-12);
    }
  }
}

TEST(PostMatchProbs, DispatchPerSet) {
  const auto ds = with_scores({{{1, 0}, {0, 0}}, {{1, 0}, {0, 0}, {0, 0}}}, {0.3, 0.6, 0.2, 0.2, 0.2});
  const std::vector<double> e{0.3, 0.6, 0.2, 0.2, 0.2};
  const auto p = riim::post_match_probs(ds, e);
  EXPECT_EQ(p.source, riim::ProbSource::plugin);
  EXPECT_NEAR(p.p[0], 0.22222222222222, 1e-12);
  EXPECT_NEAR(p.p[1], 0.77777777777778, 1e-12);
  for (int j = 2; j < 5; ++j) EXPECT_EQ(p.p[j], 1.0 / 3.0);
  EXPECT_NO_THROW(riim::check_probs(ds, p));
}

TEST(PostMatchProbs, EqualScoresGiveUniform) {
  const auto ds = toy::dataset({{{0, 0}, {1, 0}, {1, 0}}, {{1, 0}, {0, 0}}});
  const auto p = riim::post_match_probs(ds, std::vector<double>{0.7, 0.7, 0.7, 0.1, 0.1});
  const auto uni = riim::uniform_probs(ds);
  EXPECT_EQ(p.p, uni.p);
  EXPECT_EQ(uni.p[0], 2.0 / 3.0);
}

TEST(PostMatchProbs, UnsupportedDesign) {
  const auto ds = toy::dataset({{{1, 0}, {1, 0}, {0, 0}, {0, 0}, {0, 0}}});
  EXPECT_THROW(riim::post_match_probs(ds, std::vector<double>(5, 0.5)), riim::DesignError);
}

TEST(PostMatchProbs, SumToTreatedCount) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const auto d = toy::random_design(rng, 6, 8);
    std::vector<std::vector<int>> z;
    for (const auto& s : d.sets) {
      std::vector<int> zi(s.units.size(), s.m == 1 ? 0 : 1);
      zi[0] = s.m == 1 ? 1 : 0;
      z.push_back(zi);
    }
    const auto ds = toy::observe(d, z);
    const auto p = toy::true_probs(ds);
    for (const auto& s : ds.sets()) {
      double sum = 0.0;
      for (std::size_t u : s.units) sum += p.p[u];
      EXPECT_NEAR(sum, static_cast<double>(s.treated), 1e-10);
    }
  }
}

TEST(Regularize, Rule) {
  const auto pair = toy::dataset({{{1, 0}, {0, 0}}});
  auto p = riim::AssignmentProbs{{0.05, 0.95}, riim::ProbSource::plugin};
  auto r = riim::regularize_probs(p, pair, 0.1);
  EXPECT_EQ(r.p, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(r.source, riim::ProbSource::regularized);
  p.p = {0.3, 0.7};
  EXPECT_EQ(riim::regularize_probs(p, pair, 0.1).p, p.p);
  const auto triple = toy::dataset({{{1, 0}, {0, 0}, {0, 0}}});
  const auto t = riim::regularize_probs({{0.08, 0.46, 0.46}, riim::ProbSource::plugin}, triple, 0.1);
  for (double v : t.p) EXPECT_EQ(v, 1.0 / 3.0);
  // Boundary values count as extreme.
  p.p = {0.1, 0.9};
  EXPECT_EQ(riim::regularize_probs(p, pair, 0.1).p, (std::vector<double>{0.5, 0.5}));
}

TEST(Regularize, Idempotent) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 100; ++rep) {
    const auto d = toy::random_design(rng, 5, 6);
    std::vector<std::vector<int>> z;
    for (const auto& s : d.sets) {
      std::vector<int> zi(s.units.size(), s.m == 1 ? 0 : 1);
      zi.back() = s.m == 1 ? 1 : 0;
      z.push_back(zi);
    }
    const auto ds = toy::observe(d, z);
    const auto once = riim::regularize_probs(toy::true_probs(ds), ds, 0.1);
    const auto twice = riim::regularize_probs(once, ds, 0.1);
    EXPECT_EQ(once.p, twice.p);
  }
}

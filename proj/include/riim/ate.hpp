#pragma once

// Randomization-based inference for the sample average treatment effect:
// difference in means, inverse post-matching probability weighting (IPPW),
// finite-population weighting without matching, the Q-based conservative
// variance estimator, and normal-theory intervals.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "riim/assignment_prob.hpp"
#include "riim/errors.hpp"
#include "riim/matched_design.hpp"
#include "riim/numeric.hpp"

namespace riim {

struct SetEstimates {
  std::vector<double> per_set;  // one entry per matched set
  double aggregate = 0.0;       // sum_i (n_i / N) * per_set[i]
};

enum class QKind { unit, intercept_weights, intercept_covmeans };

inline std::string_view to_string(QKind k) {
  switch (k) {
    case QKind::unit: return "unit";
    case QKind::intercept_weights: return "weights";
    case QKind::intercept_covmeans: return "covmeans";
  }
  return "unknown";
}

inline QKind parse_q(std::string_view s) {
  if (s == "unit") return QKind::unit;
  if (s == "weights") return QKind::intercept_weights;
  if (s == "covmeans") return QKind::intercept_covmeans;
  throw InputError("unknown Q specification '" + std::string(s) + "'");
}

struct DesignMatrixSpec {
  QKind kind = QKind::unit;
  std::vector<std::size_t> covariates;  // covmeans only; empty = all covariates
};

struct AteResult {
  double estimate = 0.0;
  double variance = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  double alpha = 0.05;
  std::string estimator;    // diff_in_means | ippw | ippw_oracle | fpw
  std::string q_spec;       // unit | weights | covmeans | none
  std::string prob_source;  // uniform | plugin | oracle | regularized | none

  double length() const { return ci_upper - ci_lower; }
  bool covers(double value) const { return ci_lower <= value && value <= ci_upper; }
};

namespace detail {

inline double weighted_aggregate(const MatchedDataset& ds, std::span<const double> per_set) {
  std::vector<double> terms(per_set.size());
  for (std::size_t i = 0; i < per_set.size(); ++i)
    terms[i] = static_cast<double>(ds.sets()[i].size()) / static_cast<double>(ds.N()) * per_set[i];
  return pairwise_sum(terms);
}

}  // namespace detail

// lambda_i = mean of treated outcomes - mean of control outcomes within set i.
inline SetEstimates diff_in_means(const MatchedDataset& ds) {
  require_valid_design(ds);
  SetEstimates out;
  out.per_set.reserve(ds.I());
  for (const auto& s : ds.sets()) {
    double st = 0.0, sc = 0.0;
    for (std::size_t u : s.units) (ds.units()[u].z ? st : sc) += ds.units()[u].y;
    out.per_set.push_back(st / static_cast<double>(s.treated) - sc / static_cast<double>(s.controls()));
  }
  out.aggregate = detail::weighted_aggregate(ds, out.per_set);
  return out;
}

// lambda_i = (1/n_i) sum_j [Z Y / p - (1 - Z) Y / (1 - p)].
inline SetEstimates ippw_estimate(const MatchedDataset& ds, const AssignmentProbs& probs) {
  require_valid_design(ds);
  if (probs.p.size() != ds.N()) throw DesignError("ippw_estimate: probability vector length != N");
  SetEstimates out;
  out.per_set.reserve(ds.I());
  for (const auto& s : ds.sets()) {
    double acc = 0.0;
    for (std::size_t u : s.units) {
      const double p = probs.p[u];
      if (!(p > 0.0 && p < 1.0)) throw DesignError("ippw_estimate: probability outside (0,1)");
      const auto& r = ds.units()[u];
      acc += r.z ? r.y / p : -r.y / (1.0 - p);
    }
    out.per_set.push_back(acc / static_cast<double>(s.size()));
  }
  out.aggregate = detail::weighted_aggregate(ds, out.per_set);
  return out;
}

// I x L matrix Q. Throws NumericalError naming the offending columns when Q
// is not of full column rank, and DesignError when L >= I.
inline Eigen::MatrixXd build_design_matrix(const MatchedDataset& ds, const DesignMatrixSpec& spec = {}) {
  const auto I = static_cast<Eigen::Index>(ds.I());
  std::vector<std::string> names{"intercept"};
  Eigen::MatrixXd q;
  switch (spec.kind) {
    case QKind::unit:
      q = Eigen::MatrixXd::Ones(I, 1);
      break;
    case QKind::intercept_weights: {
      q.resize(I, 2);
      q.col(0).setOnes();
      const auto w = set_weights(ds);
      for (Eigen::Index i = 0; i < I; ++i) q(i, 1) = w[i];
      names.push_back("w");
      break;
    }
    case QKind::intercept_covmeans: {
      std::vector<std::size_t> cols = spec.covariates;
      if (cols.empty())
        for (std::size_t k = 0; k < ds.K(); ++k) cols.push_back(k);
      if (cols.empty()) throw InputError("covmeans Q requires covariates");
      if (cols.size() + 1 >= ds.I())
        throw NumericalError("covmeans Q needs K < I - 1 (K = " + std::to_string(cols.size()) +
                             ", I = " + std::to_string(ds.I()) + "): rank deficient");
      q.resize(I, static_cast<Eigen::Index>(cols.size()) + 1);
      q.col(0).setOnes();
      for (std::size_t c = 0; c < cols.size(); ++c) {
        if (cols[c] >= ds.K()) throw InputError("covmeans: covariate index out of range");
        names.push_back("mean(" + ds.covariate_names()[cols[c]] + ")");
        for (Eigen::Index i = 0; i < I; ++i) {
          const auto& s = ds.sets()[i];
          double acc = 0.0;
          for (std::size_t u : s.units) acc += ds.units()[u].x[cols[c]];
          q(i, static_cast<Eigen::Index>(c) + 1) = acc / static_cast<double>(s.size());
        }
      }
      break;
    }
  }
  if (q.cols() >= I)
    throw NumericalError("design matrix needs fewer columns than sets (L = " + std::to_string(q.cols()) +
                         ", I = " + std::to_string(I) + "): rank deficient");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(q);
  qr.setThreshold(1e-10);
  if (qr.rank() < q.cols()) {
    std::string which;
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < q.cols(); ++k) {
      if (!which.empty()) which += ", ";
      which += names[static_cast<std::size_t>(perm(k))];
    }
    throw NumericalError("design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                         std::to_string(q.cols()) + "); collinear column(s): " + which);
  }
  return q;
}

// Diagonal of the hat matrix H_Q = Q (Q'Q)^{-1} Q', from a thin Householder QR.
inline Eigen::VectorXd hat_diagonal(const Eigen::MatrixXd& q) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(q);
  const Eigen::MatrixXd thin = qr.householderQ() * Eigen::MatrixXd::Identity(q.rows(), q.cols());
  return thin.rowwise().squaredNorm();
}

inline constexpr double kLeverageGuard = 1e-10;

// S^2(Q) = I^{-2} y W (I - H_Q) W y' with y_i = lambda_i / sqrt(1 - h_ii),
// W = diag(I n_i / N).
inline double variance_estimator_q(std::span<const double> per_set, const MatchedDataset& ds,
                                   const Eigen::MatrixXd& q) {
  const auto I = static_cast<Eigen::Index>(ds.I());
  if (static_cast<Eigen::Index>(per_set.size()) != I || q.rows() != I)
    throw InputError("variance_estimator_q: dimension mismatch");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(q);
  const Eigen::MatrixXd thin = qr.householderQ() * Eigen::MatrixXd::Identity(I, q.cols());
  const auto w = set_weights(ds);
  Eigen::VectorXd u(I);
  for (Eigen::Index i = 0; i < I; ++i) {
    const double h = thin.row(i).squaredNorm();
    if (h >= 1.0 - kLeverageGuard)
      throw NumericalError("leverage h_ii = " + std::to_string(h) + " at set " + std::to_string(i + 1) +
                           " is too close to 1");
    u(i) = w[i] * per_set[i] / std::sqrt(1.0 - h);
  }
  // u'(I - H)u = |u|^2 - |Q_thin' u|^2, evaluated as the squared norm of the
  // residual so the result is non-negative by construction.
  const Eigen::VectorXd resid = u - thin * (thin.transpose() * u);
  return resid.squaredNorm() / (static_cast<double>(I) * static_cast<double>(I));
}

inline AteResult confidence_interval(double estimate, double variance, double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw InputError("alpha must lie in (0, 0.5)");
  if (!(variance >= 0.0)) throw NumericalError("negative or NaN variance");
  const double half = normal_quantile(1.0 - alpha / 2.0) * std::sqrt(variance);
  AteResult r;
  r.estimate = estimate;
  r.variance = variance;
  r.alpha = alpha;
  r.ci_lower = estimate - half;
  r.ci_upper = estimate + half;
  return r;
}

// Full IPPW analysis: point estimate, S^2(Q), interval. Uniform probabilities
// give the conventional post-matching (difference-in-means) analysis.
inline AteResult analyze_ate(const MatchedDataset& ds, const AssignmentProbs& probs,
                             const DesignMatrixSpec& qspec, double alpha, std::string estimator) {
  const auto est = ippw_estimate(ds, probs);
  const auto q = build_design_matrix(ds, qspec);
  auto r = confidence_interval(est.aggregate, variance_estimator_q(est.per_set, ds, q), alpha);
  r.estimator = std::move(estimator);
  r.q_spec = std::string(to_string(qspec.kind));
  r.prob_source = std::string(to_string(probs.source));
  return r;
}

inline AteResult analyze_diff_in_means(const MatchedDataset& ds, const DesignMatrixSpec& qspec,
                                       double alpha) {
  const auto est = diff_in_means(ds);
  const auto q = build_design_matrix(ds, qspec);
  auto r = confidence_interval(est.aggregate, variance_estimator_q(est.per_set, ds, q), alpha);
  r.estimator = "diff_in_means";
  r.q_spec = std::string(to_string(qspec.kind));
  r.prob_source = "uniform";
  return r;
}

// Finite-population weighting on the unmatched sample:
//   lambda_W = N^{-1} sum_n [Y Z / e - Y (1 - Z) / (1 - e)],
// with variance N^{-2} sum_n psi_n^2, psi_n = (term_n - lambda_W), e treated as fixed.
inline AteResult fpw_estimate(std::span<const int> z, std::span<const double> y,
                              std::span<const double> e_hat, double alpha) {
  const std::size_t n = z.size();
  if (y.size() != n || e_hat.size() != n) throw InputError("fpw_estimate: length mismatch");
  if (n == 0) throw InputError("fpw_estimate: empty sample");
  std::vector<double> terms(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double e = e_hat[k];
    if (!(e > 0.0 && e < 1.0)) throw DesignError("fpw_estimate: propensity at 0 or 1");
    terms[k] = z[k] ? y[k] / e : -y[k] / (1.0 - e);
  }
  const double nn = static_cast<double>(n);
  const double est = pairwise_sum(terms) / nn;
  std::vector<double> sq(n);
  for (std::size_t k = 0; k < n; ++k) sq[k] = (terms[k] - est) * (terms[k] - est);
  auto r = confidence_interval(est, pairwise_sum(sq) / (nn * nn), alpha);
  r.estimator = "fpw";
  r.q_spec = "none";
  r.prob_source = "none";
  return r;
}

}  // namespace riim

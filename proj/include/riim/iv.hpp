#pragma once

// Effect-ratio inference for matched instrumental-variable designs:
// bias-corrected adjusted-response statistic A(theta0), its variance, the
// bias-corrected and classical Wald estimators, and the inverted-test
// confidence set.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "riim/assignment_prob.hpp"
#include "riim/errors.hpp"
#include "riim/matched_design.hpp"
#include "riim/numeric.hpp"

namespace riim {

struct ArStatistic {
  std::vector<double> per_set;  // A_i(theta0)
  double aggregate = 0.0;       // I^{-1} sum_i A_i(theta0)
};

enum class SetShape { interval, complement, half_line, whole_line, empty };

inline std::string_view to_string(SetShape s) {
  switch (s) {
    case SetShape::interval: return "interval";
    case SetShape::complement: return "complement";
    case SetShape::half_line: return "half_line";
    case SetShape::whole_line: return "whole_line";
    case SetShape::empty: return "empty";
  }
  return "unknown";
}

// {theta : c2 theta^2 + c1 theta + c0 <= 0}, classified by shape.
//  interval:   [lower, upper]
//  complement: (-inf, lower] U [upper, inf)
//  half_line:  [lower, inf) or (-inf, upper] (the other endpoint is infinite)
struct ConfidenceSet {
  SetShape shape = SetShape::empty;
  double lower = std::numeric_limits<double>::quiet_NaN();
  double upper = std::numeric_limits<double>::quiet_NaN();

  bool contains(double theta) const {
    switch (shape) {
      case SetShape::interval: return lower <= theta && theta <= upper;
      case SetShape::complement: return theta <= lower || theta >= upper;
      case SetShape::half_line: return lower <= theta && theta <= upper;
      case SetShape::whole_line: return true;
      case SetShape::empty: return false;
    }
    return false;
  }
  bool bounded() const { return shape == SetShape::interval || shape == SetShape::empty; }
  double length() const {
    if (shape == SetShape::interval) return upper - lower;
    if (shape == SetShape::empty) return 0.0;
    return std::numeric_limits<double>::infinity();
  }
};

struct EffectRatioResult {
  double point_estimate = std::numeric_limits<double>::quiet_NaN();
  ConfidenceSet confidence_set;
  double alpha = 0.05;
  bool weak_iv_flag = false;
  std::string estimator;    // classical_wald | bc_wald | bc_wald_oracle
  std::string prob_source;
  // Quadratic coefficients of A^2 - z^2 V^2 in theta, for diagnostics.
  double c2 = 0.0, c1 = 0.0, c0 = 0.0;
};

namespace detail {

inline void require_dose(const MatchedDataset& ds) {
  if (!ds.has_dose()) throw InputError("effect-ratio analysis requires a d column");
}

// Per-set sum_j [Z/p - (1 - Z)/(1 - p)] * v_j for an arbitrary unit-level value.
template <typename Value>
std::vector<double> weighted_contrasts(const MatchedDataset& ds, const AssignmentProbs& probs,
                                       Value&& value) {
  std::vector<double> out;
  out.reserve(ds.I());
  for (const auto& s : ds.sets()) {
    double acc = 0.0;
    for (std::size_t u : s.units) {
      const double p = probs.p[u];
      if (!(p > 0.0 && p < 1.0)) throw DesignError("probability outside (0,1)");
      const auto& r = ds.units()[u];
      acc += r.z ? value(r) / p : -value(r) / (1.0 - p);
    }
    out.push_back(acc);
  }
  return out;
}

inline double mean(std::span<const double> v) { return pairwise_sum(v) / static_cast<double>(v.size()); }

}  // namespace detail

// A_i(theta0) = sum_j Z/p (Y - theta0 D) - sum_j (1 - Z)/(1 - p) (Y - theta0 D).
inline ArStatistic ar_statistic(const MatchedDataset& ds, const AssignmentProbs& probs, double theta0) {
  detail::require_dose(ds);
  require_valid_design(ds);
  if (probs.p.size() != ds.N()) throw DesignError("ar_statistic: probability vector length != N");
  ArStatistic a;
  a.per_set = detail::weighted_contrasts(ds, probs, [theta0](const UnitRecord& r) { return r.y - theta0 * *r.d; });
  a.aggregate = detail::mean(a.per_set);
  return a;
}

// V^2 = [I (I - 1)]^{-1} sum_i (A_i - A)^2.
inline double ar_variance(std::span<const double> per_set, double aggregate) {
  const std::size_t I = per_set.size();
  if (I < 2) throw InputError("ar_variance: need at least two matched sets");
  std::vector<double> sq(I);
  for (std::size_t i = 0; i < I; ++i) sq[i] = (per_set[i] - aggregate) * (per_set[i] - aggregate);
  return pairwise_sum(sq) / (static_cast<double>(I) * static_cast<double>(I - 1));
}

inline double ar_variance(const ArStatistic& a) { return ar_variance(a.per_set, a.aggregate); }

// Root of A(theta) = 0:
//   sum [p(1-p)]^{-1} Y (Z - p) / sum [p(1-p)]^{-1} D (Z - p).
inline double bc_wald(const MatchedDataset& ds, const AssignmentProbs& probs) {
  detail::require_dose(ds);
  require_valid_design(ds);
  if (probs.p.size() != ds.N()) throw DesignError("bc_wald: probability vector length != N");
  std::vector<double> num(ds.N()), den(ds.N());
  for (std::size_t u = 0; u < ds.N(); ++u) {
    const double p = probs.p[u];
    if (!(p > 0.0 && p < 1.0)) throw DesignError("bc_wald: probability outside (0,1)");
    const auto& r = ds.units()[u];
    const double w = (r.z - p) / (p * (1.0 - p));
    num[u] = w * r.y;
    den[u] = w * *r.d;
  }
  const double d = pairwise_sum(den);
  if (d == 0.0) throw NumericalError("bc_wald: zero denominator (weak or irrelevant instrument)");
  return pairwise_sum(num) / d;
}

// Classical post-matching Wald estimator with within-set observed means:
//   sum_i n_i^2/(m_i (n_i - m_i)) sum_j (Z - Zbar_i)(Y - Ybar_i) / (same with D).
inline double classical_wald(const MatchedDataset& ds) {
  detail::require_dose(ds);
  require_valid_design(ds);
  std::vector<double> num, den;
  for (const auto& s : ds.sets()) {
    const double n = static_cast<double>(s.size());
    const double m = static_cast<double>(s.treated);
    double ybar = 0.0, dbar = 0.0;
    for (std::size_t u : s.units) {
      ybar += ds.units()[u].y;
      dbar += *ds.units()[u].d;
    }
    ybar /= n;
    dbar /= n;
    const double zbar = m / n;
    const double scale = n * n / (m * (n - m));
    double sy = 0.0, sd = 0.0;
    for (std::size_t u : s.units) {
      const auto& r = ds.units()[u];
      sy += (r.z - zbar) * (r.y - ybar);
      sd += (r.z - zbar) * (*r.d - dbar);
    }
    num.push_back(scale * sy);
    den.push_back(scale * sd);
  }
  const double d = pairwise_sum(den);
  if (d == 0.0) throw NumericalError("classical_wald: zero denominator (weak or irrelevant instrument)");
  return pairwise_sum(num) / d;
}

namespace detail {

// Solve c2 t^2 + c1 t + c0 <= 0.
inline ConfidenceSet solve_quadratic_set(double c2, double c1, double c0) {
  ConfidenceSet cs;
  const double inf = std::numeric_limits<double>::infinity();
  if (c2 == 0.0) {
    if (c1 == 0.0) {
      cs.shape = c0 <= 0.0 ? SetShape::whole_line : SetShape::empty;
    } else {
      cs.shape = SetShape::half_line;
      const double r = -c0 / c1;
      if (c1 > 0.0) {
        cs.lower = -inf;
        cs.upper = r;
      } else {
        cs.lower = r;
        cs.upper = inf;
      }
    }
    return cs;
  }
  const double disc = c1 * c1 - 4.0 * c2 * c0;
  if (disc < 0.0) {
    cs.shape = c2 > 0.0 ? SetShape::empty : SetShape::whole_line;
    return cs;
  }
  // Stable roots: q = -(c1 + sign(c1) sqrt(disc)) / 2, roots q/c2 and c0/q.
  const double sq = std::sqrt(disc);
  const double q = -0.5 * (c1 + std::copysign(sq, c1));
  double r1 = q / c2;
  double r2 = q != 0.0 ? c0 / q : r1;
  if (r1 > r2) std::swap(r1, r2);
  cs.lower = r1;
  cs.upper = r2;
  cs.shape = c2 > 0.0 ? SetShape::interval : SetShape::complement;
  return cs;
}

}  // namespace detail

// {theta : A(theta)^2 <= z^2 V^2(theta)}, z = Phi^{-1}(1 - alpha/2). A_i is
// affine in theta (A_i = a_i - theta b_i), so the boundary is a quadratic.
inline EffectRatioResult effect_ratio_confidence_set(const MatchedDataset& ds, const AssignmentProbs& probs,
                                                     double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw InputError("alpha must lie in (0, 0.5)");
  detail::require_dose(ds);
  require_valid_design(ds);
  if (ds.I() < 2) throw InputError("effect-ratio confidence set needs at least two matched sets");
  const auto a = detail::weighted_contrasts(ds, probs, [](const UnitRecord& r) { return r.y; });
  const auto b = detail::weighted_contrasts(ds, probs, [](const UnitRecord& r) { return *r.d; });
  const double abar = detail::mean(a), bbar = detail::mean(b);
  const std::size_t I = ds.I();
  std::vector<double> saa(I), sab(I), sbb(I);
  for (std::size_t i = 0; i < I; ++i) {
    const double da = a[i] - abar, db = b[i] - bbar;
    saa[i] = da * da;
    sab[i] = da * db;
    sbb[i] = db * db;
  }
  const double z = normal_quantile(1.0 - alpha / 2.0);
  const double k = z * z / (static_cast<double>(I) * static_cast<double>(I - 1));
  EffectRatioResult r;
  r.alpha = alpha;
  r.prob_source = std::string(to_string(probs.source));
  r.c2 = bbar * bbar - k * pairwise_sum(sbb);
  r.c1 = -2.0 * (abar * bbar - k * pairwise_sum(sab));
  r.c0 = abar * abar - k * pairwise_sum(saa);
  r.confidence_set = detail::solve_quadratic_set(r.c2, r.c1, r.c0);
  if (bbar != 0.0) r.point_estimate = abar / bbar;
  r.weak_iv_flag = bbar == 0.0 || !(r.confidence_set.shape == SetShape::interval);
  return r;
}

// Direct test inversion at one theta: |A(theta)| <= z sqrt(V^2(theta)).
// Returns the signed slack A^2 - z^2 V^2 (member iff <= 0).
inline double ar_test_slack(const MatchedDataset& ds, const AssignmentProbs& probs, double theta,
                            double alpha) {
  const auto a = ar_statistic(ds, probs, theta);
  const double z = normal_quantile(1.0 - alpha / 2.0);
  return a.aggregate * a.aggregate - z * z * ar_variance(a);
}

struct GridCheck {
  std::size_t points = 0;
  std::size_t disagreements = 0;  // beyond boundary rounding
};

// Cross-validates the closed-form set against direct test inversion on a
// uniform grid over [lo, hi]. Points whose slack is within rounding of zero
// are not counted as disagreements.
inline GridCheck grid_scan_check(const MatchedDataset& ds, const AssignmentProbs& probs, double alpha,
                                 const ConfidenceSet& cs, double lo, double hi, std::size_t points = 2001) {
  if (!(hi > lo) || points < 2) throw InputError("grid range must satisfy lo < hi");
  GridCheck g;
  g.points = points;
  for (std::size_t k = 0; k < points; ++k) {
    const double theta = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
    const auto a = ar_statistic(ds, probs, theta);
    const double z = normal_quantile(1.0 - alpha / 2.0);
    const double lhs = a.aggregate * a.aggregate;
    const double rhs = z * z * ar_variance(a);
    const bool member = lhs - rhs <= 0.0;
    const double scale = std::max({lhs, rhs, 1e-300});
    if (member != cs.contains(theta) && std::abs(lhs - rhs) > 1e-9 * scale) ++g.disagreements;
  }
  return g;
}

// Full analysis for one probability vector.
inline EffectRatioResult analyze_effect_ratio(const MatchedDataset& ds, const AssignmentProbs& probs,
                                              double alpha, std::string estimator) {
  auto r = effect_ratio_confidence_set(ds, probs, alpha);
  try {
    r.point_estimate = bc_wald(ds, probs);
  } catch (const NumericalError&) {
    r.weak_iv_flag = true;
  }
  r.estimator = std::move(estimator);
  return r;
}

// Classical Wald with its adjusted-responses confidence set (uniform p = m/n).
inline EffectRatioResult analyze_classical_wald(const MatchedDataset& ds, double alpha) {
  auto r = effect_ratio_confidence_set(ds, uniform_probs(ds), alpha);
  try {
    r.point_estimate = classical_wald(ds);
  } catch (const NumericalError&) {
    r.weak_iv_flag = true;
  }
  r.estimator = "classical_wald";
  return r;
}

}  // namespace riim

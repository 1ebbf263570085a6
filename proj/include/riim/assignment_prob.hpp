#pragma once

// Post-matching treatment-assignment probabilities p_ij = pr(Z_ij = 1 | set
// structure, X) derived from unit-level propensity scores.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "riim/errors.hpp"
#include "riim/matched_design.hpp"

namespace riim {

enum class ProbSource { oracle, plugin, uniform, regularized };

inline std::string_view to_string(ProbSource s) {
  switch (s) {
    case ProbSource::oracle: return "oracle";
    case ProbSource::plugin: return "plugin";
    case ProbSource::uniform: return "uniform";
    case ProbSource::regularized: return "regularized";
  }
  return "unknown";
}

struct AssignmentProbs {
  std::vector<double> p;  // aligned with MatchedDataset::units()
  ProbSource source = ProbSource::uniform;
};

namespace detail {

inline void check_open_unit(std::span<const double> e, std::string_view who) {
  if (e.size() < 2) throw DesignError(std::string(who) + ": need at least two units");
  for (double v : e)
    if (!(v > 0.0 && v < 1.0))
      throw std::domain_error(std::string(who) + ": propensity outside (0,1)");
}

// softmax over log-weights, computed with max-subtraction.
inline std::vector<double> normalized_exp(const std::vector<double>& logw) {
  const double mx = *std::max_element(logw.begin(), logw.end());
  std::vector<double> out(logw.size());
  double total = 0.0;
  for (std::size_t j = 0; j < logw.size(); ++j) total += (out[j] = std::exp(logw[j] - mx));
  for (double& v : out) v /= total;
  return out;
}

inline bool all_equal(std::span<const double> e) {
  return std::all_of(e.begin(), e.end(), [&](double v) { return v == e.front(); });
}

}  // namespace detail

// Set with one treated unit: p_j = e_j prod_{k!=j}(1-e_k) / sum_j' (same).
// Dividing through by prod_k (1-e_k) leaves the odds e_j/(1-e_j), so the
// products are evaluated as a softmax of logits, which cannot underflow.
inline std::vector<double> probs_one_treated(std::span<const double> e) {
  detail::check_open_unit(e, "probs_one_treated");
  const std::size_t n = e.size();
  if (detail::all_equal(e)) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  std::vector<double> logw(n);
  for (std::size_t j = 0; j < n; ++j) logw[j] = std::log(e[j]) - std::log1p(-e[j]);
  return detail::normalized_exp(logw);
}

// Set with one control unit: p_j = 1 - (1-e_j) prod_{k!=j} e_k / sum_j' (same).
inline std::vector<double> probs_one_control(std::span<const double> e) {
  detail::check_open_unit(e, "probs_one_control");
  const std::size_t n = e.size();
  if (detail::all_equal(e))
    return std::vector<double>(n, static_cast<double>(n - 1) / static_cast<double>(n));
  std::vector<double> logw(n);
  for (std::size_t j = 0; j < n; ++j) logw[j] = std::log1p(-e[j]) - std::log(e[j]);
  auto q = detail::normalized_exp(logw);  // probability of being the control
  for (double& v : q) v = 1.0 - v;
  return q;
}

// Dispatch per set: one treated (pairs included) -> probs_one_treated,
// one control with several treated -> probs_one_control.
inline AssignmentProbs post_match_probs(const MatchedDataset& ds, std::span<const double> e,
                                        ProbSource source = ProbSource::plugin) {
  if (e.size() != ds.N()) throw InputError("post_match_probs: propensity vector length != N");
  require_valid_design(ds);
  AssignmentProbs out{std::vector<double>(ds.N()), source};
  std::vector<double> local;
  for (const auto& s : ds.sets()) {
    local.clear();
    for (std::size_t u : s.units) local.push_back(e[u]);
    const auto p = (s.treated == 1) ? probs_one_treated(local) : probs_one_control(local);
    for (std::size_t j = 0; j < s.size(); ++j) out.p[s.units[j]] = p[j];
  }
  return out;
}

// p_ij = m_i / n_i: the exact-matching (conventional) assignment model.
inline AssignmentProbs uniform_probs(const MatchedDataset& ds) {
  AssignmentProbs out{std::vector<double>(ds.N()), ProbSource::uniform};
  for (const auto& s : ds.sets()) {
    const double v = static_cast<double>(s.treated) / static_cast<double>(s.size());
    for (std::size_t u : s.units) out.p[u] = v;
  }
  return out;
}

// Probabilities read from the p_hat column.
inline AssignmentProbs imported_probs(const MatchedDataset& ds, ProbSource source) {
  if (!ds.has_p_hat()) throw InputError("dataset has no p_hat column");
  AssignmentProbs out{std::vector<double>(ds.N()), source};
  for (std::size_t u = 0; u < ds.N(); ++u) out.p[u] = *ds.units()[u].p_hat;
  return out;
}

// Throws DesignError unless every p is in (0,1) and each set sums to m_i.
inline void check_probs(const MatchedDataset& ds, const AssignmentProbs& probs,
                        double sum_tol = 1e-10) {
  if (probs.p.size() != ds.N()) throw DesignError("probability vector length != N");
  for (std::size_t i = 0; i < ds.I(); ++i) {
    const auto& s = ds.sets()[i];
    double total = 0.0;
    for (std::size_t u : s.units) {
      const double p = probs.p[u];
      if (!(p > 0.0 && p < 1.0))
        throw DesignError("set '" + ds.set_ids()[i] + "': probability outside (0,1)");
      total += p;
    }
    if (std::abs(total - static_cast<double>(s.treated)) > sum_tol)
      throw DesignError("set '" + ds.set_ids()[i] + "': probabilities sum to " +
                        std::to_string(total) + ", expected " + std::to_string(s.treated));
  }
}

// Within-set regularization: a set whose smallest probability is <= gamma or
// largest is >= 1 - gamma falls back to m_i / n_i for all of its units.
inline AssignmentProbs regularize_probs(const AssignmentProbs& probs, const MatchedDataset& ds,
                                        double gamma = 0.1) {
  if (!(gamma > 0.0 && gamma < 0.5)) throw std::invalid_argument("gamma must lie in (0, 0.5)");
  AssignmentProbs out = probs;
  out.source = ProbSource::regularized;
  for (const auto& s : ds.sets()) {
    double lo = 1.0, hi = 0.0;
    for (std::size_t u : s.units) {
      lo = std::min(lo, probs.p[u]);
      hi = std::max(hi, probs.p[u]);
    }
    if (lo <= gamma || hi >= 1.0 - gamma) {
      const double v = static_cast<double>(s.treated) / static_cast<double>(s.size());
      for (std::size_t u : s.units) out.p[u] = v;
    }
  }
  return out;
}

struct SetAssignmentDistribution {
  std::vector<std::vector<int>> assignments;
  std::vector<double> probs;

  // pr(Z_j = 1) under this distribution.
  std::vector<double> marginals() const {
    std::vector<double> m(assignments.empty() ? 0 : assignments.front().size(), 0.0);
    for (std::size_t a = 0; a < assignments.size(); ++a)
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += probs[a] * assignments[a][j];
    return m;
  }
};

inline constexpr std::size_t kMaxEnumerationSize = 20;

// Brute force: independent Bernoulli(e_j) draws conditioned on exactly m ones.
inline SetAssignmentDistribution enumerate_assignment_dist(std::span<const double> e,
                                                           std::size_t m) {
  const std::size_t n = e.size();
  if (n > kMaxEnumerationSize)
    throw std::length_error("enumerate_assignment_dist: n > " +
                            std::to_string(kMaxEnumerationSize));
  if (m > n) throw std::invalid_argument("enumerate_assignment_dist: m > n");
  SetAssignmentDistribution dist;
  double total = 0.0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != m) continue;
    std::vector<int> z(n);
    double w = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = (mask >> j) & 1u;
      w *= z[j] ? e[j] : 1.0 - e[j];
    }
    dist.assignments.push_back(std::move(z));
    dist.probs.push_back(w);
    total += w;
  }
  for (double& w : dist.probs) w /= total;
  return dist;
}

}  // namespace riim

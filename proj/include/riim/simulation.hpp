#pragma once

// Monte-Carlo harness: synthetic observational studies (ATE and IV), full
// matching on estimated propensity scores behind a covariate-balance gate,
// and bias / interval length / coverage summaries per estimator.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "riim/assignment_prob.hpp"
#include "riim/ate.hpp"
#include "riim/csv.hpp"
#include "riim/errors.hpp"
#include "riim/iv.hpp"
#include "riim/matched_design.hpp"
#include "riim/matching.hpp"
#include "riim/numeric.hpp"
#include "riim/propensity.hpp"
#include "riim/rng.hpp"

namespace riim::sim {

enum class Study { ate, iv };
enum class TreatmentModel { logistic = 1, selection = 2 };

inline constexpr std::size_t kCovariates = 5;
inline constexpr std::size_t kMaxAttemptsPerReplication = 100;

struct ScenarioConfig {
  Study study = Study::ate;
  TreatmentModel model = TreatmentModel::logistic;
  std::size_t N = 400;
  bool caliper = false;
  double caliper_sd = 0.2;  // caliper width in SDs of the estimated score
  std::size_t max_set_size = 8;
  std::size_t reps = 1000;
  double balance_threshold = 0.2;
  std::uint64_t seed = 1;
  double alpha = 0.05;
  double gamma = 0.1;
  // The gamma rule always applies to plug-in probabilities; oracle ones stay raw unless asked.
  bool regularize_oracle = false;
  std::vector<std::string> estimators;  // empty: every estimator of the study
  PropensityModelSpec propensity;
  unsigned workers = 1;

  static std::vector<std::string> all_estimators(Study s) {
    if (s == Study::ate) return {"fpw", "conventional", "ippw", "ippw_oracle"};
    return {"classical_wald", "bc_wald", "bc_wald_oracle"};
  }

  std::vector<std::string> resolved_estimators() const {
    return estimators.empty() ? all_estimators(study) : estimators;
  }

  void validate() const {
    if (N < 20) throw InputError("scenario N must be >= 20");
    if (reps < 1) throw InputError("reps must be >= 1");
    if (!(alpha > 0.0 && alpha < 0.5)) throw InputError("alpha must lie in (0, 0.5)");
    if (!(gamma > 0.0 && gamma < 0.5)) throw InputError("gamma must lie in (0, 0.5)");
    if (!(balance_threshold > 0.0)) throw InputError("balance threshold must be positive");
    if (!(caliper_sd > 0.0)) throw InputError("caliper width must be positive");
    if (max_set_size < 2) throw InputError("max set size must be >= 2");
    if (workers < 1) throw InputError("workers must be >= 1");
    if (propensity.learner == Learner::external)
      throw InputError("simulation needs a fitted learner (logistic or gbm)");
    propensity.validate();
    const auto valid = all_estimators(study);
    if (estimators.empty() && valid.empty()) throw InputError("empty estimator list");
    for (const auto& e : estimators)
      if (std::find(valid.begin(), valid.end(), e) == valid.end())
        throw InputError("estimator '" + e + "' not available for this study");
  }
};

// A generated pre-matching sample with its finite-population truth.
struct GeneratedData {
  UnitTable table;
  std::vector<double> oracle_logit;  // logit of the true propensity
  std::vector<double> y0, y1;        // potential outcomes
  std::vector<double> d0, d1;        // potential doses (IV only)
  double truth = 0.0;                // lambda (ATE) or theta (IV) over all N units

  std::vector<double> oracle_e() const {
    std::vector<double> e(oracle_logit.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = expit(oracle_logit[i]);
    return e;
  }
};

namespace detail {

enum Stage : std::uint64_t { kCovariateStage = 1, kTreatmentStage = 2, kOutcomeStage = 3 };

inline const QuadratureRule& hermite64() {
  static const QuadratureRule rule = gauss_hermite(64);
  return rule;
}

// log Phi(x), accurate in both tails.
inline double log_normal_cdf(double x) {
  if (x > -5.0) return std::log(normal_cdf(x));
  if (x > -30.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // erfc underflows near x = -38; use the asymptotic series for the Mills ratio.
  const double r = 1.0 / (x * x);
  const double series = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * (105.0 + r * (-945.0 + r * 10395.0)))));
  return -0.5 * x * x - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

inline std::vector<double> draw_covariates(CounterStream& rng) {
  std::vector<double> x(kCovariates);
  for (std::size_t k = 0; k < 3; ++k) x[k] = rng.normal();
  x[3] = rng.laplace(0.0, std::numbers::sqrt2 / 2.0);
  x[4] = rng.laplace(0.0, std::numbers::sqrt2 / 2.0);
  return x;
}

inline UnitTable empty_table() {
  UnitTable t;
  for (std::size_t k = 0; k < kCovariates; ++k) t.covariate_names.push_back("x" + std::to_string(k + 1));
  return t;
}

}  // namespace detail

// Treatment-selection index shared by both studies.
inline double selection_index(const std::vector<double>& x) {
  const double x1 = x[0], x2 = x[1], x3 = x[2], x4 = x[3], x5 = x[4];
  return 0.1 * x1 * x1 * x1 + 0.3 * x2 + 0.2 * std::log(x3 * x3) + 0.1 * x4 + 0.2 * x5 +
         std::abs(x1 * x2) + (x3 * x4) * (x3 * x4) + 0.5 * (x2 * x4) * (x2 * x4) - 2.5;
}

// logit of the true propensity. Logistic model: E_eps[expit(f + eps)] with
// eps ~ N(0,1), by 64-point Gauss-Hermite. Selection model: Phi(f).
inline double oracle_propensity_logit(double f, TreatmentModel model) {
  if (model == TreatmentModel::selection) return detail::log_normal_cdf(f) - detail::log_normal_cdf(-f);
  const auto& rule = detail::hermite64();
  const double p1 = normal_expectation(rule, [](double t) { return expit(t); }, f);
  const double p0 = normal_expectation(rule, [](double t) { return expit(-t); }, f);
  return std::log(p1) - std::log(p0);
}

inline double oracle_propensity(double f, TreatmentModel model) {
  return expit(oracle_propensity_logit(f, model));
}

namespace detail {

inline std::pair<int, double> draw_treatment(const std::vector<double>& x, TreatmentModel model,
                                             CounterStream& rng) {
  const double f = selection_index(x);
  const double eps = rng.normal();
  int z;
  if (model == TreatmentModel::logistic) {
    z = rng.uniform() < expit(f + eps) ? 1 : 0;
  } else {
    z = f > eps ? 1 : 0;
  }
  return {z, oracle_propensity_logit(f, model)};
}

}  // namespace detail

inline GeneratedData gen_ate_scenario(const ScenarioConfig& cfg, std::size_t rep, std::size_t attempt = 0) {
  CounterStream xs(stream_key(cfg.seed, {rep, attempt, detail::kCovariateStage}));
  CounterStream zs(stream_key(cfg.seed, {rep, attempt, detail::kTreatmentStage}));
  CounterStream ys(stream_key(cfg.seed, {rep, attempt, detail::kOutcomeStage}));
  GeneratedData g;
  g.table = detail::empty_table();
  double effect_sum = 0.0;
  for (std::size_t n = 0; n < cfg.N; ++n) {
    UnitRecord u;
    u.x = detail::draw_covariates(xs);
    auto [z, lg] = detail::draw_treatment(u.x, cfg.model, zs);
    const double x1 = u.x[0], x2 = u.x[1], x3 = u.x[2], x4 = u.x[3], x5 = u.x[4];
    const double y0 = 0.2 * x1 * x1 * x1 + 0.2 * std::abs(x2) + 0.2 * x3 * x3 * x3 + 0.5 * std::abs(x4) +
                      0.3 * x5 + ys.normal();
    const double y1 = y0 + (1.0 + 0.3 * x1 + 0.2 * x3 * x3 * x3);
    u.z = z;
    u.y = z ? y1 : y0;
    g.y0.push_back(y0);
    g.y1.push_back(y1);
    g.oracle_logit.push_back(lg);
    effect_sum += y1 - y0;
    g.table.units.push_back(std::move(u));
  }
  g.truth = effect_sum / static_cast<double>(cfg.N);
  return g;
}

// Standard bivariate normal pair with correlation rho.
inline std::pair<double, double> correlated_normals(CounterStream& rng, double rho) {
  const double a = rng.normal();
  const double b = rng.normal();
  return {a, rho * a + std::sqrt(1.0 - rho * rho) * b};
}

inline constexpr double kConfounderCorrelation = 0.8;

inline GeneratedData gen_iv_scenario(const ScenarioConfig& cfg, std::size_t rep, std::size_t attempt = 0) {
  CounterStream xs(stream_key(cfg.seed, {rep, attempt, detail::kCovariateStage}));
  CounterStream zs(stream_key(cfg.seed, {rep, attempt, detail::kTreatmentStage}));
  CounterStream ys(stream_key(cfg.seed, {rep, attempt, detail::kOutcomeStage}));
  GeneratedData g;
  g.table = detail::empty_table();
  double dy = 0.0, dd = 0.0;
  for (std::size_t n = 0; n < cfg.N; ++n) {
    UnitRecord u;
    u.x = detail::draw_covariates(xs);
    auto [z, lg] = detail::draw_treatment(u.x, cfg.model, zs);
    const double x1 = u.x[0], x2 = u.x[1], x3 = u.x[2], x4 = u.x[3], x5 = u.x[4];
    const auto [ud, uy] = correlated_normals(ys, kConfounderCorrelation);
    const double eps_d = ys.normal();
    const double f2 = 0.7 * x1 + 0.4 * std::sin(x2) + 0.4 * std::abs(x3) + 0.6 * x4 + 0.1 * x5 + 0.3 * x3 * x4 - 1.0;
    const double f3 = 0.4 * x1 * x1 + 0.1 * std::abs(x2) + 0.1 * x3 * x3 + 0.2 * std::cos(x4) + 0.5 * std::sin(x5);
    const double iv_push = 2.0 + 0.8 * x2 * x2;
    const double d0 = (f2 + ud > eps_d) ? 1.0 : 0.0;
    const double d1 = (f2 + ud + iv_push > eps_d) ? 1.0 : 0.0;
    const double slope = 1.0 + 0.1 * x1 + 0.3 * x3 * x3;
    const double y0 = f3 + uy + slope * d0;
    const double y1 = f3 + uy + slope * d1;
    u.z = z;
    u.d = z ? d1 : d0;
    u.y = z ? y1 : y0;
    g.d0.push_back(d0);
    g.d1.push_back(d1);
    g.y0.push_back(y0);
    g.y1.push_back(y1);
    g.oracle_logit.push_back(lg);
    dy += y1 - y0;
    dd += d1 - d0;
    g.table.units.push_back(std::move(u));
  }
  g.truth = dd > 0.0 ? dy / dd : std::numeric_limits<double>::quiet_NaN();
  return g;
}

// Post-matching probabilities from unit log-odds (softmax per set), kept
// strictly inside (0,1) so extreme oracle scores remain usable.
inline AssignmentProbs probs_from_logits(const MatchedDataset& ds, std::span<const double> logits,
                                         ProbSource source) {
  require_valid_design(ds);
  constexpr double kEdge = 1e-15;
  AssignmentProbs out{std::vector<double>(ds.N()), source};
  for (const auto& s : ds.sets()) {
    const bool one_treated = s.treated == 1;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t u : s.units) mx = std::max(mx, one_treated ? logits[u] : -logits[u]);
    double total = 0.0;
    for (std::size_t u : s.units) total += std::exp((one_treated ? logits[u] : -logits[u]) - mx);
    for (std::size_t u : s.units) {
      const double share = std::exp((one_treated ? logits[u] : -logits[u]) - mx) / total;
      const double p = one_treated ? share : 1.0 - share;
      out.p[u] = std::clamp(p, kEdge, 1.0 - kEdge);
    }
  }
  return out;
}

struct ReplicationRow {
  std::size_t rep = 0;
  std::size_t attempts = 0;
  std::size_t n_matched = 0;
  std::size_t n_sets = 0;
  std::string estimator;
  double truth = 0.0;
  double estimate = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::string shape = "interval";
  bool covered = false;
};

struct EstimatorSummary {
  std::string estimator;
  double bias = 0.0;            // |mean (estimate - truth)|
  double ci_length = 0.0;       // mean length over bounded sets
  double coverage = 0.0;
  double signed_bias = 0.0;     // mean (estimate - truth)
  double signed_bias_se = 0.0;  // Monte-Carlo standard error of signed_bias
  double mean_abs_error = 0.0;  // mean |estimate - truth|
  std::size_t unbounded = 0;    // replications whose confidence set is unbounded
  std::size_t replications = 0;
};

struct SimulationReport {
  ScenarioConfig config;
  std::vector<EstimatorSummary> summary;
  std::vector<ReplicationRow> rows;  // ordered by replication, then estimator
  std::size_t gate_rejections = 0;
  std::size_t infeasible_rejections = 0;
  std::size_t degenerate_rejections = 0;  // IV draws with no instrument effect on D
};

class StudyAborted : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace detail {

struct ReplicationOutcome {
  std::vector<ReplicationRow> rows;
  std::size_t gate_rejections = 0;
  std::size_t infeasible_rejections = 0;
  std::size_t degenerate_rejections = 0;
};

inline double sample_sd(std::span<const double> v) {
  double m = 0.0;
  for (double t : v) m += t;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double t : v) s += (t - m) * (t - m);
  return v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
}

inline ReplicationRow ate_row(const AteResult& r, double truth) {
  ReplicationRow row;
  row.estimator = r.estimator;
  row.truth = truth;
  row.estimate = r.estimate;
  row.ci_lower = r.ci_lower;
  row.ci_upper = r.ci_upper;
  row.covered = r.covers(truth);
  return row;
}

inline ReplicationRow iv_row(const EffectRatioResult& r, double truth) {
  ReplicationRow row;
  row.estimator = r.estimator;
  row.truth = truth;
  row.estimate = r.point_estimate;
  row.ci_lower = r.confidence_set.lower;
  row.ci_upper = r.confidence_set.upper;
  row.shape = std::string(to_string(r.confidence_set.shape));
  row.covered = r.confidence_set.contains(truth);
  return row;
}

inline ReplicationOutcome run_replication(const ScenarioConfig& cfg, std::size_t rep) {
  ReplicationOutcome out;
  const auto estimators = cfg.resolved_estimators();
  auto wants = [&](const char* name) {
    return std::find(estimators.begin(), estimators.end(), name) != estimators.end();
  };
  for (std::size_t attempt = 0; attempt < kMaxAttemptsPerReplication; ++attempt) {
    GeneratedData g = cfg.study == Study::ate ? gen_ate_scenario(cfg, rep, attempt)
                                              : gen_iv_scenario(cfg, rep, attempt);
    if (cfg.study == Study::iv && !std::isfinite(g.truth)) {
      ++out.degenerate_rejections;
      continue;
    }
    const auto z = treatment_vector(g.table.units);
    const std::size_t treated = static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
    if (treated == 0 || treated == z.size()) {
      ++out.infeasible_rejections;
      continue;
    }
    const auto e_hat = estimate_propensity(g.table, cfg.propensity);
    MatchSpec ms;
    ms.max_set_size = cfg.max_set_size;
    if (cfg.caliper) ms.caliper = cfg.caliper_sd * sample_sd(e_hat);
    MatchResult match;
    try {
      match = full_match(e_hat, z, ms);
    } catch (const InfeasibleError&) {
      ++out.infeasible_rejections;
      continue;
    }
    const MatchedDataset ds = matched_dataset(g.table, match, e_hat);
    if (!apply_balance_gate(ds, cfg.balance_threshold, &g.table)) {
      ++out.gate_rejections;
      continue;
    }
    // Truth over the retained units, aligned with ds.units().
    std::vector<std::size_t> retained;
    for (const auto& s : match.sets) retained.insert(retained.end(), s.begin(), s.end());
    std::vector<double> logit_m;
    double sum_dy = 0.0, sum_dd = 0.0;
    for (std::size_t u : retained) {
      logit_m.push_back(g.oracle_logit[u]);
      sum_dy += g.y1[u] - g.y0[u];
      if (cfg.study == Study::iv) sum_dd += g.d1[u] - g.d0[u];
    }
    double truth = 0.0;
    if (cfg.study == Study::ate) {
      truth = sum_dy / static_cast<double>(retained.size());
    } else {
      if (!(sum_dd > 0.0)) {
        ++out.degenerate_rejections;
        continue;
      }
      truth = sum_dy / sum_dd;
    }
    std::vector<double> e_matched;
    for (const auto& u : ds.units()) e_matched.push_back(*u.e_hat);
    const auto plugin = regularize_probs(post_match_probs(ds, e_matched), ds, cfg.gamma);
    auto oracle = probs_from_logits(ds, logit_m, ProbSource::oracle);
    if (cfg.regularize_oracle) oracle = regularize_probs(oracle, ds, cfg.gamma);
    const DesignMatrixSpec unit_q;
    std::vector<ReplicationRow> rows;
    if (cfg.study == Study::ate) {
      if (wants("fpw")) {
        std::vector<double> ys;
        for (const auto& u : g.table.units) ys.push_back(u.y);
        auto r = fpw_estimate(z, ys, clamp_scores(e_hat, cfg.propensity.clamp_rho), cfg.alpha);
        rows.push_back(ate_row(r, g.truth));
      }
      if (wants("conventional")) {
        auto r = analyze_diff_in_means(ds, unit_q, cfg.alpha);
        r.estimator = "conventional";
        rows.push_back(ate_row(r, truth));
      }
      if (wants("ippw")) rows.push_back(ate_row(analyze_ate(ds, plugin, unit_q, cfg.alpha, "ippw"), truth));
      if (wants("ippw_oracle"))
        rows.push_back(ate_row(analyze_ate(ds, oracle, unit_q, cfg.alpha, "ippw_oracle"), truth));
    } else {
      if (wants("classical_wald")) rows.push_back(iv_row(analyze_classical_wald(ds, cfg.alpha), truth));
      if (wants("bc_wald")) rows.push_back(iv_row(analyze_effect_ratio(ds, plugin, cfg.alpha, "bc_wald"), truth));
      if (wants("bc_wald_oracle"))
        rows.push_back(iv_row(analyze_effect_ratio(ds, oracle, cfg.alpha, "bc_wald_oracle"), truth));
    }
    for (auto& r : rows) {
      r.rep = rep;
      r.attempts = attempt + 1;
      r.n_matched = ds.N();
      r.n_sets = ds.I();
    }
    out.rows = std::move(rows);
    return out;
  }
  throw StudyAborted("replication " + std::to_string(rep) + ": no matched dataset passed the balance gate in " +
                     std::to_string(kMaxAttemptsPerReplication) + " attempts (gate rejections " +
                     std::to_string(out.gate_rejections) + ", infeasible matchings " +
                     std::to_string(out.infeasible_rejections) + ", degenerate instruments " +
                     std::to_string(out.degenerate_rejections) + ")");
}

}  // namespace detail

inline std::vector<EstimatorSummary> summarize_rows(const std::vector<ReplicationRow>& rows,
                                                    const std::vector<std::string>& estimators) {
  std::vector<EstimatorSummary> out;
  for (const auto& name : estimators) {
    EstimatorSummary s;
    s.estimator = name;
    std::vector<double> err;
    double abs_sum = 0.0, len_sum = 0.0;
    std::size_t covered = 0, bounded = 0;
    for (const auto& r : rows) {
      if (r.estimator != name) continue;
      const double e = r.estimate - r.truth;
      err.push_back(e);
      abs_sum += std::abs(e);
      covered += r.covered ? 1 : 0;
      if (r.shape == "interval") {
        len_sum += r.ci_upper - r.ci_lower;
        ++bounded;
      } else if (r.shape != "empty") {
        ++s.unbounded;
      }
    }
    s.replications = err.size();
    if (!err.empty()) {
      const double n = static_cast<double>(err.size());
      double signed_sum = 0.0;
      for (double e : err) signed_sum += e;
      s.signed_bias = signed_sum / n;
      s.bias = std::abs(s.signed_bias);
      s.mean_abs_error = abs_sum / n;
      s.signed_bias_se = detail::sample_sd(err) / std::sqrt(n);
      s.coverage = static_cast<double>(covered) / n;
      s.ci_length = bounded ? len_sum / static_cast<double>(bounded) : std::numeric_limits<double>::infinity();
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Runs cfg.reps replications on cfg.workers threads. Replication r only ever
// reads streams keyed by (seed, r, attempt, stage) and results are merged in
// replication order, so the report does not depend on the worker count.
inline SimulationReport run_study(const ScenarioConfig& cfg) {
  cfg.validate();
  std::vector<detail::ReplicationOutcome> outcomes(cfg.reps);
  std::vector<std::exception_ptr> errors(cfg.reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < cfg.reps; r = next++) {
      try {
        outcomes[r] = detail::run_replication(cfg, r);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = static_cast<unsigned>(std::min<std::size_t>(cfg.workers, cfg.reps));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  SimulationReport report;
  report.config = cfg;
  for (auto& o : outcomes) {
    report.gate_rejections += o.gate_rejections;
    report.infeasible_rejections += o.infeasible_rejections;
    report.degenerate_rejections += o.degenerate_rejections;
    for (auto& row : o.rows) report.rows.push_back(std::move(row));
  }
  report.summary = summarize_rows(report.rows, cfg.resolved_estimators());
  return report;
}

inline std::string_view to_string(Study s) { return s == Study::ate ? "ate" : "iv"; }

// Summary table, Table-2 column order (bias, CI length, coverage), one block
// per report (e.g. without / with caliper). Values at 6 significant digits.
inline csv::Table summarize(std::span<const SimulationReport> reports) {
  csv::Table t;
  t.header = {"study", "model", "caliper", "estimator", "bias", "ci_length", "coverage_rate",
              "signed_bias", "signed_bias_se", "mean_abs_error", "unbounded_sets", "reps",
              "gate_rejections"};
  for (const auto& rep : reports) {
    for (const auto& s : rep.summary) {
      t.rows.push_back({std::string(to_string(rep.config.study)),
                        std::to_string(static_cast<int>(rep.config.model)),
                        rep.config.caliper ? "on" : "off", s.estimator, csv::format_sig(s.bias),
                        csv::format_sig(s.ci_length), csv::format_sig(s.coverage),
                        csv::format_sig(s.signed_bias), csv::format_sig(s.signed_bias_se),
                        csv::format_sig(s.mean_abs_error), std::to_string(s.unbounded), std::to_string(s.replications),
                        std::to_string(rep.gate_rejections)});
    }
  }
  return t;
}

// Fixed-width rendering of a summary table for terminals.
inline std::string aligned_text(const csv::Table& t) {
  std::vector<std::size_t> width(t.header.size(), 0);
  auto measure = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  };
  measure(t.header);
  for (const auto& r : t.rows) measure(r);
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      os << r[c];
      if (c + 1 < r.size()) os << std::string(width[c] - r[c].size() + 2, ' ');
    }
    os << '\n';
  };
  emit(t.header);
  for (const auto& r : t.rows) emit(r);
  return os.str();
}

inline csv::Table replication_table(const SimulationReport& report) {
  csv::Table t;
  t.header = {"rep", "attempts", "n_matched", "n_sets", "estimator", "truth", "estimate",
              "ci_lower", "ci_upper", "shape", "covered"};
  for (const auto& r : report.rows) {
    t.rows.push_back({std::to_string(r.rep), std::to_string(r.attempts), std::to_string(r.n_matched),
                      std::to_string(r.n_sets), r.estimator, csv::format_double(r.truth),
                      csv::format_double(r.estimate), csv::format_double(r.ci_lower),
                      csv::format_double(r.ci_upper), r.shape, r.covered ? "1" : "0"});
  }
  return t;
}

// key=value configuration (one pair per line, '#' comments). Keys mirror the
// simulate flags.
inline void apply_config_entry(ScenarioConfig& cfg, const std::string& key, const std::string& value) {
  auto as_size = [&] { return static_cast<std::size_t>(std::stoull(value)); };
  auto as_double = [&] { return std::stod(value); };
  try {
    if (key == "study") {
      if (value == "ate") cfg.study = Study::ate;
      else if (value == "iv") cfg.study = Study::iv;
      else throw InputError("study must be ate or iv");
    } else if (key == "model") {
      if (value == "1") cfg.model = TreatmentModel::logistic;
      else if (value == "2") cfg.model = TreatmentModel::selection;
      else throw InputError("model must be 1 or 2");
    } else if (key == "caliper") {
      if (value == "on") cfg.caliper = true;
      else if (value == "off") cfg.caliper = false;
      else throw InputError("caliper must be on or off");
    } else if (key == "N" || key == "n") cfg.N = as_size();
    else if (key == "reps") cfg.reps = as_size();
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "workers") cfg.workers = static_cast<unsigned>(as_size());
    else if (key == "alpha") cfg.alpha = as_double();
    else if (key == "gamma") cfg.gamma = as_double();
    else if (key == "oracle-gamma") {
      if (value == "on") cfg.regularize_oracle = true;
      else if (value == "off") cfg.regularize_oracle = false;
      else throw InputError("oracle-gamma must be on or off");
    } else if (key == "clamp-rho") cfg.propensity.clamp_rho = as_double();
    else if (key == "balance-threshold") cfg.balance_threshold = as_double();
    else if (key == "caliper-sd") cfg.caliper_sd = as_double();
    else if (key == "max-set-size") cfg.max_set_size = as_size();
    else if (key == "learner") cfg.propensity.learner = parse_learner(value);
    else if (key == "gbm-rounds") cfg.propensity.gbm.rounds = std::stoi(value);
    else if (key == "gbm-depth") cfg.propensity.gbm.max_depth = std::stoi(value);
    else if (key == "gbm-eta") cfg.propensity.gbm.eta = as_double();
    else if (key == "ridge") cfg.propensity.logistic.ridge = as_double();
    else if (key == "estimators") {
      cfg.estimators.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) cfg.estimators.push_back(item);
      if (cfg.estimators.empty()) throw InputError("empty estimator list");
    } else {
      throw InputError("unknown configuration key '" + key + "'");
    }
  } catch (const std::logic_error&) {
    throw InputError("bad value '" + value + "' for configuration key '" + key + "'");
  }
}

inline void load_config_file(ScenarioConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(path + ":" + std::to_string(line_no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto first = s.find_first_not_of(" \t\r");
      const auto last = s.find_last_not_of(" \t\r");
      return first == std::string::npos ? std::string{} : s.substr(first, last - first + 1);
    };
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

}  // namespace riim::sim

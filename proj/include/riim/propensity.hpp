#pragma once

// Propensity learners for the plug-in strategy: an IRLS logistic regression
// baseline and a small gradient-boosted tree learner on logistic loss.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "riim/errors.hpp"
#include "riim/matched_design.hpp"
#include "riim/numeric.hpp"

namespace riim {

enum class Learner { logistic, gbm, external };

inline Learner parse_learner(std::string_view s) {
  if (s == "logistic") return Learner::logistic;
  if (s == "gbm") return Learner::gbm;
  if (s == "external") return Learner::external;
  throw InputError("unknown learner '" + std::string(s) + "'");
}

inline std::string_view to_string(Learner l) {
  switch (l) {
    case Learner::logistic: return "logistic";
    case Learner::gbm: return "gbm";
    case Learner::external: return "external";
  }
  return "unknown";
}

struct LogisticOptions {
  int max_iter = 100;
  double ridge = 1e-3;      // penalty used by the fallback fit
  double grad_tol = 1e-9;   // max-norm of the score at convergence
};

struct GbmOptions {
  int rounds = 100;
  int max_depth = 3;
  double eta = 0.1;
  double lambda = 1.0;            // L2 penalty on leaf values
  double min_child_weight = 1.0;  // minimum hessian mass per child
};

struct PropensityModelSpec {
  Learner learner = Learner::gbm;
  LogisticOptions logistic;
  GbmOptions gbm;
  double clamp_rho = 0.1;

  void validate() const {
    if (!(clamp_rho > 0.0 && clamp_rho < 0.5)) throw InputError("clamp rho must lie in (0, 0.5)");
    if (gbm.rounds < 1) throw InputError("gbm rounds must be >= 1");
    if (gbm.max_depth < 1) throw InputError("gbm depth must be >= 1");
    if (!(gbm.eta > 0.0)) throw InputError("gbm eta must be positive");
    if (!(logistic.ridge > 0.0)) throw InputError("ridge must be positive");
    if (logistic.max_iter < 1) throw InputError("logistic max_iter must be >= 1");
  }
};

inline Eigen::MatrixXd covariate_matrix(const std::vector<UnitRecord>& units, std::size_t k) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(units.size()), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < units.size(); ++i)
    for (std::size_t j = 0; j < k; ++j) x(i, j) = units[i].x[j];
  return x;
}

inline std::vector<int> treatment_vector(const std::vector<UnitRecord>& units) {
  std::vector<int> z;
  z.reserve(units.size());
  for (const auto& u : units) z.push_back(u.z);
  return z;
}

// ---------------------------------------------------------------------------
// Logistic regression

struct LogisticFit {
  Eigen::VectorXd coef;                // intercept first
  std::vector<double> fitted;          // in-sample probabilities
  std::vector<double> objective_trace; // penalized deviance after each accepted step
  int iterations = 0;
  double ridge = 0.0;                  // 0 unless the fallback was needed

  // The linear predictor is capped at +-30 so scores stay strictly inside (0,1).
  std::vector<double> predict(const Eigen::MatrixXd& x) const {
    std::vector<double> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out[i] = expit(std::clamp(coef(0) + x.row(i).dot(coef.tail(coef.size() - 1)), -30.0, 30.0));
    return out;
  }
};

namespace detail {

// -2 log-likelihood + ridge * |beta_slopes|^2.
inline double logistic_objective(const Eigen::MatrixXd& xa, const Eigen::VectorXd& z,
                                 const Eigen::VectorXd& beta, double ridge) {
  const Eigen::VectorXd eta = xa * beta;
  double dev = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + exp(eta)) - z * eta, evaluated stably
    const double t = eta(i);
    const double softplus = t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
    dev += 2.0 * (softplus - z(i) * t);
  }
  return dev + ridge * beta.tail(beta.size() - 1).squaredNorm();
}

struct IrlsOutcome {
  Eigen::VectorXd beta;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
  bool singular = false;
};

inline IrlsOutcome irls(const Eigen::MatrixXd& xa, const Eigen::VectorXd& z, double ridge,
                        const LogisticOptions& opt) {
  const Eigen::Index p = xa.cols();
  IrlsOutcome out;
  out.beta = Eigen::VectorXd::Zero(p);
  const double zbar = z.mean();
  out.beta(0) = logit(std::clamp(zbar, 1e-6, 1.0 - 1e-6));
  double obj = logistic_objective(xa, z, out.beta, ridge);
  out.trace.push_back(obj);
  Eigen::VectorXd pen = Eigen::VectorXd::Constant(p, ridge);
  pen(0) = 0.0;
  for (int it = 0; it < opt.max_iter; ++it) {
    const Eigen::VectorXd eta = xa * out.beta;
    Eigen::VectorXd mu(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu(i) = expit(eta(i));
      w(i) = mu(i) * (1.0 - mu(i));
    }
    // gradient of (objective / 2)
    const Eigen::VectorXd grad = xa.transpose() * (mu - z) + pen.cwiseProduct(out.beta);
    if (grad.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      out.converged = true;
      break;
    }
    Eigen::MatrixXd h = xa.transpose() * w.asDiagonal() * xa;
    h.diagonal() += pen;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    const double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * std::max(dmax, 1.0))) {
      out.singular = true;
      break;
    }
    const Eigen::VectorXd step = ldlt.solve(grad);
    // Newton decrement below rounding of the objective: the line search can
    // no longer tell steps apart, so take the full step and stop.
    if (grad.dot(step) <= 1e-15 * (1.0 + std::abs(obj))) {
      out.beta -= step;
      obj = logistic_objective(xa, z, out.beta, ridge);
      ++out.iterations;
      out.trace.push_back(obj);
      out.converged = true;
      break;
    }
    double scale = 1.0;
    bool accepted = false;
    for (int half = 0; half < 40; ++half, scale *= 0.5) {
      const Eigen::VectorXd cand = out.beta - scale * step;
      const double cobj = logistic_objective(xa, z, cand, ridge);
      if (cobj <= obj) {
        out.beta = cand;
        obj = cobj;
        accepted = true;
        break;
      }
    }
    ++out.iterations;
    out.trace.push_back(obj);
    if (!accepted) {
      // no descent available at machine precision: stationary
      out.converged = grad.lpNorm<Eigen::Infinity>() < 1e3 * opt.grad_tol;
      break;
    }
  }
  return out;
}

}  // namespace detail

// Maximum-likelihood logistic fit by IRLS with step halving. Falls back to a
// ridge-penalized fit when the information matrix is singular, the iteration
// does not converge, or the fitted probabilities saturate (separation).
inline LogisticFit fit_logistic(const Eigen::MatrixXd& x, std::span<const int> z,
                                const LogisticOptions& opt = {}) {
  const Eigen::Index n = x.rows();
  if (static_cast<std::size_t>(n) != z.size()) throw InputError("fit_logistic: X/Z length mismatch");
  if (n <= x.cols()) throw InputError("fit_logistic: need more rows than covariates");
  Eigen::MatrixXd xa(n, x.cols() + 1);
  xa.col(0).setOnes();
  xa.rightCols(x.cols()) = x;
  Eigen::VectorXd zv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (z[i] != 0 && z[i] != 1) throw InputError("fit_logistic: Z must be binary");
    zv(i) = z[i];
  }
  if (zv.sum() == 0.0 || zv.sum() == static_cast<double>(n))
    throw InputError("fit_logistic: all labels identical");

  auto saturated = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = xa * beta;
    for (Eigen::Index i = 0; i < n; ++i)
      if (std::abs(eta(i)) > 20.0) return true;
    return false;
  };

  auto res = detail::irls(xa, zv, 0.0, opt);
  double ridge = 0.0;
  if (!res.converged || res.singular || saturated(res.beta)) {
    ridge = opt.ridge;
    res = detail::irls(xa, zv, ridge, opt);
    if (!res.converged)
      throw NumericalError("fit_logistic: no convergence after " + std::to_string(opt.max_iter) +
                           " iterations (last deviance " + std::to_string(res.trace.back()) + ")");
  }
  LogisticFit fit;
  fit.coef = res.beta;
  fit.objective_trace = std::move(res.trace);
  fit.iterations = res.iterations;
  fit.ridge = ridge;
  fit.fitted = fit.predict(x);
  return fit;
}

// ---------------------------------------------------------------------------
// Gradient boosting

struct RegressionTree {
  struct Node {
    int feature = -1;  // -1 for leaves
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  std::vector<Node> nodes;

  template <typename Row>
  double predict(const Row& row) const {
    int k = 0;
    while (nodes[k].feature >= 0) k = row(nodes[k].feature) <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
    return nodes[k].value;
  }
};

struct GbmModel {
  double base_score = 0.0;
  std::vector<RegressionTree> trees;
  std::vector<double> train_loss;  // mean log-loss after 0, 1, ..., rounds trees

  double raw_score(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    double s = base_score;
    for (const auto& t : trees) s += t.predict(row);
    return s;
  }

  std::vector<double> predict(const Eigen::MatrixXd& x) const {
    std::vector<double> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out[i] = expit(std::clamp(raw_score(x.row(i)), -30.0, 30.0));
    return out;
  }
};

namespace detail {

inline double mean_log_loss(std::span<const double> score, std::span<const int> z) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double t = score[i];
    const double softplus = t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
    s += softplus - z[i] * t;
  }
  return s / static_cast<double>(z.size());
}

// Level-wise exact greedy tree growth. Each feature is sorted once per
// fit; a level is grown by one pass over every feature's sorted order with
// per-node running sums, so each candidate threshold of a node is visited in
// ascending order exactly as a per-node sort would visit it.
class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& x, const std::vector<std::vector<std::size_t>>& sorted,
              const std::vector<double>& g, const std::vector<double>& h, const GbmOptions& opt)
      : x_(x), sorted_(sorted), g_(g), h_(h), opt_(opt) {}

  RegressionTree build() {
    const std::size_t n = static_cast<std::size_t>(x_.rows());
    RegressionTree tree;
    tree.nodes.emplace_back();
    std::vector<int> node_of(n, 0);   // node id per sample, -1 once in a finished leaf
    std::vector<int> frontier{0};
    for (int depth = 0; !frontier.empty(); ++depth) {
      const std::size_t width = frontier.size();
      std::vector<int> slot(tree.nodes.size(), -1);
      for (std::size_t k = 0; k < width; ++k) slot[frontier[k]] = static_cast<int>(k);
      std::vector<double> gs(width, 0.0), hs(width, 0.0);
      std::vector<std::size_t> count(width, 0);
      for (std::size_t i = 0; i < n; ++i) {
        if (node_of[i] < 0) continue;
        const int k = slot[node_of[i]];
        gs[k] += g_[i];
        hs[k] += h_[i];
        ++count[k];
      }
      std::vector<Split> best(width);
      if (depth < opt_.max_depth) {
        std::vector<double> gl(width), hl(width), last(width);
        std::vector<char> seen(width);
        for (Eigen::Index f = 0; f < x_.cols(); ++f) {
          std::fill(gl.begin(), gl.end(), 0.0);
          std::fill(hl.begin(), hl.end(), 0.0);
          std::fill(seen.begin(), seen.end(), 0);
          for (std::size_t i : sorted_[f]) {
            if (node_of[i] < 0) continue;
            const int k = slot[node_of[i]];
            const double v = x_(i, f);
            if (seen[k] && v != last[k]) {
              const double hr = hs[k] - hl[k];
              if (hl[k] >= opt_.min_child_weight && hr >= opt_.min_child_weight) {
                const double gain = score(gl[k], hl[k]) + score(gs[k] - gl[k], hr) - score(gs[k], hs[k]);
                if (gain > best[k].gain + 1e-12) {
                  best[k].gain = gain;
                  best[k].feature = static_cast<int>(f);
                  best[k].threshold = 0.5 * (last[k] + v);
                }
              }
            }
            gl[k] += g_[i];
            hl[k] += h_[i];
            last[k] = v;
            seen[k] = 1;
          }
        }
      }
      std::vector<int> next;
      for (std::size_t k = 0; k < width; ++k) {
        const int id = frontier[k];
        if (best[k].feature < 0 || count[k] < 2) {
          tree.nodes[id].value = opt_.eta * (-gs[k] / (hs[k] + opt_.lambda));
          continue;
        }
        tree.nodes[id].feature = best[k].feature;
        tree.nodes[id].threshold = best[k].threshold;
        tree.nodes[id].left = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes[id].right = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        next.push_back(tree.nodes[id].left);
        next.push_back(tree.nodes[id].right);
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (node_of[i] < 0) continue;
        const auto& node = tree.nodes[node_of[i]];
        if (node.feature < 0) {
          node_of[i] = -1;
        } else {
          node_of[i] = x_(static_cast<Eigen::Index>(i), node.feature) <= node.threshold ? node.left : node.right;
        }
      }
      frontier = std::move(next);
    }
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  double score(double gsum, double hsum) const { return gsum * gsum / (hsum + opt_.lambda); }

  const Eigen::MatrixXd& x_;
  const std::vector<std::vector<std::size_t>>& sorted_;
  const std::vector<double>& g_;
  const std::vector<double>& h_;
  const GbmOptions& opt_;
};

}  // namespace detail

// Second-order gradient boosting of depth-limited regression trees on the
// logistic loss. Deterministic: no row or column subsampling.
inline GbmModel fit_gbm(const Eigen::MatrixXd& x, std::span<const int> z, const GbmOptions& opt = {}) {
  if (opt.rounds < 1) throw InputError("fit_gbm: rounds must be >= 1");
  if (opt.max_depth < 1) throw InputError("fit_gbm: depth must be >= 1");
  const std::size_t n = static_cast<std::size_t>(x.rows());
  if (n != z.size()) throw InputError("fit_gbm: X/Z length mismatch");
  std::size_t treated = 0;
  for (int v : z) {
    if (v != 0 && v != 1) throw InputError("fit_gbm: Z must be binary");
    treated += static_cast<std::size_t>(v);
  }
  if (treated == 0 || treated == n) throw InputError("fit_gbm: degenerate labels (all 0 or all 1)");

  GbmModel model;
  model.base_score = logit(static_cast<double>(treated) / static_cast<double>(n));
  std::vector<std::vector<std::size_t>> sorted(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index f = 0; f < x.cols(); ++f) {
    auto& order = sorted[static_cast<std::size_t>(f)];
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double va = x(static_cast<Eigen::Index>(a), f), vb = x(static_cast<Eigen::Index>(b), f);
      return va < vb || (va == vb && a < b);
    });
  }
  std::vector<double> score(n, model.base_score), g(n), h(n);
  model.train_loss.push_back(detail::mean_log_loss(score, z));
  for (int r = 0; r < opt.rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = expit(score[i]);
      g[i] = p - z[i];
      h[i] = std::max(p * (1.0 - p), 1e-16);
    }
    auto tree = detail::TreeBuilder(x, sorted, g, h, opt).build();
    for (std::size_t i = 0; i < n; ++i) score[i] += tree.predict(x.row(static_cast<Eigen::Index>(i)));
    model.trees.push_back(std::move(tree));
    model.train_loss.push_back(detail::mean_log_loss(score, z));
  }
  return model;
}

// e_reg = min(max(e, rho), 1 - rho).
inline std::vector<double> clamp_scores(std::span<const double> e, double rho = 0.1) {
  if (!(rho > 0.0 && rho < 0.5)) throw std::invalid_argument("clamp_scores: rho must lie in (0, 0.5)");
  std::vector<double> out(e.begin(), e.end());
  for (double& v : out) v = std::clamp(v, rho, 1.0 - rho);
  return out;
}

// Fitted (in-sample) propensity scores for a unit table, per the learner spec.
// The external learner reads the e_hat column.
inline std::vector<double> estimate_propensity(const UnitTable& t, const PropensityModelSpec& spec) {
  spec.validate();
  if (spec.learner == Learner::external) {
    std::vector<double> e;
    e.reserve(t.size());
    for (const auto& u : t.units) {
      if (!u.e_hat) throw InputError("learner 'external' requires an e_hat column");
      e.push_back(*u.e_hat);
    }
    return e;
  }
  if (t.covariate_count() == 0) throw InputError("propensity learner needs covariates");
  const auto x = covariate_matrix(t.units, t.covariate_count());
  const auto z = treatment_vector(t.units);
  if (spec.learner == Learner::logistic) return fit_logistic(x, z, spec.logistic).fitted;
  return fit_gbm(x, z, spec.gbm).predict(x);
}

}  // namespace riim

#pragma once

// Optimal full matching on a scalar score. Every emitted set holds one
// treated unit with one or more controls, or one control with several
// treated units; the objective is the sum of |score_t - score_c| over the
// treated-control pairs inside each set.
//
// Solved exactly as a degree-constrained minimum-weight edge cover of the
// treated/control bipartite graph: every unit gets degree in
// [1, max_set_size - 1]. Any minimal cover is a forest of stars, and a star is
// exactly a valid matched set, so the optimal cover is an optimal full
// matching. The cover is found by successive shortest paths on a min-cost
// flow network with lower bounds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "riim/errors.hpp"
#include "riim/matched_design.hpp"

namespace riim {

struct MatchSpec {
  std::optional<double> caliper;  // max |score difference| of a treated-control pair
  std::size_t max_set_size = 8;

  void validate() const {
    if (max_set_size < 2) throw InputError("max_set_size must be >= 2");
    if (caliper && !(*caliper > 0.0)) throw InputError("caliper must be positive");
  }
};

struct MatchResult {
  std::vector<std::vector<std::size_t>> sets;  // unit indices, ascending; sets ordered by first unit
  std::vector<std::size_t> dropped;            // units left out under the caliper, ascending
  double cost = 0.0;
};

namespace detail {

// Correctly rounded sum of a list of doubles (Shewchuk's partials). Partitions
// whose exact costs tie then report the same double.
class ExactSum {
 public:
  void add(double x) {
    std::size_t k = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[k++] = lo;
      x = hi;
    }
    partials_.resize(k);
    partials_.push_back(x);
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    auto n = partials_.size();
    double hi = partials_[--n], lo = 0.0;
    while (n > 0) {
      const double x = hi, y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round half-even across the remaining partials.
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0, x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

inline void add_set_cost(ExactSum& acc, std::span<const std::size_t> set, std::span<const double> score,
                         std::span<const int> z) {
  for (std::size_t a : set)
    if (z[a])
      for (std::size_t b : set)
        if (!z[b]) {
          const bool up = score[a] >= score[b];
          acc.add(up ? score[a] : -score[a]);
          acc.add(up ? -score[b] : score[b]);
        }
}

}  // namespace detail

// Sum of |score_t - score_c| over treated-control pairs of one set, computed
// exactly and rounded once.
inline double set_cost(std::span<const std::size_t> set, std::span<const double> score,
                       std::span<const int> z) {
  detail::ExactSum acc;
  detail::add_set_cost(acc, set, score, z);
  return acc.value();
}

// Total cost of a partition, also exact before the final rounding, so two
// routes to tied partitions report bit-identical objectives.
inline double partition_cost(const std::vector<std::vector<std::size_t>>& sets, std::span<const double> score,
                             std::span<const int> z) {
  detail::ExactSum acc;
  for (const auto& s : sets) detail::add_set_cost(acc, s, score, z);
  return acc.value();
}

namespace detail {

inline void check_match_inputs(std::span<const double> score, std::span<const int> z,
                               const MatchSpec& spec) {
  spec.validate();
  if (score.size() != z.size()) throw InputError("match: score/treatment length mismatch");
  for (double v : score)
    if (!std::isfinite(v)) throw InputError("match: non-finite score");
  for (int v : z)
    if (v != 0 && v != 1) throw InputError("match: treatment must be binary");
}

inline bool admissible(double a, double b, const MatchSpec& spec) {
  return !spec.caliper || std::abs(a - b) <= *spec.caliper;
}

// Units with no admissible partner of the opposite arm.
inline std::vector<std::size_t> caliper_drops(std::span<const double> score, std::span<const int> z,
                                              const MatchSpec& spec) {
  std::vector<std::size_t> dropped;
  for (std::size_t a = 0; a < z.size(); ++a) {
    bool ok = false;
    for (std::size_t b = 0; b < z.size() && !ok; ++b)
      ok = z[b] != z[a] && admissible(score[a], score[b], spec);
    if (!ok) dropped.push_back(a);
  }
  return dropped;
}

[[noreturn]] inline void throw_infeasible(std::size_t treated, std::size_t controls,
                                          const MatchSpec& spec, const std::string& why) {
  throw InfeasibleError("no feasible full matching: " + std::to_string(treated) + " treated, " +
                        std::to_string(controls) + " controls, max set size " +
                        std::to_string(spec.max_set_size) +
                        (spec.caliper ? ", caliper " + std::to_string(*spec.caliper) : "") + " (" +
                        why + ")");
}

class MinCostFlow {
 public:
  explicit MinCostFlow(int n) : graph_(n), potential_(n, 0.0), dist_(n), prev_arc_(n) {}

  int add_arc(int from, int to, long cap, double cost) {
    graph_[from].push_back(static_cast<int>(arcs_.size()));
    arcs_.push_back({to, cap, cost});
    graph_[to].push_back(static_cast<int>(arcs_.size()));
    arcs_.push_back({from, 0, -cost});
    return static_cast<int>(arcs_.size()) - 2;
  }

  long flow_on(int arc) const { return arcs_[arc ^ 1].cap; }
  double potential(int node) const { return potential_[node]; }

  // Successive shortest paths with Johnson potentials. Requires non-negative
  // arc costs on entry. Returns the total flow sent (<= limit).
  long run(int s, int t, long limit) {
    long sent = 0;
    const double inf = std::numeric_limits<double>::infinity();
    using Item = std::pair<double, int>;
    while (sent < limit) {
      std::fill(dist_.begin(), dist_.end(), inf);
      std::fill(prev_arc_.begin(), prev_arc_.end(), -1);
      std::vector<char> done(graph_.size(), 0);
      std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
      dist_[s] = 0.0;
      heap.push({0.0, s});
      while (!heap.empty()) {
        auto [d, v] = heap.top();
        heap.pop();
        if (done[v]) continue;
        done[v] = 1;
        if (v == t) break;
        for (int a : graph_[v]) {
          const auto& arc = arcs_[a];
          if (arc.cap <= 0) continue;
          // reduced costs are >= 0 up to rounding; clamp the rounding away
          const double rc = std::max(0.0, arc.cost + potential_[v] - potential_[arc.to]);
          const double nd = d + rc;
          if (nd < dist_[arc.to]) {
            dist_[arc.to] = nd;
            prev_arc_[arc.to] = a;
            heap.push({nd, arc.to});
          }
        }
      }
      if (!done[t]) break;
      const double dt = dist_[t];
      for (std::size_t v = 0; v < graph_.size(); ++v)
        potential_[v] += done[v] ? dist_[v] : dt;
      long push = limit - sent;
      for (int v = t; v != s; v = arcs_[prev_arc_[v] ^ 1].to) push = std::min(push, arcs_[prev_arc_[v]].cap);
      for (int v = t; v != s; v = arcs_[prev_arc_[v] ^ 1].to) {
        arcs_[prev_arc_[v]].cap -= push;
        arcs_[prev_arc_[v] ^ 1].cap += push;
      }
      sent += push;
    }
    return sent;
  }

 private:
  struct Arc {
    int to;
    long cap;
    double cost;
  };
  std::vector<std::vector<int>> graph_;
  std::vector<Arc> arcs_;
  std::vector<double> potential_;
  std::vector<double> dist_;
  std::vector<int> prev_arc_;
};

}  // namespace detail

inline MatchResult full_match(std::span<const double> score, std::span<const int> z,
                              const MatchSpec& spec = {}) {
  detail::check_match_inputs(score, z, spec);
  const std::size_t n = z.size();
  const std::size_t n_treated = static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
  if (n_treated == 0 || n_treated == n)
    detail::throw_infeasible(n_treated, n - n_treated, spec, "need at least one unit in each arm");

  MatchResult result;
  result.dropped = detail::caliper_drops(score, z, spec);
  std::vector<char> keep(n, 1);
  for (std::size_t u : result.dropped) keep[u] = 0;
  std::vector<std::size_t> treated, controls;
  for (std::size_t u = 0; u < n; ++u)
    if (keep[u]) (z[u] ? treated : controls).push_back(u);
  if (treated.empty() || controls.empty())
    detail::throw_infeasible(n_treated, n - n_treated, spec, "every unit dropped by the caliper");
  const long cap = static_cast<long>(spec.max_set_size) - 1;
  if (!spec.caliper && (static_cast<long>(treated.size()) > cap * static_cast<long>(controls.size()) ||
                        static_cast<long>(controls.size()) > cap * static_cast<long>(treated.size())))
    detail::throw_infeasible(treated.size(), controls.size(), spec, "arm sizes exceed set-size cap");

  // Nodes: 0 = S, 1 = K, 2 = super source, 3 = super sink, then treated, then controls.
  const int nt = static_cast<int>(treated.size());
  const int nc = static_cast<int>(controls.size());
  const int src = 0, sink = 1, ss = 2, tt = 3, t0 = 4, c0 = 4 + nt;
  struct Edge {
    std::size_t t, c;
    int arc;
  };
  // Under a caliper a unit may also be left out, at a price above any total
  // distance, so the matcher keeps as many units as it can and then minimizes
  // distance. A unit with no edges is forced onto its bypass arc.
  const double omit_cost = spec.caliper ? 1.0 + static_cast<double>(n) * *spec.caliper : 0.0;
  // Candidate arcs start as each unit's nearest opposite-arm neighbours.
  // After solving, every omitted admissible arc is priced against the final
  // potentials; arcs with negative reduced cost are added and the problem is
  // re-solved. A flow with no negative reduced cost on the full arc set is
  // optimal for the full problem, so pruning never changes the answer.
  std::vector<std::vector<char>> candidate(static_cast<std::size_t>(nt), std::vector<char>(nc, 0));
  std::size_t near = 2 * spec.max_set_size;
  const auto add_neighbours = [&] {
    std::vector<int> order;
    for (int i = 0; i < nt; ++i) {
      order.resize(static_cast<std::size_t>(nc));
      std::iota(order.begin(), order.end(), 0);
      const double a = score[treated[i]];
      const std::size_t k = std::min<std::size_t>(near, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), [&](int x, int y) {
        const double dx = std::abs(a - score[controls[x]]), dy = std::abs(a - score[controls[y]]);
        return dx < dy || (dx == dy && x < y);
      });
      for (std::size_t r = 0; r < k; ++r) candidate[i][order[r]] = 1;
    }
    for (int j = 0; j < nc; ++j) {
      order.resize(static_cast<std::size_t>(nt));
      std::iota(order.begin(), order.end(), 0);
      const double b = score[controls[j]];
      const std::size_t k = std::min<std::size_t>(near, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), [&](int x, int y) {
        const double dx = std::abs(b - score[treated[x]]), dy = std::abs(b - score[treated[y]]);
        return dx < dy || (dx == dy && x < y);
      });
      for (std::size_t r = 0; r < k; ++r) candidate[order[r]][j] = 1;
    }
  };
  add_neighbours();
  const long need = static_cast<long>(nt + nc);
  std::vector<Edge> edges;
  std::optional<detail::MinCostFlow> solved;
  for (bool full = false;;) {
    detail::MinCostFlow flow(4 + nt + nc);
    flow.add_arc(sink, src, static_cast<long>(n), 0.0);
    flow.add_arc(ss, sink, nc, 0.0);
    flow.add_arc(src, tt, nt, 0.0);
    for (int i = 0; i < nt; ++i) {
      if (cap > 1) flow.add_arc(src, t0 + i, cap - 1, 0.0);
      flow.add_arc(ss, t0 + i, 1, 0.0);
      if (spec.caliper) flow.add_arc(t0 + i, src, 1, omit_cost);
    }
    for (int j = 0; j < nc; ++j) {
      if (cap > 1) flow.add_arc(c0 + j, sink, cap - 1, 0.0);
      flow.add_arc(c0 + j, tt, 1, 0.0);
      if (spec.caliper) flow.add_arc(sink, c0 + j, 1, omit_cost);
    }
    edges.clear();
    for (int i = 0; i < nt; ++i)
      for (int j = 0; j < nc; ++j) {
        const double a = score[treated[i]], b = score[controls[j]];
        if ((full || candidate[i][j]) && detail::admissible(a, b, spec))
          edges.push_back({treated[i], controls[j], flow.add_arc(t0 + i, c0 + j, 1, std::abs(a - b))});
      }
    if (flow.run(ss, tt, need) != need) {
      if (full) detail::throw_infeasible(treated.size(), controls.size(), spec, "caliper and set-size constraints");
      // The neighbour graph can be infeasible where one arm crowds out the
      // other; widen it, and fall back to every arc once it covers both arms.
      near *= 2;
      if (near >= static_cast<std::size_t>(std::max(nt, nc)))
        full = true;
      else
        add_neighbours();
      continue;
    }
    bool improved = false;
    for (int i = 0; i < nt && !full; ++i)
      for (int j = 0; j < nc; ++j) {
        if (candidate[i][j]) continue;
        const double a = score[treated[i]], b = score[controls[j]];
        if (!detail::admissible(a, b, spec)) continue;
        const double reduced = std::abs(a - b) + flow.potential(t0 + i) - flow.potential(c0 + j);
        if (reduced < -1e-12) {
          candidate[i][j] = 1;
          improved = true;
        }
      }
    if (!improved) {
      solved.emplace(std::move(flow));
      break;
    }
  }
  const auto& flow = *solved;

  // Edge set of the cover. Prune edges whose endpoints are both covered
  // elsewhere (only zero-cost edges can be redundant in an optimum), most
  // expensive first, until every component is a star.
  std::vector<Edge> used;
  std::vector<int> degree(n, 0);
  for (const auto& e : edges)
    if (flow.flow_on(e.arc) > 0) {
      used.push_back(e);
      ++degree[e.t];
      ++degree[e.c];
    }
  std::stable_sort(used.begin(), used.end(), [&](const Edge& a, const Edge& b) {
    return std::abs(score[a.t] - score[a.c]) > std::abs(score[b.t] - score[b.c]);
  });
  std::vector<Edge> kept;
  for (const auto& e : used) {
    if (degree[e.t] >= 2 && degree[e.c] >= 2) {
      --degree[e.t];
      --degree[e.c];
    } else {
      kept.push_back(e);
    }
  }

  // Stars: the center is the endpoint with degree >= 2 (either one for a pair).
  std::vector<std::vector<std::size_t>> groups;
  std::vector<int> group_of(n, -1);
  for (const auto& e : kept) {
    const std::size_t center = degree[e.c] >= 2 ? e.c : e.t;
    const std::size_t leaf = center == e.t ? e.c : e.t;
    if (group_of[center] < 0) {
      group_of[center] = static_cast<int>(groups.size());
      groups.push_back({center});
    }
    groups[group_of[center]].push_back(leaf);
    group_of[leaf] = group_of[center];
  }
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end());
  for (std::size_t u : treated)
    if (group_of[u] < 0) result.dropped.push_back(u);
  for (std::size_t u : controls)
    if (group_of[u] < 0) result.dropped.push_back(u);
  std::sort(result.dropped.begin(), result.dropped.end());
  if (groups.empty()) detail::throw_infeasible(n_treated, n - n_treated, spec, "caliper and set-size constraints");
  result.cost = partition_cost(groups, score, z);
  result.sets = std::move(groups);
  return result;
}

inline constexpr std::size_t kMaxBruteForceUnits = 10;

// Exhaustive search over all set partitions of the retained units. Oracle for
// full_match: the same caliper drop rule is applied first, and under a caliper
// the fewest further omissions win, then the lowest cost.
inline MatchResult brute_force_full_match(std::span<const double> score, std::span<const int> z,
                                          const MatchSpec& spec = {}) {
  detail::check_match_inputs(score, z, spec);
  if (z.size() > kMaxBruteForceUnits)
    throw std::length_error("brute_force_full_match: more than " +
                            std::to_string(kMaxBruteForceUnits) + " units");
  const std::size_t n_treated = static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
  const auto pre_dropped = detail::caliper_drops(score, z, spec);
  std::vector<std::size_t> units;
  for (std::size_t u = 0; u < z.size(); ++u)
    if (std::find(pre_dropped.begin(), pre_dropped.end(), u) == pre_dropped.end()) units.push_back(u);
  if (units.empty()) detail::throw_infeasible(n_treated, z.size() - n_treated, spec, "no units");

  auto valid = [&](const std::vector<std::size_t>& s) {
    if (s.size() > spec.max_set_size) return false;
    std::size_t t = 0;
    for (std::size_t u : s) t += static_cast<std::size_t>(z[u]);
    if (t == 0 || t == s.size() || std::min(t, s.size() - t) != 1) return false;
    for (std::size_t a : s)
      for (std::size_t b : s)
        if (z[a] && !z[b] && !detail::admissible(score[a], score[b], spec)) return false;
    return true;
  };

  MatchResult best;
  bool found = false;
  // Best partition of exactly these units, if any.
  auto search = [&](const std::vector<std::size_t>& kept, const std::vector<std::size_t>& dropped) {
    // Restricted growth strings enumerate each set partition once.
    const std::size_t m = kept.size();
    std::vector<std::size_t> label(m, 0), max_label(m, 0);
    while (true) {
      const std::size_t blocks = 1 + *std::max_element(label.begin(), label.end());
      std::vector<std::vector<std::size_t>> part(blocks);
      for (std::size_t k = 0; k < m; ++k) part[label[k]].push_back(kept[k]);
      if (std::all_of(part.begin(), part.end(), valid)) {
        const double c = partition_cost(part, score, z);
        if (!found || c < best.cost) {
          found = true;
          best.cost = c;
          best.sets = std::move(part);
          best.dropped = dropped;
        }
      }
      std::size_t k = m;
      while (k-- > 1) {
        if (label[k] <= max_label[k - 1]) break;
      }
      if (k == 0 || k >= m) break;
      ++label[k];
      for (std::size_t j = k + 1; j < m; ++j) label[j] = 0;
      for (std::size_t j = k; j < m; ++j) max_label[j] = std::max(max_label[j - 1], label[j]);
    }
  };

  const std::size_t m = units.size();
  const std::size_t max_omit = spec.caliper ? m - 1 : 0;
  for (std::size_t omit = 0; omit <= max_omit && !found; ++omit) {
    std::vector<char> mask(m, 0);
    std::fill(mask.end() - static_cast<long>(omit), mask.end(), 1);
    do {
      std::vector<std::size_t> kept, dropped = pre_dropped;
      for (std::size_t k = 0; k < m; ++k) (mask[k] ? dropped : kept).push_back(units[k]);
      std::sort(dropped.begin(), dropped.end());
      search(kept, dropped);
    } while (std::next_permutation(mask.begin(), mask.end()));
  }
  if (!found) detail::throw_infeasible(n_treated, z.size() - n_treated, spec, "exhaustive search");
  for (auto& s : best.sets) std::sort(s.begin(), s.end());
  std::sort(best.sets.begin(), best.sets.end());
  return best;
}

// Assemble a MatchedDataset from a unit table and a matching. Set ids are
// "1".."I" in set order; the matching score is stored as e_hat.
inline MatchedDataset matched_dataset(const UnitTable& table, const MatchResult& match,
                                      std::span<const double> score = {}) {
  UnitTable out;
  out.covariate_names = table.covariate_names;
  for (std::size_t i = 0; i < match.sets.size(); ++i) {
    for (std::size_t u : match.sets[i]) {
      UnitRecord rec = table.units[u];
      rec.set_id = std::to_string(i + 1);
      if (!score.empty()) rec.e_hat = score[u];
      out.units.push_back(std::move(rec));
    }
  }
  return MatchedDataset::from_table(std::move(out));
}

// True iff every post-matching |SMD| is below the threshold; degenerate rows fail.
inline bool apply_balance_gate(const MatchedDataset& ds, double threshold = 0.2,
                               const UnitTable* pre_matching = nullptr) {
  for (const auto& row : balance_table(ds, pre_matching))
    if (row.degenerate || !(std::abs(row.smd_post) < threshold)) return false;
  return true;
}

}  // namespace riim

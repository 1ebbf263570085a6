// riim: command-line front end for matched-design randomization inference.
//
//   riim analyze-ate  --input matched.csv --out report.json [--estimator dim,ippw,fpw] ...
//   riim analyze-iv   --input matched.csv --out report.json [--grid-range a,b] ...
//   riim match        --input units.csv   --out matched.csv [--caliper r] [--max-set-size k]
//   riim balance      --input matched.csv --out balance.csv [--pre units.csv]
//   riim simulate     --study ate --model 1 --reps 1000 --seed 7 --out summary.csv
//
// Exit codes: 0 success, 2 input error, 3 numerical or feasibility error.
// Every successful run writes <out>.manifest.json next to its output.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "riim/riim.hpp"

#ifndef RIIM_VERSION
#define RIIM_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr const char* kReportSchema = "riim-report/v1";

// FNV-1a, 64-bit. Used only to fingerprint inputs in the manifest.
std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw riim::InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
  return std::string("fnv1a64:") + buf;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// JSON has no infinities or NaN; they become null.
ordered_json number_or_null(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

struct Common {
  std::string input;
  std::string out;
  std::uint64_t seed = 1;
  double alpha = 0.05;
  std::optional<double> gamma;
  double clamp_rho = 0.1;
  std::string q = "unit";
  std::string prob_source = "plugin";
  std::string learner = "gbm";
  std::optional<int> gbm_rounds, gbm_depth;
  std::optional<double> gbm_eta, ridge;

  double gamma_or_default() const { return gamma.value_or(0.1); }
};

void add_common(CLI::App* cmd, Common& c, bool with_input = true) {
  if (with_input) cmd->add_option("--input", c.input, "Input CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output path (written atomically)")->required();
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--alpha", c.alpha, "Significance level")->capture_default_str();
  cmd->add_option("--gamma", c.gamma, "Regularization threshold for post-matching probabilities");
  cmd->add_option("--clamp-rho", c.clamp_rho, "Clamp for propensity scores in weighting")->capture_default_str();
  cmd->add_option("--q", c.q, "Variance design matrix: unit, weights, covmeans")
      ->check(CLI::IsMember({"unit", "weights", "covmeans"}))
      ->capture_default_str();
  cmd->add_option("--prob-source", c.prob_source, "uniform, plugin, or oracle-file (p_hat column)")
      ->check(CLI::IsMember({"uniform", "plugin", "oracle-file"}))
      ->capture_default_str();
  cmd->add_option("--learner", c.learner, "Propensity learner: gbm, logistic, external (e_hat column)")
      ->check(CLI::IsMember({"gbm", "logistic", "external"}))
      ->capture_default_str();
  cmd->add_option("--gbm-rounds", c.gbm_rounds, "Boosting rounds (default 100)");
  cmd->add_option("--gbm-depth", c.gbm_depth, "Maximum tree depth (default 3)");
  cmd->add_option("--gbm-eta", c.gbm_eta, "Learning rate (default 0.1)");
  cmd->add_option("--ridge", c.ridge, "Ridge penalty for the logistic fallback fit (default 1e-3)");
}

// Explicit learner hyperparameters override whatever spec already holds.
void apply_learner_options(riim::PropensityModelSpec& spec, const Common& c) {
  if (c.gbm_rounds) spec.gbm.rounds = *c.gbm_rounds;
  if (c.gbm_depth) spec.gbm.max_depth = *c.gbm_depth;
  if (c.gbm_eta) spec.gbm.eta = *c.gbm_eta;
  if (c.ridge) spec.logistic.ridge = *c.ridge;
}

ordered_json common_options(const Common& c) {
  ordered_json o;
  o["input"] = c.input;
  o["out"] = c.out;
  o["seed"] = c.seed;
  o["alpha"] = c.alpha;
  o["gamma"] = c.gamma ? ordered_json(*c.gamma) : ordered_json(nullptr);
  o["clamp_rho"] = c.clamp_rho;
  o["q"] = c.q;
  o["prob_source"] = c.prob_source;
  o["learner"] = c.learner;
  const auto opt = [](const auto& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  o["gbm_rounds"] = opt(c.gbm_rounds);
  o["gbm_depth"] = opt(c.gbm_depth);
  o["gbm_eta"] = opt(c.gbm_eta);
  o["ridge"] = opt(c.ridge);
  return o;
}

void write_manifest(const std::string& command, const ordered_json& options,
                    const std::vector<fs::path>& inputs, std::uint64_t seed, const fs::path& out) {
  ordered_json m;
  m["schema"] = "riim-manifest/v1";
  m["command"] = command;
  m["options"] = options;
  m["inputs"] = ordered_json::array();
  for (const auto& p : inputs) m["inputs"].push_back({{"path", p.string()}, {"digest", file_digest(p)}});
  m["tool_version"] = RIIM_VERSION;
  m["seed"] = seed;
  m["timestamp"] = utc_timestamp();
  riim::csv::write_atomic(out.string() + ".manifest.json", m.dump(2) + "\n");
}

riim::PropensityModelSpec propensity_spec(const Common& c) {
  riim::PropensityModelSpec spec;
  spec.learner = riim::parse_learner(c.learner);
  spec.clamp_rho = c.clamp_rho;
  apply_learner_options(spec, c);
  spec.validate();
  return spec;
}

// Propensity scores for the units of a matched dataset: the e_hat column when
// present (or when the learner is external), otherwise a fresh fit.
std::vector<double> dataset_scores(const riim::MatchedDataset& ds, const Common& c) {
  auto spec = propensity_spec(c);
  if (ds.has_e_hat()) spec.learner = riim::Learner::external;
  return riim::estimate_propensity(ds.as_table(), spec);
}

riim::AssignmentProbs resolve_probs(const riim::MatchedDataset& ds, const Common& c) {
  if (c.gamma && !(*c.gamma > 0.0 && *c.gamma < 0.5)) throw riim::InputError("gamma must lie in (0, 0.5)");
  if (c.prob_source == "uniform") return riim::uniform_probs(ds);
  if (c.prob_source == "oracle-file") {
    if (!ds.has_p_hat()) throw riim::InputError("prob source 'oracle-file' requires a p_hat column");
    auto p = riim::imported_probs(ds, riim::ProbSource::oracle);
    // Imported probabilities are regularized only on request.
    return c.gamma ? riim::regularize_probs(p, ds, *c.gamma) : p;
  }
  const auto e = dataset_scores(ds, c);
  return riim::regularize_probs(riim::post_match_probs(ds, e), ds, c.gamma_or_default());
}

riim::MatchedDataset load_matched(const Common& c) {
  auto ds = riim::load_dataset(c.input);
  riim::require_valid_design(ds);
  return ds;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ordered_json ate_json(const riim::AteResult& r, const riim::MatchedDataset& ds) {
  ordered_json j;
  j["estimate"] = number_or_null(r.estimate);
  j["variance"] = number_or_null(r.variance);
  j["ci"] = {number_or_null(r.ci_lower), number_or_null(r.ci_upper)};
  j["alpha"] = r.alpha;
  j["estimator"] = r.estimator;
  j["q_spec"] = r.q_spec;
  j["prob_source"] = r.prob_source;
  j["I"] = ds.I();
  j["N"] = ds.N();
  return j;
}

int cmd_analyze_ate(const Common& c, const std::string& estimators) {
  const auto ds = load_matched(c);
  riim::DesignMatrixSpec qspec;
  qspec.kind = riim::parse_q(c.q);
  ordered_json report;
  report["schema"] = kReportSchema;
  report["command"] = "analyze-ate";
  report["I"] = ds.I();
  report["N"] = ds.N();
  report["results"] = ordered_json::array();
  for (const auto& name : split_list(estimators)) {
    riim::AteResult r;
    if (name == "dim") {
      r = riim::analyze_diff_in_means(ds, qspec, c.alpha);
    } else if (name == "ippw") {
      r = riim::analyze_ate(ds, resolve_probs(ds, c), qspec, c.alpha, "ippw");
    } else if (name == "fpw") {
      const auto table = ds.as_table();
      std::vector<double> y;
      for (const auto& u : table.units) y.push_back(u.y);
      const auto e = riim::clamp_scores(dataset_scores(ds, c), c.clamp_rho);
      r = riim::fpw_estimate(riim::treatment_vector(table.units), y, e, c.alpha);
    } else {
      throw riim::InputError("unknown estimator '" + name + "' (expected dim, ippw, fpw)");
    }
    report["results"].push_back(ate_json(r, ds));
  }
  if (report["results"].empty()) throw riim::InputError("no estimators requested");
  riim::csv::write_atomic(c.out, report.dump(2) + "\n");
  auto options = common_options(c);
  options["estimator"] = estimators;
  write_manifest("analyze-ate", options, {c.input}, c.seed, c.out);
  return 0;
}

ordered_json confidence_set_json(const riim::ConfidenceSet& cs) {
  ordered_json j;
  j["shape"] = std::string(riim::to_string(cs.shape));
  ordered_json lo = number_or_null(cs.lower), hi = number_or_null(cs.upper);
  if (cs.shape == riim::SetShape::whole_line || cs.shape == riim::SetShape::empty) lo = hi = nullptr;
  j["endpoints"] = {lo, hi};
  return j;
}

ordered_json iv_json(const riim::EffectRatioResult& r) {
  ordered_json j;
  j["estimator"] = r.estimator;
  j["point_estimate"] = number_or_null(r.point_estimate);
  j["confidence_set"] = confidence_set_json(r.confidence_set);
  j["alpha"] = r.alpha;
  j["weak_iv_flag"] = r.weak_iv_flag;
  j["prob_source"] = r.prob_source;
  return j;
}

int cmd_analyze_iv(const Common& c, const std::string& grid_range) {
  const auto ds = load_matched(c);
  if (!ds.has_dose()) throw riim::InputError("analyze-iv requires a 'd' column");
  const auto probs = resolve_probs(ds, c);
  ordered_json report;
  report["schema"] = kReportSchema;
  report["command"] = "analyze-iv";
  report["I"] = ds.I();
  report["N"] = ds.N();
  report["results"] = ordered_json::array();
  auto classical = riim::analyze_classical_wald(ds, c.alpha);
  classical.prob_source = "uniform";
  auto corrected = riim::analyze_effect_ratio(ds, probs, c.alpha, "bc_wald");
  corrected.prob_source = std::string(riim::to_string(probs.source));
  report["results"].push_back(iv_json(classical));
  report["results"].push_back(iv_json(corrected));
  if (!grid_range.empty()) {
    const auto parts = split_list(grid_range);
    double lo = 0.0, hi = 0.0;
    try {
      if (parts.size() != 2) throw std::invalid_argument("");
      lo = std::stod(parts[0]);
      hi = std::stod(parts[1]);
    } catch (const std::logic_error&) {
      throw riim::InputError("--grid-range expects 'a,b'");
    }
    if (!(lo < hi)) throw riim::InputError("--grid-range needs a < b");
    const auto g = riim::grid_scan_check(ds, probs, c.alpha, corrected.confidence_set, lo, hi);
    report["grid_check"] = {{"range", {lo, hi}}, {"points", g.points}, {"disagreements", g.disagreements}};
  }
  riim::csv::write_atomic(c.out, report.dump(2) + "\n");
  auto options = common_options(c);
  options["grid_range"] = grid_range;
  write_manifest("analyze-iv", options, {c.input}, c.seed, c.out);
  return 0;
}

int cmd_match(const Common& c, std::optional<double> caliper, std::size_t max_set_size,
              std::string dropped_path) {
  const auto table = riim::load_units(c.input);
  riim::MatchSpec spec;
  spec.caliper = caliper;
  spec.max_set_size = max_set_size;
  spec.validate();
  auto pspec = propensity_spec(c);
  const bool has_scores = !table.units.empty() &&
                          std::all_of(table.units.begin(), table.units.end(),
                                      [](const riim::UnitRecord& u) { return u.e_hat.has_value(); });
  if (has_scores) pspec.learner = riim::Learner::external;
  const auto z = riim::treatment_vector(table.units);
  const auto n_treated = static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
  if (n_treated == 0 || n_treated == z.size())
    throw riim::InfeasibleError("no feasible full matching: need at least one treated and one control unit");
  const auto e = riim::estimate_propensity(table, pspec);
  const auto match = riim::full_match(e, z, spec);
  const auto ds = riim::matched_dataset(table, match, e);
  riim::csv::write_atomic(c.out, riim::csv::to_string(riim::units_to_csv(ds.as_table())));

  if (dropped_path.empty()) dropped_path = (fs::path(c.out).parent_path() / "dropped.csv").string();
  riim::UnitTable dropped;
  dropped.covariate_names = table.covariate_names;
  for (std::size_t u : match.dropped) {
    auto rec = table.units[u];
    rec.e_hat = e[u];
    dropped.units.push_back(std::move(rec));
  }
  auto dropped_csv = riim::units_to_csv(dropped, false);
  dropped_csv.header.insert(dropped_csv.header.begin(), "row");
  for (std::size_t r = 0; r < dropped_csv.rows.size(); ++r)
    dropped_csv.rows[r].insert(dropped_csv.rows[r].begin(), std::to_string(match.dropped[r] + 1));
  riim::csv::write_atomic(dropped_path, riim::csv::to_string(dropped_csv));

  std::cerr << "matched " << ds.N() << " units into " << ds.I() << " sets; dropped " << match.dropped.size()
            << "; total distance " << riim::csv::format_sig(match.cost) << "\n";
  auto options = common_options(c);
  options["caliper"] = caliper ? ordered_json(*caliper) : ordered_json(nullptr);
  options["max_set_size"] = max_set_size;
  options["dropped"] = dropped_path;
  write_manifest("match", options, {c.input}, c.seed, c.out);
  return 0;
}

int cmd_balance(const Common& c, const std::string& pre_path) {
  const auto ds = riim::load_dataset(c.input);
  std::optional<riim::UnitTable> pre;
  if (!pre_path.empty()) pre = riim::load_units(pre_path);
  const auto rows = riim::balance_table(ds, pre ? &*pre : nullptr);
  riim::csv::write_atomic(c.out, riim::csv::to_string(riim::balance_to_csv(rows)));
  auto options = common_options(c);
  options["pre"] = pre_path;
  std::vector<fs::path> inputs{c.input};
  if (!pre_path.empty()) inputs.emplace_back(pre_path);
  write_manifest("balance", options, inputs, c.seed, c.out);
  return 0;
}

struct SimulateArgs {
  std::string study = "ate";
  std::string model = "1";
  std::string caliper = "off";
  std::size_t reps = 1000;
  std::size_t n = 400;
  unsigned workers = 1;
  std::string config;
  std::string estimators;
  std::string reps_out;
  std::optional<double> caliper_sd;
  std::optional<std::size_t> max_set_size;
  std::optional<double> balance_threshold;
  std::string oracle_gamma;
};

int cmd_simulate(const Common& c, const SimulateArgs& a, const CLI::App& sub) {
  riim::sim::ScenarioConfig cfg;
  // Config file first; explicit flags override it.
  if (!a.config.empty()) riim::sim::load_config_file(cfg, a.config);
  const auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  const auto set = [&](const char* key, const std::string& value) { riim::sim::apply_config_entry(cfg, key, value); };
  if (given("--study") || a.config.empty()) set("study", a.study);
  if (given("--model") || a.config.empty()) set("model", a.model);
  if (given("--caliper") || a.config.empty()) set("caliper", a.caliper);
  if (given("--reps") || a.config.empty()) cfg.reps = a.reps;
  if (given("--n") || a.config.empty()) cfg.N = a.n;
  if (given("--seed") || a.config.empty()) cfg.seed = c.seed;
  if (given("--alpha")) cfg.alpha = c.alpha;
  if (c.gamma) cfg.gamma = *c.gamma;
  if (given("--clamp-rho")) cfg.propensity.clamp_rho = c.clamp_rho;
  if (given("--learner")) cfg.propensity.learner = riim::parse_learner(c.learner);
  apply_learner_options(cfg.propensity, c);
  if (given("--estimators")) set("estimators", a.estimators);
  if (a.caliper_sd) cfg.caliper_sd = *a.caliper_sd;
  if (a.max_set_size) cfg.max_set_size = *a.max_set_size;
  if (a.balance_threshold) cfg.balance_threshold = *a.balance_threshold;
  if (!a.oracle_gamma.empty()) set("oracle-gamma", a.oracle_gamma);
  // Worker count never changes the output, so it is not part of the config.
  cfg.workers = a.workers;
  cfg.validate();

  const auto report = riim::sim::run_study(cfg);
  riim::sim::SimulationReport reports[] = {report};
  riim::csv::write_atomic(c.out, riim::csv::to_string(riim::sim::summarize(reports)));
  if (!a.reps_out.empty())
    riim::csv::write_atomic(a.reps_out, riim::csv::to_string(riim::sim::replication_table(report)));
  std::cerr << riim::sim::aligned_text(riim::sim::summarize(reports));

  ordered_json options;
  options["study"] = std::string(riim::sim::to_string(cfg.study));
  options["model"] = static_cast<int>(cfg.model);
  options["caliper"] = cfg.caliper ? "on" : "off";
  options["caliper_sd"] = cfg.caliper_sd;
  options["N"] = cfg.N;
  options["reps"] = cfg.reps;
  options["seed"] = cfg.seed;
  options["alpha"] = cfg.alpha;
  options["gamma"] = cfg.gamma;
  options["oracle_gamma"] = cfg.regularize_oracle ? "on" : "off";
  options["clamp_rho"] = cfg.propensity.clamp_rho;
  options["learner"] = std::string(riim::to_string(cfg.propensity.learner));
  options["gbm_rounds"] = cfg.propensity.gbm.rounds;
  options["gbm_depth"] = cfg.propensity.gbm.max_depth;
  options["gbm_eta"] = cfg.propensity.gbm.eta;
  options["ridge"] = cfg.propensity.logistic.ridge;
  options["max_set_size"] = cfg.max_set_size;
  options["balance_threshold"] = cfg.balance_threshold;
  options["estimators"] = cfg.resolved_estimators();
  options["workers"] = cfg.workers;
  options["out"] = c.out;
  options["reps_out"] = a.reps_out;
  std::vector<fs::path> inputs;
  if (!a.config.empty()) inputs.emplace_back(a.config);
  write_manifest("simulate", options, inputs, cfg.seed, c.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Randomization inference for inexactly matched observational studies"};
  app.set_version_flag("--version", RIIM_VERSION);
  app.require_subcommand(1);

  Common ate_c, iv_c, match_c, bal_c, sim_c;

  auto* ate = app.add_subcommand("analyze-ate", "Average treatment effect from a matched dataset");
  add_common(ate, ate_c);
  std::string ate_estimators = "dim,ippw";
  ate->add_option("--estimator", ate_estimators, "Comma list of dim, ippw, fpw")->capture_default_str();

  auto* iv = app.add_subcommand("analyze-iv", "Effect ratio from a matched instrumental-variable dataset");
  add_common(iv, iv_c);
  std::string grid_range;
  iv->add_option("--grid-range", grid_range, "Cross-check the confidence set on a 2001-point grid over a,b");

  auto* match = app.add_subcommand("match", "Optimal full matching on propensity scores");
  add_common(match, match_c);
  std::optional<double> caliper;
  std::size_t max_set_size = 8;
  std::string dropped_path;
  match->add_option("--caliper", caliper, "Maximum within-set score distance");
  match->add_option("--max-set-size", max_set_size, "Largest matched set")->capture_default_str();
  match->add_option("--dropped", dropped_path, "Where to list units dropped by the caliper (default: dropped.csv beside --out)");

  auto* bal = app.add_subcommand("balance", "Pre- and post-matching standardized mean differences");
  add_common(bal, bal_c);
  std::string pre_path;
  bal->add_option("--pre", pre_path, "Unmatched sample for the pre-matching column")->check(CLI::ExistingFile);

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study of the simulation designs");
  add_common(sim, sim_c, false);
  SimulateArgs sa;
  sim->add_option("--study", sa.study, "ate or iv")->check(CLI::IsMember({"ate", "iv"}))->capture_default_str();
  sim->add_option("--model", sa.model, "1 (logistic) or 2 (selection)")->check(CLI::IsMember({"1", "2"}))->capture_default_str();
  sim->add_option("--caliper", sa.caliper, "on or off")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  sim->add_option("--reps", sa.reps, "Replications")->capture_default_str();
  sim->add_option("--n", sa.n, "Units per replication")->capture_default_str();
  sim->add_option("--workers", sa.workers, "Worker threads")->capture_default_str();
  sim->add_option("--config", sa.config, "key=value configuration file")->check(CLI::ExistingFile);
  sim->add_option("--estimators", sa.estimators, "Comma list of estimators");
  sim->add_option("--reps-out", sa.reps_out, "Per-replication CSV");
  sim->add_option("--caliper-sd", sa.caliper_sd, "Caliper width in SDs of the estimated score");
  sim->add_option("--max-set-size", sa.max_set_size, "Largest matched set");
  sim->add_option("--balance-threshold", sa.balance_threshold, "Balance gate threshold on |SMD|");
  sim->add_option("--oracle-gamma", sa.oracle_gamma, "Regularize oracle probabilities: on or off")
      ->check(CLI::IsMember({"on", "off"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInput;
  }

  try {
    if (*ate) return cmd_analyze_ate(ate_c, ate_estimators);
    if (*iv) return cmd_analyze_iv(iv_c, grid_range);
    if (*match) return cmd_match(match_c, caliper, max_set_size, dropped_path);
    if (*bal) return cmd_balance(bal_c, pre_path);
    if (*sim) return cmd_simulate(sim_c, sa, *sim);
  } catch (const riim::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const riim::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}

#pragma once

// Matched-dataset model: units grouped into matched sets, CSV ingestion,
// design validation, set weights, and covariate balance diagnostics.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "riim/csv.hpp"
#include "riim/errors.hpp"

namespace riim {

struct UnitRecord {
  std::string set_id;
  int z = 0;
  double y = 0.0;
  std::optional<double> d;
  std::vector<double> x;
  std::optional<double> e_hat;
  std::optional<double> p_hat;
};

// Units without (or ignoring) set structure: the pre-matching sample.
struct UnitTable {
  std::vector<std::string> covariate_names;
  std::vector<UnitRecord> units;

  std::size_t size() const { return units.size(); }
  std::size_t covariate_count() const { return covariate_names.size(); }
};

struct MatchedSet {
  std::vector<std::size_t> units;  // indices into MatchedDataset::units()
  std::size_t treated = 0;

  std::size_t size() const { return units.size(); }
  std::size_t controls() const { return units.size() - treated; }
};

class MatchedDataset {
 public:
  MatchedDataset() = default;

  // Groups units by set_id (sets ordered by first appearance, units keep
  // their input order). Throws InputError for sets of size one or ragged
  // covariate vectors. Treated-count violations are left to validate_design.
  static MatchedDataset from_table(UnitTable table) {
    MatchedDataset ds;
    ds.covariate_names_ = std::move(table.covariate_names);
    ds.units_ = std::move(table.units);
    std::unordered_map<std::string, std::size_t> index;
    const std::size_t k = ds.covariate_names_.size();
    for (std::size_t u = 0; u < ds.units_.size(); ++u) {
      const auto& rec = ds.units_[u];
      if (rec.z != 0 && rec.z != 1)
        throw InputError("unit " + std::to_string(u + 1) + ": treatment must be 0 or 1");
      if (rec.x.size() != k)
        throw InputError("unit " + std::to_string(u + 1) + ": covariate dimension " +
                         std::to_string(rec.x.size()) + " != " + std::to_string(k));
      auto [it, inserted] = index.try_emplace(rec.set_id, ds.sets_.size());
      if (inserted) {
        ds.sets_.emplace_back();
        ds.set_ids_.push_back(rec.set_id);
      }
      auto& s = ds.sets_[it->second];
      s.units.push_back(u);
      s.treated += static_cast<std::size_t>(rec.z);
    }
    if (ds.units_.empty()) throw InputError("dataset has no units");
    for (std::size_t i = 0; i < ds.sets_.size(); ++i) {
      if (ds.sets_[i].size() < 2)
        throw InputError("set below minimum size: set '" + ds.set_ids_[i] + "' has 1 unit");
    }
    return ds;
  }

  const std::vector<UnitRecord>& units() const { return units_; }
  const std::vector<MatchedSet>& sets() const { return sets_; }
  const std::vector<std::string>& set_ids() const { return set_ids_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }

  std::size_t N() const { return units_.size(); }
  std::size_t I() const { return sets_.size(); }
  std::size_t K() const { return covariate_names_.size(); }

  bool has_dose() const {
    for (const auto& u : units_)
      if (!u.d) return false;
    return true;
  }
  bool has_e_hat() const {
    for (const auto& u : units_)
      if (!u.e_hat) return false;
    return true;
  }
  bool has_p_hat() const {
    for (const auto& u : units_)
      if (!u.p_hat) return false;
    return true;
  }

  UnitTable as_table() const { return UnitTable{covariate_names_, units_}; }

 private:
  std::vector<UnitRecord> units_;
  std::vector<MatchedSet> sets_;
  std::vector<std::string> set_ids_;
  std::vector<std::string> covariate_names_;
};

// Role -> column name. Empty covariate list means "every column without a role".
struct ColumnSchema {
  std::string set_id = "set_id";
  std::string z = "z";
  std::string y = "y";
  std::string d = "d";
  std::string e_hat = "e_hat";
  std::string p_hat = "p_hat";
  std::vector<std::string> covariates;
};

inline UnitTable units_from_csv(const csv::Table& t, const ColumnSchema& schema = {},
                                bool require_set_id = true) {
  const int c_set = t.column(schema.set_id);
  const int c_z = t.column(schema.z);
  const int c_y = t.column(schema.y);
  const int c_d = t.column(schema.d);
  const int c_e = t.column(schema.e_hat);
  const int c_p = t.column(schema.p_hat);
  if (require_set_id && c_set < 0) throw InputError("missing column '" + schema.set_id + "'");
  if (c_z < 0) throw InputError("missing column '" + schema.z + "'");
  if (c_y < 0) throw InputError("missing column '" + schema.y + "'");

  std::vector<int> cov_cols;
  UnitTable out;
  if (schema.covariates.empty()) {
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      const int ci = static_cast<int>(c);
      if (ci == c_set || ci == c_z || ci == c_y || ci == c_d || ci == c_e || ci == c_p) continue;
      cov_cols.push_back(ci);
      out.covariate_names.push_back(t.header[c]);
    }
  } else {
    for (const auto& name : schema.covariates) {
      const int c = t.column(name);
      if (c < 0) throw InputError("missing column '" + name + "'");
      cov_cols.push_back(c);
      out.covariate_names.push_back(name);
    }
  }
  if (t.rows.empty()) throw InputError("empty file: no data rows");

  out.units.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t row_no = r + 1;
    UnitRecord u;
    if (c_set >= 0) u.set_id = row[c_set];
    const double z = csv::parse_double(row[c_z], row_no, schema.z);
    if (z != 0.0 && z != 1.0)
      throw InputError("row " + std::to_string(row_no) + ": non-binary z value '" + row[c_z] + "'");
    u.z = static_cast<int>(z);
    u.y = csv::parse_double(row[c_y], row_no, schema.y);
    if (!std::isfinite(u.y)) throw InputError("row " + std::to_string(row_no) + ": y not finite");
    if (c_d >= 0) u.d = csv::parse_double(row[c_d], row_no, schema.d);
    auto prob = [&](int c, const std::string& name) -> std::optional<double> {
      if (c < 0) return std::nullopt;
      const double v = csv::parse_double(row[c], row_no, name);
      if (!(v > 0.0 && v < 1.0))
        throw InputError("row " + std::to_string(row_no) + ": " + name + " outside (0,1)");
      return v;
    };
    u.e_hat = prob(c_e, schema.e_hat);
    u.p_hat = prob(c_p, schema.p_hat);
    u.x.reserve(cov_cols.size());
    for (std::size_t k = 0; k < cov_cols.size(); ++k)
      u.x.push_back(csv::parse_double(row[cov_cols[k]], row_no, out.covariate_names[k]));
    out.units.push_back(std::move(u));
  }
  return out;
}

inline MatchedDataset load_dataset(const std::filesystem::path& path,
                                   const ColumnSchema& schema = {}) {
  return MatchedDataset::from_table(units_from_csv(csv::read_file(path), schema, true));
}

inline UnitTable load_units(const std::filesystem::path& path, const ColumnSchema& schema = {}) {
  return units_from_csv(csv::read_file(path), schema, false);
}

// Standard column order: set_id, z, y [, d] [, e_hat] [, p_hat], covariates.
// Optional columns are emitted only when every unit carries them.
inline csv::Table units_to_csv(const UnitTable& t, bool with_set_id = true) {
  auto all = [&](auto member) {
    for (const auto& u : t.units)
      if (!(u.*member)) return false;
    return !t.units.empty();
  };
  const bool d = all(&UnitRecord::d);
  const bool e = all(&UnitRecord::e_hat);
  const bool p = all(&UnitRecord::p_hat);
  csv::Table out;
  if (with_set_id) out.header.push_back("set_id");
  out.header.insert(out.header.end(), {"z", "y"});
  if (d) out.header.push_back("d");
  if (e) out.header.push_back("e_hat");
  if (p) out.header.push_back("p_hat");
  out.header.insert(out.header.end(), t.covariate_names.begin(), t.covariate_names.end());
  for (const auto& u : t.units) {
    std::vector<std::string> row;
    if (with_set_id) row.push_back(u.set_id);
    row.push_back(std::to_string(u.z));
    row.push_back(csv::format_double(u.y));
    if (d) row.push_back(csv::format_double(*u.d));
    if (e) row.push_back(csv::format_double(*u.e_hat));
    if (p) row.push_back(csv::format_double(*u.p_hat));
    for (double v : u.x) row.push_back(csv::format_double(v));
    out.rows.push_back(std::move(row));
  }
  return out;
}

// Empty result means the design satisfies min{m_i, n_i - m_i} = 1 everywhere.
inline std::vector<std::string> validate_design(const MatchedDataset& ds) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ds.I(); ++i) {
    const auto& s = ds.sets()[i];
    const std::string label = "set '" + ds.set_ids()[i] + "'";
    if (s.treated == 0) {
      out.push_back(label + ": no treated units");
    } else if (s.treated == s.size()) {
      out.push_back(label + ": no control units");
    } else if (std::min(s.treated, s.controls()) != 1) {
      out.push_back(label + ": " + std::to_string(s.treated) + " treated and " +
                    std::to_string(s.controls()) + " controls (min{m, n-m} = " +
                    std::to_string(std::min(s.treated, s.controls())) + ")");
    }
  }
  return out;
}

inline void require_valid_design(const MatchedDataset& ds) {
  const auto v = validate_design(ds);
  if (v.empty()) return;
  std::string msg = "unsupported design: " + v.front();
  if (v.size() > 1) msg += " (and " + std::to_string(v.size() - 1) + " more)";
  throw DesignError(msg);
}

// w_i = I n_i / N.
inline std::vector<double> set_weights(const MatchedDataset& ds) {
  std::vector<double> w;
  w.reserve(ds.I());
  const double scale = static_cast<double>(ds.I()) / static_cast<double>(ds.N());
  for (const auto& s : ds.sets()) w.push_back(scale * static_cast<double>(s.size()));
  return w;
}

struct BalanceRow {
  std::size_t covariate_index = 0;
  std::string covariate;
  double smd_pre = 0.0;
  double smd_post = 0.0;
  bool degenerate = false;
};

namespace detail {

struct ArmMoments {
  double mean_t = 0.0, mean_c = 0.0, var_t = 0.0, var_c = 0.0;
};

inline ArmMoments arm_moments(const std::vector<UnitRecord>& units, std::size_t k) {
  double st = 0, sc = 0;
  std::size_t nt = 0, nc = 0;
  for (const auto& u : units) {
    if (u.z) {
      st += u.x[k];
      ++nt;
    } else {
      sc += u.x[k];
      ++nc;
    }
  }
  ArmMoments m;
  m.mean_t = nt ? st / nt : 0.0;
  m.mean_c = nc ? sc / nc : 0.0;
  double vt = 0, vc = 0;
  for (const auto& u : units) {
    const double dv = u.x[k] - (u.z ? m.mean_t : m.mean_c);
    (u.z ? vt : vc) += dv * dv;
  }
  m.var_t = nt > 1 ? vt / (nt - 1) : 0.0;
  m.var_c = nc > 1 ? vc / (nc - 1) : 0.0;
  return m;
}

}  // namespace detail

// Standardized mean differences per covariate. The denominator is the pooled
// SD sqrt((s_T^2 + s_C^2) / 2) of the pre-matching sample (or of the matched
// units when no pre-matching table is given) for both columns. Post-matching
// means weight each set's treated/control means by n_i / N.
inline std::vector<BalanceRow> balance_table(const MatchedDataset& ds,
                                             const UnitTable* pre_matching = nullptr) {
  if (ds.K() == 0) throw InputError("balance_table: no covariates");
  if (pre_matching && pre_matching->covariate_count() != ds.K())
    throw InputError("balance_table: pre-matching table has a different covariate count");
  for (std::size_t i = 0; i < ds.I(); ++i) {
    const auto& s = ds.sets()[i];
    if (s.treated == 0 || s.treated == s.size())
      throw DesignError("balance_table: set '" + ds.set_ids()[i] + "' lacks a treated or control unit");
  }
  const auto& ref_units = pre_matching ? pre_matching->units : ds.units();
  const double n_total = static_cast<double>(ds.N());
  std::vector<BalanceRow> rows;
  for (std::size_t k = 0; k < ds.K(); ++k) {
    const auto ref = detail::arm_moments(ref_units, k);
    double post_t = 0.0, post_c = 0.0;
    for (const auto& s : ds.sets()) {
      double st = 0, sc = 0;
      for (std::size_t u : s.units) (ds.units()[u].z ? st : sc) += ds.units()[u].x[k];
      const double w = static_cast<double>(s.size()) / n_total;
      post_t += w * st / static_cast<double>(s.treated);
      post_c += w * sc / static_cast<double>(s.controls());
    }
    BalanceRow row;
    row.covariate_index = k;
    row.covariate = ds.covariate_names()[k];
    const double sd = std::sqrt(0.5 * (ref.var_t + ref.var_c));
    if (sd > 0.0 && std::isfinite(sd)) {
      row.smd_pre = (ref.mean_t - ref.mean_c) / sd;
      row.smd_post = (post_t - post_c) / sd;
    } else {
      row.smd_pre = row.smd_post = std::nan("");
      row.degenerate = true;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline csv::Table balance_to_csv(const std::vector<BalanceRow>& rows) {
  csv::Table t;
  t.header = {"covariate", "smd_pre", "smd_post", "degenerate"};
  for (const auto& r : rows) {
    t.rows.push_back({r.covariate, csv::format_double(r.smd_pre), csv::format_double(r.smd_post),
                      r.degenerate ? "true" : "false"});
  }
  return t;
}

}  // namespace riim

#include "smokecausal/health.hpp"

#include "smokecausal/csv.hpp"
#include "smokecausal/errors.hpp"
#include "smokecausal/inference.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <map>

namespace smokecausal::health {

void AgeRateTable::validate() const {
  if (groups.empty()) throw ValidationError("age-rate table has no groups");
  if (!(increment > 0.0)) throw ValidationError("exposure increment must be positive");
  for (const auto& g : groups) {
    if (!(g.relative_rate > 0.0))
      throw ValidationError("relative rate for " + g.label + " must be positive");
    if (!(g.r0 >= 0.0) || !std::isfinite(g.r0))
      throw ValidationError("baseline rate for " + g.label + " must be finite and >= 0");
  }
}

double AgeRateTable::coefficient(std::size_t g) const {
  return std::log(groups.at(g).relative_rate) / increment;
}

AgeRateTable load_rates(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, double>>& relative_rates,
                        double increment) {
  const auto t = csv::read(path);
  csv::require_header(t, {"age_group", "r0"});
  std::map<std::string, double> r0;
  for (const auto& row : t.rows) {
    const std::string& label = row.fields[0];
    if (r0.count(label))
      throw ValidationError(fmt::format("{}:{}: duplicate key {}", path.string(), row.line, label));
    r0[label] = csv::parse_double(t, row, 1);
  }
  AgeRateTable table;
  table.increment = increment;
  for (const auto& [label, rr] : relative_rates) {
    const auto it = r0.find(label);
    if (it == r0.end())
      throw ValidationError(path.string() + ": no baseline rate for age group " + label);
    table.groups.push_back({label, rr, it->second});
  }
  table.validate();
  return table;
}

std::vector<County> load_counties(const std::filesystem::path& path, std::size_t n_groups) {
  const auto t = csv::read(path);
  std::vector<std::string> header{"fips", "population"};
  for (std::size_t g = 1; g <= n_groups; ++g) header.push_back("share_g" + std::to_string(g));
  csv::require_header(t, header);
  std::vector<County> out;
  std::map<std::string, bool> seen;
  for (const auto& row : t.rows) {
    County c;
    c.fips = row.fields[0];
    if (seen[c.fips])
      throw ValidationError(fmt::format("{}:{}: duplicate key {}", path.string(), row.line, c.fips));
    seen[c.fips] = true;
    c.population = csv::parse_double(t, row, 1);
    if (!(c.population >= 0.0))
      throw ValidationError(fmt::format("{}:{}: population must be >= 0", path.string(), row.line));
    double sum = 0.0;
    for (std::size_t g = 0; g < n_groups; ++g) {
      const double s = csv::parse_double(t, row, 2 + g);
      if (!(s >= 0.0))
        throw ValidationError(fmt::format("{}:{}: shares must be >= 0", path.string(), row.line));
      c.shares.push_back(s);
      sum += s;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValidationError(fmt::format("{}:{}: age shares sum to {:.12g}, not 1", path.string(),
                                        row.line, sum));
    out.push_back(std::move(c));
  }
  return out;
}

void assign_cells(std::vector<County>& counties, const data::Grid& grid) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < counties.size(); ++i) {
    counties[i].cells.clear();
    index[counties[i].fips] = i;
  }
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const auto it = index.find(grid.county_fips[k]);
    if (it == index.end()) continue;
    auto& c = counties[it->second];
    c.cells.push_back(k);
    if (c.region.empty()) c.region = grid.regions[k];
  }
}

MatrixXd county_exposure(const MatrixXd& cell_values, const std::vector<County>& counties,
                         std::vector<std::size_t>* kept) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < counties.size(); ++i) {
    if (counties[i].cells.empty()) {
      spdlog::warn("county {} has no grid cells; excluded from the burden table", counties[i].fips);
      continue;
    }
    keep.push_back(i);
  }
  MatrixXd out = MatrixXd::Zero(static_cast<Eigen::Index>(keep.size()), cell_values.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto& cells = counties[keep[r]].cells;
    for (std::size_t k : cells) {
      if (static_cast<Eigen::Index>(k) >= cell_values.rows())
        throw ValidationError("county cell index outside the surface");
      out.row(r) += cell_values.row(static_cast<Eigen::Index>(k));
    }
    out.row(r) /= static_cast<double>(cells.size());
  }
  if (kept) *kept = std::move(keep);
  return out;
}

double burden(double delta_c, double r0, double exposed_population, double coefficient) {
  return r0 * exposed_population * std::expm1(coefficient * delta_c);
}

double burden(double delta_c, const AgeRateTable& table, std::size_t group, double population,
              double share) {
  return burden(delta_c, table.groups.at(group).r0, population * share, table.coefficient(group));
}

std::vector<double> burden_draws(std::span<const double> delta_draws, const AgeRateTable& table,
                                 std::size_t group, double population, double share) {
  std::vector<double> out;
  out.reserve(delta_draws.size());
  for (double d : delta_draws) out.push_back(burden(d, table, group, population, share));
  return out;
}

BurdenSummary summarize(std::span<const double> draws) {
  if (draws.empty()) throw InsufficientDataError("no burden draws");
  BurdenSummary s;
  for (double v : draws) s.mean += v;
  s.mean /= static_cast<double>(draws.size());
  const auto iv = inference::credible_interval(draws, 0.95);
  s.lo95 = iv.lo;
  s.hi95 = iv.hi;
  return s;
}

BurdenSummary burden_ci(std::span<const double> delta_draws, const AgeRateTable& table,
                        std::size_t group, double population, double share) {
  return summarize(burden_draws(delta_draws, table, group, population, share));
}

std::vector<double> aggregate(const std::vector<std::vector<double>>& per_county_draws) {
  if (per_county_draws.empty()) return {};
  std::vector<double> out(per_county_draws.front().size(), 0.0);
  for (const auto& d : per_county_draws) {
    if (d.size() != out.size()) throw ValidationError("burden draw counts differ across counties");
    for (std::size_t k = 0; k < d.size(); ++k) out[k] += d[k];
  }
  return out;
}

std::vector<BurdenRow> burden_table(const MatrixXd& exposure, const std::vector<County>& counties,
                                    const AgeRateTable& table) {
  table.validate();
  if (static_cast<std::size_t>(exposure.rows()) != counties.size())
    throw ValidationError("exposure rows do not match counties");
  const std::size_t n_groups = table.groups.size();
  const std::size_t n_draws = static_cast<std::size_t>(exposure.cols());

  std::vector<BurdenRow> rows;
  // Per-group burden draws per county, plus the all-ages total at index n_groups.
  std::map<std::string, std::vector<std::vector<std::vector<double>>>> by_region;
  std::vector<std::vector<std::vector<double>>> national(n_groups + 1);
  for (std::size_t i = 0; i < counties.size(); ++i) {
    const auto& c = counties[i];
    if (c.shares.size() != n_groups)
      throw ValidationError("county " + c.fips + " has the wrong number of age shares");
    std::vector<double> delta(n_draws);
    for (std::size_t k = 0; k < n_draws; ++k) delta[k] = exposure(static_cast<Eigen::Index>(i), k);
    std::vector<std::vector<double>> groups;
    for (std::size_t g = 0; g < n_groups; ++g)
      groups.push_back(burden_draws(delta, table, g, c.population, c.shares[g]));
    groups.push_back(aggregate(groups));
    for (std::size_t g = 0; g <= n_groups; ++g) {
      rows.push_back({c.fips, g < n_groups ? table.groups[g].label : "all", summarize(groups[g])});
      auto& reg = by_region[c.region];
      if (reg.empty()) reg.resize(n_groups + 1);
      reg[g].push_back(groups[g]);
      national[g].push_back(groups[g]);
    }
  }
  auto add_aggregate = [&](const std::string& key,
                           const std::vector<std::vector<std::vector<double>>>& parts) {
    for (std::size_t g = 0; g <= n_groups; ++g) {
      if (parts[g].empty()) continue;
      rows.push_back({key, g < n_groups ? table.groups[g].label : "all",
                      summarize(aggregate(parts[g]))});
    }
  };
  for (const auto& [region, parts] : by_region) add_aggregate("REGION:" + region, parts);
  if (!counties.empty()) add_aggregate("NATIONAL", national);
  return rows;
}

}  // namespace smokecausal::health

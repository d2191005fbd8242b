#pragma once

// Excess respiratory hospitalizations from county-level fire-attributable
// PM2.5 through a log-linear concentration-response function.

#include "smokecausal/panel.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace smokecausal::health {

using Eigen::MatrixXd;

struct AgeGroup {
  std::string label;
  double relative_rate = 1.0;  // RR per `increment` ug/m3
  double r0 = 0.0;             // baseline hospitalizations per person per period
};

struct AgeRateTable {
  std::vector<AgeGroup> groups;
  double increment = 10.0;  // exposure increment the relative rates refer to

  void validate() const;
  // ln(RR) / increment, per ug/m3.
  double coefficient(std::size_t g) const;
};

inline const std::vector<std::pair<std::string, double>> kDefaultRelativeRates{
    {"0-1", 1.045}, {"2-17", 1.027}, {"18-54", 1.024}, {"55-99", 1.030}};

// baseline_rates.csv: `age_group,r0`. Every configured group must appear.
AgeRateTable load_rates(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, double>>& relative_rates =
                            kDefaultRelativeRates,
                        double increment = 10.0);

struct County {
  std::string fips;
  double population = 0.0;
  std::vector<double> shares;  // per age group, summing to 1
  std::string region;          // from member cells
  std::vector<std::size_t> cells;
};

// counties.csv: `fips,population,share_g1,...,share_gK`.
std::vector<County> load_counties(const std::filesystem::path& path, std::size_t n_groups);

// Attaches grid cells (and their region) to counties by FIPS code.
void assign_cells(std::vector<County>& counties, const data::Grid& grid);

// Equal-weight average of cell values over each county's member cells.
// cell_values: cells x draws. Counties without cells are dropped with a
// warning; `kept` receives the indices of the remaining counties.
MatrixXd county_exposure(const MatrixXd& cell_values, const std::vector<County>& counties,
                         std::vector<std::size_t>* kept = nullptr);

// r0 * n * (exp(coef * delta) - 1) with n the exposed population.
double burden(double delta_c, double r0, double exposed_population, double coefficient);
double burden(double delta_c, const AgeRateTable& table, std::size_t group,
              double population, double share);

struct BurdenSummary {
  double mean = 0.0;
  double lo95 = 0.0;
  double hi95 = 0.0;
};

// Burden evaluated per draw, then summarized by equal-tailed quantiles.
std::vector<double> burden_draws(std::span<const double> delta_draws, const AgeRateTable& table,
                                 std::size_t group, double population, double share);
BurdenSummary summarize(std::span<const double> draws);
BurdenSummary burden_ci(std::span<const double> delta_draws, const AgeRateTable& table,
                        std::size_t group, double population, double share);

struct BurdenRow {
  std::string key;  // fips, REGION:<name> or NATIONAL
  std::string age_group;  // configured label or "all"
  BurdenSummary summary;
};

// Per-draw sum over the listed rows of per-draw burdens.
std::vector<double> aggregate(const std::vector<std::vector<double>>& per_county_draws);

// Full table: one row per (county, group) and per county for "all", then
// regional and national aggregates. exposure: counties x draws, aligned with
// `counties`.
std::vector<BurdenRow> burden_table(const MatrixXd& exposure, const std::vector<County>& counties,
                                    const AgeRateTable& table);

}  // namespace smokecausal::health

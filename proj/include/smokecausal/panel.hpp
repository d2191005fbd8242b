#pragma once

// Panel container for monitor observations and numerical-model fields,
// smoke-indicator construction, region blocking, per-site identifiability
// screening, and CSV ingestion.

#include "smokecausal/spatial.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace smokecausal::data {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Flags = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct PanelDataset {
  spatial::SiteSet sites;
  MatrixXd y;          // sites x days, NaN where missing
  MatrixXd theta_hat;  // no-fire model output, complete
  MatrixXd delta_hat;  // fire-minus-no-fire model output, complete
  Flags c;             // smoke indicator
  Flags missing;       // 1 where y is unobserved
  double tau = 0.0;    // threshold that produced `c`
  long negative_delta_count = 0;  // cells with delta_hat < 0 (clamped before thresholding)
  long filled_model_cells = 0;    // absent panel rows whose model fields were interpolated

  Eigen::Index n_sites() const { return y.rows(); }
  Eigen::Index n_days() const { return y.cols(); }
  long n_missing() const { return static_cast<long>(missing.cast<long>().sum()); }

  void validate() const;
  PanelDataset subset_sites(const std::vector<std::size_t>& idx) const;
  // Same panel with `c` rebuilt from delta_hat at a new threshold.
  PanelDataset with_tau(double new_tau) const;
};

// c = 1 iff max(delta_hat, 0) > tau (strict).
Flags smoke_indicator(const MatrixXd& delta_hat, double tau);
long count_negative(const MatrixXd& delta_hat);

struct RegionBlock {
  std::string region;
  std::vector<std::size_t> site_indices;  // into the parent dataset
  PanelDataset data;
};

// One block per distinct region label, ordered by label.
std::vector<RegionBlock> partition_regions(const PanelDataset& data);

// Relabels every site in `regions` to `merged_label`.
PanelDataset merge_regions(const PanelDataset& data, const std::vector<std::string>& regions,
                           const std::string& merged_label);

// Rows (1, theta_hat, C, C * delta_hat) over the site's observed days.
MatrixXd site_design(const PanelDataset& data, Eigen::Index site);
VectorXd site_response(const PanelDataset& data, Eigen::Index site);

enum class ScreenStatus { ok, degenerate, insufficient_data };

struct ScreenReport {
  ScreenStatus status = ScreenStatus::ok;
  double condition_number = 0.0;  // infinity when degenerate
  int rank = 0;
  Eigen::Index days_used = 0;
};

// Flags sites whose four-column mean design is rank deficient.
ScreenReport collinearity_screen(const PanelDataset& data, Eigen::Index site);

// Numerical rank with relative singular-value tolerance.
int numerical_rank(const MatrixXd& a, double rel_tol = 1e-9);

struct LoadOptions {
  double tau = 1.0;
};

spatial::SiteSet load_sites(const std::filesystem::path& path);

// Reads sites.csv and panel.csv. Cells with no panel row are masked missing;
// their model fields are linearly interpolated in time from the same site.
PanelDataset load_panel(const std::filesystem::path& sites_path,
                        const std::filesystem::path& panel_path, const LoadOptions& opts);
PanelDataset load_panel(const spatial::SiteSet& sites, const std::filesystem::path& panel_path,
                        const LoadOptions& opts);

struct Grid {
  std::vector<std::string> cell_ids;
  std::vector<std::string> regions;
  std::vector<std::string> county_fips;
  VectorXd lon, lat;
  spatial::Coords xy;  // projected with the sites' projection

  std::size_t size() const { return cell_ids.size(); }
  Grid subset(const std::vector<std::size_t>& idx) const;
};

Grid load_grid(const std::filesystem::path& path, const spatial::Projection& proj);

void write_sites(const std::filesystem::path& path, const spatial::SiteSet& sites);
void write_panel(const std::filesystem::path& path, const PanelDataset& data);
void write_grid(const std::filesystem::path& path, const Grid& grid);

}  // namespace smokecausal::data

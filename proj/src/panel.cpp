#include "smokecausal/panel.hpp"

#include "smokecausal/csv.hpp"
#include "smokecausal/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace smokecausal::data {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void PanelDataset::validate() const {
  sites.validate();
  const auto n = static_cast<Eigen::Index>(sites.size());
  const auto t = y.cols();
  if (t < 1) throw ValidationError("panel has no days");
  auto check_shape = [&](Eigen::Index r, Eigen::Index c, const char* what) {
    if (r != n || c != t) throw ValidationError(std::string("panel field '") + what +
                                                "' has the wrong shape");
  };
  check_shape(y.rows(), y.cols(), "y");
  check_shape(theta_hat.rows(), theta_hat.cols(), "theta_hat");
  check_shape(delta_hat.rows(), delta_hat.cols(), "delta_hat");
  check_shape(c.rows(), c.cols(), "c");
  check_shape(missing.rows(), missing.cols(), "missing");
  if (!theta_hat.allFinite() || !delta_hat.allFinite())
    throw ValidationError("theta_hat and delta_hat must be complete and finite");
  for (Eigen::Index j = 0; j < t; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (c(i, j) > 1) throw ValidationError("smoke indicator must be 0 or 1");
      const bool miss = missing(i, j) != 0;
      if (miss != std::isnan(y(i, j)))
        throw ValidationError("missing mask disagrees with y at site '" +
                              sites.ids[static_cast<std::size_t>(i)] + "', day " +
                              std::to_string(j + 1));
      if (!miss && !std::isfinite(y(i, j))) throw ValidationError("non-finite observation");
    }
  }
}

PanelDataset PanelDataset::subset_sites(const std::vector<std::size_t>& idx) const {
  PanelDataset out;
  out.sites = sites.subset(idx);
  const auto k = static_cast<Eigen::Index>(idx.size());
  out.y.resize(k, n_days());
  out.theta_hat.resize(k, n_days());
  out.delta_hat.resize(k, n_days());
  out.c.resize(k, n_days());
  out.missing.resize(k, n_days());
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto i = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(r)]);
    out.y.row(r) = y.row(i);
    out.theta_hat.row(r) = theta_hat.row(i);
    out.delta_hat.row(r) = delta_hat.row(i);
    out.c.row(r) = c.row(i);
    out.missing.row(r) = missing.row(i);
  }
  out.tau = tau;
  out.negative_delta_count = count_negative(out.delta_hat);
  return out;
}

PanelDataset PanelDataset::with_tau(double new_tau) const {
  PanelDataset out = *this;
  out.tau = new_tau;
  out.c = smoke_indicator(delta_hat, new_tau);
  return out;
}

Flags smoke_indicator(const MatrixXd& delta_hat, double tau) {
  if (!std::isfinite(tau)) throw ValidationError("smoke threshold tau must be finite");
  return (delta_hat.array().max(0.0) > tau).cast<std::uint8_t>();
}

long count_negative(const MatrixXd& delta_hat) {
  return static_cast<long>((delta_hat.array() < 0.0).count());
}

std::vector<RegionBlock> partition_regions(const PanelDataset& data) {
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < data.sites.size(); ++i) {
    const auto& r = data.sites.regions[i];
    if (r.empty())
      throw ValidationError("site '" + data.sites.ids[i] + "' has no region label");
    members[r].push_back(i);
  }
  std::vector<RegionBlock> blocks;
  for (auto& [region, idx] : members) {
    RegionBlock b;
    b.region = region;
    b.data = data.subset_sites(idx);
    b.site_indices = std::move(idx);
    blocks.push_back(std::move(b));
  }
  return blocks;
}

PanelDataset merge_regions(const PanelDataset& data, const std::vector<std::string>& regions,
                           const std::string& merged_label) {
  PanelDataset out = data;
  const std::set<std::string> wanted(regions.begin(), regions.end());
  for (auto& r : out.sites.regions)
    if (wanted.count(r)) r = merged_label;
  return out;
}

MatrixXd site_design(const PanelDataset& data, Eigen::Index site) {
  std::vector<Eigen::Index> days;
  for (Eigen::Index t = 0; t < data.n_days(); ++t)
    if (!data.missing(site, t)) days.push_back(t);
  MatrixXd x(static_cast<Eigen::Index>(days.size()), 4);
  for (std::size_t k = 0; k < days.size(); ++k) {
    const auto t = days[k];
    const auto r = static_cast<Eigen::Index>(k);
    const double c = data.c(site, t);
    x(r, 0) = 1.0;
    x(r, 1) = data.theta_hat(site, t);
    x(r, 2) = c;
    x(r, 3) = c * data.delta_hat(site, t);
  }
  return x;
}

VectorXd site_response(const PanelDataset& data, Eigen::Index site) {
  std::vector<double> v;
  for (Eigen::Index t = 0; t < data.n_days(); ++t)
    if (!data.missing(site, t)) v.push_back(data.y(site, t));
  return Eigen::Map<VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

int numerical_rank(const MatrixXd& a, double rel_tol) {
  if (a.size() == 0) return 0;
  Eigen::JacobiSVD<MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[0] <= 0.0) return 0;
  return static_cast<int>((s.array() > rel_tol * s[0]).count());
}

ScreenReport collinearity_screen(const PanelDataset& data, Eigen::Index site) {
  ScreenReport rep;
  const MatrixXd x = site_design(data, site);
  rep.days_used = x.rows();
  if (x.rows() < 4) {
    rep.status = ScreenStatus::insufficient_data;
    rep.condition_number = std::numeric_limits<double>::infinity();
    rep.rank = numerical_rank(x);
    return rep;
  }
  Eigen::JacobiSVD<MatrixXd> svd(x);
  const auto& s = svd.singularValues();
  rep.rank = numerical_rank(x);
  if (rep.rank < 4) {
    rep.status = ScreenStatus::degenerate;
    rep.condition_number = std::numeric_limits<double>::infinity();
  } else {
    rep.condition_number = s[0] / s[s.size() - 1];
  }
  return rep;
}

spatial::SiteSet load_sites(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  csv::require_header(t, {"site_id", "lon", "lat", "region"});
  std::vector<std::string> ids, regions;
  std::vector<double> lon, lat;
  std::set<std::string> seen;
  for (const auto& r : t.rows) {
    const auto where = path.string() + ":" + std::to_string(r.line);
    if (r.fields[0].empty()) throw ValidationError(where + ": empty site_id");
    if (!seen.insert(r.fields[0]).second)
      throw ValidationError(where + ": duplicate key site_id '" + r.fields[0] + "'");
    ids.push_back(r.fields[0]);
    lon.push_back(csv::parse_double(t, r, 1));
    lat.push_back(csv::parse_double(t, r, 2));
    if (!std::isfinite(lon.back()) || !std::isfinite(lat.back()))
      throw ValidationError(where + ": non-finite coordinates");
    if (r.fields[3].empty()) throw ValidationError(where + ": empty region label");
    regions.push_back(r.fields[3]);
  }
  if (ids.empty()) throw ValidationError(path.string() + ": no sites");
  const auto n = static_cast<Eigen::Index>(ids.size());
  return spatial::SiteSet::from_lonlat(std::move(ids), Eigen::Map<VectorXd>(lon.data(), n),
                                       Eigen::Map<VectorXd>(lat.data(), n), std::move(regions));
}

PanelDataset load_panel(const std::filesystem::path& sites_path,
                        const std::filesystem::path& panel_path, const LoadOptions& opts) {
  return load_panel(load_sites(sites_path), panel_path, opts);
}

namespace {

// Fill NaN entries of a row by linear interpolation between observed days,
// holding the nearest value at the ends.
void interpolate_row(MatrixXd& m, Eigen::Index i) {
  const auto t = m.cols();
  std::vector<Eigen::Index> known;
  for (Eigen::Index j = 0; j < t; ++j)
    if (!std::isnan(m(i, j))) known.push_back(j);
  if (known.empty()) return;
  for (Eigen::Index j = 0; j < t; ++j) {
    if (!std::isnan(m(i, j))) continue;
    const auto hi = std::lower_bound(known.begin(), known.end(), j);
    if (hi == known.begin()) {
      m(i, j) = m(i, *hi);
    } else if (hi == known.end()) {
      m(i, j) = m(i, known.back());
    } else {
      const auto a = *(hi - 1), b = *hi;
      const double w = static_cast<double>(j - a) / static_cast<double>(b - a);
      m(i, j) = (1.0 - w) * m(i, a) + w * m(i, b);
    }
  }
}

}  // namespace

PanelDataset load_panel(const spatial::SiteSet& sites, const std::filesystem::path& panel_path,
                        const LoadOptions& opts) {
  const auto t = csv::read(panel_path);
  csv::require_header(t, {"site_id", "day", "y", "theta_hat", "delta_hat"});

  struct Cell {
    std::size_t line;
    double y, theta_hat, delta_hat;
  };
  std::map<std::pair<std::size_t, long>, Cell> cells;
  long max_day = 0;
  for (const auto& r : t.rows) {
    const auto where = panel_path.string() + ":" + std::to_string(r.line);
    const auto site = sites.find(r.fields[0]);
    if (!site) throw ValidationError(where + ": unknown site_id '" + r.fields[0] + "'");
    const long day = csv::parse_int(t, r, 1);
    if (day < 1) throw ValidationError(where + ": day must be >= 1");
    double y = kNaN;
    if (r.fields[2] != "NA") {
      y = csv::parse_double(t, r, 2);
      if (!std::isfinite(y)) throw ValidationError(where + ": non-finite y");
    }
    const double th = csv::parse_double(t, r, 3);
    const double dh = csv::parse_double(t, r, 4);
    if (!std::isfinite(th)) throw ValidationError(where + ": non-finite theta_hat");
    if (!std::isfinite(dh)) throw ValidationError(where + ": non-finite delta_hat");
    const auto [it, inserted] = cells.emplace(std::pair{*site, day}, Cell{r.line, y, th, dh});
    if (!inserted)
      throw ValidationError(where + ": duplicate key (site_id '" + r.fields[0] + "', day " +
                            std::to_string(day) + "), first seen on line " +
                            std::to_string(it->second.line));
    max_day = std::max(max_day, day);
  }
  if (cells.empty()) throw ValidationError(panel_path.string() + ": no panel rows");

  PanelDataset d;
  d.sites = sites;
  const auto n = static_cast<Eigen::Index>(sites.size());
  const auto T = static_cast<Eigen::Index>(max_day);
  d.y = MatrixXd::Constant(n, T, kNaN);
  d.theta_hat = MatrixXd::Constant(n, T, kNaN);
  d.delta_hat = MatrixXd::Constant(n, T, kNaN);
  std::vector<long> rows_per_site(static_cast<std::size_t>(n), 0);
  for (const auto& [key, cell] : cells) {
    const auto i = static_cast<Eigen::Index>(key.first);
    const auto j = static_cast<Eigen::Index>(key.second - 1);
    d.y(i, j) = cell.y;
    d.theta_hat(i, j) = cell.theta_hat;
    d.delta_hat(i, j) = cell.delta_hat;
    ++rows_per_site[key.first];
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (rows_per_site[static_cast<std::size_t>(i)] == 0)
      throw ValidationError(panel_path.string() + ": site '" +
                            sites.ids[static_cast<std::size_t>(i)] + "' has no panel rows");
  }
  d.filled_model_cells = static_cast<long>(d.theta_hat.array().isNaN().count());
  if (d.filled_model_cells > 0) {
    spdlog::warn("{}: {} (site, day) rows absent; y masked, model fields interpolated in time",
                 panel_path.string(), d.filled_model_cells);
    for (Eigen::Index i = 0; i < n; ++i) {
      interpolate_row(d.theta_hat, i);
      interpolate_row(d.delta_hat, i);
    }
  }
  d.missing = d.y.array().isNaN().cast<std::uint8_t>();
  d.tau = opts.tau;
  d.negative_delta_count = count_negative(d.delta_hat);
  if (d.negative_delta_count > 0)
    spdlog::info("{} negative delta_hat cells clamped to 0 before thresholding",
                 d.negative_delta_count);
  d.c = smoke_indicator(d.delta_hat, opts.tau);
  d.validate();
  return d;
}

Grid Grid::subset(const std::vector<std::size_t>& idx) const {
  Grid g;
  const auto k = static_cast<Eigen::Index>(idx.size());
  g.lon.resize(k);
  g.lat.resize(k);
  g.xy.resize(k, 2);
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto i = idx[static_cast<std::size_t>(r)];
    g.cell_ids.push_back(cell_ids[i]);
    g.regions.push_back(regions[i]);
    g.county_fips.push_back(county_fips[i]);
    g.lon[r] = lon[static_cast<Eigen::Index>(i)];
    g.lat[r] = lat[static_cast<Eigen::Index>(i)];
    g.xy.row(r) = xy.row(static_cast<Eigen::Index>(i));
  }
  return g;
}

Grid load_grid(const std::filesystem::path& path, const spatial::Projection& proj) {
  const auto t = csv::read(path);
  csv::require_header(t, {"cell_id", "lon", "lat", "region", "county_fips"});
  Grid g;
  std::vector<double> lon, lat;
  std::set<std::string> seen;
  for (const auto& r : t.rows) {
    const auto where = path.string() + ":" + std::to_string(r.line);
    if (!seen.insert(r.fields[0]).second)
      throw ValidationError(where + ": duplicate key cell_id '" + r.fields[0] + "'");
    g.cell_ids.push_back(r.fields[0]);
    lon.push_back(csv::parse_double(t, r, 1));
    lat.push_back(csv::parse_double(t, r, 2));
    if (!std::isfinite(lon.back()) || !std::isfinite(lat.back()))
      throw ValidationError(where + ": non-finite coordinates");
    g.regions.push_back(r.fields[3]);
    g.county_fips.push_back(r.fields[4]);
  }
  const auto n = static_cast<Eigen::Index>(g.cell_ids.size());
  g.lon = Eigen::Map<VectorXd>(lon.data(), n);
  g.lat = Eigen::Map<VectorXd>(lat.data(), n);
  g.xy.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) g.xy.row(i) = proj.to_km(g.lon[i], g.lat[i]);
  return g;
}

void write_sites(const std::filesystem::path& path, const spatial::SiteSet& sites) {
  csv::Writer w(path, {"site_id", "lon", "lat", "region"});
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    w << sites.ids[i] << sites.lon[e] << sites.lat[e] << sites.regions[i];
    w.end_row();
  }
}

void write_panel(const std::filesystem::path& path, const PanelDataset& data) {
  csv::Writer w(path, {"site_id", "day", "y", "theta_hat", "delta_hat"});
  for (Eigen::Index i = 0; i < data.n_sites(); ++i) {
    for (Eigen::Index t = 0; t < data.n_days(); ++t) {
      w << data.sites.ids[static_cast<std::size_t>(i)] << static_cast<long>(t + 1)
        << (data.missing(i, t) ? std::string("NA") : csv::format(data.y(i, t)))
        << data.theta_hat(i, t) << data.delta_hat(i, t);
      w.end_row();
    }
  }
}

void write_grid(const std::filesystem::path& path, const Grid& grid) {
  csv::Writer w(path, {"cell_id", "lon", "lat", "region", "county_fips"});
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    w << grid.cell_ids[i] << grid.lon[e] << grid.lat[e] << grid.regions[i]
      << grid.county_fips[i];
    w.end_row();
  }
}

}  // namespace smokecausal::data

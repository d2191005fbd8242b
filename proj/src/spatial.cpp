#include "smokecausal/spatial.hpp"

#include "smokecausal/errors.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

namespace smokecausal::spatial {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

}  // namespace

Eigen::Vector2d Projection::to_km(double lon, double lat) const {
  const double coslat = std::cos(lat0 * kDegToRad);
  return {kEarthRadiusKm * (lon - lon0) * kDegToRad * coslat,
          kEarthRadiusKm * (lat - lat0) * kDegToRad};
}

Eigen::Vector2d Projection::to_lonlat(double x_km, double y_km) const {
  const double coslat = std::cos(lat0 * kDegToRad);
  return {lon0 + x_km / (kEarthRadiusKm * kDegToRad * coslat),
          lat0 + y_km / (kEarthRadiusKm * kDegToRad)};
}

std::optional<std::size_t> SiteSet::find(const std::string& id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids.begin());
}

SiteSet SiteSet::subset(const std::vector<std::size_t>& idx) const {
  SiteSet out;
  out.projection = projection;
  out.lon.resize(static_cast<Eigen::Index>(idx.size()));
  out.lat.resize(out.lon.size());
  out.xy.resize(out.lon.size(), 2);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto i = idx[k];
    const auto e = static_cast<Eigen::Index>(k);
    out.ids.push_back(ids.at(i));
    out.regions.push_back(regions.at(i));
    out.lon[e] = lon[static_cast<Eigen::Index>(i)];
    out.lat[e] = lat[static_cast<Eigen::Index>(i)];
    out.xy.row(e) = xy.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

void SiteSet::validate() const {
  if (ids.empty()) throw ValidationError("site set is empty");
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (regions.size() != ids.size() || lon.size() != n || lat.size() != n || xy.rows() != n)
    throw ValidationError("site set columns have inconsistent lengths");
  std::set<std::string> seen;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& id = ids[static_cast<std::size_t>(i)];
    if (id.empty()) throw ValidationError("site with empty id");
    if (!seen.insert(id).second) throw ValidationError("duplicate site id '" + id + "'");
    if (!std::isfinite(lon[i]) || !std::isfinite(lat[i]) || !xy.row(i).allFinite())
      throw ValidationError("site '" + id + "' has non-finite coordinates");
  }
}

SiteSet SiteSet::from_lonlat(std::vector<std::string> ids, VectorXd lon, VectorXd lat,
                             std::vector<std::string> regions) {
  Projection proj;
  if (lon.size() > 0) {
    proj.lon0 = lon.mean();
    proj.lat0 = lat.mean();
  }
  return from_lonlat(std::move(ids), std::move(lon), std::move(lat), std::move(regions), proj);
}

SiteSet SiteSet::from_lonlat(std::vector<std::string> ids, VectorXd lon, VectorXd lat,
                             std::vector<std::string> regions, const Projection& proj) {
  SiteSet s;
  s.ids = std::move(ids);
  s.regions = std::move(regions);
  s.lon = std::move(lon);
  s.lat = std::move(lat);
  s.projection = proj;
  s.xy.resize(s.lon.size(), 2);
  for (Eigen::Index i = 0; i < s.lon.size(); ++i) s.xy.row(i) = proj.to_km(s.lon[i], s.lat[i]);
  s.validate();
  return s;
}

SiteSet SiteSet::from_planar(std::vector<std::string> ids, const Coords& xy,
                             std::vector<std::string> regions, const Projection& proj) {
  SiteSet s;
  s.ids = std::move(ids);
  s.regions = std::move(regions);
  s.projection = proj;
  s.xy = xy;
  s.lon.resize(xy.rows());
  s.lat.resize(xy.rows());
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const auto ll = proj.to_lonlat(xy(i, 0), xy(i, 1));
    s.lon[i] = ll[0];
    s.lat[i] = ll[1];
  }
  s.validate();
  return s;
}

void CovarianceParams::validate() const {
  if (!(sigma1_sq > 0.0)) throw ValidationError("sigma1_sq must be > 0");
  if (!(sigma2_sq >= 0.0)) throw ValidationError("sigma2_sq must be >= 0");
  if (!(std::abs(gamma) <= 1.0)) throw ValidationError("gamma must lie in [-1, 1]");
  if (!(phi1 > 0.0)) throw ValidationError("phi1 must be > 0");
  if (!(sigma_sq >= 0.0)) throw ValidationError("nugget sigma_sq must be >= 0");
}

MatrixXd distance_matrix(const Coords& xy) { return cross_distance(xy, xy); }

MatrixXd distance_matrix(const SiteSet& sites) {
  sites.validate();
  return distance_matrix(sites.xy);
}

MatrixXd cross_distance(const Coords& a, const Coords& b) {
  if (!a.allFinite() || !b.allFinite()) throw ValidationError("non-finite coordinates");
  MatrixXd d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

MatrixXd exp_correlation(const MatrixXd& dist, double phi) {
  if (!(phi > 0.0) || !std::isfinite(phi))
    throw ValidationError("exponential range phi must be finite and > 0");
  return (-dist.array() / phi).exp().matrix();
}

double obs_covariance(double h, int c, int c_prime, const CovarianceParams& p, bool same_site) {
  if ((c != 0 && c != 1) || (c_prime != 0 && c_prime != 1))
    throw ValidationError("smoke flags must be 0 or 1");
  if (!(h >= 0.0)) throw ValidationError("distance must be >= 0");
  const double s1 = std::sqrt(p.sigma1_sq);
  const double s2 = std::sqrt(p.sigma2_sq);
  double amplitude = 0.0;
  if (c == 0 && c_prime == 0) {
    amplitude = p.sigma1_sq;
  } else if (c != c_prime) {
    amplitude = p.sigma1_sq + s1 * s2 * p.gamma;
  } else {
    amplitude = p.sigma1_sq + 2.0 * s1 * s2 * p.gamma + p.sigma2_sq;
  }
  double cov = amplitude * std::exp(-h / p.phi1);
  if (same_site) cov += p.sigma_sq;
  return cov;
}

VariogramAccumulator::VariogramAccumulator(double max_lag, int n_bins)
    : max_lag_(max_lag),
      sum_(static_cast<std::size_t>(n_bins), 0.0),
      lag_sum_(static_cast<std::size_t>(n_bins), 0.0),
      count_(static_cast<std::size_t>(n_bins), 0) {
  if (n_bins < 1) throw ValidationError("variogram needs at least one bin");
  if (!(max_lag > 0.0)) throw InsufficientDataError("variogram max lag must be > 0");
  for (int k = 0; k <= n_bins; ++k) edges_.push_back(max_lag * k / n_bins);
}

void VariogramAccumulator::add(double h, double half_sq_diff) {
  if (!(h > 0.0) || h > max_lag_) return;
  const auto n_bins = count_.size();
  auto k = static_cast<std::size_t>(h / max_lag_ * static_cast<double>(n_bins));
  if (k >= n_bins) k = n_bins - 1;
  sum_[k] += half_sq_diff;
  lag_sum_[k] += h;
  ++count_[k];
  ++total_;
}

Variogram VariogramAccumulator::finish() const {
  Variogram vg;
  vg.bin_edges = edges_;
  for (std::size_t k = 0; k < count_.size(); ++k) {
    const double n = static_cast<double>(count_[k]);
    vg.bin_counts.push_back(count_[k]);
    if (count_[k] > 0) {
      vg.bin_centers.push_back(lag_sum_[k] / n);
      vg.semivariances.push_back(sum_[k] / n);
    } else {
      vg.bin_centers.push_back(0.5 * (edges_[k] + edges_[k + 1]));
      vg.semivariances.push_back(0.0);
    }
  }
  return vg;
}

double default_max_lag(const MatrixXd& dist) { return 0.5 * dist.maxCoeff(); }

Variogram empirical_variogram(const MatrixXd& field, const MatrixXd& dist, int n_bins,
                              std::optional<double> max_lag) {
  const Eigen::Index n = field.rows();
  if (dist.rows() != n || dist.cols() != n)
    throw ValidationError("variogram: field and distance matrix disagree on site count");
  if (n < 2) throw InsufficientDataError("variogram needs at least two sites");
  const double lag = max_lag.value_or(default_max_lag(dist));
  if (!(lag > 0.0)) throw InsufficientDataError("variogram: all sites coincide");
  VariogramAccumulator acc(lag, n_bins);
  for (Eigen::Index t = 0; t < field.cols(); ++t) {
    for (Eigen::Index j = 1; j < n; ++j) {
      const double zj = field(j, t);
      if (std::isnan(zj)) continue;
      for (Eigen::Index i = 0; i < j; ++i) {
        const double zi = field(i, t);
        if (std::isnan(zi)) continue;
        const double d = zi - zj;
        acc.add(dist(i, j), 0.5 * d * d);
      }
    }
  }
  if (acc.total_pairs() == 0)
    throw InsufficientDataError("empty variogram: no site pairs with overlapping observations");
  return acc.finish();
}

double exponential_variogram(double h, double sill, double range, double nugget) {
  if (h <= 0.0) return 0.0;
  return nugget + sill * (1.0 - std::exp(-h / range));
}

namespace {

struct LinearFit {
  double nugget = 0.0;
  double sill = 0.0;
  double sse = std::numeric_limits<double>::infinity();
};

// Nonnegative WLS of g ~ nugget + sill * f over the four active sets.
LinearFit fit_linear(const std::vector<double>& f, const std::vector<double>& g,
                     const std::vector<double>& w) {
  double sw = 0, sf = 0, sg = 0, sff = 0, sfg = 0;
  for (std::size_t k = 0; k < f.size(); ++k) {
    sw += w[k];
    sf += w[k] * f[k];
    sg += w[k] * g[k];
    sff += w[k] * f[k] * f[k];
    sfg += w[k] * f[k] * g[k];
  }
  auto sse = [&](double a, double b) {
    double s = 0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      const double r = g[k] - a - b * f[k];
      s += w[k] * r * r;
    }
    return s;
  };
  LinearFit best;
  auto consider = [&](double a, double b) {
    if (a < 0.0 || b < 0.0) return;
    const double s = sse(a, b);
    if (s < best.sse) best = {a, b, s};
  };
  const double det = sw * sff - sf * sf;
  if (det > 1e-14 * sw * sff) consider((sff * sg - sf * sfg) / det, (sw * sfg - sf * sg) / det);
  if (sff > 0.0) consider(0.0, std::max(0.0, sfg / sff));
  consider(std::max(0.0, sg / sw), 0.0);
  return best;
}

}  // namespace

VariogramFit fit_range(const Variogram& vg) {
  std::vector<double> h, g, w;
  for (std::size_t k = 0; k < vg.size(); ++k) {
    if (vg.bin_counts[k] <= 0) continue;
    h.push_back(vg.bin_centers[k]);
    g.push_back(vg.semivariances[k]);
    w.push_back(static_cast<double>(vg.bin_counts[k]));
  }
  if (h.size() < 3)
    throw InsufficientDataError("variogram fit needs at least 3 non-empty bins, found " +
                                std::to_string(h.size()));

  VariogramFit fit;
  fit.range_lower = *std::min_element(h.begin(), h.end()) / 10.0;
  fit.range_upper = 10.0 * *std::max_element(h.begin(), h.end());

  if (*std::max_element(g.begin(), g.end()) <= 0.0) {
    fit.range = fit.range_lower;
    fit.degenerate = true;
    fit.at_lower_bound = true;
    return fit;
  }

  std::vector<double> f(h.size());
  auto profile = [&](double log_range) {
    const double r = std::exp(log_range);
    for (std::size_t k = 0; k < h.size(); ++k) f[k] = 1.0 - std::exp(-h[k] / r);
    return fit_linear(f, g, w);
  };

  const double lo = std::log(fit.range_lower);
  const double hi = std::log(fit.range_upper);
  constexpr int kGrid = 400;
  int best = 0;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= kGrid; ++i) {
    const double s = profile(lo + (hi - lo) * i / kGrid).sse;
    if (s < best_sse) {
      best_sse = s;
      best = i;
    }
  }
  const double a = lo + (hi - lo) * std::max(0, best - 1) / kGrid;
  const double b = lo + (hi - lo) * std::min(kGrid, best + 1) / kGrid;
  const auto [log_r, sse] = boost::math::tools::brent_find_minima(
      [&](double t) { return profile(t).sse; }, a, b, std::numeric_limits<double>::digits);

  double chosen = log_r;
  if (best_sse < sse) chosen = lo + (hi - lo) * best / kGrid;
  const LinearFit lin = profile(chosen);
  fit.range = std::exp(chosen);
  fit.sill = lin.sill;
  fit.nugget = lin.nugget;
  fit.objective = lin.sse;
  if (fit.sill <= 0.0) {
    fit.degenerate = true;
    fit.range = fit.range_lower;
  }
  fit.at_lower_bound = fit.range <= fit.range_lower * (1.0 + 1e-3);
  fit.at_upper_bound = fit.range >= fit.range_upper * (1.0 - 1e-3);
  return fit;
}

}  // namespace smokecausal::spatial

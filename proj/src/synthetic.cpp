#include "smokecausal/synthetic.hpp"

#include "smokecausal/errors.hpp"
#include "smokecausal/rng.hpp"

#include <cmath>
#include <cstdio>
#include <random>

namespace smokecausal::synth {

void TrueParams::validate() const {
  const double vars[] = {sigma_alpha0_sq, sigma_beta0_sq, sigma_alpha1_sq, sigma_beta1_sq,
                         sigma1_sq,       sigma2_sq,      sigma_sq};
  for (double v : vars)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("variances must be >= 0");
  if (!(std::abs(gamma) <= 1.0)) throw ValidationError("gamma must lie in [-1, 1]");
  if (!(phi1 > 0.0) || !(phi2 > 0.0)) throw ValidationError("ranges must be > 0");
  if (!std::isfinite(tau)) throw ValidationError("tau must be finite");
}

spatial::CovarianceParams TrueParams::covariance() const {
  return {sigma1_sq, sigma2_sq, gamma, phi1, sigma_sq};
}

namespace {

Eigen::MatrixXd correlation_factor(const spatial::SiteSet& sites, double phi) {
  const MatrixXd r = spatial::exp_correlation(spatial::distance_matrix(sites), phi);
  Eigen::LLT<MatrixXd> llt(r);
  if (llt.info() != Eigen::Success)
    throw NumericalError(
        "Cholesky of the site correlation matrix failed (coincident sites?); add jitter or "
        "deduplicate locations");
  return llt.matrixL();
}

}  // namespace

BiasFields simulate_bias_fields(const spatial::SiteSet& sites, const TrueParams& params,
                                std::uint64_t seed) {
  params.validate();
  const MatrixXd l = correlation_factor(sites, params.phi2);
  const auto n = static_cast<Eigen::Index>(sites.size());
  auto draw = [&](std::uint32_t which, double mu, double var) {
    rng::Philox4x32 g(seed, rng::Tag::SimBiasField, which);
    const VectorXd z = rng::normal_vector(g, n);
    return VectorXd(VectorXd::Constant(n, mu) + std::sqrt(var) * (l * z));
  };
  BiasFields b;
  b.alpha0 = draw(0, params.mu_alpha0, params.sigma_alpha0_sq);
  b.beta0 = draw(1, params.mu_beta0, params.sigma_beta0_sq);
  b.alpha1 = draw(2, params.mu_alpha1, params.sigma_alpha1_sq);
  b.beta1 = draw(3, params.mu_beta1, params.sigma_beta1_sq);
  return b;
}

void simulate_covariates(const spatial::SiteSet& sites, Eigen::Index n_days,
                         const CovariateConfig& cfg, std::uint64_t seed, MatrixXd& theta_hat,
                         MatrixXd& delta_hat) {
  if (n_days < 1) throw ValidationError("simulation needs at least one day");
  const auto n = static_cast<Eigen::Index>(sites.size());
  theta_hat.resize(n, n_days);
  const double innov_sd = cfg.theta_log_sd * std::sqrt(1.0 - cfg.theta_ar * cfg.theta_ar);
  for (Eigen::Index i = 0; i < n; ++i) {
    rng::Philox4x32 g(seed, rng::Tag::SimThetaHat, static_cast<std::uint32_t>(i));
    double z = cfg.theta_log_sd * rng::normal(g);
    for (Eigen::Index t = 0; t < n_days; ++t) {
      if (t > 0) z = cfg.theta_ar * z + innov_sd * rng::normal(g);
      theta_hat(i, t) = std::exp(cfg.theta_log_mean + z);
    }
  }

  struct Episode {
    Eigen::Index start;
    Eigen::Vector2d at;
    double intensity;
  };
  std::vector<Episode> episodes;
  rng::Philox4x32 g(seed, rng::Tag::SimFireEpisodes);
  const Eigen::Vector2d lo = sites.xy.colwise().minCoeff().transpose();
  const Eigen::Vector2d hi = sites.xy.colwise().maxCoeff().transpose();
  std::poisson_distribution<int> count(cfg.fire_rate);
  std::exponential_distribution<double> size(1.0 / cfg.fire_intensity_mean);
  for (Eigen::Index t = 0; t < n_days; ++t) {
    const int k = cfg.fire_rate > 0.0 ? count(g) : 0;
    for (int e = 0; e < k; ++e) {
      Eigen::Vector2d at;
      for (int d = 0; d < 2; ++d) at[d] = lo[d] + (hi[d] - lo[d]) * rng::uniform(g);
      episodes.push_back({t, at, size(g)});
    }
  }
  delta_hat = MatrixXd::Zero(n, n_days);
  for (const auto& ep : episodes) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (sites.xy.row(i).transpose() - ep.at).norm();
      const double space = ep.intensity * std::exp(-d / cfg.fire_scale_km);
      for (Eigen::Index t = ep.start; t < n_days; ++t) {
        const double v = space * std::exp(-static_cast<double>(t - ep.start) / cfg.fire_decay_days);
        if (v < 1e-6 * cfg.fire_floor) break;
        delta_hat(i, t) += v;
      }
    }
  }
  delta_hat = (delta_hat.array() < cfg.fire_floor).select(0.0, delta_hat);
}

SimulatedPanel simulate_panel(const spatial::SiteSet& sites, Eigen::Index n_days,
                              const TrueParams& params, const CovariateConfig& cfg,
                              std::uint64_t seed) {
  MatrixXd theta_hat, delta_hat;
  simulate_covariates(sites, n_days, cfg, seed, theta_hat, delta_hat);
  return simulate_panel(sites, theta_hat, delta_hat, params, cfg, seed);
}

SimulatedPanel simulate_panel(const spatial::SiteSet& sites, const MatrixXd& theta_hat,
                              const MatrixXd& delta_hat, const TrueParams& params,
                              const CovariateConfig& cfg, std::uint64_t seed) {
  params.validate();
  sites.validate();
  const auto n = static_cast<Eigen::Index>(sites.size());
  const auto T = theta_hat.cols();
  if (T < 1) throw ValidationError("simulation needs at least one day");
  if (theta_hat.rows() != n || delta_hat.rows() != n || delta_hat.cols() != T)
    throw ValidationError("covariate matrices do not match the site set");

  SimulatedPanel sim;
  sim.params = params;
  sim.bias = simulate_bias_fields(sites, params, seed);
  const MatrixXd l = correlation_factor(sites, params.phi1);

  // LMC form of the bivariate error: e1 = rho * e0 + s2 * L z2.
  const double sd1 = std::sqrt(params.sigma1_sq);
  const double sd2 = std::sqrt(params.sigma2_sq);
  const double rho = sd1 > 0.0 ? params.gamma * sd2 / sd1 : 0.0;
  const double s2 = sd1 > 0.0 ? sd2 * std::sqrt(std::max(0.0, 1.0 - params.gamma * params.gamma))
                              : sd2;
  sim.e0.resize(n, T);
  sim.e1.resize(n, T);
  sim.eps.resize(n, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    rng::Philox4x32 g(seed, rng::Tag::SimErrorProcess, static_cast<std::uint32_t>(t));
    const VectorXd z1 = rng::normal_vector(g, n);
    const VectorXd z2 = rng::normal_vector(g, n);
    sim.e0.col(t) = sd1 * (l * z1);
    sim.e1.col(t) = rho * sim.e0.col(t) + s2 * (l * z2);
  }
  const double noise_sd = std::sqrt(params.sigma_sq);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < T; ++t) {
      rng::Philox4x32 g(seed, rng::Tag::SimNoise, static_cast<std::uint32_t>(i),
                        static_cast<std::uint32_t>(t));
      sim.eps(i, t) = noise_sd * rng::normal(g);
    }
  }

  const auto& b = sim.bias;
  sim.theta = (theta_hat.array().colwise() * b.beta0.array()).colwise() + b.alpha0.array();
  sim.theta += sim.e0;
  sim.delta = (delta_hat.array().colwise() * b.beta1.array()).colwise() + b.alpha1.array();
  sim.delta += sim.e1;

  auto& d = sim.data;
  d.sites = sites;
  d.theta_hat = theta_hat;
  d.delta_hat = delta_hat;
  d.tau = params.tau;
  d.c = data::smoke_indicator(delta_hat, params.tau);
  d.negative_delta_count = data::count_negative(delta_hat);
  d.y = sim.theta + (d.c.cast<double>() * sim.delta.array()).matrix() + sim.eps;
  d.missing = data::Flags::Zero(n, T);
  if (cfg.missing_fraction > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) {
      rng::Philox4x32 g(seed, rng::Tag::SimMissing, static_cast<std::uint32_t>(i));
      for (Eigen::Index t = 0; t < T; ++t) {
        if (rng::uniform(g) < cfg.missing_fraction) {
          d.missing(i, t) = 1;
          d.y(i, t) = std::numeric_limits<double>::quiet_NaN();
        }
      }
    }
  }
  d.validate();
  return sim;
}

spatial::SiteSet simulate_sites(const SiteLayout& layout, std::uint64_t seed) {
  if (layout.regions.empty() || layout.sites_per_region < 1)
    throw ValidationError("site layout needs at least one region and one site");
  std::vector<std::string> ids, regions;
  std::vector<double> lon, lat;
  rng::Philox4x32 g(seed, rng::Tag::SimSites);
  for (std::size_t r = 0; r < layout.regions.size(); ++r) {
    const double x0 = static_cast<double>(r) * (layout.extent_km + layout.region_gap_km);
    for (int k = 0; k < layout.sites_per_region; ++k) {
      const double x = x0 + layout.extent_km * rng::uniform(g);
      const double y = layout.extent_km * rng::uniform(g);
      const auto ll = layout.projection.to_lonlat(x, y);
      char id[64];
      std::snprintf(id, sizeof id, "%s-%03d", layout.regions[r].c_str(), k + 1);
      ids.emplace_back(id);
      regions.push_back(layout.regions[r]);
      lon.push_back(ll[0]);
      lat.push_back(ll[1]);
    }
  }
  const auto n = static_cast<Eigen::Index>(ids.size());
  return spatial::SiteSet::from_lonlat(std::move(ids), Eigen::Map<VectorXd>(lon.data(), n),
                                       Eigen::Map<VectorXd>(lat.data(), n), std::move(regions));
}

data::Grid simulate_grid(const SiteLayout& layout, double spacing_km, int county_block,
                         const spatial::Projection& site_projection) {
  if (!(spacing_km > 0.0) || county_block < 1)
    throw ValidationError("grid spacing and county block must be positive");
  data::Grid grid;
  std::vector<double> lon, lat;
  const int per_side = std::max(1, static_cast<int>(std::floor(layout.extent_km / spacing_km)));
  for (std::size_t r = 0; r < layout.regions.size(); ++r) {
    const double x0 = static_cast<double>(r) * (layout.extent_km + layout.region_gap_km);
    const int counties_per_side = (per_side + county_block - 1) / county_block;
    for (int iy = 0; iy < per_side; ++iy) {
      for (int ix = 0; ix < per_side; ++ix) {
        const double x = x0 + (ix + 0.5) * spacing_km;
        const double y = (iy + 0.5) * spacing_km;
        const auto ll = layout.projection.to_lonlat(x, y);
        const int county = (iy / county_block) * counties_per_side + ix / county_block + 1;
        char cell[64], fips[32];
        std::snprintf(cell, sizeof cell, "%s-%03d-%03d", layout.regions[r].c_str(), iy, ix);
        std::snprintf(fips, sizeof fips, "%02d%03d", static_cast<int>(r) + 1, county);
        grid.cell_ids.emplace_back(cell);
        grid.regions.push_back(layout.regions[r]);
        grid.county_fips.emplace_back(fips);
        lon.push_back(ll[0]);
        lat.push_back(ll[1]);
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(grid.cell_ids.size());
  grid.lon = Eigen::Map<VectorXd>(lon.data(), n);
  grid.lat = Eigen::Map<VectorXd>(lat.data(), n);
  grid.xy.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i)
    grid.xy.row(i) = site_projection.to_km(grid.lon[i], grid.lat[i]);
  return grid;
}

OlsFit ols_mean_recovery(const data::PanelDataset& data, Eigen::Index site) {
  const MatrixXd x = data::site_design(data, site);
  const VectorXd y = data::site_response(data, site);
  if (x.rows() < 4 || data::numerical_rank(x) < 4)
    throw RankDeficientError("site '" + data.sites.ids[static_cast<std::size_t>(site)] +
                             "': design (1, theta_hat, C, C*delta_hat) is rank deficient; "
                             "alpha1/beta1 are not identified from this site alone");
  Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
  OlsFit fit;
  fit.coef = qr.solve(y);
  fit.n_obs = x.rows();
  const VectorXd resid = y - x * fit.coef;
  const auto dof = static_cast<double>(x.rows() - 4);
  fit.residual_var = dof > 0 ? resid.squaredNorm() / dof : 0.0;
  const Eigen::Matrix4d xtx_inv = (x.transpose() * x).inverse();
  fit.se = (fit.residual_var * xtx_inv.diagonal()).array().sqrt();
  return fit;
}

MatrixXd ols_residual_field(const data::PanelDataset& data) {
  MatrixXd out = MatrixXd::Constant(data.n_sites(), data.n_days(),
                                    std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < data.n_sites(); ++i) {
    const MatrixXd x = data::site_design(data, i);
    if (x.rows() == 0) continue;
    const VectorXd y = data::site_response(data, i);
    const VectorXd coef = Eigen::CompleteOrthogonalDecomposition<MatrixXd>(x).solve(y);
    const VectorXd resid = y - x * coef;
    Eigen::Index k = 0;
    for (Eigen::Index t = 0; t < data.n_days(); ++t)
      if (!data.missing(i, t)) out(i, t) = resid[k++];
  }
  return out;
}

}  // namespace smokecausal::synth

#pragma once

// Forward simulation of the full hierarchical model with known ground truth,
// plus per-site ordinary least squares as an independent oracle for the
// mean structure.

#include "smokecausal/panel.hpp"
#include "smokecausal/spatial.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace smokecausal::synth {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct TrueParams {
  double mu_alpha0 = 1.0;
  double mu_beta0 = 0.8;
  double mu_alpha1 = 0.5;
  double mu_beta1 = 0.7;
  double sigma_alpha0_sq = 0.3;
  double sigma_beta0_sq = 0.02;
  double sigma_alpha1_sq = 0.3;
  double sigma_beta1_sq = 0.02;
  double phi2 = 150.0;  // km
  double sigma1_sq = 2.0;
  double sigma2_sq = 1.0;
  double gamma = 0.3;
  double phi1 = 40.0;  // km
  double sigma_sq = 0.5;
  double tau = 1.0;

  // Simulation accepts zero variances (deterministic limits).
  void validate() const;
  spatial::CovarianceParams covariance() const;
};

struct BiasFields {
  VectorXd alpha0, beta0, alpha1, beta1;
};

// Default covariate process standing in for the numerical model.
struct CovariateConfig {
  double theta_log_mean = 0.69314718055994531;  // log 2
  double theta_log_sd = 0.4;
  double theta_ar = 0.7;
  double fire_rate = 0.3;             // episodes per day
  double fire_intensity_mean = 8.0;   // peak delta_hat, ug/m3
  double fire_scale_km = 60.0;        // spatial e-folding distance
  double fire_decay_days = 2.0;       // temporal e-folding time
  double fire_floor = 0.05;           // smaller contributions set to 0
  double missing_fraction = 0.0;      // MCAR share of masked y cells
};

struct SimulatedPanel {
  data::PanelDataset data;
  BiasFields bias;
  MatrixXd theta, delta, e0, e1, eps;  // sites x days latents
  TrueParams params;
};

BiasFields simulate_bias_fields(const spatial::SiteSet& sites, const TrueParams& params,
                                std::uint64_t seed);

// theta_hat (lognormal AR(1) per site) and delta_hat (Poisson fire episodes
// decaying exponentially in space and time).
void simulate_covariates(const spatial::SiteSet& sites, Eigen::Index n_days,
                         const CovariateConfig& cfg, std::uint64_t seed, MatrixXd& theta_hat,
                         MatrixXd& delta_hat);

SimulatedPanel simulate_panel(const spatial::SiteSet& sites, Eigen::Index n_days,
                              const TrueParams& params, const CovariateConfig& cfg,
                              std::uint64_t seed);

// Same, with caller-supplied covariates.
SimulatedPanel simulate_panel(const spatial::SiteSet& sites, const MatrixXd& theta_hat,
                              const MatrixXd& delta_hat, const TrueParams& params,
                              const CovariateConfig& cfg, std::uint64_t seed);

struct SiteLayout {
  std::vector<std::string> regions{"R1"};
  int sites_per_region = 25;
  double extent_km = 300.0;     // side of each region's square
  double region_gap_km = 0.0;   // spacing between region squares (east-west)
  spatial::Projection projection{-120.0, 37.0};
};

spatial::SiteSet simulate_sites(const SiteLayout& layout, std::uint64_t seed);

// Square grid over each region's extent; counties are blocks of
// county_block x county_block cells. Planar coordinates use the sites'
// projection so cells and sites share one frame.
data::Grid simulate_grid(const SiteLayout& layout, double spacing_km, int county_block,
                         const spatial::Projection& site_projection);

struct OlsFit {
  Eigen::Vector4d coef;  // (alpha0, beta0, alpha1, beta1)
  Eigen::Vector4d se;
  double residual_var = 0.0;
  Eigen::Index n_obs = 0;
};

// Per-site OLS of y on (1, theta_hat, C, C * delta_hat). Throws
// RankDeficientError if the design is not of full column rank.
OlsFit ols_mean_recovery(const data::PanelDataset& data, Eigen::Index site);

// Per-site minimum-norm least-squares residuals (sites x days, NaN where y is
// missing). Works for rank-deficient sites too.
MatrixXd ols_residual_field(const data::PanelDataset& data);

}  // namespace smokecausal::synth

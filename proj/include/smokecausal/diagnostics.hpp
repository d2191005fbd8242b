#pragma once

// Convergence and model-fit diagnostics: effective sample size, residual
// autocorrelation, per-flag variogram goodness of fit and covariance curves.

#include "smokecausal/panel.hpp"
#include "smokecausal/spatial.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smokecausal::diag {

using Eigen::MatrixXd;

struct EssResult {
  double ess = 0.0;
  std::size_t n = 0;
  bool constant = false;  // zero-variance chain; ess reported as n
};

// N / (1 + 2 sum rho_k), truncated by Geyer's initial positive sequence and
// clipped to (0, N]. Needs N >= 10.
EssResult ess(std::span<const double> chain);

struct AcfSeries {
  std::vector<double> acf;  // lags 0..max_lag
  std::vector<long> pairs;  // usable pairs per lag
};

// Sample ACF with denominator N_obs; NaN entries are skipped pairwise.
AcfSeries acf(std::span<const double> x, int max_lag);

struct ResidualAcf {
  std::vector<std::string> site_ids;
  std::vector<AcfSeries> per_site;
  AcfSeries pooled;  // per-lag average weighted by pair counts
  int max_lag = 0;   // possibly shortened
  std::vector<std::string> warnings;
};

// ACF of day-ordered residuals (sites x days, NaN missing) per site and pooled.
ResidualAcf residual_acf(const MatrixXd& residuals, const std::vector<std::string>& site_ids,
                         int max_lag);

struct GofGroup {
  int c = 0, c_prime = 0;
  std::string label;  // "0-0", "0-1", "1-1"
  spatial::Variogram empirical;
  std::vector<double> fitted;  // model semivariance at each bin center
};

struct VariogramGof {
  std::vector<GofGroup> groups;
  std::vector<std::string> notes;  // omitted groups
};

// Model semivariance 0.5 Var Y(s) + 0.5 Var Y(s') - Cov(Y(s), Y(s')) for a
// pair at distance h > 0 with flags (c, c').
double model_semivariance(double h, int c, int c_prime, const spatial::CovarianceParams& p);

// Same-day pairs grouped by their smoke flags.
VariogramGof variogram_gof(const MatrixXd& residuals, const data::Flags& c, const MatrixXd& dist,
                           const spatial::CovarianceParams& params,
                           int n_bins = spatial::kDefaultVariogramBins,
                           std::optional<double> max_lag = std::nullopt);

struct CovarianceCurves {
  std::vector<double> h;
  std::vector<double> c00, c01, c11;
};

// obs_covariance between distinct sites for the three flag cases.
CovarianceCurves covariance_curves(const spatial::CovarianceParams& params,
                                   const std::vector<double>& h);

}  // namespace smokecausal::diag

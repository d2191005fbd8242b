#include "smokecausal/diagnostics.hpp"

#include "smokecausal/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace smokecausal::diag {

EssResult ess(std::span<const double> chain) {
  const std::size_t n = chain.size();
  if (n < 10) throw InsufficientDataError("ESS needs at least 10 draws");
  for (double v : chain)
    if (!std::isfinite(v)) throw ValidationError("ESS input contains non-finite draws");
  EssResult out;
  out.n = n;
  if (std::all_of(chain.begin(), chain.end(), [&](double v) { return v == chain[0]; })) {
    out.ess = static_cast<double>(n);
    out.constant = true;
    return out;
  }

  double mean = 0.0;
  for (double v : chain) mean += v;
  mean /= static_cast<double>(n);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = chain[i] - mean;
  auto autocov = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) s += x[i] * x[i + k];
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);

  // tau = -1 + 2 sum_k Gamma_k with Gamma_k = rho_{2k} + rho_{2k+1}, summed
  // while Gamma_k stays positive.
  double tau = -1.0;
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    const double g = (autocov(2 * k) + autocov(2 * k + 1)) / c0;
    if (!(g > 0.0)) break;
    tau += 2.0 * g;
  }
  const double nd = static_cast<double>(n);
  out.ess = tau > 0.0 ? std::min(nd, nd / tau) : nd;
  return out;
}

AcfSeries acf(std::span<const double> x, int max_lag) {
  if (max_lag < 0) throw ValidationError("max_lag must be >= 0");
  AcfSeries out;
  double mean = 0.0;
  long n_obs = 0;
  for (double v : x)
    if (std::isfinite(v)) {
      mean += v;
      ++n_obs;
    }
  if (n_obs == 0) throw InsufficientDataError("ACF of an empty series");
  mean /= static_cast<double>(n_obs);

  double c0 = 0.0;
  for (double v : x)
    if (std::isfinite(v)) c0 += (v - mean) * (v - mean);
  c0 /= static_cast<double>(n_obs);

  for (int k = 0; k <= max_lag; ++k) {
    double s = 0.0;
    long pairs = 0;
    for (std::size_t t = 0; t + k < x.size(); ++t) {
      if (!std::isfinite(x[t]) || !std::isfinite(x[t + k])) continue;
      s += (x[t] - mean) * (x[t + k] - mean);
      ++pairs;
    }
    s /= static_cast<double>(n_obs);
    out.acf.push_back(c0 > 0.0 ? s / c0 : (k == 0 ? 1.0 : 0.0));
    out.pairs.push_back(pairs);
  }
  return out;
}

ResidualAcf residual_acf(const MatrixXd& residuals, const std::vector<std::string>& site_ids,
                         int max_lag) {
  if (static_cast<std::size_t>(residuals.rows()) != site_ids.size())
    throw ValidationError("residual rows do not match site ids");
  if (max_lag < 0) throw ValidationError("max_lag must be >= 0");
  ResidualAcf out;
  out.site_ids = site_ids;

  long min_obs = residuals.cols();
  for (Eigen::Index i = 0; i < residuals.rows(); ++i) {
    long k = 0;
    for (Eigen::Index t = 0; t < residuals.cols(); ++t) k += std::isfinite(residuals(i, t));
    if (k > 0) min_obs = std::min(min_obs, k);
  }
  out.max_lag = max_lag;
  if (min_obs < max_lag + 2) {
    out.max_lag = std::max<long>(0, min_obs - 2);
    out.warnings.push_back(fmt::format(
        "only {} observations at the sparsest site; ACF lags shortened from {} to {}", min_obs,
        max_lag, out.max_lag));
    spdlog::warn("{}", out.warnings.back());
  }

  std::vector<double> num(out.max_lag + 1, 0.0);
  std::vector<long> den(out.max_lag + 1, 0);
  for (Eigen::Index i = 0; i < residuals.rows(); ++i) {
    std::vector<double> row(residuals.cols());
    for (Eigen::Index t = 0; t < residuals.cols(); ++t) row[t] = residuals(i, t);
    AcfSeries s;
    try {
      s = acf(row, out.max_lag);
    } catch (const InsufficientDataError&) {
      s.acf.assign(out.max_lag + 1, std::numeric_limits<double>::quiet_NaN());
      s.pairs.assign(out.max_lag + 1, 0);
    }
    for (int k = 0; k <= out.max_lag; ++k)
      if (s.pairs[k] > 0) {
        num[k] += s.acf[k] * static_cast<double>(s.pairs[k]);
        den[k] += s.pairs[k];
      }
    out.per_site.push_back(std::move(s));
  }
  for (int k = 0; k <= out.max_lag; ++k) {
    out.pooled.acf.push_back(den[k] > 0 ? num[k] / static_cast<double>(den[k])
                                        : std::numeric_limits<double>::quiet_NaN());
    out.pooled.pairs.push_back(den[k]);
  }
  return out;
}

double model_semivariance(double h, int c, int c_prime, const spatial::CovarianceParams& p) {
  const double v = spatial::obs_covariance(0.0, c, c, p, true);
  const double v_prime = spatial::obs_covariance(0.0, c_prime, c_prime, p, true);
  return 0.5 * (v + v_prime) - spatial::obs_covariance(h, c, c_prime, p, false);
}

VariogramGof variogram_gof(const MatrixXd& residuals, const data::Flags& c, const MatrixXd& dist,
                           const spatial::CovarianceParams& params, int n_bins,
                           std::optional<double> max_lag) {
  params.validate();
  if (c.rows() != residuals.rows() || c.cols() != residuals.cols())
    throw ValidationError("flags do not match the residual field");
  const double lag = max_lag.value_or(spatial::default_max_lag(dist));
  if (!(lag > 0.0)) throw InsufficientDataError("variogram needs distinct site locations");

  std::array<spatial::VariogramAccumulator, 3> acc{spatial::VariogramAccumulator(lag, n_bins),
                                                   spatial::VariogramAccumulator(lag, n_bins),
                                                   spatial::VariogramAccumulator(lag, n_bins)};
  const Eigen::Index n = residuals.rows();
  for (Eigen::Index t = 0; t < residuals.cols(); ++t)
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!std::isfinite(residuals(i, t))) continue;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        if (!std::isfinite(residuals(j, t))) continue;
        const double d = residuals(i, t) - residuals(j, t);
        acc[c(i, t) + c(j, t)].add(dist(i, j), 0.5 * d * d);
      }
    }

  VariogramGof out;
  const std::array<std::pair<int, int>, 3> flags{{{0, 0}, {0, 1}, {1, 1}}};
  for (int g = 0; g < 3; ++g) {
    const auto [a, b] = flags[g];
    const std::string label = fmt::format("{}-{}", a, b);
    if (acc[g].total_pairs() == 0) {
      out.notes.push_back("no pairs with flags " + label + "; group omitted");
      continue;
    }
    GofGroup grp;
    grp.c = a;
    grp.c_prime = b;
    grp.label = label;
    grp.empirical = acc[g].finish();
    for (double h : grp.empirical.bin_centers)
      grp.fitted.push_back(model_semivariance(h, a, b, params));
    out.groups.push_back(std::move(grp));
  }
  return out;
}

CovarianceCurves covariance_curves(const spatial::CovarianceParams& params,
                                   const std::vector<double>& h) {
  params.validate();
  CovarianceCurves out;
  out.h = h;
  for (double d : h) {
    out.c00.push_back(spatial::obs_covariance(d, 0, 0, params));
    out.c01.push_back(spatial::obs_covariance(d, 0, 1, params));
    out.c11.push_back(spatial::obs_covariance(d, 1, 1, params));
  }
  return out;
}

}  // namespace smokecausal::diag

#pragma once

// Small statistical oracles shared by the unit and acceptance tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testsupport {

// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
inline double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

// Asymptotic p-value with Stephens' small-sample correction.
inline double ks_pvalue(const std::vector<double>& x, const std::function<double(double)>& cdf) {
  const double n = static_cast<double>(x.size());
  const double d = ks_statistic(x, cdf);
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  if (lambda < 1e-3) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    p += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

inline double normal_cdf(double x, double mean, double sd) {
  return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0)));
}

inline double mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double variance(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

// Monte Carlo standard error of a mean from batch means (b batches).
inline double batch_mean_se(const std::vector<double>& x, int batches = 50) {
  const std::size_t len = x.size() / batches;
  std::vector<double> bm;
  for (int b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += x[i];
    bm.push_back(s / static_cast<double>(len));
  }
  return std::sqrt(variance(bm) / batches);
}

// Sample mean vector and covariance of row-stacked draws.
struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline Moments moments(const Eigen::MatrixXd& draws) {
  Moments m;
  m.mean = draws.colwise().mean().transpose();
  const Eigen::MatrixXd c = draws.rowwise() - m.mean.transpose();
  m.cov = c.transpose() * c / static_cast<double>(draws.rows() - 1);
  return m;
}

// Max over entries of |empirical - exact| / MC standard error, for iid
// Gaussian draws. Mean SE = sqrt(S_ii / N); covariance SE =
// sqrt((S_ii S_jj + S_ij^2) / N).
inline double max_mean_z(const Moments& m, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                         double n) {
  double z = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i)
    z = std::max(z, std::abs(m.mean[i] - mean[i]) / std::sqrt(cov(i, i) / n));
  return z;
}

inline double max_cov_z(const Moments& m, const Eigen::MatrixXd& cov, double n) {
  double z = 0.0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) {
      const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / n);
      z = std::max(z, std::abs(m.cov(i, j) - cov(i, j)) / se);
    }
  return z;
}

}  // namespace testsupport

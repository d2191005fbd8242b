#pragma once

// Site geometry, exponential kernels, the observation covariance for the
// fire/no-fire mixture, and classical variogram estimation.

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace smokecausal::spatial {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Coords = Eigen::Matrix<double, Eigen::Dynamic, 2>;

inline constexpr double kEarthRadiusKm = 6371.0088;

// Equirectangular projection to planar km about a reference point.
struct Projection {
  double lon0 = 0.0;
  double lat0 = 0.0;

  Eigen::Vector2d to_km(double lon, double lat) const;
  Eigen::Vector2d to_lonlat(double x_km, double y_km) const;
};

struct SiteSet {
  std::vector<std::string> ids;
  std::vector<std::string> regions;
  VectorXd lon, lat;  // decimal degrees
  Coords xy;          // planar km under `projection`
  Projection projection;

  std::size_t size() const { return ids.size(); }
  // Index of a site id, or nullopt.
  std::optional<std::size_t> find(const std::string& id) const;
  // Sites at the given indices, keeping the projection and planar coordinates.
  SiteSet subset(const std::vector<std::size_t>& idx) const;

  // Throws ValidationError unless ids are unique, coordinates finite and n >= 1.
  void validate() const;

  // Projects about the centroid of the supplied coordinates.
  static SiteSet from_lonlat(std::vector<std::string> ids, VectorXd lon, VectorXd lat,
                             std::vector<std::string> regions);
  static SiteSet from_lonlat(std::vector<std::string> ids, VectorXd lon, VectorXd lat,
                             std::vector<std::string> regions, const Projection& proj);
  // Planar km coordinates; lon/lat are back-filled through `proj`.
  static SiteSet from_planar(std::vector<std::string> ids, const Coords& xy,
                             std::vector<std::string> regions, const Projection& proj = {});
};

struct CovarianceParams {
  double sigma1_sq = 1.0;  // variance of the background error e0
  double sigma2_sq = 0.0;  // variance of the fire error e1
  double gamma = 0.0;      // corr(e0, e1)
  double phi1 = 1.0;       // range, km
  double sigma_sq = 0.0;   // measurement-error nugget

  void validate() const;
};

// Pairwise Euclidean distances in km.
MatrixXd distance_matrix(const SiteSet& sites);
MatrixXd distance_matrix(const Coords& xy);
MatrixXd cross_distance(const Coords& a, const Coords& b);

// Elementwise exp(-h / phi).
MatrixXd exp_correlation(const MatrixXd& dist, double phi);

// Cov[Y_t(s), Y_t(s')] for smoke flags (c, c'). The nugget enters only when
// `same_site` is set, i.e. the two observations are the same monitor.
double obs_covariance(double h, int c, int c_prime, const CovarianceParams& p,
                      bool same_site = false);

struct Variogram {
  std::vector<double> bin_edges;  // n_bins + 1 edges
  std::vector<double> bin_centers;  // mean pair lag in the bin, midpoint when empty
  std::vector<double> semivariances;
  std::vector<long> bin_counts;

  std::size_t size() const { return bin_centers.size(); }
  bool empty_bin(std::size_t k) const { return bin_counts[k] == 0; }
};

// Equal-width bins on (0, max_lag]. Pairs beyond max_lag are dropped.
class VariogramAccumulator {
 public:
  VariogramAccumulator(double max_lag, int n_bins);

  void add(double h, double half_sq_diff);
  Variogram finish() const;
  long total_pairs() const { return total_; }

 private:
  double max_lag_;
  std::vector<double> edges_;
  std::vector<double> sum_, lag_sum_;
  std::vector<long> count_;
  long total_ = 0;
};

inline constexpr int kDefaultVariogramBins = 15;

// Half of the largest pairwise distance.
double default_max_lag(const MatrixXd& dist);

// Matheron estimator pooled over days. `field` is sites x days with NaN for
// missing cells. Throws InsufficientDataError if no pair is usable.
Variogram empirical_variogram(const MatrixXd& field, const MatrixXd& dist,
                              int n_bins = kDefaultVariogramBins,
                              std::optional<double> max_lag = std::nullopt);

struct VariogramFit {
  double sill = 0.0;
  double range = 0.0;
  double nugget = 0.0;
  double range_lower = 0.0;
  double range_upper = 0.0;
  double objective = 0.0;  // weighted SSE at the optimum
  bool degenerate = false;  // zero sill: no spatial structure
  bool at_lower_bound = false;
  bool at_upper_bound = false;
};

// nugget + sill * (1 - exp(-h / range)) for h > 0, and 0 at h = 0.
double exponential_variogram(double h, double sill, double range, double nugget);

// Bounded weighted least squares (weights = bin counts) of the exponential
// variogram with range in [min positive lag / 10, 10 * max lag].
VariogramFit fit_range(const Variogram& vg);

}  // namespace smokecausal::spatial

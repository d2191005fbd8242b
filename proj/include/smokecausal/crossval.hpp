#pragma once

// Site-level k-fold cross-validation and smoke-threshold selection.

#include "smokecausal/gibbs.hpp"
#include "smokecausal/panel.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace smokecausal::cv {

// k disjoint folds of site indices; the first n % k folds hold one extra
// site. Indices within a fold are sorted.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_sites, int k, std::uint64_t seed);

struct Metrics {
  double mse = 0.0;
  double rmse = 0.0;
  double mad = 0.0;       // mean |pred - obs|
  double sd = 0.0;        // sample sd of the predictions
  double coverage = 0.0;  // share of obs inside pred +- z * sd
  std::size_t n = 0;
};

Metrics cv_metrics(std::span<const double> pred_mean, std::span<const double> pred_sd,
                   std::span<const double> obs, double z = 1.96);

struct CvConfig {
  int folds = 5;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Reduced chain used for each fold unless the caller overrides it.
gibbs::ChainConfig default_cv_chain();

inline const std::vector<double> kDefaultTauGrid{0.0, 0.1, 1.0, 5.0, 10.0};

struct CvRow {
  double tau = 0.0;
  int fold = 0;  // 1-based; 0 marks the pooled row
  Metrics metrics;
  bool skipped = false;
  std::string note;
};

struct CvTable {
  std::vector<CvRow> rows;  // per tau: folds in order, then the pooled row
  double recommended_tau = 0.0;
  std::vector<std::string> notes;

  const CvRow& pooled(double tau) const;
};

// For each tau: rebuild C, fit on the training sites of every fold and score
// the posterior predictive of y at the held-out sites. Ranges are estimated
// per fit when the chain config leaves phi1/phi2 at zero.
CvTable tau_selection(const data::PanelDataset& data, const std::vector<double>& tau_grid,
                      const CvConfig& cv_config, const gibbs::ChainConfig& chain);

}  // namespace smokecausal::cv

#pragma once

// Subcommand orchestration: file-level inputs and outputs for simulate, fit,
// diagnose, predict, cv, burden, blocking and e2e, plus manifest writing.

#include "smokecausal/crossval.hpp"
#include "smokecausal/gibbs.hpp"
#include "smokecausal/health.hpp"
#include "smokecausal/inference.hpp"
#include "smokecausal/panel.hpp"
#include "smokecausal/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace smokecausal::pipeline {

namespace fs = std::filesystem;
using Eigen::MatrixXd;

struct SimulateConfig {
  synth::SiteLayout layout{{"R1", "R2"}, 25, 300.0, 300.0, {-120.0, 37.0}};
  Eigen::Index n_days = 200;
  synth::TrueParams truth;
  synth::CovariateConfig covariates;
  double grid_spacing_km = 12.0;
  int county_block = 3;
  std::vector<double> baseline_rates{0.0025, 0.0004, 0.0006, 0.0030};
  std::vector<double> age_shares{0.05, 0.25, 0.45, 0.25};
};

struct RunConfig {
  fs::path sites, panel, grid, counties, rates, out;
  double tau = 1.0;
  std::vector<double> tau_grid = cv::kDefaultTauGrid;
  gibbs::ChainConfig chain;                            // fit chains
  gibbs::ChainConfig cv_chain = cv::default_cv_chain();  // per-fold chains
  int folds = 5;
  std::uint64_t seed = 0;
  int jobs = 0;  // 0: one per region
  std::vector<std::string> merge_regions;
  double phi1 = 0.0;  // > 0 overrides the variogram estimate
  double phi2 = 0.0;
  std::vector<std::pair<std::string, double>> age_groups = health::kDefaultRelativeRates;
  double rr_increment = 10.0;
  int acf_max_lag = 10;
  std::vector<std::string> trace_params{"sigma_sq", "gamma", "mu_beta1", "sigma1_sq"};
  inference::DuplicatePolicy duplicates = inference::DuplicatePolicy::error;
  SimulateConfig simulate;

  // Effective values, echoed into manifest.json.
  nlohmann::json to_json() const;
};

// Overlays values from a config JSON object onto `cfg`. Unknown keys raise.
void apply_config_json(RunConfig& cfg, const nlohmann::json& j);

// Label used for the merged block of `--merge-regions`.
std::string merged_label(const std::vector<std::string>& regions);

struct RegionFit {
  std::string region;
  data::PanelDataset data;
  gibbs::RangeEstimate ranges;
  gibbs::PosteriorSamples samples;
  inference::CausalEffectPosterior effect;
};

// Loads sites and panel, applies the region merge and splits into blocks.
std::vector<data::RegionBlock> load_blocks(const RunConfig& cfg);

// Fits one region block with ranges estimated (or overridden) first.
RegionFit fit_region(const data::RegionBlock& block, const RunConfig& cfg);

// Stable per-region chain id so streams do not depend on region order.
std::uint32_t region_chain_id(const std::string& region);

// samples.csv round trip.
void write_samples(const fs::path& path, const gibbs::PosteriorSamples& s,
                   const std::string& qualifier = "");
gibbs::PosteriorSamples read_samples(const fs::path& path,
                                     const std::vector<std::string>& site_ids);

// Krige the per-draw causal effect of one fit onto cells: cells x draws.
MatrixXd krige_effect_draws(const RegionFit& fit, const spatial::Coords& cells,
                            inference::DuplicatePolicy dup);

struct BlockingResult {
  std::vector<std::string> cell_ids, regions;
  Eigen::VectorXd joint, separate;
  double max_abs_diff = 0.0;
  double correlation = 0.0;
};

BlockingResult blocking_sensitivity(const data::PanelDataset& data, const data::Grid& grid,
                                    const std::string& region_a, const std::string& region_b,
                                    const RunConfig& cfg);

// SHA-256 of a file as lowercase hex.
std::string sha256_file(const fs::path& path);

// Writes <out>/manifest.json listing every file under `out` with its hash.
void write_manifest(const fs::path& out, const std::string& subcommand, const RunConfig& cfg,
                    const std::string& status, const nlohmann::json& extra,
                    const std::string& error = "");

// Each cmd_* returns extra facts (ranges, warnings, selections) for the manifest.
nlohmann::json cmd_simulate(const RunConfig& cfg);
nlohmann::json cmd_fit(const RunConfig& cfg);
nlohmann::json cmd_diagnose(const RunConfig& cfg);
nlohmann::json cmd_predict(const RunConfig& cfg);
nlohmann::json cmd_cv(const RunConfig& cfg);
nlohmann::json cmd_burden(const RunConfig& cfg);
nlohmann::json cmd_blocking(const RunConfig& cfg);
nlohmann::json cmd_end_to_end(const RunConfig& cfg);

// Dispatches by name and maintains the manifest, marking failures.
void run_subcommand(const std::string& name, const RunConfig& cfg);

}  // namespace smokecausal::pipeline

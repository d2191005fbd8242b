#pragma once

// Counter-based random streams (Philox4x32-10).
//
// A stream is identified by (seed, tag, a, b). Two streams with different
// identifiers are statistically independent and each can be constructed in
// any order on any thread, which is what makes region-parallel simulation
// and per-day latent updates order-independent.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <limits>

namespace smokecausal::rng {

enum class Tag : std::uint32_t {
  // synthetic generator
  SimBiasField = 1,
  SimThetaHat,
  SimFireEpisodes,
  SimErrorProcess,
  SimNoise,
  SimMissing,
  SimSites,
  // gibbs sweep
  LatentTheta = 100,
  LatentDelta,
  BiasField,
  NuggetVariance,
  ThetaVariance,
  DeltaVariance,
  Rho,
  HyperMean,
  HyperVariance,
  Impute,
  Predict,
  // other consumers
  Folds = 200,
  Metropolis,
  Test = 1000,
};

class Philox4x32 {
 public:
  using result_type = std::uint64_t;

  Philox4x32(std::uint64_t seed, Tag tag, std::uint32_t a = 0, std::uint32_t b = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()();

  // Number of 128-bit blocks consumed so far.
  std::uint64_t position() const { return block_; }

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::uint32_t stream_a_ = 0;
  std::uint32_t stream_b_ = 0;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> out_{};
  int cursor_ = 4;
};

// Raw Philox4x32-10 bijection; exposed for known-answer tests.
std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 4> counter,
                                          std::array<std::uint32_t, 2> key);

double uniform(Philox4x32& g);
double normal(Philox4x32& g);
Eigen::VectorXd normal_vector(Philox4x32& g, Eigen::Index n);
// Gamma with shape/rate parameterization (mean shape/rate).
double gamma(Philox4x32& g, double shape, double rate);
// Inverse gamma IG(shape, rate): density proportional to x^{-shape-1} exp(-rate/x).
double inverse_gamma(Philox4x32& g, double shape, double rate);

}  // namespace smokecausal::rng

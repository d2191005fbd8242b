#include "smokecausal/rng.hpp"

#include <random>

namespace smokecausal::rng {
namespace {

constexpr std::uint32_t kMulA = 0xD2511F53u;
constexpr std::uint32_t kMulB = 0xCD9E8D57u;
constexpr std::uint32_t kWeylA = 0x9E3779B9u;
constexpr std::uint32_t kWeylB = 0xBB67AE85u;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 4> ctr,
                                          std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMulA) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMulB) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeylA;
    key[1] += kWeylB;
  }
  return ctr;
}

Philox4x32::Philox4x32(std::uint64_t seed, Tag tag, std::uint32_t a, std::uint32_t b)
    : stream_a_(a), stream_b_(b) {
  const std::uint64_t k = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(tag)));
  key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

void Philox4x32::refill() {
  // Counter layout: 32-bit block index (low word first), stream words in 2..3.
  // The high word of the block index folds into word 1.
  out_ = philox_block({static_cast<std::uint32_t>(block_),
                       static_cast<std::uint32_t>(block_ >> 32), stream_a_, stream_b_},
                      key_);
  ++block_;
  cursor_ = 0;
}

Philox4x32::result_type Philox4x32::operator()() {
  if (cursor_ >= 4) refill();
  const std::uint64_t lo = out_[cursor_];
  const std::uint64_t hi = out_[cursor_ + 1];
  cursor_ += 2;
  return lo | (hi << 32);
}

double uniform(Philox4x32& g) {
  // 53 random bits into [0, 1).
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

double normal(Philox4x32& g) {
  std::normal_distribution<double> d;
  return d(g);
}

Eigen::VectorXd normal_vector(Philox4x32& g, Eigen::Index n) {
  std::normal_distribution<double> d;
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = d(g);
  return z;
}

double gamma(Philox4x32& g, double shape, double rate) {
  std::gamma_distribution<double> d(shape, 1.0 / rate);
  return d(g);
}

double inverse_gamma(Philox4x32& g, double shape, double rate) {
  return 1.0 / gamma(g, shape, rate);
}

}  // namespace smokecausal::rng

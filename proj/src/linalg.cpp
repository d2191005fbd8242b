#include "smokecausal/linalg.hpp"

#include "smokecausal/errors.hpp"

#include <spdlog/spdlog.h>

#include <string>

namespace smokecausal::linalg {

Eigen::LLT<MatrixXd> cholesky_with_jitter(const MatrixXd& a, std::string_view what) {
  Eigen::LLT<MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) return llt;

  const double n = static_cast<double>(a.rows());
  const double jitter = 1e-8 * a.trace() / n;
  spdlog::warn("{}: matrix not positive definite, retrying with jitter {:.3g}", what, jitter);
  MatrixXd jittered = a;
  jittered.diagonal().array() += jitter;
  llt.compute(jittered);
  if (llt.info() != Eigen::Success || !(jitter > 0.0)) {
    throw NumericalError(std::string(what) +
                         ": matrix not positive definite after jitter; check for duplicate "
                         "site locations or degenerate variance parameters");
  }
  return llt;
}

VectorXd draw_from_precision(const Eigen::LLT<MatrixXd>& factor, const VectorXd& b,
                             rng::Philox4x32& g) {
  VectorXd draw = factor.solve(b);
  const VectorXd z = rng::normal_vector(g, b.size());
  // P = L L^T, so L^{-T} z has covariance P^{-1}.
  draw += factor.matrixU().solve(z);
  return draw;
}

VectorXd precision_mean(const Eigen::LLT<MatrixXd>& factor, const VectorXd& b) {
  return factor.solve(b);
}

MatrixXd spd_inverse(const MatrixXd& a, std::string_view what) {
  const auto llt = cholesky_with_jitter(a, what);
  return llt.solve(MatrixXd::Identity(a.rows(), a.cols()));
}

}  // namespace smokecausal::linalg

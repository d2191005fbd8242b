#pragma once

#include "smokecausal/rng.hpp"

#include <Eigen/Dense>

#include <string_view>

namespace smokecausal::linalg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Cholesky of a symmetric matrix. If the factorization fails, a diagonal
// jitter of 1e-8 * trace / n is added once and the factorization retried;
// a second failure throws NumericalError naming `what`.
Eigen::LLT<MatrixXd> cholesky_with_jitter(const MatrixXd& a, std::string_view what);

// Draw from N(P^{-1} b, P^{-1}) given the Cholesky factor of the precision P.
VectorXd draw_from_precision(const Eigen::LLT<MatrixXd>& precision_factor, const VectorXd& b,
                             rng::Philox4x32& g);

// Mean P^{-1} b only.
VectorXd precision_mean(const Eigen::LLT<MatrixXd>& precision_factor, const VectorXd& b);

// Symmetric inverse through a Cholesky factorization.
MatrixXd spd_inverse(const MatrixXd& a, std::string_view what);

}  // namespace smokecausal::linalg

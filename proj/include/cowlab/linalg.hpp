#pragma once

#include "cowlab/common.hpp"

namespace cowlab {

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing, eigenvectors
/// as unit columns with their largest-magnitude entry made positive.
struct SymmetricEigen {
  Vec values;
  Mat vectors;
  int sweeps = 0;
};

/// Cyclic Jacobi. Converged when the off-diagonal Frobenius norm drops below
/// rel_tol times the full Frobenius norm.
SymmetricEigen jacobi_eigen(const Mat& a, double rel_tol = 1e-12, int max_sweeps = 100);

/// Tridiagonal QR (Eigen) for matrices too large for Jacobi; same ordering
/// and sign conventions.
SymmetricEigen tridiagonal_eigen(const Mat& a);

/// Flip each column so that its largest-magnitude entry is positive.
void fix_signs(Mat& columns);

/// Sample covariance with denominator n-1; rows are observations.
Mat sample_covariance(const Mat& x, Vec* mean_out = nullptr);

}  // namespace cowlab

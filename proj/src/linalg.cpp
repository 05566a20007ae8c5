#include "cowlab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>

namespace cowlab {

namespace {

SymmetricEigen sorted(const Vec& values, const Mat& vectors, int sweeps) {
  const auto n = values.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(vectors.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = values(order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = vectors.col(order[static_cast<std::size_t>(i)]);
  }
  fix_signs(out.vectors);
  out.sweeps = sweeps;
  return out;
}

}  // namespace

void fix_signs(Mat& columns) {
  for (Eigen::Index c = 0; c < columns.cols(); ++c) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < columns.rows(); ++r) {
      // Strictly greater keeps the first of equal-magnitude entries.
      if (std::abs(columns(r, c)) > best + 1e-12) {
        best = std::abs(columns(r, c));
        arg = r;
      }
    }
    if (columns.rows() > 0 && columns(arg, c) < 0.0) columns.col(c) *= -1.0;
  }
}

SymmetricEigen jacobi_eigen(const Mat& input, double rel_tol, int max_sweeps) {
  if (input.rows() != input.cols()) throw DataError("eigen-solver needs a square matrix");
  const Eigen::Index n = input.rows();
  Mat a = 0.5 * (input + input.transpose());
  Mat v = Mat::Identity(n, n);
  const double frob = a.norm();
  int sweep = 0;
  if (frob == 0.0) return sorted(a.diagonal(), v, 0);
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off) < rel_tol * frob) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (sweep == max_sweeps) throw NumericError("Jacobi eigen-solver did not converge");
  return sorted(a.diagonal(), v, sweep);
}

SymmetricEigen tridiagonal_eigen(const Mat& input) {
  Eigen::SelfAdjointEigenSolver<Mat> solver(0.5 * (input + input.transpose()));
  if (solver.info() != Eigen::Success) throw NumericError("symmetric eigen-solver failed");
  return sorted(solver.eigenvalues(), solver.eigenvectors(), 0);
}

Mat sample_covariance(const Mat& x, Vec* mean_out) {
  if (x.rows() < 2) throw DataError("covariance needs >= 2 rows");
  const Vec mean = x.colwise().mean();
  const Mat centered = x.rowwise() - mean.transpose();
  if (mean_out) *mean_out = mean;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

}  // namespace cowlab

#include "olseg/kernel.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "olseg/error.hpp"

namespace olseg {

namespace {

void check_kernel_args(const MatrixRef& X, const MatrixRef& C, double sigma) {
  if (X.cols() != C.cols()) {
    throw InputError("gaussian_kernel: column mismatch (" + std::to_string(X.cols()) + " vs " +
                     std::to_string(C.cols()) + ")");
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("gaussian_kernel: sigma must be positive and finite");
  }
}

}  // namespace

Matrix gaussian_kernel(const MatrixRef& X, const MatrixRef& C, double sigma) {
  check_kernel_args(X, C, sigma);
  const Eigen::VectorXd xn = X.rowwise().squaredNorm();
  const Eigen::VectorXd cn = C.rowwise().squaredNorm();
  Matrix K = -2.0 * (X * C.transpose());
  const double gamma = 1.0 / (2.0 * sigma * sigma);
  constexpr double eps = std::numeric_limits<double>::epsilon();
  for (Eigen::Index i = 0; i < K.rows(); ++i) {
    for (Eigen::Index j = 0; j < K.cols(); ++j) {
      const double scale = xn[i] + cn[j];
      double d2 = K(i, j) + scale;
      // Below the cancellation floor of the expanded form the distance is
      // indistinguishable from zero.
      if (d2 <= 8.0 * eps * scale) d2 = 0.0;
      K(i, j) = std::exp(-gamma * d2);
    }
  }
  return K;
}

Matrix gaussian_kernel_self(const MatrixRef& C, double sigma) {
  Matrix K = gaussian_kernel(C, C, sigma);
  // Symmetrize exactly; the GEMM may differ in the last ulp across triangles.
  for (Eigen::Index i = 0; i < K.rows(); ++i) {
    K(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < K.cols(); ++j) K(j, i) = K(i, j);
  }
  return K;
}

}  // namespace olseg

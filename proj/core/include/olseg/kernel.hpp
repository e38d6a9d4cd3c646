#pragma once

#include <Eigen/Dense>

namespace olseg {

// Row-major so that one sample is one contiguous row, matching the on-disk
// record layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using MatrixRef = Eigen::Ref<const Matrix>;

/// K(i,j) = exp(-|X_i - C_j|^2 / (2 sigma^2)). Entries lie in (0, 1]; a
/// zero distance gives exactly 1.
Matrix gaussian_kernel(const MatrixRef& X, const MatrixRef& C, double sigma);

/// gaussian_kernel(C, C) with the diagonal pinned to exactly 1.
Matrix gaussian_kernel_self(const MatrixRef& C, double sigma);

}  // namespace olseg

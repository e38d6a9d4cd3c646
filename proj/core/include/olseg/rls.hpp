#pragma once

#include <iosfwd>

#include "olseg/kernel.hpp"

namespace olseg {

/// Ridge regressor mapping a feature row to the four box-delta targets
/// (t_x, t_y, t_w, t_h). Column d of `weights` is the intercept.
struct RlsRegressor {
  Eigen::Matrix<double, 4, Eigen::Dynamic> weights;
  double lambda_reg = 1.0;

  std::size_t dim() const { return weights.cols() > 0 ? static_cast<std::size_t>(weights.cols() - 1) : 0; }
};

/// Minimizes |X W + 1 b^T - T|^2 + lambda |W|^2; the intercept b is not
/// penalized. T is n x 4.
RlsRegressor rls_fit(const MatrixRef& X, const MatrixRef& T, double lambda_reg);

/// q x 4 predictions.
Matrix rls_predict(const RlsRegressor& reg, const MatrixRef& X);

void write_rls(std::ostream& out, const RlsRegressor& reg);
RlsRegressor read_rls(std::istream& in);

}  // namespace olseg

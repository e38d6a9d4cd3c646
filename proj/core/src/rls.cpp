#include "olseg/rls.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "olseg/binary_io.hpp"
#include "olseg/error.hpp"

namespace olseg {

RlsRegressor rls_fit(const MatrixRef& X, const MatrixRef& T, double lambda_reg) {
  if (X.rows() == 0) throw InputError("rls_fit: no training rows");
  if (T.rows() != X.rows() || T.cols() != 4) throw InputError("rls_fit: targets must be n x 4");
  if (!(lambda_reg > 0.0) || !std::isfinite(lambda_reg)) throw ConfigError("rls_fit: lambda must be positive");
  if (!X.allFinite() || !T.allFinite()) throw InputError("rls_fit: non-finite input");

  const Eigen::RowVectorXd x_mean = X.colwise().mean();
  const Eigen::RowVectorXd t_mean = T.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - x_mean;
  const Eigen::MatrixXd Tc = T.rowwise() - t_mean;

  Eigen::MatrixXd A = Xc.transpose() * Xc;
  A.diagonal().array() += lambda_reg;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("rls_fit: normal equations not positive definite");
  const Eigen::MatrixXd W = llt.solve(Xc.transpose() * Tc);  // d x 4

  RlsRegressor reg;
  reg.lambda_reg = lambda_reg;
  const auto d = X.cols();
  reg.weights.resize(4, d + 1);
  reg.weights.leftCols(d) = W.transpose();
  reg.weights.col(d) = (t_mean - x_mean * W).transpose();
  return reg;
}

Matrix rls_predict(const RlsRegressor& reg, const MatrixRef& X) {
  const auto d = static_cast<Eigen::Index>(reg.dim());
  if (X.cols() != d && X.rows() > 0) throw InputError("rls_predict: feature dimension mismatch");
  Matrix out(X.rows(), 4);
  if (X.rows() == 0) return out;
  out = X * reg.weights.leftCols(d).transpose();
  out.rowwise() += reg.weights.col(d).transpose();
  return out;
}

void write_rls(std::ostream& out, const RlsRegressor& reg) {
  ByteWriter w;
  w.put_magic("RLS1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(reg.dim()));
  w.put<double>(reg.lambda_reg);
  for (Eigen::Index r = 0; r < 4; ++r) {
    for (Eigen::Index c = 0; c < reg.weights.cols(); ++c) w.put<double>(reg.weights(r, c));
  }
  write_all(out, w.bytes());
}

RlsRegressor read_rls(std::istream& in) {
  auto header = read_exact(in, 16, "RLS1 stream");
  ByteReader hr(header, "RLS1 stream");
  hr.expect_magic("RLS1");
  const auto d = hr.get<std::uint32_t>();
  RlsRegressor reg;
  reg.lambda_reg = hr.get<double>();
  const auto body = read_exact(in, 4 * (static_cast<std::size_t>(d) + 1) * 8, "RLS1 stream");
  ByteReader br(body, "RLS1 stream", 16);
  reg.weights.resize(4, d + 1);
  for (Eigen::Index r = 0; r < 4; ++r) {
    for (Eigen::Index c = 0; c <= static_cast<Eigen::Index>(d); ++c) reg.weights(r, c) = br.get<double>();
  }
  return reg;
}

}  // namespace olseg

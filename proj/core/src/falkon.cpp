#include "olseg/falkon.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>

#include "olseg/binary_io.hpp"
#include "olseg/error.hpp"
#include "olseg/rng.hpp"

namespace olseg {

namespace {

constexpr std::uint32_t kFalkonVersion = 1;
constexpr int kMaxJitterEscalations = 5;

using ColMatrix = Eigen::MatrixXd;

void check_finite(const MatrixRef& X, const char* what) {
  if (!X.allFinite()) throw InputError(std::string(what) + ": non-finite value in input matrix");
}

// Lower Cholesky factor of S + jitter*I. Starts at 1e-10 * trace/M and
// multiplies by 10 on every failure, up to kMaxJitterEscalations times. A
// factorization whose squared pivots fall below half the jitter is treated
// as failed, since the shifted matrix has all eigenvalues >= jitter.
ColMatrix jittered_cholesky(const ColMatrix& S, const char* label) {
  const auto m = S.rows();
  const double base = 1e-10 * std::max(S.trace() / static_cast<double>(m), std::numeric_limits<double>::min());
  double jitter = base;
  double worst_pivot = 0.0;
  for (int attempt = 0; attempt <= kMaxJitterEscalations; ++attempt, jitter *= 10.0) {
    ColMatrix shifted = S;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<ColMatrix> llt(shifted);
    if (llt.info() != Eigen::Success) {
      worst_pivot = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    ColMatrix L = llt.matrixL();
    const double min_pivot_sq = L.diagonal().array().square().minCoeff();
    worst_pivot = min_pivot_sq;
    if (min_pivot_sq >= 0.5 * jitter) return L;
  }
  throw NumericalError(std::string("Cholesky of ") + label + " failed after " +
                       std::to_string(kMaxJitterEscalations) + " jitter escalations (M=" + std::to_string(m) +
                       ", final jitter=" + std::to_string(jitter / 10.0) +
                       ", min squared pivot=" + std::to_string(worst_pivot) + ")");
}

bool use_precomputed_gram(const FalkonOptions& o, std::size_t m, std::size_t d) {
  switch (o.gram) {
    case GramMode::precompute:
      return true;
    case GramMode::streaming:
      return false;
    case GramMode::automatic:
      break;
  }
  const double gram_bytes = 8.0 * static_cast<double>(m) * static_cast<double>(m);
  // One pass of n*M*(d + M) versus t passes of roughly n*M*(d + 2).
  return gram_bytes <= 2.0e9 && m <= std::max<std::size_t>(1, o.max_iterations) * (d + 2);
}

// K_nm^T (K_nm v), accumulated over row blocks.
class KernelProducts {
 public:
  KernelProducts(const MatrixRef& X, const Matrix& C, const FalkonOptions& o)
      : X_(X), C_(C), sigma_(o.sigma), block_(std::max<std::size_t>(1, o.block_rows)) {}

  Vector knm_transpose_times(std::span<const double> y) const {
    Vector out = Vector::Zero(C_.rows());
    for_each_block([&](Eigen::Index start, const Matrix& Kb) {
      const Eigen::Map<const Vector> yb(y.data() + start, Kb.rows());
      out.noalias() += Kb.transpose() * yb;
    });
    return out;
  }

  ColMatrix gram() const {
    ColMatrix G = ColMatrix::Zero(C_.rows(), C_.rows());
    for_each_block([&](Eigen::Index, const Matrix& Kb) {
      G.selfadjointView<Eigen::Lower>().rankUpdate(Kb.transpose());
    });
    G.triangularView<Eigen::StrictlyUpper>() = G.transpose();
    return G;
  }

  Vector gram_times(const Vector& v) const {
    Vector out = Vector::Zero(C_.rows());
    for_each_block([&](Eigen::Index, const Matrix& Kb) {
      const Vector t = Kb * v;
      out.noalias() += Kb.transpose() * t;
    });
    return out;
  }

 private:
  template <class F>
  void for_each_block(F&& f) const {
    const auto n = X_.rows();
    for (Eigen::Index start = 0; start < n; start += static_cast<Eigen::Index>(block_)) {
      const auto rows = std::min<Eigen::Index>(static_cast<Eigen::Index>(block_), n - start);
      const Matrix Kb = gaussian_kernel(X_.middleRows(start, rows), C_, sigma_);
      f(start, Kb);
    }
  }

  const MatrixRef& X_;
  const Matrix& C_;
  double sigma_;
  std::size_t block_;
};

}  // namespace

void FalkonOptions::validate() const {
  if (centers < 1) throw ConfigError("falkon: number of centers must be >= 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("falkon: sigma must be positive");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("falkon: lambda must be positive");
  if (tolerance < 0.0) throw ConfigError("falkon: tolerance must be non-negative");
}

MatrixF select_centers(const MatrixRef& X, const FalkonOptions& options) {
  const auto n = static_cast<std::size_t>(X.rows());
  Rng rng(options.seed);
  const auto idx = sample_without_replacement(n, std::min(options.centers, n), rng);
  MatrixF C(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    C.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i])).cast<float>();
  }
  return C;
}

FalkonModel falkon_train(const MatrixRef& X, std::span<const double> y, const FalkonOptions& options,
                         const IterationObserver& observer) {
  options.validate();
  if (X.rows() < 1) throw InputError("falkon_train: need at least one training row");
  check_finite(X, "falkon_train");
  for (double v : y) {
    if (v != 1.0 && v != -1.0) throw InputError("falkon_train: labels must be +1 or -1");
  }
  return falkon_train_with_centers(X, y, select_centers(X, options), options, observer);
}

FalkonModel falkon_train_with_centers(const MatrixRef& X, std::span<const double> y, MatrixF centers,
                                      const FalkonOptions& options, const IterationObserver& observer) {
  options.validate();
  const auto n = X.rows();
  const auto m = centers.rows();
  if (n < 1) throw InputError("falkon_train: need at least one training row");
  if (static_cast<Eigen::Index>(y.size()) != n) throw InputError("falkon_train: label count does not match rows");
  if (m < 1) throw InputError("falkon_train: need at least one center");
  if (centers.cols() != X.cols()) throw InputError("falkon_train: center dimension does not match features");
  check_finite(X, "falkon_train");

  const Matrix C = centers.cast<double>();
  const ColMatrix Kmm = gaussian_kernel_self(C, options.sigma);

  // K_mm ~= T^T T with T = Lt^T; A^T A = T T^T / M + lambda I with A = La^T.
  const ColMatrix Lt = jittered_cholesky(Kmm, "K_mm");
  ColMatrix TTt = Lt.transpose() * Lt;
  TTt /= static_cast<double>(m);
  TTt.diagonal().array() += options.lambda;
  const ColMatrix La = jittered_cholesky(TTt, "T T^T / M + lambda I");

  const auto solve_A = [&](const Vector& v) -> Vector { return La.transpose().triangularView<Eigen::Upper>().solve(v); };
  const auto solve_At = [&](const Vector& v) -> Vector { return La.triangularView<Eigen::Lower>().solve(v); };
  const auto solve_T = [&](const Vector& v) -> Vector { return Lt.transpose().triangularView<Eigen::Upper>().solve(v); };
  const auto solve_Tt = [&](const Vector& v) -> Vector { return Lt.triangularView<Eigen::Lower>().solve(v); };

  const KernelProducts products(X, C, options);
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool precomputed = use_precomputed_gram(options, static_cast<std::size_t>(m), static_cast<std::size_t>(X.cols()));

  std::optional<ColMatrix> G;
  if (precomputed) G = products.gram();
  const auto gram_times = [&](const Vector& v) -> Vector { return G ? Vector(*G * v) : products.gram_times(v); };

  const auto preconditioned = [&](const Vector& u) -> Vector {
    const Vector w = solve_A(u);
    const Vector q = gram_times(solve_T(w)) * inv_n;
    return solve_At(solve_Tt(q) + options.lambda * w);
  };
  const auto to_alpha = [&](const Vector& beta) -> Vector { return solve_T(solve_A(beta)); };

  Vector rhs = products.knm_transpose_times(y) * inv_n;
  rhs = solve_At(solve_Tt(rhs));

  Vector beta = Vector::Zero(m);
  Vector r = rhs;
  Vector p = r;
  double rs = r.squaredNorm();
  const double rs0 = rs;
  std::size_t iterations = 0;
  if (rs0 > 0.0) {
    for (std::size_t it = 1; it <= options.max_iterations; ++it) {
      const Vector Ap = preconditioned(p);
      const double pAp = p.dot(Ap);
      if (!(pAp > 0.0)) break;
      const double step = rs / pAp;
      beta.noalias() += step * p;
      r.noalias() -= step * Ap;
      const double rs_new = r.squaredNorm();
      iterations = it;
      if (observer) observer(it, to_alpha(beta));
      if (options.tolerance > 0.0 && std::sqrt(rs_new) <= options.tolerance * std::sqrt(rs0)) break;
      if (rs_new == 0.0) break;
      p = r + (rs_new / rs) * p;
      rs = rs_new;
    }
  }

  FalkonModel model;
  model.centers = std::move(centers);
  model.alpha = to_alpha(beta);
  model.sigma = options.sigma;
  model.lambda = options.lambda;
  model.iterations_run = iterations;
  if (!model.alpha.allFinite()) throw NumericalError("falkon_train: solver produced non-finite coefficients");
  return model;
}

Vector falkon_predict(const FalkonModel& model, const MatrixRef& X) {
  if (static_cast<std::size_t>(X.cols()) != model.dim() && X.rows() > 0) {
    throw InputError("falkon_predict: feature dimension " + std::to_string(X.cols()) + " does not match model (" +
                     std::to_string(model.dim()) + ")");
  }
  Vector scores(X.rows());
  if (X.rows() == 0) return scores;
  const Matrix C = model.centers.cast<double>();
  constexpr Eigen::Index kBlock = 2048;
  for (Eigen::Index start = 0; start < X.rows(); start += kBlock) {
    const auto rows = std::min(kBlock, X.rows() - start);
    scores.segment(start, rows).noalias() = gaussian_kernel(X.middleRows(start, rows), C, model.sigma) * model.alpha;
  }
  return scores;
}

Vector exact_nystrom_krr(const MatrixRef& X, std::span<const double> y, const MatrixRef& centers, double sigma,
                         double lambda) {
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) throw InputError("exact_nystrom_krr: label count mismatch");
  if (!(lambda >= 0.0)) throw ConfigError("exact_nystrom_krr: lambda must be non-negative");
  const Matrix Knm = gaussian_kernel(X, centers, sigma);
  const Matrix Kmm = gaussian_kernel_self(centers, sigma);
  const Eigen::Map<const Vector> yv(y.data(), static_cast<Eigen::Index>(y.size()));
  ColMatrix H = Knm.transpose() * Knm;
  H += (lambda * static_cast<double>(X.rows())) * Kmm;
  const Vector b = Knm.transpose() * yv;
  Eigen::LLT<ColMatrix> llt(H);
  if (llt.info() != Eigen::Success) throw NumericalError("exact_nystrom_krr: system is not positive definite");
  const double floor = static_cast<double>(H.rows()) * std::numeric_limits<double>::epsilon() * H.diagonal().maxCoeff();
  const double min_pivot_sq = ColMatrix(llt.matrixL()).diagonal().array().square().minCoeff();
  if (!(min_pivot_sq > floor)) {
    throw NumericalError("exact_nystrom_krr: system is numerically singular (min squared pivot " +
                         std::to_string(min_pivot_sq) + ")");
  }
  Vector alpha = llt.solve(b);
  if (!alpha.allFinite()) throw NumericalError("exact_nystrom_krr: non-finite solution");
  return alpha;
}

std::vector<std::uint8_t> serialize_falkon(const FalkonModel& model) {
  if (model.centers.rows() != model.alpha.size()) throw InputError("serialize_falkon: centers/alpha size mismatch");
  ByteWriter w;
  w.put_magic("FKN1");
  w.put<std::uint32_t>(kFalkonVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.num_centers()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.dim()));
  w.put<double>(model.sigma);
  w.put<double>(model.lambda);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.iterations_run));
  w.put<std::uint32_t>(0);
  w.put_span(std::span<const double>(model.alpha.data(), static_cast<std::size_t>(model.alpha.size())));
  w.put_span(std::span<const float>(model.centers.data(), static_cast<std::size_t>(model.centers.size())));
  return w.take();
}

namespace {

FalkonModel parse_falkon(ByteReader& r) {
  r.expect_magic("FKN1");
  const auto version = r.get<std::uint32_t>();
  if (version != kFalkonVersion) r.fail("unsupported FKN1 version " + std::to_string(version));
  const auto m = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  FalkonModel model;
  model.sigma = r.get<double>();
  model.lambda = r.get<double>();
  model.iterations_run = r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  if (!(model.sigma > 0.0) || !(model.lambda > 0.0)) r.fail("FKN1 header has non-positive sigma or lambda");
  model.alpha.resize(m);
  r.get_into(std::span<double>(model.alpha.data(), m));
  model.centers.resize(m, d);
  r.get_into(std::span<float>(model.centers.data(), static_cast<std::size_t>(m) * d));
  return model;
}

constexpr std::size_t kFalkonHeaderBytes = 4 + 4 + 4 + 4 + 8 + 8 + 4 + 4;

}  // namespace

FalkonModel deserialize_falkon(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "FKN1 blob");
  FalkonModel model = parse_falkon(r);
  if (r.remaining() != 0) r.fail("trailing bytes after FKN1 payload");
  return model;
}

void write_falkon(std::ostream& out, const FalkonModel& model) { write_all(out, serialize_falkon(model)); }

FalkonModel read_falkon(std::istream& in) {
  auto header = read_exact(in, kFalkonHeaderBytes, "FKN1 stream");
  ByteReader hr(header, "FKN1 stream");
  hr.expect_magic("FKN1");
  hr.get<std::uint32_t>();
  const auto m = hr.get<std::uint32_t>();
  const auto d = hr.get<std::uint32_t>();
  const std::size_t payload = static_cast<std::size_t>(m) * 8 + static_cast<std::size_t>(m) * d * 4;
  auto body = read_exact(in, payload, "FKN1 stream");
  header.insert(header.end(), body.begin(), body.end());
  return deserialize_falkon(header);
}

}  // namespace olseg

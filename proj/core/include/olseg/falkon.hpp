#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "olseg/kernel.hpp"

namespace olseg {

/// How the solver forms K_nm^T K_nm products.
enum class GramMode {
  automatic,   ///< pick by estimated cost
  precompute,  ///< accumulate the M x M Gram once over row blocks
  streaming,   ///< recompute kernel row blocks on every iteration
};

struct FalkonOptions {
  std::size_t centers = 2000;
  double sigma = 1.0;
  double lambda = 1e-6;
  std::size_t max_iterations = 20;
  /// Stop once the preconditioned residual norm falls below
  /// tolerance * initial norm. Zero runs all max_iterations.
  double tolerance = 0.0;
  std::uint64_t seed = 0;
  std::size_t block_rows = 2048;
  GramMode gram = GramMode::automatic;

  void validate() const;
};

/// Trained Nystrom kernel predictor. Centers are held in single precision
/// (the storage precision of features) and the coefficients in double.
struct FalkonModel {
  MatrixF centers;
  Vector alpha;
  double sigma = 1.0;
  double lambda = 1e-6;
  std::size_t iterations_run = 0;

  std::size_t num_centers() const { return static_cast<std::size_t>(centers.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(centers.cols()); }
};

/// Called after every solver iteration with the current coefficients.
using IterationObserver = std::function<void(std::size_t iteration, const Vector& alpha)>;

/// Samples min(M, n) centers uniformly without replacement (seeded) and
/// solves (K_nm^T K_nm + lambda n K_mm) alpha = K_nm^T y by conjugate
/// gradient preconditioned with Cholesky factors of K_mm and of
/// T T^T / M + lambda I. Labels must be +1 or -1.
FalkonModel falkon_train(const MatrixRef& X, std::span<const double> y, const FalkonOptions& options,
                         const IterationObserver& observer = {});

/// Same solve with caller-chosen centers. No label restriction.
FalkonModel falkon_train_with_centers(const MatrixRef& X, std::span<const double> y, MatrixF centers,
                                      const FalkonOptions& options, const IterationObserver& observer = {});

/// The centers falkon_train would pick for (n, options), rounded to float.
MatrixF select_centers(const MatrixRef& X, const FalkonOptions& options);

/// score_i = sum_j alpha_j k(X_i, center_j). No thresholding.
Vector falkon_predict(const FalkonModel& model, const MatrixRef& X);

/// Direct Cholesky solve of the same Nystrom system with an explicit K_nm.
/// Reference for solver tests; intended for small n.
Vector exact_nystrom_krr(const MatrixRef& X, std::span<const double> y, const MatrixRef& centers, double sigma,
                         double lambda);

// "FKN1" blob: magic, u32 version, u32 M, u32 d, f64 sigma, f64 lambda,
// u32 iterations_run, u32 reserved, f64 alpha[M], f32 centers[M*d].
std::vector<std::uint8_t> serialize_falkon(const FalkonModel& model);
FalkonModel deserialize_falkon(std::span<const std::uint8_t> bytes);
void write_falkon(std::ostream& out, const FalkonModel& model);
FalkonModel read_falkon(std::istream& in);

}  // namespace olseg

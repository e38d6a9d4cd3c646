#pragma once

#include <vector>

#include "olseg/detection.hpp"
#include "olseg/falkon.hpp"

namespace olseg::testing {

struct BootstrapOracleRound {
  std::vector<std::size_t> hard;
  std::vector<std::size_t> active;
};

struct BootstrapOracle {
  std::vector<BootstrapOracleRound> rounds;
  FalkonModel model;
};

/// Reference minibootstrap: every round scores the entire negative pool with
/// the current model, then keeps the members of the round's batch scoring at
/// or above the hard threshold. Trimming keeps the best-scoring active
/// negatives, ties to the lower pool index.
BootstrapOracle minibootstrap_oracle(const Matrix& positives, const Matrix& negatives, const MinibootstrapConfig& cfg,
                                     const FalkonOptions& falkon);

}  // namespace olseg::testing

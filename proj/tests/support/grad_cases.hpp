#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

/// One randomized finite-difference check; `run(seed)` builds fresh inputs
/// from the seed and returns the comparison.
struct GradCase {
  std::string name;
  std::function<GradCheck(std::uint64_t seed)> run;
};

/// Every differentiable primitive, the MLP, and the composed
/// GRL -> GRG -> prediction-head graph.
std::vector<GradCase> gradient_cases();

}  // namespace oracle

#pragma once

#include "fsr/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fsr {

struct SuiteCase {
    std::string name;
    GradcheckReport report;
};

/// Gradient checks for every differentiable primitive plus the three training
/// losses on a small model with frozen noise.
std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed = 0, double step = 1e-5,
                                           double tolerance = 1e-4);

}  // namespace fsr

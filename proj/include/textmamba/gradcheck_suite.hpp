#pragma once

// Micro fixtures and finite-difference checks for every differentiable
// module, shared by the CLI and the test suite.

#include <string>
#include <vector>

#include "textmamba/gradcheck.hpp"

namespace textmamba {

const std::vector<std::string>& gradcheck_modules();

/// 1e-3 for "e2e", 1e-4 otherwise.
double default_gradcheck_tolerance(const std::string& module);

/// Builds the module's seeded f64 micro fixture, computes the analytic
/// gradient of sum(R * output) (R a fixed random upstream) or of the loss,
/// and compares it against central differences. Throws std::invalid_argument
/// for an unknown module name.
GradCheckReport run_gradcheck(const std::string& module, double eps = 1e-4);

}  // namespace textmamba

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cmam {

struct GradcheckCase {
  std::string name;
  double error = 0.0;      // max relative error over checked coordinates
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  std::size_t retried = 0;  // coordinates that needed another step size
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed() const { return error <= tolerance; }
};

/// Finite-difference checks of every differentiable operation, the LSTM cell,
/// the memory step and both full models. `profile` (tiny or default) sets the
/// memory and controller sizes of the composite checks.
std::vector<GradcheckCase> run_gradcheck_suite(std::string_view profile, std::uint64_t seed = 0);

}  // namespace cmam

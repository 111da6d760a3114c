#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cflow {

// One invariant measurement. margin > 0 means the invariant holds.
struct CheckRow {
  std::string suite;
  std::string measured;  // what was measured, e.g. "max |y' - y|"
  double value = 0.0;
  double bound = 0.0;
  double margin = 0.0;
  bool pass = false;
};

struct CheckOptions {
  std::uint64_t seed = 1;
  double magnitude = 0.3;  // output-layer randomization for non-trivial flows
};

// Runs the round-trip, Jacobian, gradient, normalization and
// dequantization-bound suites at tiny sizes.
std::vector<CheckRow> run_checks(const CheckOptions& opts);
void print_check_table(std::ostream& os, const std::vector<CheckRow>& rows);

}  // namespace cflow

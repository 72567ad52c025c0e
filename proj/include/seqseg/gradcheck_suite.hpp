#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace seqseg {

struct GradcheckEntry {
  std::string op;
  double worst_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 1;
  double threshold = 1e-4;
  /// Test hook: the analytic gradient of this op is scaled by 1.01 before
  /// comparison, so its check must fail. Empty disables the fault.
  std::string fault_op;
};

/// Names of every entry the suite reports, in order.
std::vector<std::string> gradcheck_op_names();

/// Central finite differences against every backward pass and both full
/// model variants. One entry per op name.
std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options);

}  // namespace seqseg

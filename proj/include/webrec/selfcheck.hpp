#pragma once

// Quick runtime checks of the MP-Head contract, used by `webrec selfcheck`.

#include <cstddef>
#include <string>
#include <vector>

namespace webrec {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Fresh MP-Heads (gate 0, out_extension both zero and random) leave the
/// logits within 1e-12 of the backbone's, over `seeds` random configurations.
CheckResult check_gate_zero(std::size_t seeds = 20);

/// Every MP-Head coordinate of a 2-layer, d_model 16 model against central
/// differences (eps 1e-4), relative error below 1e-4.
CheckResult check_gradient_fidelity();

/// Unpruned head rows against a dense double-loop reference (1e-10), and
/// pruned relations with at most k^2 nonzeros, all outside the top-k zero.
CheckResult check_pruning(std::size_t seeds = 50);

std::vector<CheckResult> run_selfcheck();

}  // namespace webrec

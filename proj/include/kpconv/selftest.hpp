#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kpconv {

/// Outcome of one finite-difference gradient check.
struct SelfCheck {
  std::string name;
  double max_error = 0.0;  // worst elementwise relative error
  double tolerance = 0.0;
  int checked = 0;         // entries compared
  int kinks = 0;           // entries skipped: the step straddles a kink

  bool passed() const { return checked > 0 && max_error < tolerance && kinks * 10 <= checked; }
};

/// Central differences (step 1e-5, relative-error floor 1e-8) against the
/// analytic gradients of rigid and deformable KPConv, the offset predictor,
/// the fitting and repulsive losses, and a small network of each task.
std::vector<SelfCheck> run_selftest(std::uint64_t seed = 0);

}  // namespace kpconv

#pragma once

#include <string>
#include <vector>

namespace sgma {

struct GradcheckEntry {
  std::string name;
  double max_error = 0;
  double tolerance = 1e-4;

  bool passed() const { return max_error <= tolerance; }
};

struct GradcheckOptions {
  bool inject_diversity_sign_error = false;  // negative control
};

/// Finite-difference checks of every differentiable op plus the three
/// end-to-end loss paths (attention, embedding softmax, class-center triplet)
/// of a small model. Probes through bilinear sampling use tolerance 1e-3.
std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options = {});

bool all_passed(const std::vector<GradcheckEntry>& entries);

/// Fixed-width table: name, max relative error, tolerance, PASS/FAIL.
std::string format_gradcheck_table(const std::vector<GradcheckEntry>& entries);

}  // namespace sgma

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neurodim/core.hpp"

namespace neurodim {

// Randomized checks of the symmetry, fiber and evaluator results. Each suite
// runs independent trials; a trial whose draw misses the genericity hypotheses
// is re-drawn up to kMaxRedraws times and then counted as skipped.

inline constexpr int kMaxRedraws = 10;

enum class Suite { evaluators, scaling, qk_gauge, interlayer_gauge, fiber_partner, skew, softmax_fiber };

std::string_view to_string(Suite s);
/// Accepts the CLI spelling ("qk-gauge", ...). Throws InvalidInputError.
Suite suite_from_string(std::string_view s);
const std::vector<Suite>& all_suites();

struct VerifyOptions {
  int trials = 10;
  std::uint64_t seed = 0;
  // Random inputs per trial for the functional comparisons.
  int inputs = 50;
  // Pin the architecture instead of cycling through the suite's default grid.
  std::optional<Architecture> arch;
  // skew suite: force M_2 to be skew-symmetric, which violates the hypotheses.
  bool plant_skew = false;
};

struct TrialOutcome {
  std::string descriptor;
  bool skipped = false;
  bool passed = false;
  // Named measurements (deviations, recovery errors, margins).
  std::map<std::string, double> metrics;
  // The measurement the pass/fail decision hinges on most tightly.
  double deviation = 0.0;
};

struct VerifyFailure {
  std::string descriptor;
  double max_deviation = 0.0;
};

struct VerifyReport {
  std::string suite;
  int trials = 0;
  int passes = 0;
  int skipped = 0;
  std::vector<VerifyFailure> failures;
  std::vector<double> deviations;  // per trial, NaN for skipped ones
  // Worst value of every metric across non-skipped trials (max, or min for
  // metrics that must stay large).
  std::map<std::string, double> worst;
  std::map<std::string, double> thresholds;

  bool passed() const { return failures.empty(); }
};

nlohmann::json to_json(const VerifyReport& r);

VerifyReport run_suite(Suite suite, const VerifyOptions& opts);

/// Grid of architectures cycled through when opts.arch is not set.
std::vector<Architecture> default_grid(Suite suite);

/// max |a - b| / max(|a|_max, |b|_max); 0 when both vanish.
double relative_deviation(const Matrix& a, const Matrix& b);

}  // namespace neurodim

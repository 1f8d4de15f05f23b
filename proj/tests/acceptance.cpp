// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "neurodim/dimension.hpp"
#include "neurodim/geometry.hpp"
#include "neurodim/reparam.hpp"
#include "neurodim/verify.hpp"
#include "oracles.hpp"

using namespace neurodim;
using testing_util::arch;

namespace {

constexpr std::uint64_t kSeed = 7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Outcome c1_softmax_sweep() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::ostringstream os;
  for (int delta = 3; delta <= 10; ++delta) {
    const Architecture a = arch({delta, delta, delta}, {2, 2}, 3, Model::softmax);
    EstimateOptions o;
    o.seed = kSeed;
    const DimensionReport r = estimate_dimension(a, o);
    const long long expect = static_cast<long long>(delta) * delta + 8 * delta - 8;
    o.n_inputs = 500;
    const int doubled = estimate_dimension(a, o).estimate.rank;
    const bool row = r.estimate.rank == expect && r.prediction && r.prediction->value == expect &&
                     r.estimate.gap_ratio > 100.0 && doubled == r.estimate.rank;
    ok = ok && row;
    os << delta << ":" << r.estimate.rank << "/" << expect << "(gap " << fmt(r.estimate.gap_ratio) << ") ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 600.0;
  os << "in " << fmt(secs) << "s, N=500 reruns identical";
  return {ok, os.str()};
}

Outcome c2_single_layer() {
  const auto t0 = std::chrono::steady_clock::now();
  EstimateOptions o;
  o.seed = kSeed;
  o.n_inputs = 50;
  const DimensionReport r = estimate_dimension(arch({2, 1}, {2}, 2), o);
  const double secs = seconds_since(t0);
  return {r.estimate.rank == 5 && secs < 5.0,
          "rank " + std::to_string(r.estimate.rank) + " in " + fmt(secs) + "s"};
}

Outcome c3_lightning_deep() {
  bool ok = true;
  std::ostringstream os;
  for (int delta = 3; delta <= 6; ++delta) {
    const Architecture a = arch({delta, delta, delta}, {2, 2}, 3);
    EstimateOptions o;
    o.seed = kSeed;
    const DimensionReport r = estimate_dimension(a, o);
    const long long expect = static_cast<long long>(delta) * delta + 8 * delta - 8 - 2;
    ok = ok && r.estimate.rank == expect && r.prediction && r.prediction->value == expect;
    os << delta << ":" << r.estimate.rank << "/" << expect << " ";
  }
  return {ok, os.str()};
}

Outcome c4_determinantal() {
  EstimateOptions o;
  o.seed = kSeed;
  o.space = ParamSpace::raw_qkv;
  const DimensionReport r = estimate_dimension(arch({4, 3}, {2}, 2), o);
  const long long expect = 2 * 2 * 4 + 4 * 3 - 4 - 1;
  return {r.estimate.rank == expect && r.prediction && r.prediction->value == expect,
          "rank " + std::to_string(r.estimate.rank) + " vs " + std::to_string(expect)};
}

Outcome c5_evaluators() {
  int configs = 0, failures = 0;
  double worst = 0.0;
  for (int l : {1, 2}) {
    for (int t : {2, 3, 4}) {
      const int combos = l == 1 ? 4 : 8;
      for (int c = 0; c < combos; ++c) {
        std::vector<int> dims;
        for (int i = 0; i <= l; ++i) dims.push_back(2 + ((c >> i) & 1));
        std::vector<int> attn(dims.begin(), dims.end() - 1);
        VerifyOptions o;
        o.trials = 50;
        o.seed = kSeed + static_cast<std::uint64_t>(configs);
        o.arch = arch(dims, attn, t);
        const VerifyReport r = run_suite(Suite::evaluators, o);
        failures += static_cast<int>(r.failures.size()) + r.skipped;
        for (const char* m : {"deep_vs_virtual", "deep_vs_triadic", "virtual_vs_triadic"}) {
          worst = std::max(worst, r.worst.at(m));
        }
        ++configs;
      }
    }
  }
  return {failures == 0 && worst < 1e-8,
          std::to_string(configs) + " configs x 50, failures " + std::to_string(failures) + ", worst " + fmt(worst)};
}

Outcome suite_outcome(Suite s, int trials, const std::vector<std::string>& metrics) {
  VerifyOptions o;
  o.trials = trials;
  o.seed = kSeed;
  o.inputs = 50;
  const VerifyReport r = run_suite(s, o);
  std::ostringstream os;
  os << std::string(to_string(s)) << " " << r.passes << "/" << r.trials;
  for (const auto& m : metrics) os << " " << m << "=" << fmt(r.worst.at(m));
  return {r.passes == r.trials, os.str()};
}

Outcome combine(const std::vector<Outcome>& parts) {
  Outcome out{true, ""};
  for (const auto& p : parts) {
    out.pass = out.pass && p.pass;
    out.detail += (out.detail.empty() ? "" : "; ") + p.detail;
  }
  return out;
}

Outcome c6_orbits() {
  return combine({suite_outcome(Suite::scaling, 100, {"function_deviation"}),
                  suite_outcome(Suite::qk_gauge, 100, {"function_deviation"}),
                  suite_outcome(Suite::interlayer_gauge, 100, {"function_deviation"})});
}

Outcome c7_recovery() {
  return combine({suite_outcome(Suite::qk_gauge, 100, {"recovery_error"}),
                  suite_outcome(Suite::interlayer_gauge, 100, {"recovery_error"})});
}

Outcome c8_fiber_partner() {
  // Separation measured on the weights: distance of the partner from the
  // rescaling orbit {(cA, V/c)} relative to its norm.
  return suite_outcome(Suite::fiber_partner, 100, {"function_deviation", "orbit_separation"});
}

Outcome c9_skew() { return suite_outcome(Suite::skew, 50, {"min_effect"}); }

Outcome c10_softmax_fiber() {
  return suite_outcome(Suite::softmax_fiber, 50, {"distinct_A_effect", "perturbed_A_effect", "equal_token_error"});
}

Outcome c11_derivatives() {
  const std::vector<Architecture> archs = {arch({2, 2}, {2}, 2), arch({3, 3, 3}, {2, 2}, 3),
                                           arch({4, 3, 4}, {2, 3}, 3)};
  double worst = 0.0;
  int failures = 0;
  for (Model m : {Model::lightning, Model::softmax}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Architecture& a = archs[trial % archs.size()];
      ParamPoint p = sample_parameters(a, ParamSpace::raw_qkv, kSeed * 1000 + trial);
      p.theta *= 0.5;
      const Vector dir = testing_util::gaussian(static_cast<int>(p.theta.size()), 1, kSeed, 5000 + trial);
      const TokenMatrix x = testing_util::random_tokens(a.dims[0], a.tokens, kSeed, 6000 + trial);
      // Per-entry step h_k = 1e-5 (1 + |theta_k|) along the direction.
      const Vector h = 1e-5 * (1.0 + p.theta.cwiseAbs().array()).matrix();
      ParamPoint plus = p, minus = p;
      plus.theta += h.cwiseProduct(dir);
      minus.theta -= h.cwiseProduct(dir);
      // With unequal steps the difference approximates the derivative along h * dir,
      // which the forward mode reproduces exactly.
      const Matrix fwd = directional_derivative(p, h.cwiseProduct(dir), x, m);
      const Matrix fd = (evaluate(plus, x, m).matrix() - evaluate(minus, x, m).matrix()) / 2.0;
      const double rel = oracle::rel_diff(fwd, fd);
      worst = std::max(worst, rel);
      if (!(rel < 1e-6) || !all_finite(fwd)) ++failures;
    }
  }
  return {failures == 0, "40 triples, failures " + std::to_string(failures) + ", worst " + fmt(worst)};
}

Outcome c12_coefficients() {
  const AttnLayer layer{testing_util::gaussian(2, 2, kSeed, 1), testing_util::gaussian(1, 2, kSeed, 2)};
  const CoefficientVector c = extract_coefficients(layer, 2);
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    const TokenMatrix x = testing_util::random_tokens(2, 2, kSeed, 100 + k);
    worst = std::max(worst, oracle::max_abs(c.evaluate(x.matrix()) - lightning_forward(layer, x).matrix()));
  }
  return {c.total_slots() == 40 && worst < 1e-10,
          "slots " + std::to_string(c.total_slots()) + ", eval error " + fmt(worst)};
}

Outcome c13_parameter_gap() {
  const int delta = 4, l = 2;
  const Architecture a = arch({delta, delta, delta}, {delta, delta}, 3);
  const long long stated_params = 3 * delta * delta * l / 2;  // (3/2) d^2 l as stated
  const long long dim = static_cast<long long>(delta) * delta * (l + 1) - l;
  EstimateOptions o;
  o.seed = kSeed;
  const DimensionReport r = estimate_dimension(a, o);
  const bool ok = stated_params == 48 && dim == 46 && r.estimate.rank == 46 && predict(a).value == 46;
  return {ok, "stated parameter count " + std::to_string(stated_params) + " (raw QKV count " +
                  std::to_string(parameter_count(a, ParamSpace::raw_qkv)) + ") vs dimension " + std::to_string(dim) +
                  ", estimated " + std::to_string(r.estimate.rank)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1. softmax sweep delta=3..10 matches delta^2+8delta-8", c1_softmax_sweep},
      {"2. single layer (2,1,2) dimension 5", c2_single_layer},
      {"3. lightning deep delta=3..6 equals softmax - 2", c3_lightning_deep},
      {"4. determinantal regime (4,3,2) rank 23", c4_determinantal},
      {"5. evaluator equivalence", c5_evaluators},
      {"6. symmetry orbits", c6_orbits},
      {"7. gauge recovery", c7_recovery},
      {"8. fiber partner", c8_fiber_partner},
      {"9. skew identifiability", c9_skew},
      {"10. softmax fiber", c10_softmax_fiber},
      {"11. derivative correctness", c11_derivatives},
      {"12. coefficient embedding", c12_coefficients},
      {"13. parameter count vs dimension", c13_parameter_gap},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %s -- %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}

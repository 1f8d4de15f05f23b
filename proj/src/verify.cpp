#include "neurodim/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include "neurodim/dimension.hpp"
#include "neurodim/geometry.hpp"
#include "neurodim/reparam.hpp"

namespace neurodim {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// A bound on one metric: upper bounds must hold as value < bound, lower
// bounds as value > bound.
struct MetricBound {
  std::string name;
  double bound = 0.0;
  bool upper = true;
};

struct SuiteDef {
  std::vector<MetricBound> bounds;
  // Returns nullopt when the draw misses the hypotheses.
  std::function<std::optional<TrialOutcome>(const Architecture&, std::uint64_t seed, const VerifyOptions&)> trial;
};

Architecture make_arch(std::vector<int> dims, std::vector<int> attn, int tokens, Model model = Model::lightning) {
  Architecture a;
  a.layers = static_cast<int>(attn.size());
  a.dims = std::move(dims);
  a.attn_dims = std::move(attn);
  a.tokens = tokens;
  a.model = model;
  return a;
}

std::string describe(const Architecture& a) {
  std::ostringstream os;
  os << "l=" << a.layers << " dims=";
  for (std::size_t i = 0; i < a.dims.size(); ++i) os << (i ? "," : "") << a.dims[i];
  os << " attn=";
  for (std::size_t i = 0; i < a.attn_dims.size(); ++i) os << (i ? "," : "") << a.attn_dims[i];
  os << " t=" << a.tokens;
  return os.str();
}

double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  return s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
}

// Random invertible matrix, or nullopt when badly conditioned.
std::optional<Matrix> random_gauge(Index side, const StreamKey& key, double max_cond = 1e2) {
  Matrix c = sample_gaussian_matrix(side, side, key);
  if (condition_number(c) > max_cond) return std::nullopt;
  return c;
}

double rel_frobenius(const Matrix& a, const Matrix& b) {
  const double n = b.norm();
  return n > 0.0 ? (a - b).norm() / n : (a - b).norm();
}

template <class F, class G>
double max_rel_over_inputs(const std::vector<TokenMatrix>& xs, F f, G g) {
  double worst = 0.0;
  for (const auto& x : xs) worst = std::max(worst, relative_deviation(f(x).matrix(), g(x).matrix()));
  return worst;
}

template <class F, class G>
double max_abs_over_inputs(const std::vector<TokenMatrix>& xs, F f, G g) {
  double worst = 0.0;
  for (const auto& x : xs) worst = std::max(worst, (f(x).matrix() - g(x).matrix()).cwiseAbs().maxCoeff());
  return worst;
}

// --- suites ------------------------------------------------------------------

std::optional<TrialOutcome> evaluators_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const DeepWeights w = random_deep_weights(arch, Parametrization::attn, seed);
  const VirtualWeights vw = compute_virtual_weights(w);
  const auto xs = sample_inputs(arch, std::min(o.inputs, 5), seed);
  TrialOutcome t;
  double dv = 0.0, dt = 0.0, vt = 0.0, sv = 0.0;
  for (const auto& x : xs) {
    const Matrix deep = deep_forward(w, x).matrix();
    const Matrix virt = virtual_forward(vw, x).matrix();
    const Matrix tri = triadic_forward(vw, x).matrix();
    dv = std::max(dv, relative_deviation(deep, virt));
    dt = std::max(dt, relative_deviation(deep, tri));
    vt = std::max(vt, relative_deviation(virt, tri));
    sv = std::max(sv, relative_deviation(softmax_deep_forward(w, x).matrix(), virtual_softmax_forward(vw, x).matrix()));
  }
  t.metrics = {{"deep_vs_virtual", dv}, {"deep_vs_triadic", dt}, {"virtual_vs_triadic", vt},
               {"softmax_deep_vs_virtual", sv}};
  t.deviation = std::max({dv, dt, vt});
  return t;
}

std::optional<TrialOutcome> scaling_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const VirtualWeights vw = compute_virtual_weights(random_deep_weights(arch, Parametrization::attn, seed));
  CounterEngine eng(stream_key(seed, "scaling"));
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> lambdas;
  for (int i = 0; i < arch.layers; ++i) lambdas.push_back((sign(eng) ? -1.0 : 1.0) * mag(eng));
  const LayerScaling s = LayerScaling::with_solved_rho(lambdas);
  const VirtualWeights scaled = apply_layer_scaling(vw, s);
  const auto xs = sample_inputs(arch, o.inputs, seed);
  TrialOutcome t;
  t.deviation = max_rel_over_inputs(xs, [&](const TokenMatrix& x) { return virtual_forward(vw, x); },
                                    [&](const TokenMatrix& x) { return virtual_forward(scaled, x); });
  t.metrics = {{"function_deviation", t.deviation}, {"constraint_residual", s.constraint_residual()}};
  return t;
}

std::optional<TrialOutcome> qk_gauge_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const DeepWeights w = random_deep_weights(arch, Parametrization::qkv, seed);
  const QKVLayer layer = std::get<std::vector<QKVLayer>>(w.layers)[0];
  const Index a = layer.Q.rows();
  if (numerical_rank(layer.K.transpose() * layer.Q).rank != a) return std::nullopt;
  const auto c = random_gauge(a, stream_key(seed, "gauge"));
  if (!c) return std::nullopt;
  const QKPair moved = apply_qk_gauge(layer.Q, layer.K, QKGauge{*c});
  const QKVLayer other{moved.Q, moved.K, layer.V};
  const auto xs = sample_inputs(arch, o.inputs, seed);
  TrialOutcome t;
  const double dev = max_rel_over_inputs(xs, [&](const TokenMatrix& x) { return lightning_forward(layer, x); },
                                         [&](const TokenMatrix& x) { return lightning_forward(other, x); });
  const QKGauge rec = recover_qk_gauge(layer.Q, layer.K, moved.Q, moved.K);
  t.metrics = {{"function_deviation", dev}, {"recovery_error", rel_frobenius(rec.C, *c)}};
  t.deviation = dev;
  return t;
}

std::optional<TrialOutcome> interlayer_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const DeepWeights w = random_deep_weights(arch, Parametrization::qkv, seed);
  if (numerical_rank(compute_virtual_weights(w).L).rank != arch.bottleneck_width()) return std::nullopt;
  InterlayerGauge g;
  for (int i = 1; i < arch.layers; ++i) {
    const auto c = random_gauge(arch.dims[i], stream_key(seed, "gauge", static_cast<std::uint64_t>(i)));
    if (!c) return std::nullopt;
    g.C.push_back(*c);
  }
  const DeepWeights moved = apply_interlayer_gauge(w, g);
  const auto xs = sample_inputs(arch, o.inputs, seed);
  const double lin = max_rel_over_inputs(xs, [&](const TokenMatrix& x) { return deep_forward(w, x); },
                                         [&](const TokenMatrix& x) { return deep_forward(moved, x); });
  const double soft = max_rel_over_inputs(xs, [&](const TokenMatrix& x) { return softmax_deep_forward(w, x); },
                                          [&](const TokenMatrix& x) { return softmax_deep_forward(moved, x); });
  const InterlayerGauge rec = recover_interlayer_gauge(w, moved);
  double rec_err = 0.0;
  for (std::size_t i = 0; i < g.C.size(); ++i) rec_err = std::max(rec_err, rel_frobenius(rec.C[i], g.C[i]));
  TrialOutcome t;
  t.metrics = {{"function_deviation", lin}, {"softmax_function_deviation", soft}, {"recovery_error", rec_err}};
  t.deviation = std::max(lin, soft);
  return t;
}

std::optional<TrialOutcome> fiber_partner_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const Index d = arch.dims[0];
  const Index dp = arch.dims[1];
  const StreamKey key = stream_key(seed, "fiber");
  const Vector k = sample_gaussian_matrix(d, 1, key.child(0));
  const Vector q = sample_gaussian_matrix(d, 1, key.child(1));
  const Vector v = sample_gaussian_matrix(d, 1, key.child(2));
  const Vector h = sample_gaussian_matrix(dp, 1, key.child(3));
  // The partner collapses into the rescaling orbit when v is parallel to k.
  if (std::abs(k.dot(v)) / (k.norm() * v.norm()) > 0.99) return std::nullopt;
  const AttnLayer layer{k * q.transpose(), h * v.transpose()};
  const FiberPartner fp = fiber_partner(layer);
  if (fp.fiber_case != FiberCase::swap_partner) return std::nullopt;
  const AttnLayer& other = *fp.partner;
  const auto xs = sample_inputs(arch, o.inputs, seed);
  TrialOutcome t;
  const double dev = max_rel_over_inputs(xs, [&](const TokenMatrix& x) { return lightning_forward(layer, x); },
                                         [&](const TokenMatrix& x) { return lightning_forward(other, x); });
  // The rescaling orbit is (c A, V / c); the partner lies on it only if A' is
  // parallel to A and V' to V. Measure the worse of the two misalignments.
  auto off_line = [](const Matrix& m, const Matrix& ref) {
    const double c = (m.array() * ref.array()).sum() / ref.squaredNorm();
    return (m - c * ref).norm() / m.norm();
  };
  const double separation = std::max(off_line(other.A, layer.A), off_line(other.V, layer.V));
  t.metrics = {{"function_deviation", dev}, {"orbit_separation", separation}};
  t.deviation = dev;
  return t;
}

std::optional<TrialOutcome> skew_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  VirtualWeights vw = compute_virtual_weights(random_deep_weights(arch, Parametrization::qkv, seed));
  if (o.plant_skew) {
    vw.M[1] = SkewPerturbation::from_matrix(2, vw.M[1]).sigma;
  }
  const IdentifiabilityReport rep = check_identifiability_conditions(vw, arch.tokens);
  if (!rep.passed) return std::nullopt;
  const auto xs = sample_inputs(arch, o.inputs, seed);
  TrialOutcome t;
  double weakest = std::numeric_limits<double>::infinity();
  for (int i = 2; i <= arch.layers; ++i) {
    const SkewPerturbation p =
        SkewPerturbation::random_unit(i, arch.dims[0], stream_key(seed, "skew", static_cast<std::uint64_t>(i)));
    const VirtualWeights moved = apply_skew_perturbation(vw, p);
    const double effect = max_abs_over_inputs(xs, [&](const TokenMatrix& x) { return virtual_forward(vw, x); },
                                              [&](const TokenMatrix& x) { return virtual_forward(moved, x); });
    t.metrics["effect_layer_" + std::to_string(i)] = effect;
    weakest = std::min(weakest, effect);
  }
  t.metrics["min_effect"] = weakest;
  t.deviation = weakest;
  return t;
}

std::optional<TrialOutcome> softmax_fiber_trial(const Architecture& arch, std::uint64_t seed, const VerifyOptions& o) {
  const DeepWeights w = random_deep_weights(arch, Parametrization::attn, seed);
  const AttnLayer layer = w.attn_layers()[0];
  const Index d = arch.dims[0];
  const StreamKey key = stream_key(seed, "softmax-fiber");
  const AttnLayer other{sample_gaussian_matrix(d, d, key.child(0)), layer.V};
  Matrix dir = sample_gaussian_matrix(d, d, key.child(1));
  dir /= dir.norm();
  const AttnLayer nudged{layer.A + 0.1 * dir, layer.V};
  const auto xs = sample_inputs(arch, o.inputs, seed);
  auto base = [&](const TokenMatrix& x) { return softmax_forward(layer, x); };
  const double distinct =
      max_abs_over_inputs(xs, base, [&](const TokenMatrix& x) { return softmax_forward(other, x); });
  const double perturbed =
      max_abs_over_inputs(xs, base, [&](const TokenMatrix& x) { return softmax_forward(nudged, x); });
  // With all tokens equal every row of scores is constant, so each output
  // token is V x.
  const Vector x0 = sample_gaussian_matrix(d, 1, key.child(2));
  const Matrix same = x0.replicate(1, arch.tokens);
  const Matrix out = softmax_forward(layer, TokenMatrix(same)).matrix();
  const Matrix expect = (layer.V * x0).replicate(1, arch.tokens);
  TrialOutcome t;
  t.metrics = {{"distinct_A_effect", distinct},
               {"perturbed_A_effect", perturbed},
               {"equal_token_error", relative_deviation(out, expect)}};
  t.deviation = std::min(distinct, perturbed);
  return t;
}

const SuiteDef& suite_def(Suite s) {
  static const std::map<Suite, SuiteDef> defs = {
      {Suite::evaluators,
       {{{"deep_vs_virtual", 1e-8, true},
         {"deep_vs_triadic", 1e-8, true},
         {"virtual_vs_triadic", 1e-8, true},
         {"softmax_deep_vs_virtual", 1e-8, true}},
        evaluators_trial}},
      {Suite::scaling, {{{"function_deviation", 1e-9, true}}, scaling_trial}},
      {Suite::qk_gauge, {{{"function_deviation", 1e-9, true}, {"recovery_error", 1e-7, true}}, qk_gauge_trial}},
      {Suite::interlayer_gauge,
       {{{"function_deviation", 1e-9, true},
         {"softmax_function_deviation", 1e-9, true},
         {"recovery_error", 1e-7, true}},
        interlayer_trial}},
      {Suite::fiber_partner,
       {{{"function_deviation", 1e-9, true}, {"orbit_separation", 1e-3, false}}, fiber_partner_trial}},
      {Suite::skew, {{{"min_effect", 1e-6, false}}, skew_trial}},
      {Suite::softmax_fiber,
       {{{"distinct_A_effect", 1e-6, false}, {"perturbed_A_effect", 1e-6, false}, {"equal_token_error", 1e-12, true}},
        softmax_fiber_trial}},
  };
  return defs.at(s);
}

}  // namespace

std::string_view to_string(Suite s) {
  switch (s) {
    case Suite::evaluators: return "evaluators";
    case Suite::scaling: return "scaling";
    case Suite::qk_gauge: return "qk-gauge";
    case Suite::interlayer_gauge: return "interlayer-gauge";
    case Suite::fiber_partner: return "fiber-partner";
    case Suite::skew: return "skew";
    case Suite::softmax_fiber: return "softmax-fiber";
  }
  return "unknown";
}

const std::vector<Suite>& all_suites() {
  static const std::vector<Suite> v = {Suite::evaluators,    Suite::scaling, Suite::qk_gauge,
                                       Suite::interlayer_gauge, Suite::fiber_partner, Suite::skew,
                                       Suite::softmax_fiber};
  return v;
}

Suite suite_from_string(std::string_view s) {
  for (Suite x : all_suites()) {
    if (to_string(x) == s) return x;
  }
  throw InvalidInputError("unknown suite '" + std::string(s) +
                          "' (expected evaluators, scaling, qk-gauge, interlayer-gauge, fiber-partner, skew or "
                          "softmax-fiber)");
}

double relative_deviation(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("cannot compare matrices of different shape");
  if (a.size() == 0) return 0.0;
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  const double diff = (a - b).cwiseAbs().maxCoeff();
  return scale > 0.0 ? diff / scale : 0.0;
}

std::vector<Architecture> default_grid(Suite suite) {
  std::vector<Architecture> grid;
  switch (suite) {
    case Suite::evaluators:
      for (int t : {2, 3, 4}) {
        for (int d0 : {2, 3}) {
          for (int d1 : {2, 3}) {
            grid.push_back(make_arch({d0, d1}, {d0}, t));
            for (int d2 : {2, 3}) grid.push_back(make_arch({d0, d1, d2}, {d0, d1}, t));
          }
        }
      }
      break;
    case Suite::scaling:
      grid = {make_arch({3, 3}, {3}, 3), make_arch({3, 3, 3}, {2, 2}, 3), make_arch({2, 3, 2}, {2, 3}, 2),
              make_arch({3, 2, 2, 3}, {2, 2, 2}, 3)};
      break;
    case Suite::qk_gauge:
      grid = {make_arch({3, 3}, {2}, 3), make_arch({4, 2}, {2}, 3), make_arch({3, 3}, {3}, 2),
              make_arch({4, 4}, {3}, 3)};
      break;
    case Suite::interlayer_gauge:
      grid = {make_arch({3, 3, 3}, {2, 2}, 3), make_arch({4, 3, 4}, {2, 3}, 3), make_arch({4, 2, 2, 3}, {2, 2, 2}, 3),
              make_arch({3, 3, 3, 3}, {3, 3, 3}, 2)};
      break;
    case Suite::fiber_partner:
      grid = {make_arch({2, 1}, {1}, 2), make_arch({2, 2}, {1}, 3), make_arch({3, 2}, {1}, 2),
              make_arch({3, 3}, {1}, 3)};
      break;
    case Suite::skew:
      grid = {make_arch({3, 3, 3}, {3, 3}, 3), make_arch({4, 3, 4}, {2, 3}, 3), make_arch({3, 3, 3, 3}, {3, 3, 3}, 3),
              make_arch({4, 3, 3, 2}, {3, 2, 2}, 4)};
      break;
    case Suite::softmax_fiber:
      grid = {make_arch({2, 1}, {2}, 2, Model::softmax), make_arch({2, 2}, {2}, 3, Model::softmax),
              make_arch({3, 2}, {3}, 3, Model::softmax), make_arch({3, 3}, {3}, 4, Model::softmax)};
      break;
  }
  return grid;
}

VerifyReport run_suite(Suite suite, const VerifyOptions& opts) {
  if (opts.trials < 1) throw InvalidInputError("need at least one trial");
  if (opts.inputs < 1) throw InvalidInputError("need at least one input per trial");
  const SuiteDef& def = suite_def(suite);
  std::vector<Architecture> grid = opts.arch ? std::vector<Architecture>{*opts.arch} : default_grid(suite);
  for (const auto& a : grid) a.validate();

  VerifyReport r;
  r.suite = std::string(to_string(suite));
  r.trials = opts.trials;
  for (const auto& b : def.bounds) {
    r.thresholds[b.name] = b.bound;
    r.worst[b.name] = b.upper ? 0.0 : std::numeric_limits<double>::infinity();
  }

  for (int k = 0; k < opts.trials; ++k) {
    const Architecture& arch = grid[static_cast<std::size_t>(k) % grid.size()];
    std::optional<TrialOutcome> outcome;
    int attempt = 0;
    for (; attempt <= kMaxRedraws && !outcome; ++attempt) {
      CounterEngine eng(stream_key(opts.seed, "verify." + r.suite, static_cast<std::uint64_t>(k))
                            .child(static_cast<std::uint64_t>(attempt)));
      outcome = def.trial(arch, eng(), opts);
    }
    const std::string desc = "trial " + std::to_string(k) + " (" + describe(arch) + ")";
    if (!outcome) {
      ++r.skipped;
      r.deviations.push_back(kNaN);
      continue;
    }
    outcome->descriptor = desc + (attempt > 1 ? ", redraw " + std::to_string(attempt - 1) : "");
    bool ok = true;
    for (const auto& b : def.bounds) {
      const double v = outcome->metrics.at(b.name);
      const bool good = b.upper ? v < b.bound : v > b.bound;
      if (!good) ok = false;
      double& w = r.worst[b.name];
      w = b.upper ? std::max(w, v) : std::min(w, v);
    }
    r.deviations.push_back(outcome->deviation);
    if (ok) {
      ++r.passes;
    } else {
      r.failures.push_back({outcome->descriptor, outcome->deviation});
    }
  }
  return r;
}

nlohmann::json to_json(const VerifyReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : r.failures) failures.push_back({{"case", f.descriptor}, {"max_deviation", num(f.max_deviation)}});
  nlohmann::json devs = nlohmann::json::array();
  for (double d : r.deviations) devs.push_back(num(d));
  nlohmann::json worst = nlohmann::json::object();
  for (const auto& [k, v] : r.worst) worst[k] = num(v);
  nlohmann::json thresholds = nlohmann::json::object();
  for (const auto& [k, v] : r.thresholds) thresholds[k] = v;
  return {{"suite", r.suite},
          {"trials", r.trials},
          {"passes", r.passes},
          {"skipped", r.skipped},
          {"failures", failures},
          {"deviations", devs},
          {"worst", worst},
          {"thresholds", thresholds},
          {"verdict", r.passed() ? "pass" : "fail"}};
}

}  // namespace neurodim

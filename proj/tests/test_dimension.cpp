#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "neurodim/dimension.hpp"
#include "oracles.hpp"

using namespace neurodim;
using testing_util::arch;
using testing_util::gaussian;
using testing_util::random_tokens;

namespace {

// Closed forms written out independently of the library.
long long softmax_sweep_value(long long delta) { return delta * delta + 8 * delta - 8; }

long long single_layer_value(long long d, long long dp, long long a) {
  return a <= d ? 2 * a * d + d * dp - a * a - 1 : d * d + d * dp - 1;
}

Vector random_direction(Index n, std::uint64_t seed) { return gaussian(static_cast<int>(n), 1, seed, 77); }

// Central difference with a per-entry step h_k = 1e-5 (1 + |theta_k|) projected on the direction.
Matrix central_difference(const ParamPoint& p, const Vector& dir, const TokenMatrix& x, Model m) {
  const double h = 1e-5 * (1.0 + p.theta.cwiseAbs().maxCoeff());
  ParamPoint plus = p, minus = p;
  plus.theta += h * dir;
  minus.theta -= h * dir;
  return (evaluate(plus, x, m).matrix() - evaluate(minus, x, m).matrix()) / (2.0 * h);
}

}  // namespace

TEST_CASE("single-layer predictions") {
  CHECK(predict_single_layer(2, 1, 2).value == 5);
  CHECK(predict_single_layer(3, 2, 5).value == 14);
  CHECK(predict_single_layer(2, 2, 1).value == 6);
  CHECK(predict_single_layer(4, 3, 2).value == 23);
  for (int d = 1; d <= 5; ++d) {
    for (int dp = 1; dp <= 4; ++dp) {
      for (int a = 1; a <= 6; ++a) {
        const DimensionPrediction p = predict_single_layer(d, dp, a);
        CHECK(p.value == single_layer_value(d, dp, a));
        CHECK(p.value == p.sum_of_terms());
      }
    }
  }
  CHECK(predict_single_layer(1, 1, 1).warnings.size() == 1);
  CHECK(predict_single_layer(2, 1, 2).warnings.empty());
  CHECK(predict_determinantal(4, 2).value == 12);
  CHECK(predict_determinantal(3, 5).value == 9);
}

TEST_CASE("deep predictions") {
  CHECK(predict_deep_lightning(arch({3, 3, 3}, {2, 2}, 3)).value == 23);
  CHECK(predict_deep_softmax(arch({3, 3, 3}, {2, 2}, 3)).value == 25);
  CHECK(predict_deep_softmax(arch({10, 10, 10}, {2, 2}, 3)).value == 172);
  for (int delta = 3; delta <= 10; ++delta) {
    const Architecture a = arch({delta, delta, delta}, {2, 2}, 3);
    CHECK(predict_deep_softmax(a).value == softmax_sweep_value(delta));
    CHECK(predict_deep_lightning(a).value == softmax_sweep_value(delta) - 2);
  }
  // alpha_i = delta = d_0 = d_l: d^2 (l + 1) - l.
  for (int l = 2; l <= 4; ++l) {
    for (int d = 2; d <= 5; ++d) {
      Architecture a = arch(std::vector<int>(static_cast<std::size_t>(l) + 1, d), std::vector<int>(l, d), 3);
      CHECK(predict_deep_lightning(a).value == d * d * (l + 1) - l);
      CHECK(predict_deep_softmax(a).value - predict_deep_lightning(a).value == l);
    }
  }
  // General bottleneck with wider ends.
  const Architecture wide = arch({5, 3, 3, 4}, {2, 3, 1}, 3);
  const long long expect = (2 * 2 * 5 - 4) + 3 * (5 + 4) - 9 - 3 + (2 * 3 * 3 - 9) + (2 * 1 * 3 - 1);
  CHECK(predict_deep_lightning(wide).value == expect);
  CHECK(predict_deep_lightning(wide).warnings.size() == 1);  // a_3 = 1

  CHECK_THROWS_AS(predict_deep_lightning(arch({3, 3}, {2}, 3)), UnsupportedArchitectureError);
  try {
    predict(arch({3, 5, 3}, {2, 2}, 3));
    FAIL("expected an error");
  } catch (const UnsupportedArchitectureError& e) {
    CHECK(std::string(e.what()).find("bottleneck hypothesis violated") != std::string::npos);
  }
}

TEST_CASE("router and parameter spaces") {
  CHECK(predict(arch({2, 1}, {2}, 2)).value == 5);
  CHECK(predict(arch({2, 1}, {2}, 2)).formula == DimensionFormula::single_layer);
  CHECK(predict(arch({3, 3, 3}, {2, 2}, 3, Model::softmax)).formula == DimensionFormula::deep_softmax);
  CHECK(predict_for(arch({3, 3, 3}, {2, 2}, 3), ParamSpace::attn_v).value == 9 * 3 - 2);
  CHECK(predict_for(arch({3, 3, 3}, {2, 2}, 3), ParamSpace::virtual_weights).value == 2 * 9 + 9 - 2);
  CHECK(parameter_count(arch({10, 10, 10}, {2, 2}, 3), ParamSpace::raw_qkv) == 280);
  CHECK(parameter_count(arch({4, 4, 4}, {4, 4}, 3), ParamSpace::raw_qkv) == 96);
  CHECK(parameter_count(arch({4, 4, 4}, {4, 4}, 3), ParamSpace::attn_v) == 64);
  CHECK(param_space_from_string("virtual") == ParamSpace::virtual_weights);
  CHECK_THROWS_AS(param_space_from_string("nope"), InvalidInputError);
}

TEST_CASE("flatten round trips") {
  const Architecture a = arch({4, 3, 2}, {2, 3}, 3);
  for (auto p : {Parametrization::qkv, Parametrization::attn}) {
    const DeepWeights w = random_deep_weights(a, p, 5);
    const ParamPoint pt = flatten(w);
    CHECK(pt.theta.size() == parameter_count(a, p == Parametrization::qkv ? ParamSpace::raw_qkv : ParamSpace::attn_v));
    const TokenMatrix x = random_tokens(4, 3, 5);
    CHECK(deep_forward(unflatten_weights(pt), x).matrix() == deep_forward(w, x).matrix());
    CHECK(evaluate(pt, x, Model::lightning).matrix() == deep_forward(w, x).matrix());
    CHECK(evaluate(pt, x, Model::softmax).matrix() == softmax_deep_forward(w, x).matrix());
  }
  const ParamPoint vp = sample_parameters(a, ParamSpace::virtual_weights, 5);
  CHECK(vp.theta.size() == parameter_count(a, ParamSpace::virtual_weights));
  const VirtualWeights vw = unflatten_virtual(vp);
  CHECK(flatten(vw, a).theta == vp.theta);
}

TEST_CASE("directional derivatives") {
  const Architecture single = arch({3, 2}, {3}, 3);
  const DeepWeights w = random_deep_weights(single, Parametrization::attn, 8);
  const ParamPoint p = flatten(w);
  const TokenMatrix x = random_tokens(3, 3, 8);

  CHECK(directional_derivative(p, Vector::Zero(p.theta.size()), x, Model::lightning).isZero(0.0));

  // Perturbing only V: the derivative is dV X X^T A X.
  const Matrix dV = gaussian(2, 3, 8, 3);
  Vector dir = Vector::Zero(p.theta.size());
  ParamPoint dp = flatten(DeepWeights{single, std::vector<AttnLayer>{{Matrix::Zero(3, 3), dV}}});
  dir = dp.theta;
  const Matrix& X = x.matrix();
  const Matrix expect = dV * X * X.transpose() * w.attn_layers()[0].A * X;
  CHECK(oracle::rel_diff(directional_derivative(p, dir, x, Model::lightning), expect) < 1e-13);
  CHECK(oracle::rel_diff(directional_derivative(w, dir, x, Model::lightning), expect) < 1e-13);
}

TEST_CASE("derivatives are linear in the direction") {
  const Architecture a = arch({3, 3, 3}, {2, 2}, 3);
  const ParamPoint p = sample_parameters(a, ParamSpace::raw_qkv, 9);
  const TokenMatrix x = random_tokens(3, 3, 9);
  const Vector u = random_direction(p.theta.size(), 1);
  const Vector v = random_direction(p.theta.size(), 2);
  for (Model m : {Model::lightning, Model::softmax}) {
    const Matrix lhs = directional_derivative(p, 1.7 * u - 0.4 * v, x, m);
    const Matrix rhs = 1.7 * directional_derivative(p, u, x, m) - 0.4 * directional_derivative(p, v, x, m);
    CHECK(oracle::rel_diff(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("forward mode agrees with central differences") {
  const std::vector<Architecture> archs = {arch({2, 2}, {2}, 2), arch({3, 3, 3}, {2, 2}, 3),
                                           arch({4, 3, 4}, {2, 3}, 3)};
  for (Model m : {Model::lightning, Model::softmax}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Architecture& a = archs[trial % archs.size()];
      const ParamSpace space = trial % 3 == 0 ? ParamSpace::virtual_weights
                                              : (trial % 3 == 1 ? ParamSpace::raw_qkv : ParamSpace::attn_v);
      // Smaller weights keep softmax scores moderate for the difference quotient.
      ParamPoint p = sample_parameters(a, space, 100 + trial);
      p.theta *= 0.5;
      const Vector dir = random_direction(p.theta.size(), 200 + trial);
      const TokenMatrix x = random_tokens(a.dims[0], a.tokens, 300 + trial);
      const Matrix fwd = directional_derivative(p, dir, x, m);
      const Matrix fd = central_difference(p, dir, x, m);
      CHECK(oracle::rel_diff(fwd, fd) < 1e-6);
    }
  }
}

TEST_CASE("Jacobian shape and zero point") {
  const Architecture a = arch({10, 10, 10}, {2, 2}, 3);
  const ParamPoint p = sample_parameters(a, ParamSpace::raw_qkv, 1);
  const auto xs = sample_inputs(a, 4, 1);
  const JacobianMatrix J = assemble_jacobian(p, xs, Model::lightning);
  CHECK(J.entries.cols() == 280);
  CHECK(J.entries.rows() == 4 * 3 * 10);

  ParamPoint zero = p;
  zero.theta.setZero();
  CHECK(assemble_jacobian(zero, xs, Model::lightning).entries.isZero(0.0));
}

TEST_CASE("Jacobian does not depend on the thread count") {
  const Architecture a = arch({3, 3, 3}, {2, 2}, 3);
  const ParamPoint p = sample_parameters(a, ParamSpace::raw_qkv, 2);
  const auto xs = sample_inputs(a, 10, 2);
  const Matrix one = assemble_jacobian(p, xs, Model::softmax, {}, 1).entries;
  const Matrix four = assemble_jacobian(p, xs, Model::softmax, {}, 4).entries;
  CHECK(one == four);
  // Row layout: input-major, then output row, then token.
  const Matrix d = directional_derivative(p, Vector::Unit(p.theta.size(), 5), xs[7], Model::softmax);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) CHECK(one((7 * 3 + r) * 3 + c, 5) == d(r, c));
  }
}

TEST_CASE("estimates on small configurations") {
  EstimateOptions o;
  o.seed = 3;

  o.n_inputs = 50;
  const DimensionReport single = estimate_dimension(arch({2, 1}, {2}, 2), o);
  CHECK(single.estimate.rank == 5);
  CHECK(single.agree);

  o.n_inputs = 100;
  CHECK(estimate_dimension(arch({3, 2}, {5}, 2), o).estimate.rank == 14);
  CHECK(estimate_dimension(arch({2, 2}, {1}, 2), o).estimate.rank == 6);
  const DimensionReport det = estimate_dimension(arch({4, 3}, {2}, 2), o);
  CHECK(det.estimate.rank == 23);
  CHECK(det.agree);

  o.n_inputs = kDefaultInputs;
  const DimensionReport lin = estimate_dimension(arch({3, 3, 3}, {2, 2}, 3), o);
  CHECK(lin.estimate.rank == 23);
  const DimensionReport soft = estimate_dimension(arch({3, 3, 3}, {2, 2}, 3, Model::softmax), o);
  CHECK(soft.estimate.rank == 25);
  CHECK(soft.agree);
  CHECK_FALSE(soft.ill_separated);
}

TEST_CASE("rank is parameter-space independent when attention is unconstrained") {
  EstimateOptions o;
  o.seed = 4;
  o.n_inputs = 100;
  for (const Architecture& a : {arch({3, 3, 3}, {3, 3}, 3), arch({3, 3, 3}, {3, 3}, 3, Model::softmax),
                                arch({3, 2}, {3}, 2)}) {
    o.space = ParamSpace::raw_qkv;
    const int raw = estimate_dimension(a, o).estimate.rank;
    o.space = ParamSpace::attn_v;
    const int av = estimate_dimension(a, o).estimate.rank;
    CHECK(raw == av);
    CHECK(raw == predict(a).value);
  }
  o.space = ParamSpace::virtual_weights;
  const Architecture v = arch({3, 3, 3}, {3, 3}, 3);
  const DimensionReport vr = estimate_dimension(v, o);
  CHECK(vr.estimate.rank == predict(v).value);
  CHECK(vr.estimate.rank == predict_for(v, ParamSpace::virtual_weights).value);
}

TEST_CASE("rank limited by the row count") {
  EstimateOptions o;
  o.n_inputs = 1;
  const DimensionReport r = estimate_dimension(arch({6, 6, 6}, {2, 2}, 3, Model::softmax), o);
  CHECK(r.estimate.rank <= 18);
  CHECK_FALSE(r.agree);
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("doubling N does not change the rank") {
  for (int delta : {3, 5}) {
    const Architecture a = arch({delta, delta, delta}, {2, 2}, 3, Model::softmax);
    EstimateOptions o;
    o.seed = 6;
    const int base = estimate_dimension(a, o).estimate.rank;
    o.n_inputs = 2 * kDefaultInputs;
    CHECK(estimate_dimension(a, o).estimate.rank == base);
  }
}

TEST_CASE("non-bottleneck estimate has no prediction") {
  EstimateOptions o;
  o.n_inputs = 20;
  const DimensionReport r = estimate_dimension(arch({2, 3, 2}, {2, 2}, 3), o);
  CHECK_FALSE(r.prediction);
  CHECK(r.prediction_unavailable.find("bottleneck") != std::string::npos);
  const nlohmann::json j = to_json(r);
  CHECK(j["expected"].is_null());
  CHECK(j.contains("singular_values"));
  CHECK(j["N"] == 20);
}

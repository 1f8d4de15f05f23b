#include "neurodim/reparam.hpp"

#include <cmath>

#include "neurodim/detail/kernels.hpp"

namespace neurodim {

namespace {

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

double rel_residual(const Matrix& got, const Matrix& want) {
  const double scale = std::max(max_abs(want), std::numeric_limits<double>::min());
  return max_abs(got - want) / scale;
}

// Least-squares solution of X * B = R for X (i.e. B^T X^T = R^T).
Matrix solve_right(const Matrix& B, const Matrix& R) {
  return B.transpose().colPivHouseholderQr().solve(R.transpose()).transpose();
}

Matrix checked_inverse(const Matrix& C, const std::string& what) {
  if (C.rows() != C.cols()) throw InvalidTransformError(what + " must be square");
  Eigen::FullPivLU<Matrix> lu(C);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) throw InvalidTransformError(what + " is singular");
  return lu.inverse();
}

constexpr double kGaugeQkTol = 1e-8;
constexpr double kGaugeInterlayerTol = 1e-7;

}  // namespace

void VirtualWeights::validate() const {
  if (M.empty()) throw DimensionError("virtual weights need at least one layer");
  const Index d0 = L.cols();
  for (std::size_t i = 0; i < M.size(); ++i) {
    if (M[i].rows() != d0 || M[i].cols() != d0) {
      throw DimensionError("M_" + std::to_string(i + 1) + " must be " + std::to_string(d0) + "x" +
                           std::to_string(d0));
    }
  }
}

VirtualWeights compute_virtual_weights(const DeepWeights& w) {
  w.validate();
  const auto layers = w.attn_layers();
  VirtualWeights vw;
  Matrix running = Matrix::Identity(w.arch.input_dim(), w.arch.input_dim());  // L_0
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i == 0) {
      vw.M.push_back(layers[0].A);
    } else {
      vw.M.push_back(running.transpose() * layers[i].A * running);
    }
    running = layers[i].V * running;
  }
  vw.L = std::move(running);
  return vw;
}

TokenMatrix virtual_forward(const VirtualWeights& vw, const TokenMatrix& x) {
  vw.validate();
  if (x.dim() != vw.input_dim()) throw DimensionError("input must have d_0 rows");
  Matrix y = detail::virtual_lightning<double>(vw.M, vw.L, x.matrix());
  if (!all_finite(y)) throw OverflowError("virtual_forward produced non-finite values");
  return TokenMatrix(std::move(y));
}

std::vector<Matrix> d_matrices(const VirtualWeights& vw, const TokenMatrix& x) {
  vw.validate();
  if (x.dim() != vw.input_dim()) throw DimensionError("input must have d_0 rows");
  return detail::d_matrices<double>(vw.M, x.matrix(), vw.M.size());
}

TokenMatrix virtual_softmax_forward(const VirtualWeights& vw, const TokenMatrix& x,
                                    const SoftmaxConfig& cfg) {
  cfg.validate();
  vw.validate();
  if (x.dim() != vw.input_dim()) throw DimensionError("input must have d_0 rows");
  Matrix y = detail::virtual_softmax<double>(vw.M, vw.L, x.matrix(), cfg.tau);
  if (!all_finite(y)) throw OverflowError("virtual softmax produced non-finite values");
  return TokenMatrix(std::move(y));
}

TriadicPlan TriadicPlan::for_layers(int layers) {
  if (layers < 1) throw InvalidInputError("triadic plan needs at least one layer");
  if (layers > 39) throw ResourceError("triadic plan too large");
  TriadicPlan plan;
  std::int64_t pow3 = 1;
  for (int i = 0; i < layers; ++i) pow3 *= 3;
  plan.l_tilde = (pow3 - 1) / 2;
  for (std::int64_t j = 1; j < plan.l_tilde; ++j) {
    std::int64_t r = j;
    int position = 1;
    while (r % 3 == 0) {
      r /= 3;
      ++position;
    }
    plan.selector.push_back({position, r % 3 == 2});
  }
  return plan;
}

TokenMatrix triadic_forward(const VirtualWeights& vw, const TokenMatrix& x, std::uint64_t term_budget) {
  vw.validate();
  if (x.dim() != vw.input_dim()) throw DimensionError("input must have d_0 rows");
  const TriadicPlan plan = TriadicPlan::for_layers(vw.layers());
  const Matrix& X = x.matrix();
  const auto t = static_cast<std::uint64_t>(X.cols());

  std::uint64_t terms = 1;
  for (std::int64_t j = 0; j < plan.l_tilde; ++j) {
    if (terms > term_budget / t) {
      throw ResourceError("triadic expansion needs t^" + std::to_string(plan.l_tilde) +
                          " terms, above the budget of " + std::to_string(term_budget) +
                          "; use virtual_forward instead");
    }
    terms *= t;
  }

  // Scalar tables g_j(a, b) = x_a^T Mtilde_j x_b, then the final x_a^T M_1 x_k.
  std::vector<Matrix> tables;
  for (const auto& sel : plan.selector) {
    const Matrix& m = vw.M[sel.layer - 1];
    tables.push_back(sel.transposed ? Matrix(X.transpose() * m.transpose() * X)
                                    : Matrix(X.transpose() * m * X));
  }
  const Matrix last = X.transpose() * vw.M[0] * X;
  const Matrix LX = vw.L * X;

  const auto depth = static_cast<std::size_t>(plan.l_tilde);
  Matrix out = Matrix::Zero(vw.L.rows(), X.cols());
  std::vector<Index> idx(depth, 0);
  for (Index k = 0; k < X.cols(); ++k) {
    // weight[k_1] = sum over k_2..k_ltilde of the scalar chain
    Vector weight = Vector::Zero(X.cols());
    std::fill(idx.begin(), idx.end(), 0);
    for (std::uint64_t n = 0; n < terms; ++n) {
      double prod = last(idx[depth - 1], k);
      for (std::size_t j = 0; j + 1 < depth; ++j) prod *= tables[j](idx[j], idx[j + 1]);
      weight(idx[0]) += prod;
      for (std::size_t p = depth; p-- > 0;) {
        if (++idx[p] < X.cols()) break;
        idx[p] = 0;
      }
    }
    out.col(k) = LX * weight;
  }
  return TokenMatrix(std::move(out));
}

LayerScaling LayerScaling::with_solved_rho(std::vector<double> lambdas) {
  LayerScaling s{std::move(lambdas), 1.0};
  double prod = 1.0;
  const auto l = s.lambdas.size();
  for (std::size_t i = 0; i < l; ++i) prod *= std::pow(s.lambdas[i], std::pow(3.0, double(l - 1 - i)));
  if (prod == 0.0 || !std::isfinite(prod)) throw InvalidTransformError("layer scalars must be non-zero");
  s.rho = 1.0 / prod;
  return s;
}

double LayerScaling::constraint_residual() const {
  double prod = rho;
  const auto l = lambdas.size();
  for (std::size_t i = 0; i < l; ++i) prod *= std::pow(lambdas[i], std::pow(3.0, double(l - 1 - i)));
  return std::abs(prod - 1.0);
}

VirtualWeights apply_layer_scaling(const VirtualWeights& vw, const LayerScaling& s) {
  vw.validate();
  if (s.lambdas.size() != vw.M.size()) throw InvalidTransformError("one scalar per layer expected");
  for (double lam : s.lambdas) {
    if (lam == 0.0) throw InvalidTransformError("layer scalars must be non-zero");
  }
  if (s.rho == 0.0) throw InvalidTransformError("rho must be non-zero");
  if (s.constraint_residual() > 1e-9) {
    throw InvalidTransformError("layer scaling violates prod lambda_i^(3^(l-i)) = 1/rho");
  }
  VirtualWeights out = vw;
  for (std::size_t i = 0; i < out.M.size(); ++i) out.M[i] *= s.lambdas[i];
  out.L *= s.rho;
  return out;
}

QKPair apply_qk_gauge(const Matrix& Q, const Matrix& K, const QKGauge& g) {
  if (Q.rows() != K.rows() || Q.cols() != K.cols()) throw DimensionError("Q and K must share shape");
  if (g.C.rows() != K.rows()) throw DimensionError("gauge must be a x a");
  const Matrix Cinv = checked_inverse(g.C, "query/key gauge");
  return {Cinv.transpose() * Q, g.C * K};
}

QKGauge recover_qk_gauge(const Matrix& Q, const Matrix& K, const Matrix& Q2, const Matrix& K2) {
  if (Q.rows() != K.rows() || Q.cols() != K.cols() || Q2.rows() != Q.rows() ||
      Q2.cols() != Q.cols() || K2.rows() != K.rows() || K2.cols() != K.cols()) {
    throw DimensionError("all factors must be a x d with matching shapes");
  }
  const Index a = K.rows();
  const Matrix A = K.transpose() * Q;
  if (a > K.cols() || numerical_rank(A).rank != a) {
    throw NoUniqueGaugeError("rank(K^T Q) must equal a = " + std::to_string(a));
  }
  if (rel_residual(K2.transpose() * Q2, A) > kGaugeQkTol) {
    throw NoUniqueGaugeError("factorizations describe different attention matrices");
  }
  // C = K' K^T (K K^T)^{-1}, i.e. least squares for C K = K'.
  QKGauge g{solve_right(K, K2)};
  if (rel_residual(g.C * K, K2) > kGaugeQkTol || rel_residual(g.C.transpose() * Q2, Q) > kGaugeQkTol) {
    throw NoUniqueGaugeError("recovered gauge does not reproduce both factors");
  }
  return g;
}

std::vector<double> InterlayerGauge::condition_numbers() const {
  std::vector<double> out;
  for (const auto& c : C) {
    Eigen::JacobiSVD<Matrix> svd(c);
    const Vector& s = svd.singularValues();
    const double smin = s(s.size() - 1);
    out.push_back(smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity());
  }
  return out;
}

DeepWeights apply_interlayer_gauge(const DeepWeights& w, const InterlayerGauge& g) {
  w.validate();
  const int l = w.arch.layers;
  if (static_cast<int>(g.C.size()) != l - 1) {
    throw InvalidTransformError("expected " + std::to_string(l - 1) + " inter-layer gauges");
  }
  std::vector<Matrix> inv;
  for (int i = 1; i < l; ++i) {
    const Matrix& c = g.C[i - 1];
    if (c.rows() != w.arch.dims[i] || c.cols() != w.arch.dims[i]) {
      throw DimensionError("C_" + std::to_string(i) + " must have side d_" + std::to_string(i));
    }
    inv.push_back(checked_inverse(c, "C_" + std::to_string(i)));
  }
  // C_0 = C_l = I
  auto c_of = [&](int i) -> Matrix {
    if (i == 0 || i == l) return Matrix::Identity(w.arch.dims[i], w.arch.dims[i]);
    return g.C[i - 1];
  };
  auto cinv_of = [&](int i) -> Matrix {
    if (i == 0 || i == l) return Matrix::Identity(w.arch.dims[i], w.arch.dims[i]);
    return inv[i - 1];
  };

  DeepWeights out = w;
  if (auto* qkv = std::get_if<std::vector<QKVLayer>>(&out.layers)) {
    for (int i = 1; i <= l; ++i) {
      auto& layer = (*qkv)[i - 1];
      layer.V = c_of(i) * layer.V * cinv_of(i - 1);
      layer.Q = layer.Q * cinv_of(i - 1);
      layer.K = layer.K * cinv_of(i - 1);
    }
  } else {
    auto& attn = std::get<std::vector<AttnLayer>>(out.layers);
    for (int i = 1; i <= l; ++i) {
      auto& layer = attn[i - 1];
      layer.V = c_of(i) * layer.V * cinv_of(i - 1);
      layer.A = cinv_of(i - 1).transpose() * layer.A * cinv_of(i - 1);
    }
  }
  return out;
}

InterlayerGauge recover_interlayer_gauge(const DeepWeights& w1, const DeepWeights& w2) {
  w1.validate();
  w2.validate();
  if (!(w1.arch.dims == w2.arch.dims && w1.arch.layers == w2.arch.layers)) {
    throw DimensionError("weight sets have different architectures");
  }
  const Architecture& arch = w1.arch;
  if (!arch.is_bottleneck()) {
    throw NoUniqueGaugeError("bottleneck hypothesis violated: need l >= 2, d_i = delta for 0 < i < l, "
                             "d_0, d_l >= delta");
  }
  const int l = arch.layers;
  const int delta = arch.bottleneck_width();
  const auto a1 = w1.attn_layers();
  const auto a2 = w2.attn_layers();

  const VirtualWeights v1 = compute_virtual_weights(w1);
  if (numerical_rank(v1.L).rank != delta) {
    throw NoUniqueGaugeError("rank(L) < delta; the gauge is not unique");
  }

  InterlayerGauge g;
  g.C.push_back(solve_right(a1[0].V, a2[0].V));
  for (int i = 2; i < l; ++i) {
    g.C.push_back(solve_right(a1[i - 1].V, a2[i - 1].V * g.C.back()));
  }

  std::vector<Matrix> inv;
  for (std::size_t i = 0; i < g.C.size(); ++i) {
    Eigen::FullPivLU<Matrix> lu(g.C[i]);
    if (!lu.isInvertible()) throw NoUniqueGaugeError("recovered C_" + std::to_string(i + 1) + " is singular");
    inv.push_back(lu.inverse());
  }
  auto c_of = [&](int i) -> Matrix {
    if (i == 0 || i == l) return Matrix::Identity(arch.dims[i], arch.dims[i]);
    return g.C[i - 1];
  };
  auto cinv_of = [&](int i) -> Matrix {
    if (i == 0 || i == l) return Matrix::Identity(arch.dims[i], arch.dims[i]);
    return inv[i - 1];
  };
  for (int i = 1; i <= l; ++i) {
    const Matrix v = c_of(i) * a1[i - 1].V * cinv_of(i - 1);
    const Matrix a = cinv_of(i - 1).transpose() * a1[i - 1].A * cinv_of(i - 1);
    if (rel_residual(v, a2[i - 1].V) > kGaugeInterlayerTol ||
        rel_residual(a, a2[i - 1].A) > kGaugeInterlayerTol) {
      throw NoUniqueGaugeError("weights are not related by an inter-layer gauge (layer " +
                               std::to_string(i) + ")");
    }
  }
  return g;
}

SkewPerturbation SkewPerturbation::from_matrix(int layer, const Matrix& B) {
  if (B.rows() != B.cols()) throw DimensionError("skew perturbation must be square");
  return {layer, (B - B.transpose()) / 2.0};
}

SkewPerturbation SkewPerturbation::random_unit(int layer, Index side, const StreamKey& key) {
  if (side < 2) throw InvalidInputError("skew perturbations need d_0 >= 2");
  SkewPerturbation p = from_matrix(layer, sample_gaussian_matrix(side, side, key));
  // Scaling by a scalar keeps the exact antisymmetry.
  p.sigma /= p.sigma.norm();
  return p;
}

VirtualWeights apply_skew_perturbation(const VirtualWeights& vw, const SkewPerturbation& p) {
  vw.validate();
  if (p.layer < 2 || p.layer > vw.layers()) {
    throw InvalidInputError("skew perturbation layer must lie in [2, " + std::to_string(vw.layers()) + "]");
  }
  const Matrix& m = vw.M[p.layer - 1];
  if (p.sigma.rows() != m.rows() || p.sigma.cols() != m.cols()) {
    throw DimensionError("skew perturbation must be d_0 x d_0");
  }
  if (max_abs(p.sigma + p.sigma.transpose()) > 1e-12 * max_abs(p.sigma)) {
    throw InvalidInputError("perturbation is not skew-symmetric");
  }
  VirtualWeights out = vw;
  out.M[p.layer - 1] += p.sigma;
  return out;
}

std::string IdentifiabilityReport::first_failure() const {
  for (const auto& c : layers) {
    if (!c.rank_ok) return "layer " + std::to_string(c.layer) + ": rank(M) = " + std::to_string(c.rank) + " < 2";
    if (!c.non_skew_ok) return "layer " + std::to_string(c.layer) + ": M is skew-symmetric";
  }
  if (!tokens_ok) return "t = " + std::to_string(tokens) + " < 3";
  return {};
}

IdentifiabilityReport check_identifiability_conditions(const VirtualWeights& vw, int tokens, double rel_tol) {
  constexpr double kSkewTol = 1e-10;
  IdentifiabilityReport r;
  r.tokens = tokens;
  r.tokens_ok = tokens >= 3;
  bool ok = r.tokens_ok;
  for (int i = 1; i <= vw.layers(); ++i) {
    const Matrix& m = vw.M[i - 1];
    IdentifiabilityReport::LayerCheck c;
    c.layer = i;
    c.rank = all_finite(m) ? numerical_rank(m, rel_tol).rank : 0;
    c.rank_ok = c.rank >= 2;
    const double scale = max_abs(m);
    c.skew_margin = scale > 0.0 ? max_abs(m + m.transpose()) / scale : 0.0;
    c.non_skew_ok = i == 1 || c.skew_margin > kSkewTol;
    ok = ok && c.rank_ok && c.non_skew_ok;
    r.layers.push_back(c);
  }
  r.passed = ok;
  return r;
}

}  // namespace neurodim

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neurodim/attention.hpp"

namespace neurodim {

/// Virtual weights (M_1..M_l, L): L_i = V_i ... V_1, M_1 = A_1,
/// M_i = L_{i-1}^T A_i L_{i-1}, L = L_l. They determine the deep network.
struct VirtualWeights {
  std::vector<Matrix> M;
  Matrix L;

  int layers() const { return static_cast<int>(M.size()); }
  Index input_dim() const { return L.cols(); }
  Index output_dim() const { return L.rows(); }
  void validate() const;
};

VirtualWeights compute_virtual_weights(const DeepWeights& w);

/// Recursive closed form; see d_matrices for the intermediate D_i.
TokenMatrix virtual_forward(const VirtualWeights& vw, const TokenMatrix& x);

/// D_0..D_l of the recursion (all symmetric t x t).
std::vector<Matrix> d_matrices(const VirtualWeights& vw, const TokenMatrix& x);

/// Softmax network evaluated directly from virtual weights.
TokenMatrix virtual_softmax_forward(const VirtualWeights& vw, const TokenMatrix& x,
                                    const SoftmaxConfig& cfg = {});

struct TriadicSelector {
  int layer = 1;  // 1-based
  bool transposed = false;

  bool operator==(const TriadicSelector&) const = default;
};

/// Factor selection for the token multi-index expansion. For j = 1..l_tilde-1
/// the factor is M_alpha (or its transpose), where alpha is the position of the
/// lowest non-zero base-3 digit of j and the digit decides transposition (2).
struct TriadicPlan {
  std::int64_t l_tilde = 1;
  std::vector<TriadicSelector> selector;

  static TriadicPlan for_layers(int layers);
};

inline constexpr std::uint64_t kDefaultTriadicBudget = 1'000'000;

/// Explicit sum over token multi-indices. Exponential in 3^l; an oracle only.
/// Throws ResourceError when t^l_tilde exceeds term_budget.
TokenMatrix triadic_forward(const VirtualWeights& vw, const TokenMatrix& x,
                            std::uint64_t term_budget = kDefaultTriadicBudget);

// --- symmetries ------------------------------------------------------------

/// M_i -> lambda_i M_i, L -> rho L with prod_i lambda_i^(3^(l-i)) = 1 / rho.
struct LayerScaling {
  std::vector<double> lambdas;
  double rho = 1.0;

  /// Solves rho from the constraint.
  static LayerScaling with_solved_rho(std::vector<double> lambdas);
  /// |rho * prod_i lambda_i^(3^(l-i)) - 1|
  double constraint_residual() const;
};

VirtualWeights apply_layer_scaling(const VirtualWeights& vw, const LayerScaling& s);

struct QKGauge {
  Matrix C;
};

struct QKPair {
  Matrix Q;
  Matrix K;
};

/// K' = C K, Q' = C^{-T} Q, so K'^T Q' = K^T Q.
QKPair apply_qk_gauge(const Matrix& Q, const Matrix& K, const QKGauge& g);

/// The unique C with K' = C K and Q' = C^{-T} Q. Requires rank(K^T Q) = a.
QKGauge recover_qk_gauge(const Matrix& Q, const Matrix& K, const Matrix& Q2, const Matrix& K2);

/// C_1..C_{l-1}; C_i acts on the output of layer i (side d_i).
struct InterlayerGauge {
  std::vector<Matrix> C;

  std::vector<double> condition_numbers() const;
};

/// V'_i = C_i V_i C_{i-1}^{-1}, A'_{i+1} = C_i^{-T} A_{i+1} C_i^{-1} (C_0 = C_l = I).
/// QKV weights are transformed as K' = K C^{-1}, Q' = Q C^{-1}.
DeepWeights apply_interlayer_gauge(const DeepWeights& w, const InterlayerGauge& g);

/// Recovers the gauge relating two weight sets with equal virtual weights on a
/// bottleneck architecture with rank(L) = delta.
InterlayerGauge recover_interlayer_gauge(const DeepWeights& w1, const DeepWeights& w2);

/// Skew-symmetric perturbation of M_i (i >= 2).
struct SkewPerturbation {
  int layer = 2;
  Matrix sigma;

  /// sigma = (B - B^T) / 2, which is exactly antisymmetric.
  static SkewPerturbation from_matrix(int layer, const Matrix& B);
  /// Random direction scaled to unit Frobenius norm.
  static SkewPerturbation random_unit(int layer, Index side, const StreamKey& key);
};

VirtualWeights apply_skew_perturbation(const VirtualWeights& vw, const SkewPerturbation& p);

struct IdentifiabilityReport {
  struct LayerCheck {
    int layer = 1;
    int rank = 0;
    bool rank_ok = false;
    double skew_margin = 0.0;  // ||M + M^T||_max / ||M||_max
    bool non_skew_ok = true;   // always true for layer 1
  };
  std::vector<LayerCheck> layers;
  int tokens = 0;
  bool tokens_ok = false;
  bool passed = false;

  /// Human-readable description of the first violated condition, or "".
  std::string first_failure() const;
};

IdentifiabilityReport check_identifiability_conditions(const VirtualWeights& vw, int tokens,
                                                       double rel_tol = kDefaultRankTol);

}  // namespace neurodim

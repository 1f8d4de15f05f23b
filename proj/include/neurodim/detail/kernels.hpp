#pragma once

// Scalar-generic forward kernels. Instantiated with double for evaluation and
// with Dual for forward-mode derivatives.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "neurodim/core.hpp"
#include "neurodim/dual.hpp"

namespace neurodim::detail {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
struct LayerMats {
  Mat<S> A;
  Mat<S> V;
};

inline void require(bool ok, const char* what) {
  if (!ok) throw DimensionError(what);
}

template <class S>
Mat<S> lightning_layer(const Mat<S>& A, const Mat<S>& V, const Mat<S>& X) {
  require(A.rows() == X.rows() && A.cols() == X.rows(), "attention matrix must be d x d");
  require(V.cols() == X.rows(), "value matrix must have d columns");
  // G(j, i) = x_j^T A x_i
  const Mat<S> G = X.transpose() * (A * X);
  return (V * X) * G;
}

/// Row-normalized score matrix W(i, j) = S(g_ij) / zeta_i with S(x) = exp(x / tau).
/// Each row is evaluated as exp((g_ij - max_k g_ik) / tau) / sum, which is the
/// same quotient but cannot overflow. A non-finite score is an OverflowError.
template <class S>
Mat<S> softmax_weights(const Mat<S>& G, double tau, int layer = 0) {
  const Eigen::Index t = G.rows();
  Mat<S> W(t, t);
  for (Eigen::Index i = 0; i < t; ++i) {
    double shift = value_of(G(i, 0));
    for (Eigen::Index j = 0; j < t; ++j) {
      const double g = value_of(G(i, j));
      if (!std::isfinite(g)) {
        std::string where = "score (" + std::to_string(i) + ", " + std::to_string(j) + ")";
        if (layer > 0) where += " of layer " + std::to_string(layer);
        throw OverflowError("softmax overflow at " + where +
                            ": x_i^T A x_j is not finite; rescale the inputs or use a larger tau");
      }
      shift = std::max(shift, g);
    }
    S zeta(0.0);
    for (Eigen::Index j = 0; j < t; ++j) {
      using std::exp;
      const S s = exp((G(i, j) - S(shift)) / S(tau));
      W(i, j) = s;
      zeta += s;
    }
    W.row(i) /= zeta;
  }
  return W;
}

template <class S>
Mat<S> softmax_layer(const Mat<S>& A, const Mat<S>& V, const Mat<S>& X, double tau,
                     int layer = 0) {
  require(A.rows() == X.rows() && A.cols() == X.rows(), "attention matrix must be d x d");
  require(V.cols() == X.rows(), "value matrix must have d columns");
  // G(i, j) = x_i^T A x_j
  const Mat<S> G = X.transpose() * (A * X);
  const Mat<S> W = softmax_weights<S>(G, tau, layer);
  return (V * X) * W.transpose();
}

template <class S>
Mat<S> deep_lightning(const std::vector<LayerMats<S>>& layers, Mat<S> X) {
  for (const auto& layer : layers) X = lightning_layer<S>(layer.A, layer.V, X);
  return X;
}

template <class S>
Mat<S> deep_softmax(const std::vector<LayerMats<S>>& layers, Mat<S> X, double tau) {
  int i = 0;
  for (const auto& layer : layers) X = softmax_layer<S>(layer.A, layer.V, X, tau, ++i);
  return X;
}

/// D_0 = I, D_i = D_{i-1} X^T M_i X D_{i-1} X^T M_i^T X D_{i-1}; returns D_0..D_{count}.
template <class S>
std::vector<Mat<S>> d_matrices(const std::vector<Mat<S>>& M, const Mat<S>& X, std::size_t count) {
  const Eigen::Index t = X.cols();
  std::vector<Mat<S>> D;
  D.reserve(count + 1);
  D.push_back(Mat<S>::Identity(t, t));
  for (std::size_t i = 1; i <= count; ++i) {
    const Mat<S> G = X.transpose() * M[i - 1] * X;
    const Mat<S>& P = D.back();
    D.push_back(P * G * P * G.transpose() * P);
  }
  return D;
}

/// L X prod_{i=1..l} D_{l-i} X^T M_{l-i+1} X.
template <class S>
Mat<S> virtual_lightning(const std::vector<Mat<S>>& M, const Mat<S>& L, const Mat<S>& X) {
  const std::size_t l = M.size();
  require(l >= 1, "virtual weights need at least one layer");
  require(L.cols() == X.rows(), "L must have d_0 columns");
  for (const auto& m : M) require(m.rows() == X.rows() && m.cols() == X.rows(), "M_i must be d_0 x d_0");
  const auto D = d_matrices<S>(M, X, l - 1);
  Mat<S> prod = Mat<S>::Identity(X.cols(), X.cols());
  for (std::size_t i = 1; i <= l; ++i) {
    prod = prod * D[l - i] * (X.transpose() * M[l - i] * X);
  }
  return L * X * prod;
}

/// Softmax network in virtual weights: the output of layer i is L_i X P_i with
/// P_0 = I and P_i = P_{i-1} W_i^T, where W_i normalizes S(P^T X^T M_i X P).
template <class S>
Mat<S> virtual_softmax(const std::vector<Mat<S>>& M, const Mat<S>& L, const Mat<S>& X,
                       double tau) {
  require(!M.empty(), "virtual weights need at least one layer");
  require(L.cols() == X.rows(), "L must have d_0 columns");
  Mat<S> P = Mat<S>::Identity(X.cols(), X.cols());
  int layer = 0;
  for (const auto& m : M) {
    require(m.rows() == X.rows() && m.cols() == X.rows(), "M_i must be d_0 x d_0");
    const Mat<S> XP = X * P;
    const Mat<S> G = XP.transpose() * m * XP;
    P = P * softmax_weights<S>(G, tau, ++layer).transpose();
  }
  return L * X * P;
}

}  // namespace neurodim::detail

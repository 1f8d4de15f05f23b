#pragma once

#include <variant>
#include <vector>

#include "neurodim/core.hpp"

namespace neurodim {

/// Raw query/key/value weights of one layer: Q, K are a x d, V is d' x d.
struct QKVLayer {
  Matrix Q;
  Matrix K;
  Matrix V;
};

/// One layer in attention-matrix form. A is read as the bilinear form x^T A y.
struct AttnLayer {
  Matrix A;
  Matrix V;

  /// A = K^T Q.
  static AttnLayer from_qkv(const QKVLayer& layer);
};

enum class Parametrization { qkv, attn };

std::string_view to_string(Parametrization p);

struct DeepWeights {
  Architecture arch;
  std::variant<std::vector<QKVLayer>, std::vector<AttnLayer>> layers;

  Parametrization parametrization() const;
  int layer_count() const;

  /// Checks layer count and that shapes chain through arch.dims / arch.attn_dims.
  /// Attention-form layers only need A to be d_{i-1} x d_{i-1}.
  void validate() const;

  /// Attention-matrix view of the weights (converts QKV layers).
  std::vector<AttnLayer> attn_layers() const;
  DeepWeights to_attn() const;
};

/// Standard-normal weights drawn from the "weights" stream of the given seed.
DeepWeights random_deep_weights(const Architecture& arch, Parametrization p, std::uint64_t seed,
                                std::uint64_t index = 0);

nlohmann::json to_json(const DeepWeights& w);
DeepWeights deep_weights_from_json(const nlohmann::json& j);

enum class ScoreMap { exp_over_tau };

/// Score map S(x) = exp(x / tau). S(0) = 1 and S is strictly increasing.
struct SoftmaxConfig {
  ScoreMap score_map = ScoreMap::exp_over_tau;
  double tau = 1.0;

  void validate() const;
  double apply(double x) const;
};

/// Raw scores S(x_i^T A x_j) and per-row normalizers zeta_i.
struct NormalizedScores {
  Matrix scores;
  Vector normalizers;

  /// Row-stochastic matrix scores(i, j) / zeta_i.
  Matrix normalized() const;
};

NormalizedScores normalized_scores(const AttnLayer& layer, const TokenMatrix& x,
                                   const SoftmaxConfig& cfg = {});

/// V X X^T A X; column i is sum_j (x_j^T A x_i) V x_j.
TokenMatrix lightning_forward(const AttnLayer& layer, const TokenMatrix& x);
TokenMatrix lightning_forward(const QKVLayer& layer, const TokenMatrix& x);

/// Composition of lightning layers, first layer applied first.
TokenMatrix deep_forward(const DeepWeights& w, const TokenMatrix& x);

/// Column i is (1 / zeta_i) sum_j S(x_i^T A x_j) V x_j.
/// Throws OverflowError naming (i, j) if a score leaves the double range.
TokenMatrix softmax_forward(const AttnLayer& layer, const TokenMatrix& x,
                            const SoftmaxConfig& cfg = {});
TokenMatrix softmax_deep_forward(const DeepWeights& w, const TokenMatrix& x,
                                 const SoftmaxConfig& cfg = {});

/// Dispatches to deep_forward or softmax_deep_forward.
TokenMatrix forward(const DeepWeights& w, const TokenMatrix& x, Model model,
                    const SoftmaxConfig& cfg = {});

}  // namespace neurodim

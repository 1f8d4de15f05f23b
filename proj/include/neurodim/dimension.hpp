#pragma once

#include <optional>
#include <string>
#include <vector>

#include "neurodim/attention.hpp"
#include "neurodim/reparam.hpp"

namespace neurodim {

// --- closed-form predictions ----------------------------------------------

enum class DimensionFormula { single_layer, deep_lightning, deep_softmax, determinantal, virtual_weights };

std::string_view to_string(DimensionFormula f);

struct DimensionTerm {
  std::string name;
  long long value = 0;
};

struct DimensionPrediction {
  long long value = 0;
  DimensionFormula formula = DimensionFormula::single_layer;
  std::vector<DimensionTerm> terms;
  // Violated hypotheses of the underlying result; the value is still reported.
  std::vector<std::string> warnings;

  long long sum_of_terms() const;
};

nlohmann::json to_json(const DimensionPrediction& p);

/// Lightning single layer: 2ad + dd' - a^2 - 1 if a <= d, else d^2 + dd' - 1.
DimensionPrediction predict_single_layer(int d, int d_out, int a);

/// Softmax single layer: the (A, V) parameter space itself, since the
/// parametrization is generically injective (no rescaling).
DimensionPrediction predict_single_layer_softmax(int d, int d_out, int a);

/// Rank <= a matrices of size d x d: alpha (2d - alpha), alpha = min(a, d).
DimensionPrediction predict_determinantal(int d, int a);

/// Deep lightning on a bottleneck architecture (l >= 2). Throws
/// UnsupportedArchitectureError otherwise.
DimensionPrediction predict_deep_lightning(const Architecture& arch);

/// Deep softmax on a bottleneck architecture: the lightning value plus l.
DimensionPrediction predict_deep_softmax(const Architecture& arch);

/// Free virtual weights (M_1..M_l, L): l d_0^2 + d_l d_0, minus l for lightning.
DimensionPrediction predict_virtual(const Architecture& arch, Model model);

/// Routes on layer count and arch.model (raw query/key parametrization).
DimensionPrediction predict(const Architecture& arch);

// --- parameter spaces and derivatives ---------------------------------------

enum class ParamSpace { raw_qkv, attn_v, virtual_weights };

std::string_view to_string(ParamSpace s);
ParamSpace param_space_from_string(std::string_view s);

/// Prediction matching the parameter space: raw_qkv keeps the rank constraint
/// on A, attn_v drops it (a_i -> d_{i-1}), virtual_weights uses predict_virtual.
DimensionPrediction predict_for(const Architecture& arch, ParamSpace space);

Index parameter_count(const Architecture& arch, ParamSpace space);

/// A point in parameter space. Flattening is layer-major, then matrix
/// (Q, K, V | A, V), then row-major entries; virtual weights list M_1..M_l then L.
struct ParamPoint {
  Architecture arch;
  ParamSpace space = ParamSpace::raw_qkv;
  Vector theta;
};

ParamPoint flatten(const DeepWeights& w);
ParamPoint flatten(const VirtualWeights& vw, const Architecture& arch);
DeepWeights unflatten_weights(const ParamPoint& p);
VirtualWeights unflatten_virtual(const ParamPoint& p);

/// Standard-normal parameters from the "weights" stream.
ParamPoint sample_parameters(const Architecture& arch, ParamSpace space, std::uint64_t seed);

TokenMatrix evaluate(const ParamPoint& p, const TokenMatrix& x, Model model, const SoftmaxConfig& cfg = {});

/// Exact derivative of the forward map along `direction` in parameter space,
/// by dual-number propagation.
Matrix directional_derivative(const ParamPoint& p, const Vector& direction, const TokenMatrix& x,
                              Model model, const SoftmaxConfig& cfg = {});
Matrix directional_derivative(const DeepWeights& w, const Vector& direction, const TokenMatrix& x,
                              Model model, const SoftmaxConfig& cfg = {});

/// Rows: input-major, then output row, then token ((n * d_l + r) * t + c).
struct JacobianMatrix {
  Matrix entries;
  ParamSpace space = ParamSpace::raw_qkv;
  Index inputs = 0;
  Index tokens = 0;
  Index output_dim = 0;
};

/// threads = 0 uses the hardware concurrency. Output does not depend on it.
JacobianMatrix assemble_jacobian(const ParamPoint& p, const std::vector<TokenMatrix>& inputs, Model model,
                                 const SoftmaxConfig& cfg = {}, unsigned threads = 0);
JacobianMatrix assemble_jacobian(const DeepWeights& w, const std::vector<TokenMatrix>& inputs, Model model,
                                 const SoftmaxConfig& cfg = {}, unsigned threads = 0);

// --- stochastic estimate ---------------------------------------------------

inline constexpr int kDefaultInputs = 250;
inline constexpr double kMinGapRatio = 100.0;

struct EstimateOptions {
  int n_inputs = kDefaultInputs;
  std::uint64_t seed = 0;
  double rel_tol = kDefaultRankTol;
  ParamSpace space = ParamSpace::raw_qkv;
  SoftmaxConfig softmax;
  unsigned threads = 0;
};

struct DimensionReport {
  Architecture arch;
  ParamSpace space = ParamSpace::raw_qkv;
  int n_inputs = 0;
  std::uint64_t seed = 0;
  double rel_tol = kDefaultRankTol;
  Index parameter_count = 0;
  std::optional<DimensionPrediction> prediction;
  std::string prediction_unavailable;  // reason when prediction is empty
  RankResult estimate;
  bool agree = false;
  bool ill_separated = false;  // gap_ratio < 100
  std::vector<std::string> warnings;
};

/// Jacobian rank of the parametrization restricted to n_inputs random inputs,
/// at a random parameter. The model is taken from arch.model.
DimensionReport estimate_dimension(const Architecture& arch, const EstimateOptions& opts = {});

std::vector<TokenMatrix> sample_inputs(const Architecture& arch, int count, std::uint64_t seed);

nlohmann::json to_json(const DimensionReport& r);

}  // namespace neurodim

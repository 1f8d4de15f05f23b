#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace neurodim {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Error hierarchy. Every failure the library reports derives from Error so the
// CLI can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class OverflowError : public Error {
 public:
  using Error::Error;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

class InvalidTransformError : public Error {
 public:
  using Error::Error;
};

class NoUniqueGaugeError : public Error {
 public:
  using Error::Error;
};

class UnsupportedArchitectureError : public Error {
 public:
  using Error::Error;
};

bool all_finite(const Matrix& m);

/// An input sequence: column i is token x_i, so the shape is d x t.
class TokenMatrix {
 public:
  TokenMatrix() = default;
  explicit TokenMatrix(Matrix entries);

  const Matrix& matrix() const { return x_; }
  Index dim() const { return x_.rows(); }
  Index tokens() const { return x_.cols(); }

  auto token(Index i) const { return x_.col(i); }

 private:
  Matrix x_;
};

enum class Model { lightning, softmax };

std::string_view to_string(Model m);
Model model_from_string(std::string_view s);

/// Layer count, embedding dims (d_0..d_l), query/key dims (a_1..a_l) and token count.
struct Architecture {
  int layers = 1;
  std::vector<int> dims;
  std::vector<int> attn_dims;
  int tokens = 1;
  Model model = Model::lightning;

  /// Throws InvalidInputError when the fields are inconsistent.
  void validate() const;

  int input_dim() const { return dims.front(); }
  int output_dim() const { return dims.back(); }
  // alpha_i = min(a_i, d_{i-1}); i is 1-based.
  int alpha(int i) const;
  // True when d_i = delta for all 0 < i < l and d_0, d_l >= delta. For a
  // single layer there is no hidden dimension and this returns false.
  bool is_bottleneck() const;
  // The common hidden dimension; only meaningful when is_bottleneck().
  int bottleneck_width() const;

  bool operator==(const Architecture&) const = default;
};

nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

struct RankResult {
  int rank = 0;
  std::vector<double> singular_values;
  double threshold_used = 0.0;
  // smallest retained / largest discarded singular value; +inf when nothing
  // non-zero was discarded.
  double gap_ratio = std::numeric_limits<double>::infinity();

  bool well_separated(double min_gap = 100.0) const { return gap_ratio >= min_gap; }
};

inline constexpr double kDefaultRankTol = 1e-7;

/// Counts singular values above rel_tol * sigma_max.
RankResult numerical_rank(const Matrix& m, double rel_tol = kDefaultRankTol);

// --- seeded sampling -------------------------------------------------------

/// Identifies an independent random stream. Samples are a pure function of the
/// key, so results do not depend on evaluation order or thread count.
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t index = 0;

  /// Child key for a sub-stream (e.g. one matrix of a layer).
  StreamKey child(std::uint64_t sub) const;
};

/// Named streams: "inputs", "weights", "directions" are the ones used by the
/// estimator, but any name works.
StreamKey stream_key(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

/// Counter-based 64-bit generator (SplitMix64 over a keyed counter). Satisfies
/// UniformRandomBitGenerator.
class CounterEngine {
 public:
  using result_type = std::uint64_t;

  explicit CounterEngine(const StreamKey& key);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()();

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

Matrix sample_gaussian_matrix(Index rows, Index cols, const StreamKey& key);

// --- JSON matrix encoding --------------------------------------------------

/// {"rows": r, "cols": c, "data": [[...], ...]}, row-major.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace neurodim

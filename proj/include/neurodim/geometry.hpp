#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "neurodim/attention.hpp"

namespace neurodim {

// Single-layer lightning attention as a point in the space of cubic polynomial
// maps R^{d x t} -> R^{d' x t}.
//
// Variables are the entries x_{p,j} of X, numbered p * t + j (row-major over
// embedding index p, token index j). A cubic monomial is a sorted variable
// triple (u <= v <= w); monomials are numbered in lexicographic order of the
// triple, which is descending graded-lex order of the exponent vectors
// (x_0^3 first). Slots are laid out output-row-major: slot = ((n * t) + i) *
// monomial_count + m for output entry (n, i).

struct CoefficientShape {
  int d = 1;
  int d_out = 1;
  int t = 1;

  bool operator==(const CoefficientShape&) const = default;
};

class CoefficientVector {
 public:
  CoefficientVector() = default;
  explicit CoefficientVector(CoefficientShape shape);

  const CoefficientShape& shape() const { return shape_; }
  int variable_count() const { return shape_.d * shape_.t; }
  std::size_t monomial_count() const { return monomials_; }
  std::size_t total_slots() const { return values_.size(); }

  /// Index of the monomial x_u x_v x_w (any argument order).
  std::size_t monomial_index(int u, int v, int w) const;
  /// Inverse of monomial_index.
  std::array<int, 3> monomial_variables(std::size_t m) const;
  /// Exponent vector (length d * t, sums to 3).
  std::vector<int> exponents(std::size_t m) const;

  double& at(int n, int i, std::size_t m);
  double at(int n, int i, std::size_t m) const;
  const std::vector<double>& values() const { return values_; }

  double max_abs() const;

  /// Evaluates the polynomial map at X (d x t), giving a d' x t matrix.
  Matrix evaluate(const Matrix& X) const;

 private:
  CoefficientShape shape_;
  std::size_t monomials_ = 0;
  std::vector<std::size_t> first_offset_;  // index of the first triple starting with u
  std::vector<double> values_;
};

/// C(n + 2, 3), the number of cubic monomials in n variables.
std::uint64_t cubic_monomial_count(std::uint64_t variables);

inline constexpr std::uint64_t kDefaultCoefficientBudget = 10'000'000;

/// Expands sum_j (x_j^T A x_i) V x_j into monomial coefficients.
/// Throws ResourceError if d' * t * C(dt + 2, 3) exceeds slot_budget.
CoefficientVector extract_coefficients(const AttnLayer& layer, int tokens,
                                       std::uint64_t slot_budget = kDefaultCoefficientBudget);

/// min over lambda of ||c1 - lambda c2||_max.
double coefficient_distance(const CoefficientVector& c1, const CoefficientVector& c2);

nlohmann::json to_json(const CoefficientVector& c);

/// A = k q^T, V = h v^T.
struct RankOneFactors {
  Vector k;
  Vector q;
  Vector v;
  Vector h;
};

enum class FiberCase { swap_partner, rescalings_only, zero_function };

std::string_view to_string(FiberCase c);

struct FiberPartner {
  FiberCase fiber_case = FiberCase::rescalings_only;
  std::optional<AttnLayer> partner;
  std::optional<RankOneFactors> factors;
  int min_tokens = 2;  // the fiber description holds for t >= 2
};

/// For rank(A) = rank(V) = 1, the second fiber element (v q^T, h k^T).
FiberPartner fiber_partner(const AttnLayer& layer, double rel_tol = kDefaultRankTol);

enum class PointKind { smooth, singular_interior, boundary, zero_function };

std::string_view to_string(PointKind k);

struct PointClass {
  PointKind klass = PointKind::smooth;
  int rank_A = 0;
  int rank_V = 0;
  std::optional<double> alignment;  // |cos(k, v)| when both ranks are 1

  bool singular() const { return rank_A * rank_V <= 1; }
};

inline constexpr double kBoundaryCosineTol = 1e-8;

PointClass classify_point(const AttnLayer& layer, double rel_tol = kDefaultRankTol);

nlohmann::json to_json(const PointClass& p);

}  // namespace neurodim

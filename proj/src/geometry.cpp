#include "neurodim/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace neurodim {

std::uint64_t cubic_monomial_count(std::uint64_t n) { return n * (n + 1) * (n + 2) / 6; }

CoefficientVector::CoefficientVector(CoefficientShape shape) : shape_(shape) {
  if (shape.d < 1 || shape.d_out < 1 || shape.t < 1) throw InvalidInputError("coefficient shape must be positive");
  const int n = variable_count();
  monomials_ = cubic_monomial_count(static_cast<std::uint64_t>(n));
  first_offset_.resize(static_cast<std::size_t>(n) + 1, 0);
  // triples starting with u: pairs (v <= w) drawn from the n - u values >= u
  for (int u = 0; u < n; ++u) {
    const std::size_t m = static_cast<std::size_t>(n - u);
    first_offset_[u + 1] = first_offset_[u] + m * (m + 1) / 2;
  }
  values_.assign(static_cast<std::size_t>(shape.d_out) * shape.t * monomials_, 0.0);
}

std::size_t CoefficientVector::monomial_index(int u, int v, int w) const {
  std::array<int, 3> s{u, v, w};
  std::sort(s.begin(), s.end());
  const auto n = static_cast<std::size_t>(variable_count());
  const auto a = static_cast<std::size_t>(s[0]);
  const auto b = static_cast<std::size_t>(s[1]);
  const auto c = static_cast<std::size_t>(s[2]);
  // pairs (b' <= w') with a <= b' < b: sum_{y=a}^{b-1} (n - y)
  const std::size_t second = (b - a) * n - (a + b - 1) * (b - a) / 2;
  return first_offset_[a] + second + (c - b);
}

std::array<int, 3> CoefficientVector::monomial_variables(std::size_t m) const {
  const int n = variable_count();
  int a = 0;
  while (first_offset_[a + 1] <= m) ++a;
  std::size_t r = m - first_offset_[a];
  int b = a;
  while (r >= static_cast<std::size_t>(n - b)) {
    r -= static_cast<std::size_t>(n - b);
    ++b;
  }
  return {a, b, b + static_cast<int>(r)};
}

std::vector<int> CoefficientVector::exponents(std::size_t m) const {
  std::vector<int> e(static_cast<std::size_t>(variable_count()), 0);
  for (int v : monomial_variables(m)) ++e[v];
  return e;
}

double& CoefficientVector::at(int n, int i, std::size_t m) {
  return values_[(static_cast<std::size_t>(n) * shape_.t + i) * monomials_ + m];
}

double CoefficientVector::at(int n, int i, std::size_t m) const {
  return values_[(static_cast<std::size_t>(n) * shape_.t + i) * monomials_ + m];
}

double CoefficientVector::max_abs() const {
  double out = 0.0;
  for (double v : values_) out = std::max(out, std::abs(v));
  return out;
}

Matrix CoefficientVector::evaluate(const Matrix& X) const {
  if (X.rows() != shape_.d || X.cols() != shape_.t) throw DimensionError("evaluation point has wrong shape");
  const int t = shape_.t;
  auto var = [&](int u) { return X(u / t, u % t); };
  std::vector<double> mono(monomials_);
  for (std::size_t m = 0; m < monomials_; ++m) {
    const auto [a, b, c] = monomial_variables(m);
    mono[m] = var(a) * var(b) * var(c);
  }
  Matrix out = Matrix::Zero(shape_.d_out, t);
  for (int n = 0; n < shape_.d_out; ++n) {
    for (int i = 0; i < t; ++i) {
      double s = 0.0;
      for (std::size_t m = 0; m < monomials_; ++m) s += at(n, i, m) * mono[m];
      out(n, i) = s;
    }
  }
  return out;
}

CoefficientVector extract_coefficients(const AttnLayer& layer, int tokens, std::uint64_t slot_budget) {
  const Index d = layer.A.rows();
  if (tokens < 1) throw InvalidInputError("token count must be >= 1");
  if (layer.A.cols() != d || layer.V.cols() != d) throw DimensionError("A must be d x d and V d' x d");
  const Index dp = layer.V.rows();
  const std::uint64_t slots =
      static_cast<std::uint64_t>(dp) * tokens * cubic_monomial_count(static_cast<std::uint64_t>(d) * tokens);
  if (slots > slot_budget) {
    throw ResourceError("coefficient space has " + std::to_string(slots) + " slots, above the budget of " +
                        std::to_string(slot_budget));
  }

  CoefficientVector c({static_cast<int>(d), static_cast<int>(dp), tokens});
  const int t = tokens;
  // output (n, i) = sum_j sum_{p,q,r} A[p][q] V[n][r] x_{p,j} x_{q,i} x_{r,j}
  for (int n = 0; n < dp; ++n) {
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < t; ++j) {
        for (int p = 0; p < d; ++p) {
          for (int q = 0; q < d; ++q) {
            const double a = layer.A(p, q);
            if (a == 0.0) continue;
            for (int r = 0; r < d; ++r) {
              const double contribution = a * layer.V(n, r);
              if (contribution == 0.0) continue;
              c.at(n, i, c.monomial_index(p * t + j, q * t + i, r * t + j)) += contribution;
            }
          }
        }
      }
    }
  }
  return c;
}

double coefficient_distance(const CoefficientVector& c1, const CoefficientVector& c2) {
  if (!(c1.shape() == c2.shape())) throw DimensionError("coefficient vectors have different shapes");
  const auto& a = c1.values();
  const auto& b = c2.values();
  auto dist = [&](double lambda) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - lambda * b[k]));
    return m;
  };
  double bb = 0.0;
  double ab = 0.0;
  double bmax = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    bb += b[k] * b[k];
    ab += a[k] * b[k];
    bmax = std::max(bmax, std::abs(b[k]));
  }
  if (bmax == 0.0) return dist(0.0);

  // The max-norm objective is convex in lambda. Start from the least-squares
  // scale and bracket the minimiser: any lambda farther than 2 f(ls) / |b|_max
  // from it is worse than ls itself.
  const double ls = ab / bb;
  const double f_ls = dist(ls);
  if (f_ls == 0.0) return 0.0;
  double lo = ls - 2.0 * f_ls / bmax;
  double hi = ls + 2.0 * f_ls / bmax;
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = dist(x1);
  double f2 = dist(x2);
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = dist(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = dist(x2);
    }
  }
  return std::min({f_ls, f1, f2});
}

nlohmann::json to_json(const CoefficientVector& c) {
  nlohmann::json coeffs = nlohmann::json::array();
  const auto& s = c.shape();
  for (int n = 0; n < s.d_out; ++n) {
    for (int i = 0; i < s.t; ++i) {
      for (std::size_t m = 0; m < c.monomial_count(); ++m) {
        const double v = c.at(n, i, m);
        if (v != 0.0) coeffs.push_back({{"out", {n, i}}, {"expo", c.exponents(m)}, {"val", v}});
      }
    }
  }
  return {{"arch", {s.d, s.d_out, s.t}}, {"total_slots", c.total_slots()}, {"coeffs", std::move(coeffs)}};
}

std::string_view to_string(FiberCase c) {
  switch (c) {
    case FiberCase::swap_partner: return "swap_partner";
    case FiberCase::rescalings_only: return "rescalings_only";
    case FiberCase::zero_function: return "zero_function";
  }
  return "unknown";
}

namespace {

struct RankOneSplit {
  int rank = 0;
  Vector left;   // sigma_1 * u_1
  Vector right;  // v_1
};

RankOneSplit split(const Matrix& m, double rel_tol) {
  RankOneSplit out;
  out.rank = numerical_rank(m, rel_tol).rank;
  if (out.rank == 1) {
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.left = svd.singularValues()(0) * svd.matrixU().col(0);
    out.right = svd.matrixV().col(0);
  }
  return out;
}

void check_layer(const AttnLayer& layer) {
  if (layer.A.rows() != layer.A.cols() || layer.V.cols() != layer.A.rows()) {
    throw DimensionError("A must be d x d and V d' x d");
  }
  if (!all_finite(layer.A) || !all_finite(layer.V)) throw InvalidInputError("layer has non-finite entries");
}

}  // namespace

FiberPartner fiber_partner(const AttnLayer& layer, double rel_tol) {
  check_layer(layer);
  FiberPartner out;
  const RankOneSplit a = split(layer.A, rel_tol);
  const RankOneSplit v = split(layer.V, rel_tol);
  if (a.rank == 0 || v.rank == 0) {
    out.fiber_case = FiberCase::zero_function;
    return out;
  }
  if (a.rank == 1 && v.rank == 1) {
    RankOneFactors f{a.left, a.right, v.right, v.left};
    out.partner = AttnLayer{f.v * f.q.transpose(), f.h * f.k.transpose()};
    out.factors = std::move(f);
    out.fiber_case = FiberCase::swap_partner;
    return out;
  }
  out.fiber_case = FiberCase::rescalings_only;
  return out;
}

std::string_view to_string(PointKind k) {
  switch (k) {
    case PointKind::smooth: return "smooth";
    case PointKind::singular_interior: return "singular_interior";
    case PointKind::boundary: return "boundary";
    case PointKind::zero_function: return "zero_function";
  }
  return "unknown";
}

PointClass classify_point(const AttnLayer& layer, double rel_tol) {
  check_layer(layer);
  PointClass out;
  const RankOneSplit a = split(layer.A, rel_tol);
  const RankOneSplit v = split(layer.V, rel_tol);
  out.rank_A = a.rank;
  out.rank_V = v.rank;
  if (a.rank == 0 || v.rank == 0) {
    out.klass = PointKind::zero_function;
  } else if (a.rank == 1 && v.rank == 1) {
    // k is the column factor of A, v the row factor of V.
    const double cosine = std::abs(a.left.dot(v.right)) / (a.left.norm() * v.right.norm());
    out.alignment = cosine;
    out.klass = cosine > 1.0 - kBoundaryCosineTol ? PointKind::boundary : PointKind::singular_interior;
  } else {
    out.klass = PointKind::smooth;
  }
  return out;
}

nlohmann::json to_json(const PointClass& p) {
  nlohmann::json j{{"klass", to_string(p.klass)},
                   {"rank_A", p.rank_A},
                   {"rank_V", p.rank_V},
                   {"singular", p.singular()}};
  j["alignment"] = p.alignment ? nlohmann::json(*p.alignment) : nlohmann::json(nullptr);
  return j;
}

}  // namespace neurodim
